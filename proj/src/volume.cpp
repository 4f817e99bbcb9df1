#include "lndet/volume.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "voxels.f32 is little-endian; big-endian hosts are not supported");

namespace lndet {

using nlohmann::json;

std::string to_string(Modality m) { return m == Modality::T2FS ? "T2FS" : "DWI"; }

Modality modality_from_string(const std::string& s) {
    if (s == "T2FS") return Modality::T2FS;
    if (s == "DWI") return Modality::DWI;
    throw DataError("modality: expected \"T2FS\" or \"DWI\", got \"" + s + "\"");
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw DataError("split: expected train/val/test, got \"" + s + "\"");
}

void Volume::validate() const {
    for (int i = 0; i < 3; ++i) {
        if (dims[i] < 1)
            throw DataError("dims: axis " + std::to_string(i) + " must be >= 1, got " +
                            std::to_string(dims[i]));
        if (!(spacing_mm[i] > 0.0))
            throw DataError("spacing_mm: axis " + std::to_string(i) + " must be > 0");
    }
    if (voxels.size() != voxel_count())
        throw DataError("voxels: buffer holds " + std::to_string(voxels.size()) +
                        " values, header dims imply " + std::to_string(voxel_count()));
    if (modality == Modality::T2FS && b_value.has_value())
        throw DataError("b_value: only valid for DWI series");
    for (std::size_t i = 0; i < voxels.size(); ++i)
        if (!std::isfinite(voxels[i]))
            throw DataError("voxels: non-finite intensity at linear index " + std::to_string(i));
}

void Study::validate() const {
    if (series.empty()) throw DataError("series: study \"" + study_id + "\" has no volumes");
    bool has_t2 = false;
    const Volume& ref = series.front();
    for (std::size_t i = 0; i < series.size(); ++i) {
        const Volume& v = series[i];
        v.validate();
        if (v.modality == Modality::T2FS) has_t2 = true;
        if (v.dims != ref.dims)
            throw DataError("series[" + std::to_string(i) + "]: dims mismatch, co-registration violated");
        if (v.spacing_mm != ref.spacing_mm)
            throw DataError("series[" + std::to_string(i) + "]: spacing_mm mismatch, co-registration violated");
        if (v.origin_mm != ref.origin_mm)
            throw DataError("series[" + std::to_string(i) + "]: origin_mm mismatch, co-registration violated");
    }
    if (!has_t2) throw DataError("series: study \"" + study_id + "\" has no T2FS volume");
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        const BoxAnnotation& a = annotations[i];
        const std::string where = "annotations[" + std::to_string(i) + "]";
        if (a.slice < 0 || a.slice >= ref.nz())
            throw DataError(where + ".slice: " + std::to_string(a.slice) + " outside [0," +
                            std::to_string(ref.nz()) + ")");
        if (!(a.box.x0 < a.box.x1 && a.box.y0 < a.box.y1))
            throw DataError(where + ".box: degenerate or unordered");
        if (a.box.x0 < 0 || a.box.y0 < 0 || a.box.x1 > ref.nx() || a.box.y1 > ref.ny())
            throw DataError(where + ".box: outside image bounds");
        if (a.sad_mm && *a.sad_mm < 3.0)
            throw DataError(where + ".sad_mm: " + std::to_string(*a.sad_mm) +
                            " below the 3 mm inclusion floor");
    }
}

const Volume& Study::t2fs() const {
    for (const auto& v : series)
        if (v.modality == Modality::T2FS) return v;
    throw DataError("study \"" + study_id + "\" has no T2FS series");
}

bool Study::has_dwi() const {
    for (const auto& v : series)
        if (v.modality == Modality::DWI) return true;
    return false;
}

const Volume& Study::dwi_highest_b() const {
    const Volume* best = nullptr;
    for (const auto& v : series) {
        if (v.modality != Modality::DWI) continue;
        const double b = v.b_value.value_or(0.0);
        if (!best || b > best->b_value.value_or(0.0)) best = &v;
    }
    if (!best) throw DataError("study \"" + study_id + "\" has no DWI series");
    return *best;
}

Image slice_view(const Volume& v, int z) {
    if (z < 0 || z >= v.nz())
        throw DataError("slice_view: z=" + std::to_string(z) + " outside [0," +
                        std::to_string(v.nz()) + ")");
    Image img(v.nx(), v.ny());
    const std::size_t base = static_cast<std::size_t>(z) * v.nx() * v.ny();
    std::copy(v.voxels.begin() + base, v.voxels.begin() + base + img.px.size(), img.px.begin());
    return img;
}

namespace {

json read_json_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw DataError(file.string() + ": missing or unreadable");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError(file.string() + ": malformed JSON (" + e.what() + ")");
    }
    return j;
}

void write_text_file(const std::filesystem::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError(file.string() + ": cannot open for writing");
    out << text;
    if (!out) throw DataError(file.string() + ": write failed");
}

template <typename T>
T require_field(const json& j, const std::string& key, const std::string& file) {
    if (!j.contains(key)) throw DataError(file + ": missing field \"" + key + "\"");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw DataError(file + ": field \"" + key + "\" has the wrong type");
    }
}

json box_to_json(const Box& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

Box box_from_json(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 4) throw DataError(where + ": box must be [x0,y0,x1,y1]");
    return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

Volume load_volume(const std::filesystem::path& dir) {
    const auto header_path = dir / "header.json";
    const json h = read_json_file(header_path);
    const std::string hp = header_path.string();

    Volume v;
    const auto dims = require_field<std::vector<int>>(h, "dims", hp);
    const auto spacing = require_field<std::vector<double>>(h, "spacing_mm", hp);
    const auto origin = require_field<std::vector<double>>(h, "origin_mm", hp);
    if (dims.size() != 3) throw DataError(hp + ": dims must have 3 entries");
    if (spacing.size() != 3) throw DataError(hp + ": spacing_mm must have 3 entries");
    if (origin.size() != 3) throw DataError(hp + ": origin_mm must have 3 entries");
    std::copy(dims.begin(), dims.end(), v.dims.begin());
    std::copy(spacing.begin(), spacing.end(), v.spacing_mm.begin());
    std::copy(origin.begin(), origin.end(), v.origin_mm.begin());
    v.modality = modality_from_string(require_field<std::string>(h, "modality", hp));
    if (!h.contains("b_value")) throw DataError(hp + ": missing field \"b_value\"");
    if (!h.at("b_value").is_null()) v.b_value = h.at("b_value").get<double>();

    for (int i = 0; i < 3; ++i) {
        if (v.dims[i] < 1) throw DataError(hp + ": dims[" + std::to_string(i) + "] must be >= 1");
        if (!(v.spacing_mm[i] > 0.0))
            throw DataError(hp + ": spacing_mm[" + std::to_string(i) + "] must be > 0");
    }

    const auto voxel_path = dir / "voxels.f32";
    std::ifstream in(voxel_path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError(voxel_path.string() + ": missing or unreadable");
    const std::streamoff bytes = in.tellg();
    const std::size_t expected = v.voxel_count() * sizeof(float);
    if (static_cast<std::size_t>(bytes) != expected)
        throw DataError(voxel_path.string() + ": has " + std::to_string(bytes) +
                        " bytes, header dims imply " + std::to_string(expected));
    v.voxels.resize(v.voxel_count());
    in.seekg(0);
    in.read(reinterpret_cast<char*>(v.voxels.data()), static_cast<std::streamsize>(expected));
    if (!in) throw DataError(voxel_path.string() + ": short read");

    v.validate();
    return v;
}

void save_volume(const Volume& v, const std::filesystem::path& dir) {
    v.validate();
    std::filesystem::create_directories(dir);
    json h;
    h["dims"] = v.dims;
    h["spacing_mm"] = v.spacing_mm;
    h["origin_mm"] = v.origin_mm;
    h["modality"] = to_string(v.modality);
    h["b_value"] = v.b_value.has_value() ? json(*v.b_value) : json(nullptr);
    write_text_file(dir / "header.json", h.dump(2) + "\n");

    const auto voxel_path = dir / "voxels.f32";
    std::ofstream out(voxel_path, std::ios::binary);
    if (!out) throw DataError(voxel_path.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(v.voxels.data()),
              static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
    if (!out) throw DataError(voxel_path.string() + ": write failed");
}

Study load_study(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "study.json";
    const json j = read_json_file(manifest_path);
    const std::string mp = manifest_path.string();

    Study s;
    s.study_id = require_field<std::string>(j, "study_id", mp);
    s.split = split_from_string(require_field<std::string>(j, "split", mp));
    const auto series_paths = require_field<std::vector<std::string>>(j, "series", mp);
    for (const auto& rel : series_paths) s.series.push_back(load_volume(dir / rel));

    if (!j.contains("annotations")) throw DataError(mp + ": missing field \"annotations\"");
    for (std::size_t i = 0; i < j.at("annotations").size(); ++i) {
        const json& a = j.at("annotations")[i];
        const std::string where = mp + ": annotations[" + std::to_string(i) + "]";
        BoxAnnotation ann;
        ann.slice = require_field<int>(a, "slice", where);
        ann.box = box_from_json(a.contains("box") ? a.at("box") : json(), where);
        if (a.contains("sad_mm") && !a.at("sad_mm").is_null()) ann.sad_mm = a.at("sad_mm").get<double>();
        if (a.contains("lad_mm") && !a.at("lad_mm").is_null()) ann.lad_mm = a.at("lad_mm").get<double>();
        if (a.contains("is_3d_extent")) ann.is_3d_extent = a.at("is_3d_extent").get<bool>();
        s.annotations.push_back(ann);
    }
    s.validate();
    return s;
}

void save_study(const Study& s, const std::filesystem::path& dir) {
    s.validate();
    std::filesystem::create_directories(dir);
    json j;
    j["study_id"] = s.study_id;
    j["split"] = to_string(s.split);
    std::vector<std::string> rel_paths;
    int dwi_count = 0;
    for (const auto& v : s.series) {
        std::string name;
        if (v.modality == Modality::T2FS) {
            name = "t2fs";
        } else {
            name = "dwi_b" + std::to_string(static_cast<long long>(v.b_value.value_or(0.0)));
            if (++dwi_count > 1 && std::filesystem::exists(dir / name))
                name += "_" + std::to_string(dwi_count);
        }
        save_volume(v, dir / name);
        rel_paths.push_back(name);
    }
    j["series"] = rel_paths;
    json anns = json::array();
    for (const auto& a : s.annotations) {
        json e;
        e["slice"] = a.slice;
        e["box"] = box_to_json(a.box);
        e["sad_mm"] = a.sad_mm.has_value() ? json(*a.sad_mm) : json(nullptr);
        e["lad_mm"] = a.lad_mm.has_value() ? json(*a.lad_mm) : json(nullptr);
        e["is_3d_extent"] = a.is_3d_extent;
        anns.push_back(e);
    }
    j["annotations"] = anns;
    write_text_file(dir / "study.json", j.dump(2) + "\n");
}

DetectionsFile load_detections(const std::filesystem::path& file) {
    const json j = read_json_file(file);
    const std::string fp = file.string();
    DetectionsFile d;
    d.study_id = require_field<std::string>(j, "study_id", fp);
    d.source_id = require_field<std::string>(j, "source_id", fp);
    if (!j.contains("items")) throw DataError(fp + ": missing field \"items\"");
    for (std::size_t i = 0; i < j.at("items").size(); ++i) {
        const json& e = j.at("items")[i];
        const std::string where = fp + ": items[" + std::to_string(i) + "]";
        Detection det;
        det.slice = require_field<int>(e, "slice", where);
        det.box = box_from_json(e.contains("box") ? e.at("box") : json(), where);
        det.score = require_field<double>(e, "score", where);
        if (det.score < 0.0 || det.score > 1.0)
            throw DataError(where + ".score: " + std::to_string(det.score) + " outside [0,1]");
        if (!det.box.well_ordered()) throw DataError(where + ".box: unordered coordinates");
        det.source_id = d.source_id;
        d.items.push_back(det);
    }
    return d;
}

void save_detections(const DetectionsFile& d, const std::filesystem::path& file) {
    json j;
    j["study_id"] = d.study_id;
    j["source_id"] = d.source_id;
    json items = json::array();
    for (const auto& det : d.items) {
        json e;
        e["slice"] = det.slice;
        e["box"] = box_to_json(det.box);
        e["score"] = det.score;
        items.push_back(e);
    }
    j["items"] = items;
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    write_text_file(file, j.dump(2) + "\n");
}

}  // namespace lndet
