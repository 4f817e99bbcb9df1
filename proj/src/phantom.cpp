#include "lndet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "lndet/rng.hpp"

namespace lndet::phantom {

using nlohmann::json;

void PhantomConfig::validate() const {
    if (dims[0] < 32 || dims[1] < 32)
        throw ConfigError("phantom: in-plane dims must be >= 32");
    if (dims[2] < 1) throw ConfigError("phantom: nz must be >= 1");
    for (double s : spacing_mm)
        if (!(s > 0.0)) throw ConfigError("phantom: spacing must be > 0");
    if (nodes_min < 1 || nodes_max < nodes_min)
        throw ConfigError("phantom: need 1 <= nodes_min <= nodes_max");
    if (sad_min_mm < 3.0) throw ConfigError("phantom: node SAD must be >= 3 mm");
    if (sad_max_mm < sad_min_mm) throw ConfigError("phantom: sad_max < sad_min");
    if (dwi_blur_sigma < 0.0 || domain_shift.extra_blur_sigma < 0.0)
        throw ConfigError("phantom: blur sigmas must be >= 0");
    if (background_texture < 0.0) throw ConfigError("phantom: background_texture must be >= 0");
    if (dwi_b_values.empty()) throw ConfigError("phantom: need at least one DWI b-value");
}

namespace {

struct Field3 {
    int nx, ny, nz;
    std::vector<double> v;
    Field3(int x, int y, int z) : nx(x), ny(y), nz(z), v(static_cast<std::size_t>(x) * y * z, 0.0) {}
    double& at(int x, int y, int z) {
        return v[static_cast<std::size_t>(x) + static_cast<std::size_t>(nx) * (y + static_cast<std::size_t>(ny) * z)];
    }
    double at(int x, int y, int z) const {
        return v[static_cast<std::size_t>(x) + static_cast<std::size_t>(nx) * (y + static_cast<std::size_t>(ny) * z)];
    }
};

void box_blur_axis(Field3& f, int radius, int axis) {
    if (radius <= 0) return;
    Field3 tmp = f;
    const int dims[3] = {f.nx, f.ny, f.nz};
    for (int z = 0; z < f.nz; ++z)
        for (int y = 0; y < f.ny; ++y)
            for (int x = 0; x < f.nx; ++x) {
                double acc = 0.0;
                int cnt = 0;
                for (int d = -radius; d <= radius; ++d) {
                    int c[3] = {x, y, z};
                    c[axis] += d;
                    if (c[axis] < 0 || c[axis] >= dims[axis]) continue;
                    acc += tmp.at(c[0], c[1], c[2]);
                    ++cnt;
                }
                f.at(x, y, z) = acc / cnt;
            }
}

// Correlated noise: white noise box-blurred per axis, then rescaled to unit RMS.
Field3 correlated_noise(int nx, int ny, int nz, Rng& rng) {
    Field3 f(nx, ny, nz);
    for (auto& x : f.v) x = rng.uniform(-1.0, 1.0);
    box_blur_axis(f, 2, 0);
    box_blur_axis(f, 2, 1);
    box_blur_axis(f, 1, 2);
    double ss = 0.0;
    for (double x : f.v) ss += x * x;
    const double rms = std::sqrt(ss / static_cast<double>(f.v.size()));
    if (rms > 0.0)
        for (auto& x : f.v) x /= rms;
    return f;
}

struct Blob {
    std::array<double, 3> center_mm;
    std::array<double, 3> semi_mm;
    double amp;
};

// Voxel center in world mm. Volumes share origin 0, so world == voxel frame.
inline double coord_mm(int i, double spacing) { return (i + 0.5) * spacing; }

double ellipsoid_r2(const std::array<double, 3>& c, const std::array<double, 3>& semi,
                    double x, double y, double z) {
    const double dx = (x - c[0]) / semi[0];
    const double dy = (y - c[1]) / semi[1];
    const double dz = (z - c[2]) / semi[2];
    return dx * dx + dy * dy + dz * dz;
}

// Tight pixel-space box of the node on slice z, or nullopt if the slice
// misses the ellipsoid. Scans voxel centers, box half-open in pixel coords.
std::optional<Box> node_slice_box(const NodeGeometry& n, const PhantomConfig& cfg, int z) {
    const double zmm = coord_mm(z, cfg.spacing_mm[2]);
    const double dz = (zmm - n.center_mm[2]) / n.semi_mm[2];
    const double rhs = 1.0 - dz * dz;
    if (rhs <= 0.0) return std::nullopt;
    const double ax = n.semi_mm[0] * std::sqrt(rhs);
    const double ay = n.semi_mm[1] * std::sqrt(rhs);
    int x_lo = cfg.dims[0], x_hi = -1, y_lo = cfg.dims[1], y_hi = -1;
    const int x_min = std::max(0, static_cast<int>((n.center_mm[0] - ax) / cfg.spacing_mm[0]) - 1);
    const int x_max = std::min(cfg.dims[0] - 1, static_cast<int>((n.center_mm[0] + ax) / cfg.spacing_mm[0]) + 1);
    const int y_min = std::max(0, static_cast<int>((n.center_mm[1] - ay) / cfg.spacing_mm[1]) - 1);
    const int y_max = std::min(cfg.dims[1] - 1, static_cast<int>((n.center_mm[1] + ay) / cfg.spacing_mm[1]) + 1);
    for (int y = y_min; y <= y_max; ++y) {
        const double ymm = coord_mm(y, cfg.spacing_mm[1]);
        const double ry = (ymm - n.center_mm[1]) / n.semi_mm[1];
        for (int x = x_min; x <= x_max; ++x) {
            const double xmm = coord_mm(x, cfg.spacing_mm[0]);
            const double rx = (xmm - n.center_mm[0]) / n.semi_mm[0];
            if (rx * rx + ry * ry + dz * dz <= 1.0) {
                x_lo = std::min(x_lo, x);
                x_hi = std::max(x_hi, x);
                y_lo = std::min(y_lo, y);
                y_hi = std::max(y_hi, y);
            }
        }
    }
    if (x_hi < x_lo) return std::nullopt;
    return Box{static_cast<double>(x_lo), static_cast<double>(y_lo),
               static_cast<double>(x_hi + 1), static_cast<double>(y_hi + 1)};
}

std::vector<NodeGeometry> place_nodes(const PhantomConfig& cfg, Rng& rng) {
    const int n_nodes = rng.uniform_int(cfg.nodes_min, cfg.nodes_max);
    std::vector<NodeGeometry> nodes;
    const double ext_x = cfg.dims[0] * cfg.spacing_mm[0];
    const double ext_y = cfg.dims[1] * cfg.spacing_mm[1];
    const double ext_z = cfg.dims[2] * cfg.spacing_mm[2];
    for (int i = 0; i < n_nodes; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            NodeGeometry n;
            n.sad_mm = rng.uniform(cfg.sad_min_mm, cfg.sad_max_mm);
            const double ratio = rng.uniform(1.0, 2.0);
            n.lad_mm = ratio * n.sad_mm;
            const bool lad_on_x = rng.bernoulli(0.5);
            n.semi_mm[0] = 0.5 * (lad_on_x ? n.lad_mm : n.sad_mm);
            n.semi_mm[1] = 0.5 * (lad_on_x ? n.sad_mm : n.lad_mm);
            n.semi_mm[2] = 0.5 * rng.uniform(n.sad_mm, n.lad_mm);
            const double mx = n.semi_mm[0] + 3.0 * cfg.spacing_mm[0];
            const double my = n.semi_mm[1] + 3.0 * cfg.spacing_mm[1];
            const double mz = n.semi_mm[2] + 0.5 * cfg.spacing_mm[2];
            if (2 * mx >= ext_x || 2 * my >= ext_y || 2 * mz >= ext_z) continue;
            n.center_mm[0] = rng.uniform(mx, ext_x - mx);
            n.center_mm[1] = rng.uniform(my, ext_y - my);
            n.center_mm[2] = rng.uniform(mz, ext_z - mz);
            bool clash = false;
            for (const auto& o : nodes) {
                double gap = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const double d = std::abs(n.center_mm[a] - o.center_mm[a]) -
                                     (n.semi_mm[a] + o.semi_mm[a] + 2.0);
                    gap = std::max(gap, d);
                }
                if (gap < 0.0) clash = true;
            }
            if (!clash) {
                nodes.push_back(n);
                placed = true;
            }
        }
        if (!placed)
            throw DataError("phantom: node placement failed after 200 attempts; "
                            "config too crowded");
    }
    return nodes;
}

// Node intensity profile: >= 1 everywhere inside, 1.5 at the core, so the
// additive contrast is at least the configured value at every node voxel.
inline double node_profile(double r2) { return 1.5 - 0.5 * r2; }

float* volume_ptr(Volume& v) { return v.voxels.data(); }

void blur_volume_inplane(Volume& v, double sigma) {
    if (sigma <= 0.0) return;
    for (int z = 0; z < v.nz(); ++z) {
        Image img = slice_view(v, z);
        img = gaussian_blur(img, sigma);
        const std::size_t base = static_cast<std::size_t>(z) * v.nx() * v.ny();
        std::copy(img.px.begin(), img.px.end(), volume_ptr(v) + base);
    }
}

}  // namespace

Study generate_study(const PhantomConfig& cfg, int index, Split split, bool apply_shift) {
    cfg.validate();
    Rng geom_rng = Rng::keyed(cfg.seed, 0x67656f6dULL + static_cast<std::uint64_t>(index) * 7919);
    Rng noise_rng = Rng::keyed(cfg.seed, 0x6e6f6973ULL + static_cast<std::uint64_t>(index) * 104729);

    const int nx = cfg.dims[0], ny = cfg.dims[1], nz = cfg.dims[2];
    const auto nodes = place_nodes(cfg, geom_rng);

    // Shared background: correlated texture plus a few soft organ blobs.
    Field3 texture = correlated_noise(nx, ny, nz, noise_rng);
    std::vector<Blob> organs;
    const int n_organs = 3;
    const double ext_x = nx * cfg.spacing_mm[0];
    const double ext_y = ny * cfg.spacing_mm[1];
    const double ext_z = nz * cfg.spacing_mm[2];
    for (int i = 0; i < n_organs; ++i) {
        Blob b;
        b.center_mm = {geom_rng.uniform(0.2 * ext_x, 0.8 * ext_x),
                       geom_rng.uniform(0.2 * ext_y, 0.8 * ext_y),
                       geom_rng.uniform(0.2 * ext_z, 0.8 * ext_z)};
        b.semi_mm = {geom_rng.uniform(0.15 * ext_x, 0.3 * ext_x),
                     geom_rng.uniform(0.15 * ext_y, 0.3 * ext_y),
                     geom_rng.uniform(0.3 * ext_z, 0.6 * ext_z)};
        b.amp = (geom_rng.bernoulli(0.5) ? 1.0 : -1.0) * 1.2 * cfg.background_texture;
        organs.push_back(b);
    }

    // Smooth multiplicative bias field.
    const double fx = geom_rng.uniform(0.5, 1.5), fy = geom_rng.uniform(0.5, 1.5);
    const double phx = geom_rng.uniform(0.0, 1.0), phy = geom_rng.uniform(0.0, 1.0);

    auto make_volume = [&](Modality mod, std::optional<double> b_value) {
        Volume v;
        v.dims = cfg.dims;
        v.spacing_mm = cfg.spacing_mm;
        v.origin_mm = {0.0, 0.0, 0.0};
        v.modality = mod;
        v.b_value = b_value;
        v.voxels.assign(v.voxel_count(), 0.0f);
        return v;
    };

    const double shift_scale = apply_shift ? cfg.domain_shift.node_contrast_scale : 1.0;
    const double max_b = *std::max_element(cfg.dwi_b_values.begin(), cfg.dwi_b_values.end());

    std::vector<Volume> series;
    series.push_back(make_volume(Modality::T2FS, std::nullopt));
    for (double b : cfg.dwi_b_values) series.push_back(make_volume(Modality::DWI, b));

    for (int z = 0; z < nz; ++z) {
        const double zmm = coord_mm(z, cfg.spacing_mm[2]);
        for (int y = 0; y < ny; ++y) {
            const double ymm = coord_mm(y, cfg.spacing_mm[1]);
            for (int x = 0; x < nx; ++x) {
                const double xmm = coord_mm(x, cfg.spacing_mm[0]);
                const double tex = cfg.background_texture * texture.at(x, y, z);
                double organ = 0.0;
                for (const auto& o : organs) {
                    const double r2 = ellipsoid_r2(o.center_mm, o.semi_mm, xmm, ymm, zmm);
                    if (r2 < 1.0) organ += o.amp * (1.0 - r2);
                }
                double node_add = 0.0;
                for (const auto& n : nodes) {
                    const double r2 = ellipsoid_r2(n.center_mm, n.semi_mm, xmm, ymm, zmm);
                    if (r2 <= 1.0) node_add += node_profile(r2);
                }
                const double t2 = 0.45 + tex + organ + cfg.t2_node_contrast * node_add;
                series[0].at(x, y, z) = static_cast<float>(std::max(0.0, t2));
                for (std::size_t si = 1; si < series.size(); ++si) {
                    const double b = *series[si].b_value;
                    const double conspicuity = (b / max_b) * shift_scale;
                    const double dwi = 0.12 + 0.4 * tex + 0.3 * organ +
                                       cfg.dwi_node_contrast * conspicuity * node_add;
                    series[si].at(x, y, z) = static_cast<float>(std::max(0.0, dwi));
                }
            }
        }
    }

    // DWI series are diffuse: in-plane blur, wider at test time under shift.
    const double blur = cfg.dwi_blur_sigma + (apply_shift ? cfg.domain_shift.extra_blur_sigma : 0.0);
    for (std::size_t si = 1; si < series.size(); ++si) {
        blur_volume_inplane(series[si], blur);
        if (apply_shift) {
            const double g = cfg.domain_shift.gain, o = cfg.domain_shift.offset;
            for (auto& v : series[si].voxels)
                v = static_cast<float>(std::max(0.0, g * static_cast<double>(v) + o));
        }
    }

    if (cfg.bias_field_amp > 0.0) {
        for (auto& vol : series) {
            for (int z = 0; z < nz; ++z)
                for (int y = 0; y < ny; ++y)
                    for (int x = 0; x < nx; ++x) {
                        const double g = std::sin(2.0 * M_PI * (fx * x / nx + phx)) *
                                         std::sin(2.0 * M_PI * (fy * y / ny + phy));
                        vol.at(x, y, z) =
                            static_cast<float>(vol.at(x, y, z) * (1.0 + cfg.bias_field_amp * g));
                    }
        }
    }

    Study s;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "study_%04d", index);
    s.study_id = buf;
    s.split = split;
    s.series = std::move(series);

    for (const auto& n : nodes) {
        // Collect per-slice boxes; key slice = maximal area (ties: lowest z).
        std::vector<std::pair<int, Box>> slices;
        for (int z = 0; z < nz; ++z)
            if (auto b = node_slice_box(n, cfg, z)) slices.emplace_back(z, *b);
        if (slices.empty()) continue;
        int key = slices.front().first;
        double best_area = slices.front().second.area();
        for (const auto& [z, b] : slices)
            if (b.area() > best_area) {
                best_area = b.area();
                key = z;
            }
        if (split == Split::test) {
            for (const auto& [z, b] : slices) {
                BoxAnnotation a;
                a.slice = z;
                a.box = b;
                a.sad_mm = n.sad_mm;
                a.lad_mm = n.lad_mm;
                a.is_3d_extent = true;
                s.annotations.push_back(a);
            }
        } else {
            BoxAnnotation a;
            a.slice = key;
            for (const auto& [z, b] : slices)
                if (z == key) a.box = b;
            a.sad_mm = n.sad_mm;
            a.lad_mm = n.lad_mm;
            a.is_3d_extent = false;
            s.annotations.push_back(a);
        }
    }

    s.validate();
    return s;
}

DatasetManifest generate_dataset(const PhantomConfig& cfg, int n_train, int n_val, int n_test,
                                 const std::filesystem::path& out_dir) {
    cfg.validate();
    if (n_train < 1 || n_val < 1 || n_test < 1)
        throw ConfigError("phantom: split counts must each be >= 1");

    std::filesystem::create_directories(out_dir);
    DatasetManifest manifest;
    const int total = n_train + n_val + n_test;
    for (int i = 0; i < total; ++i) {
        const Split split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
        const bool shifted = split == Split::test && !cfg.domain_shift.identity();
        Study s = generate_study(cfg, i, split, shifted);
        save_study(s, out_dir / s.study_id);
        manifest.studies.push_back({s.study_id, s.study_id, split});
    }

    json j;
    json cfg_j;
    cfg_j["dims"] = cfg.dims;
    cfg_j["spacing_mm"] = cfg.spacing_mm;
    cfg_j["nodes"] = {cfg.nodes_min, cfg.nodes_max};
    cfg_j["sad_mm"] = {cfg.sad_min_mm, cfg.sad_max_mm};
    cfg_j["background_texture"] = cfg.background_texture;
    cfg_j["t2_node_contrast"] = cfg.t2_node_contrast;
    cfg_j["dwi_node_contrast"] = cfg.dwi_node_contrast;
    cfg_j["dwi_blur_sigma"] = cfg.dwi_blur_sigma;
    cfg_j["bias_field_amp"] = cfg.bias_field_amp;
    cfg_j["dwi_b_values"] = cfg.dwi_b_values;
    cfg_j["domain_shift"] = {{"gain", cfg.domain_shift.gain},
                             {"offset", cfg.domain_shift.offset},
                             {"node_contrast_scale", cfg.domain_shift.node_contrast_scale},
                             {"extra_blur_sigma", cfg.domain_shift.extra_blur_sigma}};
    cfg_j["seed"] = cfg.seed;
    const std::string dump = cfg_j.dump();
    char hash_buf[32];
    std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(dump.data(), dump.size())));
    manifest.config_hash = hash_buf;

    j["config"] = cfg_j;
    j["config_hash"] = manifest.config_hash;
    json studies = json::array();
    for (const auto& e : manifest.studies)
        studies.push_back({{"study_id", e.study_id}, {"path", e.path}, {"split", to_string(e.split)}});
    j["studies"] = studies;

    std::ofstream out(out_dir / "manifest.json", std::ios::binary);
    if (!out) throw DataError((out_dir / "manifest.json").string() + ": cannot open for writing");
    out << j.dump(2) << "\n";
    return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir) {
    const auto path = dataset_dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw DataError(path.string() + ": missing or unreadable");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": malformed JSON (" + e.what() + ")");
    }
    DatasetManifest m;
    m.config_hash = j.value("config_hash", "");
    for (const auto& e : j.at("studies"))
        m.studies.push_back({e.at("study_id").get<std::string>(), e.at("path").get<std::string>(),
                             split_from_string(e.at("split").get<std::string>())});
    return m;
}

std::vector<Study> load_dataset(const std::filesystem::path& dataset_dir) {
    const auto manifest = load_manifest(dataset_dir);
    std::vector<Study> studies;
    studies.reserve(manifest.studies.size());
    for (const auto& e : manifest.studies) studies.push_back(load_study(dataset_dir / e.path));
    return studies;
}

}  // namespace lndet::phantom
