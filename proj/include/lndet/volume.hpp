#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lndet/error.hpp"
#include "lndet/geometry.hpp"
#include "lndet/image.hpp"

namespace lndet {

enum class Modality { T2FS, DWI };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

enum class Split { train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// 3D scalar voxel grid. Voxels are float32, x-fastest / z-slowest; the
/// on-disk format is a raw little-endian dump of exactly this buffer, so
/// load(save(v)) reproduces v bit for bit.
struct Volume {
    std::array<int, 3> dims{0, 0, 0};              // nx, ny, nz
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    std::array<double, 3> origin_mm{0.0, 0.0, 0.0};
    Modality modality = Modality::T2FS;
    std::optional<double> b_value;                 // DWI only, s/mm^2
    std::vector<float> voxels;

    int nx() const { return dims[0]; }
    int ny() const { return dims[1]; }
    int nz() const { return dims[2]; }
    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) +
                                                    static_cast<std::size_t>(dims[1]) * z);
    }
    float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
    float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }

    /// Throws DataError naming the offending field on any invariant violation.
    void validate() const;
};

/// Per-slice 2D box annotation in pixel coordinates (half-open).
struct BoxAnnotation {
    int slice = 0;
    Box box;
    std::optional<double> sad_mm;
    std::optional<double> lad_mm;
    bool is_3d_extent = false;  // test-set full-extent labels
};

struct Detection {
    int slice = 0;
    Box box;
    double score = 0.0;
    std::string source_id;
};

/// Co-registered series of one exam plus annotations.
struct Study {
    std::string study_id;
    Split split = Split::train;
    std::vector<Volume> series;
    std::vector<BoxAnnotation> annotations;

    void validate() const;

    const Volume& t2fs() const;
    /// Highest-b-value DWI series; throws DataError when the study has none.
    const Volume& dwi_highest_b() const;
    bool has_dwi() const;
    int nx() const { return series.at(0).nx(); }
    int ny() const { return series.at(0).ny(); }
    int nz() const { return series.at(0).nz(); }
};

struct DetectionsFile {
    std::string study_id;
    std::string source_id;
    std::vector<Detection> items;
};

// --- operations -------------------------------------------------------------

/// Copy of plane z as an nx x ny image; throws DataError on out-of-range z.
Image slice_view(const Volume& v, int z);

// Volume directory format: header.json + voxels.f32 (raw little-endian float32).
Volume load_volume(const std::filesystem::path& dir);
void save_volume(const Volume& v, const std::filesystem::path& dir);

// Study directory format: study.json naming series subdirectories.
Study load_study(const std::filesystem::path& dir);
void save_study(const Study& s, const std::filesystem::path& dir);

DetectionsFile load_detections(const std::filesystem::path& file);
void save_detections(const DetectionsFile& d, const std::filesystem::path& file);

}  // namespace lndet
