#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "lndet/volume.hpp"

namespace lndet::phantom {

/// Test-time perturbation of DWI series. Plain offset/gain is a monotone
/// intensity map and is cancelled by the rank-based preprocessing chain, so
/// the structural knobs (node contrast scale, extra blur) carry the actual
/// train/test appearance gap.
struct DomainShift {
    double gain = 1.0;
    double offset = 0.0;
    double node_contrast_scale = 1.0;  // <1 makes test-time nodes less conspicuous in DWI
    double extra_blur_sigma = 0.0;     // additional in-plane PSF width at test time

    bool identity() const {
        return gain == 1.0 && offset == 0.0 && node_contrast_scale == 1.0 &&
               extra_blur_sigma == 0.0;
    }
};

struct PhantomConfig {
    std::array<int, 3> dims{96, 96, 16};
    std::array<double, 3> spacing_mm{1.0, 1.0, 3.0};
    int nodes_min = 1;
    int nodes_max = 4;
    double sad_min_mm = 4.0;
    double sad_max_mm = 10.0;
    double background_texture = 0.08;   // correlated-noise amplitude; organ blobs scale with it
    double t2_node_contrast = 0.35;
    double dwi_node_contrast = 0.5;
    double dwi_blur_sigma = 1.2;
    double bias_field_amp = 0.1;        // smooth multiplicative field, 0 disables
    std::vector<double> dwi_b_values{800.0};
    DomainShift domain_shift{1.1, 0.05, 0.55, 0.8};
    std::uint64_t seed = 1234;

    void validate() const;
};

/// One ellipsoidal node: center and semi-axes in mm (world coordinates).
struct NodeGeometry {
    std::array<double, 3> center_mm;
    std::array<double, 3> semi_mm;  // x, y, z
    double sad_mm = 0.0;
    double lad_mm = 0.0;
};

/// Render one study. The same node/organ geometry is rendered as a sharp
/// T2FS-like series and blurred, background-suppressed DWI-like series.
/// Annotations are tight per-slice boxes: key (maximal-area) slice only for
/// train/val, full extent flagged is_3d_extent for test. Deterministic per
/// (cfg.seed, index); apply_shift selects the test-time DWI perturbation.
Study generate_study(const PhantomConfig& cfg, int index, Split split, bool apply_shift);

struct DatasetEntry {
    std::string study_id;
    std::string path;  // relative to the dataset root
    Split split;
};

struct DatasetManifest {
    std::vector<DatasetEntry> studies;
    std::string config_hash;
};

/// Generate n_train+n_val+n_test studies under out_dir and write manifest.json.
/// Test studies receive cfg.domain_shift on their DWI series; train/val do not.
DatasetManifest generate_dataset(const PhantomConfig& cfg, int n_train, int n_val, int n_test,
                                 const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir);
std::vector<Study> load_dataset(const std::filesystem::path& dataset_dir);

}  // namespace lndet::phantom
