#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lndet/rng.hpp"
#include "lndet/volume.hpp"

namespace lndet {

/// Slice-combination modes. Channel modality patterns (channels carry slices
/// k-1, k, k+1): E_T = (T,T,T), E_D = (D,D,D), E_12 = (D,T,D), E_21 = (T,D,T).
/// The minority modality sits on the annotated key slice, symmetric around it.
enum class CompositionMode { E_T, E_D, E_12, E_21 };

std::string to_string(CompositionMode m);
CompositionMode composition_mode_from_string(const std::string& s);
bool mode_uses_both_domains(CompositionMode m);

enum class ChannelDomain { T2FS, DWI, Mixed };

std::string to_string(ChannelDomain d);

/// Three-channel 2D sample built from three consecutive slices.
struct Sample25D {
    std::array<Image, 3> channels;
    int key_slice = 0;
    std::array<ChannelDomain, 3> channel_domains{};
    std::vector<Box> boxes;  // annotations on the key slice
    std::string study_id;
    std::optional<double> lambda_used;

    int nx() const { return channels[0].w; }
    int ny() const { return channels[0].h; }
};

struct ILLConfig {
    bool enabled = false;
    double beta_alpha = 2.0;
    double beta_beta = 2.0;
    double apply_prob = 0.5;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(beta_alpha > 0.0 && beta_beta > 0.0))
            throw ConfigError("ill: beta parameters must be > 0");
        if (apply_prob < 0.0 || apply_prob > 1.0)
            throw ConfigError("ill: apply_prob must be in [0,1]");
    }
};

struct ClassicAugConfig {
    double flip_prob = 0.5;
    bool crop = true;
    double crop_scale_min = 0.85;
    int shift_px_max = 32;
    double rotate_deg_max = 10.0;
    std::array<double, 2> contrast_range{0.9, 1.1};
    std::array<double, 2> gamma_range{0.9, 1.1};
    std::uint64_t seed = 0;

    void validate() const {
        if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("aug: flip_prob outside [0,1]");
        if (shift_px_max < 0 || shift_px_max > 32)
            throw ConfigError("aug: shift_px_max outside [0,32]");
        if (rotate_deg_max < 0.0 || rotate_deg_max > 10.0)
            throw ConfigError("aug: rotate_deg_max outside [0,10]");
        if (!(crop_scale_min > 0.0 && crop_scale_min <= 1.0))
            throw ConfigError("aug: crop_scale_min outside (0,1]");
        if (contrast_range[0] > contrast_range[1] || gamma_range[0] > gamma_range[1])
            throw ConfigError("aug: jitter range inverted");
        if (gamma_range[0] <= 0.0) throw ConfigError("aug: gamma must be > 0");
    }
};

/// Compose the three-channel sample for key slice k. Edge slices replicate
/// (k-1 -> k at k=0, k+1 -> k at k=nz-1); boxes are the annotations on k.
Sample25D compose_25d(const Study& s, int key_slice, CompositionMode mode);

/// Interpolation ratio for ILL, Beta(alpha, beta); deterministic per rng state.
double sample_lambda(const ILLConfig& cfg, Rng& rng);

/// Elementwise mix of two same-label samples from different domain patterns:
/// out = lambda * a + (1 - lambda) * b. Labels are never interpolated; the
/// box lists must match exactly (co-registration) or a DataError is thrown.
Sample25D ill_mix(const Sample25D& a, const Sample25D& b, double lambda);

/// Full training-sample construction: compose, optionally ILL-mix with the
/// domain-swapped counterpart, then classic augmentations with boxes moved
/// consistently. rng_ill/rng_aug are per-sample streams keyed on draw index.
Sample25D make_training_sample(const Study& s, int key_slice, CompositionMode mode,
                               const ILLConfig& ill, const ClassicAugConfig& aug,
                               Rng& rng_ill, Rng& rng_aug);

/// Key slices to sample: train/val = slices bearing annotations; test = all
/// slices intersecting a 3D-extent annotation plus every test_stride-th
/// remaining slice (for FP accounting).
std::vector<int> enumerate_keyslices(const Study& s, int test_stride = 1);

/// Visual-audit dump: three grayscale PNGs plus a JSON sidecar with boxes.
void dump_sample(const Sample25D& sample, const std::filesystem::path& dir,
                 const std::string& prefix);

}  // namespace lndet
