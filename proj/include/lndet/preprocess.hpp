#pragma once

#include "lndet/volume.hpp"

namespace lndet {

/// Intensity standardization applied per volume before sampling. The chain is
/// percentile clamp + rescale to [0,1], then optional histogram equalization.
/// Bias-field correction is an upstream concern; requesting it only logs a
/// notice (see preprocess_study).
struct PreprocessConfig {
    double p_low = 1.0;
    double p_high = 99.0;
    int hist_eq_bins = 256;
    bool enable_hist_eq = true;
    bool request_n4 = false;  // skipped with a notice; inputs are assumed bias-corrected

    void validate() const {
        if (!(0.0 <= p_low && p_low < p_high && p_high <= 100.0))
            throw ConfigError("preprocess: need 0 <= p_low < p_high <= 100");
        if (hist_eq_bins < 2) throw ConfigError("preprocess: hist_eq_bins must be >= 2");
    }
};

/// Percentile of a sample by linear interpolation on the sorted multiset
/// (inclusive method): rank = p/100 * (n-1).
double percentile_sorted(const std::vector<float>& sorted_values, double p);

/// Clamp to [p_low, p_high] percentiles then rescale to [0,1]. A constant
/// volume (degenerate percentile range) maps to all zeros.
Volume percentile_normalize(const Volume& v, const PreprocessConfig& cfg);

/// Remap intensities by the empirical CDF over hist_eq_bins bins. Requires
/// inputs in [0,1]; output stays in [0,1] and preserves rank order.
Volume histogram_equalize(const Volume& v, const PreprocessConfig& cfg);

/// Normalize then (optionally) equalize every series; annotations untouched.
Study preprocess_study(const Study& s, const PreprocessConfig& cfg);

}  // namespace lndet
