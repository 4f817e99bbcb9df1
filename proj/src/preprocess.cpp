#include "lndet/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace lndet {

double percentile_sorted(const std::vector<float>& sorted_values, double p) {
    if (sorted_values.empty()) throw DataError("percentile: empty sample");
    const std::size_t n = sorted_values.size();
    if (n == 1) return sorted_values[0];
    const double rank = p / 100.0 * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, n - 1);
    const double frac = rank - static_cast<double>(lo);
    return static_cast<double>(sorted_values[lo]) * (1.0 - frac) +
           static_cast<double>(sorted_values[hi]) * frac;
}

Volume percentile_normalize(const Volume& v, const PreprocessConfig& cfg) {
    cfg.validate();
    std::vector<float> sorted = v.voxels;
    std::sort(sorted.begin(), sorted.end());
    const double lo = percentile_sorted(sorted, cfg.p_low);
    const double hi = percentile_sorted(sorted, cfg.p_high);

    Volume out = v;
    if (!(hi > lo)) {
        std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
        return out;
    }
    const double scale = 1.0 / (hi - lo);
    for (auto& x : out.voxels) {
        const double c = std::clamp(static_cast<double>(x), lo, hi);
        x = static_cast<float>((c - lo) * scale);
    }
    return out;
}

Volume histogram_equalize(const Volume& v, const PreprocessConfig& cfg) {
    cfg.validate();
    const int bins = cfg.hist_eq_bins;
    for (const float x : v.voxels)
        if (x < 0.0f || x > 1.0f)
            throw DataError("histogram_equalize: intensity " + std::to_string(x) +
                            " outside [0,1]; normalize first");

    std::vector<std::size_t> hist(bins, 0);
    auto bin_of = [bins](float x) {
        int b = static_cast<int>(static_cast<double>(x) * bins);
        return std::min(b, bins - 1);
    };
    for (const float x : v.voxels) ++hist[bin_of(x)];

    std::vector<double> cdf(bins, 0.0);
    const double inv_n = 1.0 / static_cast<double>(v.voxels.size());
    std::size_t cum = 0;
    for (int b = 0; b < bins; ++b) {
        cum += hist[b];
        cdf[b] = static_cast<double>(cum) * inv_n;
    }

    Volume out = v;
    for (auto& x : out.voxels) x = static_cast<float>(cdf[bin_of(x)]);
    return out;
}

Study preprocess_study(const Study& s, const PreprocessConfig& cfg) {
    cfg.validate();
    if (cfg.request_n4)
        std::cerr << "[preprocess] notice: n4 bias correction requested but not performed; "
                     "volumes are treated as bias-corrected upstream\n";
    Study out = s;
    for (auto& v : out.series) {
        v = percentile_normalize(v, cfg);
        if (cfg.enable_hist_eq) v = histogram_equalize(v, cfg);
    }
    return out;
}

}  // namespace lndet
