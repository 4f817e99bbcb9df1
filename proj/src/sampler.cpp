#include "lndet/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "lndet/png.hpp"

namespace lndet {

std::string to_string(CompositionMode m) {
    switch (m) {
        case CompositionMode::E_T: return "E_T";
        case CompositionMode::E_D: return "E_D";
        case CompositionMode::E_12: return "E_12";
        default: return "E_21";
    }
}

CompositionMode composition_mode_from_string(const std::string& s) {
    if (s == "E_T") return CompositionMode::E_T;
    if (s == "E_D") return CompositionMode::E_D;
    if (s == "E_12") return CompositionMode::E_12;
    if (s == "E_21") return CompositionMode::E_21;
    throw ConfigError("mode: expected one of E_T/E_D/E_12/E_21, got \"" + s + "\"");
}

bool mode_uses_both_domains(CompositionMode m) {
    return m == CompositionMode::E_12 || m == CompositionMode::E_21;
}

std::string to_string(ChannelDomain d) {
    switch (d) {
        case ChannelDomain::T2FS: return "T2FS";
        case ChannelDomain::DWI: return "DWI";
        default: return "MIXED";
    }
}

namespace {

std::array<Modality, 3> mode_pattern(CompositionMode m) {
    switch (m) {
        case CompositionMode::E_T: return {Modality::T2FS, Modality::T2FS, Modality::T2FS};
        case CompositionMode::E_D: return {Modality::DWI, Modality::DWI, Modality::DWI};
        case CompositionMode::E_12: return {Modality::DWI, Modality::T2FS, Modality::DWI};
        default: return {Modality::T2FS, Modality::DWI, Modality::T2FS};
    }
}

std::array<Modality, 3> swapped_pattern(CompositionMode m) {
    auto p = mode_pattern(m);
    for (auto& mod : p) mod = (mod == Modality::T2FS) ? Modality::DWI : Modality::T2FS;
    return p;
}

Sample25D compose_pattern(const Study& s, int key_slice, const std::array<Modality, 3>& pattern) {
    const int nz = s.nz();
    if (key_slice < 0 || key_slice >= nz)
        throw DataError("compose_25d: key_slice " + std::to_string(key_slice) + " outside [0," +
                        std::to_string(nz) + ")");
    for (const auto mod : pattern)
        if (mod == Modality::DWI && !s.has_dwi())
            throw DataError("compose_25d: study \"" + s.study_id +
                            "\" has no DWI series for the requested mode");

    Sample25D out;
    out.key_slice = key_slice;
    out.study_id = s.study_id;
    const std::array<int, 3> zs = {std::max(0, key_slice - 1), key_slice,
                                   std::min(nz - 1, key_slice + 1)};
    for (int c = 0; c < 3; ++c) {
        const Volume& v = pattern[c] == Modality::T2FS ? s.t2fs() : s.dwi_highest_b();
        out.channels[c] = slice_view(v, zs[c]);
        out.channel_domains[c] =
            pattern[c] == Modality::T2FS ? ChannelDomain::T2FS : ChannelDomain::DWI;
    }
    for (const auto& a : s.annotations)
        if (a.slice == key_slice) out.boxes.push_back(a.box);
    return out;
}

}  // namespace

Sample25D compose_25d(const Study& s, int key_slice, CompositionMode mode) {
    return compose_pattern(s, key_slice, mode_pattern(mode));
}

double sample_lambda(const ILLConfig& cfg, Rng& rng) {
    cfg.validate();
    return rng.beta(cfg.beta_alpha, cfg.beta_beta);
}

Sample25D ill_mix(const Sample25D& a, const Sample25D& b, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("ill_mix: lambda outside [0,1]");
    if (a.study_id != b.study_id || a.key_slice != b.key_slice)
        throw DataError("ill_mix: samples must come from the same study and key slice");
    if (a.channel_domains == b.channel_domains)
        throw DataError("ill_mix: samples must carry different domain patterns");
    for (int c = 0; c < 3; ++c)
        if (!a.channels[c].same_dims(b.channels[c]))
            throw DataError("ill_mix: channel dims mismatch");
    if (a.boxes != b.boxes)
        throw DataError("ill_mix: box labels differ between partners; co-registration violated");

    Sample25D out;
    out.key_slice = a.key_slice;
    out.study_id = a.study_id;
    out.boxes = a.boxes;
    out.lambda_used = lambda;
    out.channel_domains = {ChannelDomain::Mixed, ChannelDomain::Mixed, ChannelDomain::Mixed};
    for (int c = 0; c < 3; ++c) {
        const Image& ia = a.channels[c];
        const Image& ib = b.channels[c];
        Image m(ia.w, ia.h);
        for (std::size_t i = 0; i < m.px.size(); ++i)
            m.px[i] = static_cast<float>(lambda * static_cast<double>(ia.px[i]) +
                                         (1.0 - lambda) * static_cast<double>(ib.px[i]));
        out.channels[c] = std::move(m);
    }
    return out;
}

namespace {

void apply_classic_augs(Sample25D& s, const ClassicAugConfig& aug, Rng& rng) {
    const double w = s.nx(), h = s.ny();

    // Draw order is fixed; every transform moves the boxes consistently.
    if (rng.bernoulli(aug.flip_prob)) {
        for (auto& ch : s.channels) ch = hflip(ch);
        for (auto& b : s.boxes) b = hflip_box(b, w);
    }
    if (rng.bernoulli(aug.flip_prob)) {
        for (auto& ch : s.channels) ch = vflip(ch);
        for (auto& b : s.boxes) b = vflip_box(b, h);
    }

    if (aug.shift_px_max > 0) {
        const int dx = rng.uniform_int(-aug.shift_px_max, aug.shift_px_max);
        const int dy = rng.uniform_int(-aug.shift_px_max, aug.shift_px_max);
        for (auto& ch : s.channels) ch = shift(ch, dx, dy);
        for (auto& b : s.boxes) b = shift_box(b, dx, dy);
    }

    if (aug.rotate_deg_max > 0.0) {
        const double deg = rng.uniform(-aug.rotate_deg_max, aug.rotate_deg_max);
        for (auto& ch : s.channels) ch = rotate_bilinear(ch, deg);
        for (auto& b : s.boxes) b = rotate_box_hull(b, deg, w, h);
    }

    if (aug.crop && rng.bernoulli(0.5)) {
        const double scale = rng.uniform(aug.crop_scale_min, 1.0);
        const int cw = std::max(8, static_cast<int>(std::lround(scale * w)));
        const int chh = std::max(8, static_cast<int>(std::lround(scale * h)));
        const int ox = rng.uniform_int(0, static_cast<int>(w) - cw);
        const int oy = rng.uniform_int(0, static_cast<int>(h) - chh);
        const double sx = w / cw, sy = h / chh;
        for (auto& ch : s.channels) {
            Image window(cw, chh);
            for (int y = 0; y < chh; ++y)
                for (int x = 0; x < cw; ++x) window.at(x, y) = ch.at(x + ox, y + oy);
            ch = resize_bilinear(window, static_cast<int>(w), static_cast<int>(h));
        }
        for (auto& b : s.boxes)
            b = Box{(b.x0 - ox) * sx, (b.y0 - oy) * sy, (b.x1 - ox) * sx, (b.y1 - oy) * sy};
    }

    const double contrast = rng.uniform(aug.contrast_range[0], aug.contrast_range[1]);
    const double gamma = rng.uniform(aug.gamma_range[0], aug.gamma_range[1]);
    for (auto& ch : s.channels)
        for (auto& px : ch.px) {
            double v = 0.5 + (static_cast<double>(px) - 0.5) * contrast;
            v = std::clamp(v, 0.0, 1.0);
            px = static_cast<float>(std::pow(v, gamma));
        }

    // Clip moved boxes to the canvas; fully displaced labels are dropped.
    std::vector<Box> kept;
    for (const auto& b : s.boxes) {
        const Box c = clip_box(b, w, h);
        if (!c.degenerate()) kept.push_back(c);
    }
    s.boxes = std::move(kept);
}

}  // namespace

Sample25D make_training_sample(const Study& s, int key_slice, CompositionMode mode,
                               const ILLConfig& ill, const ClassicAugConfig& aug,
                               Rng& rng_ill, Rng& rng_aug) {
    ill.validate();
    aug.validate();
    if (ill.enabled && !mode_uses_both_domains(mode))
        throw ConfigError("ill: selective augmentation mixes domains and is undefined for "
                          "single-domain mode " + to_string(mode));

    Sample25D sample = compose_25d(s, key_slice, mode);
    if (ill.enabled && rng_ill.bernoulli(ill.apply_prob)) {
        const Sample25D partner = compose_pattern(s, key_slice, swapped_pattern(mode));
        const double lambda = sample_lambda(ill, rng_ill);
        sample = ill_mix(sample, partner, lambda);
    }
    apply_classic_augs(sample, aug, rng_aug);
    return sample;
}

std::vector<int> enumerate_keyslices(const Study& s, int test_stride) {
    std::set<int> slices;
    if (s.split == Split::test) {
        for (const auto& a : s.annotations)
            if (a.is_3d_extent) slices.insert(a.slice);
        if (test_stride > 0)
            for (int z = 0; z < s.nz(); z += test_stride) slices.insert(z);
    } else {
        for (const auto& a : s.annotations) slices.insert(a.slice);
    }
    return {slices.begin(), slices.end()};
}

void dump_sample(const Sample25D& sample, const std::filesystem::path& dir,
                 const std::string& prefix) {
    std::filesystem::create_directories(dir);
    for (int c = 0; c < 3; ++c) {
        const Image& img = sample.channels[c];
        std::vector<unsigned char> gray(img.px.size());
        for (std::size_t i = 0; i < img.px.size(); ++i)
            gray[i] = static_cast<unsigned char>(
                std::clamp(static_cast<double>(img.px[i]), 0.0, 1.0) * 255.0 + 0.5);
        write_gray8_png(dir / (prefix + "_c" + std::to_string(c) + ".png"), img.w, img.h, gray);
    }
    nlohmann::json j;
    j["study_id"] = sample.study_id;
    j["key_slice"] = sample.key_slice;
    j["channel_domains"] = {to_string(sample.channel_domains[0]),
                            to_string(sample.channel_domains[1]),
                            to_string(sample.channel_domains[2])};
    j["lambda"] = sample.lambda_used ? nlohmann::json(*sample.lambda_used) : nlohmann::json(nullptr);
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : sample.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
    j["boxes"] = boxes;
    std::ofstream out(dir / (prefix + "_boxes.json"), std::ios::binary);
    out << j.dump(2) << "\n";
}

}  // namespace lndet
