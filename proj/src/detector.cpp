#include "lndet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "lndet/rng.hpp"

namespace lndet {

using nlohmann::json;

std::string to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd_momentum"; }

Optimizer optimizer_from_string(const std::string& s) {
    if (s == "adam") return Optimizer::adam;
    if (s == "sgd_momentum") return Optimizer::sgd_momentum;
    throw ConfigError("optimizer: expected adam or sgd_momentum, got \"" + s + "\"");
}

void DetectorConfig::validate() const {
    if (feature_stride != 4)
        throw ConfigError("detector: feature_stride is fixed at 4 by the backbone");
    if (base_c1 < 1 || base_c2 < 1) throw ConfigError("detector: base channels must be >= 1");
    if (!(anchor_scale > 0.0)) throw ConfigError("detector: anchor_scale must be > 0");
    if (atss_topk < 1) throw ConfigError("detector: atss_topk must be >= 1");
    if (!(vfl_alpha > 0.0 && vfl_alpha <= 1.0)) throw ConfigError("detector: vfl_alpha outside (0,1]");
    if (vfl_gamma < 0.0) throw ConfigError("detector: vfl_gamma must be >= 0");
    if (score_threshold < 0.0 || score_threshold > 1.0)
        throw ConfigError("detector: score_threshold outside [0,1]");
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (checkpoint_keep < 1) throw ConfigError("train: checkpoint_keep must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
}

ParamOffsets param_offsets(const DetectorConfig& cfg) {
    const std::size_t c1 = cfg.base_c1, c2 = cfg.base_c2;
    ParamOffsets o{};
    std::size_t at = 0;
    o.c1w = at; at += c1 * 3 * 9;
    o.c1b = at; at += c1;
    o.c2w = at; at += c2 * c1 * 9;
    o.c2b = at; at += c2;
    o.c3w = at; at += c2 * c2 * 9;
    o.c3b = at; at += c2;
    o.score_w = at; at += c2;
    o.score_b = at; at += 1;
    o.box_w = at; at += 4 * c2;
    o.box_b = at; at += 4;
    o.star_w = at; at += 4 * 9 * c2;
    o.star_b = at; at += 4;
    o.total = at;
    return o;
}

ModelParams zero_params(const DetectorConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    p.values.assign(param_offsets(cfg).total, 0.0);
    return p;
}

ModelParams init_params(const DetectorConfig& cfg, std::uint64_t seed) {
    ModelParams p = zero_params(cfg);
    const ParamOffsets o = param_offsets(cfg);
    Rng rng = Rng::keyed(seed, 0x696e6974ULL);

    auto he_fill = [&](std::size_t off, std::size_t count, int fan_in, double scale) {
        const double std_dev = scale * std::sqrt(2.0 / fan_in);
        for (std::size_t i = 0; i < count; ++i) p.values[off + i] = std_dev * rng.normal();
    };
    he_fill(o.c1w, cfg.base_c1 * 3 * 9, 3 * 9, 1.0);
    he_fill(o.c2w, static_cast<std::size_t>(cfg.base_c2) * cfg.base_c1 * 9, cfg.base_c1 * 9, 1.0);
    he_fill(o.c3w, static_cast<std::size_t>(cfg.base_c2) * cfg.base_c2 * 9, cfg.base_c2 * 9, 1.0);
    he_fill(o.score_w, cfg.base_c2, cfg.base_c2, 1.0);
    he_fill(o.box_w, 4 * cfg.base_c2, cfg.base_c2, 1.0);
    he_fill(o.star_w, 4 * 9 * cfg.base_c2, 9 * cfg.base_c2, 0.1);
    // Dense negatives dominate; bias the score prior towards p ~= 0.01.
    p.values[o.score_b] = -std::log(99.0);
    return p;
}

// --- forward ----------------------------------------------------------------

namespace {

constexpr double kLn2 = 0.6931471805599453;

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Workspace {
    Tensor x, a1, a2, a3;
    Tensor zs, zb;
    int gw = 0, gh = 0;
    std::vector<double> p;         // N
    std::vector<double> ltrb;      // 4N, [l,t,r,b] per location
    std::vector<double> feat;      // N * 9 * C (refine)
    std::vector<double> ylin;      // 4N pre-squash refinement outputs
    std::vector<double> delta;     // 4N multiplicative side deltas in [0.5, 2]
    std::vector<double> ltrb_ref;  // 4N
};

ConvSpec spec_c1(const DetectorConfig& c) { return {3, c.base_c1, 3, 2, 1}; }
ConvSpec spec_c2(const DetectorConfig& c) { return {c.base_c1, c.base_c2, 3, 2, 1}; }
ConvSpec spec_c3(const DetectorConfig& c) { return {c.base_c2, c.base_c2, 3, 1, 1}; }
ConvSpec spec_score(const DetectorConfig& c) { return {c.base_c2, 1, 1, 1, 0}; }
ConvSpec spec_box(const DetectorConfig& c) { return {c.base_c2, 4, 1, 1, 0}; }

// Star sample points of the initial box in feature coordinates. Location
// (ix,iy) sits at feature coordinate (ix,iy); box offsets are already in
// stride units, so corners land at ix - l .. ix + r directly.
void star_points(double ix, double iy, const double* ltrb, std::array<double, 2>* pts) {
    const double l = ltrb[0], t = ltrb[1], r = ltrb[2], b = ltrb[3];
    const double us[3] = {ix - l, ix + 0.5 * (r - l), ix + r};
    const double vs[3] = {iy - t, iy + 0.5 * (b - t), iy + b};
    for (int row = 0; row < 3; ++row)
        for (int col = 0; col < 3; ++col) pts[row * 3 + col] = {us[col], vs[row]};
}

void run_forward(const ModelParams& mp, const Sample25D& sample, const DetectorConfig& cfg,
                 Workspace& ws) {
    const ParamOffsets o = param_offsets(cfg);
    if (mp.values.size() != o.total)
        throw ConfigError("forward: parameter buffer size does not match the config");
    const int nx = sample.nx(), ny = sample.ny();

    ws.x = Tensor(3, ny, nx);
    for (int c = 0; c < 3; ++c) {
        const Image& img = sample.channels[c];
        double* plane = ws.x.plane(c);
        for (std::size_t i = 0; i < img.px.size(); ++i) plane[i] = img.px[i];
    }

    const double* pv = mp.values.data();
    conv_forward(spec_c1(cfg), pv + o.c1w, pv + o.c1b, ws.x, ws.a1);
    relu_forward_inplace(ws.a1);
    check_finite(ws.a1, "conv1");
    conv_forward(spec_c2(cfg), pv + o.c2w, pv + o.c2b, ws.a1, ws.a2);
    relu_forward_inplace(ws.a2);
    check_finite(ws.a2, "conv2");
    conv_forward(spec_c3(cfg), pv + o.c3w, pv + o.c3b, ws.a2, ws.a3);
    relu_forward_inplace(ws.a3);
    check_finite(ws.a3, "conv3");

    conv_forward(spec_score(cfg), pv + o.score_w, pv + o.score_b, ws.a3, ws.zs);
    check_finite(ws.zs, "score head");
    conv_forward(spec_box(cfg), pv + o.box_w, pv + o.box_b, ws.a3, ws.zb);
    check_finite(ws.zb, "box head");

    ws.gw = ws.a3.w;
    ws.gh = ws.a3.h;
    const std::size_t n = static_cast<std::size_t>(ws.gw) * ws.gh;
    ws.p.resize(n);
    ws.ltrb.resize(4 * n);
    for (std::size_t i = 0; i < n; ++i) {
        ws.p[i] = sigmoid(ws.zs.v[i]);
        for (int k = 0; k < 4; ++k) {
            const double d = std::exp(ws.zb.v[k * n + i]);
            if (!std::isfinite(d)) throw NumericError("forward: non-finite box distance");
            ws.ltrb[4 * i + k] = d;
        }
    }

    if (!cfg.refine_enabled) {
        ws.feat.clear();
        ws.ylin.clear();
        ws.delta.clear();
        ws.ltrb_ref.clear();
        return;
    }

    const int C = cfg.base_c2;
    ws.feat.assign(n * 9 * C, 0.0);
    ws.ylin.assign(4 * n, 0.0);
    ws.delta.assign(4 * n, 0.0);
    ws.ltrb_ref.assign(4 * n, 0.0);
    const double* sw = pv + o.star_w;
    const double* sb = pv + o.star_b;
    std::array<std::array<double, 2>, 9> pts;
    for (int iy = 0; iy < ws.gh; ++iy) {
        for (int ix = 0; ix < ws.gw; ++ix) {
            const std::size_t i = static_cast<std::size_t>(iy) * ws.gw + ix;
            star_points(ix, iy, &ws.ltrb[4 * i], pts.data());
            double* feat = &ws.feat[i * 9 * C];
            for (int j = 0; j < 9; ++j)
                bilinear_sample(ws.a3, pts[j][0], pts[j][1], feat + j * C);
            for (int k = 0; k < 4; ++k) {
                double acc = sb[k];
                const double* wrow = sw + static_cast<std::size_t>(k) * 9 * C;
                for (int j = 0; j < 9 * C; ++j) acc += wrow[j] * feat[j];
                ws.ylin[4 * i + k] = acc;
                const double d = std::exp(kLn2 * std::tanh(acc));
                ws.delta[4 * i + k] = d;
                ws.ltrb_ref[4 * i + k] = ws.ltrb[4 * i + k] * d;
            }
        }
    }
}

}  // namespace

DensePred forward(const ModelParams& params, const Sample25D& x, const DetectorConfig& cfg) {
    cfg.validate();
    Workspace ws;
    run_forward(params, x, cfg, ws);
    DensePred out;
    out.gw = ws.gw;
    out.gh = ws.gh;
    out.score = std::move(ws.p);
    out.ltrb = std::move(ws.ltrb);
    out.ltrb_ref = std::move(ws.ltrb_ref);
    return out;
}

// --- assignment -------------------------------------------------------------

DenseTargets atss_assign(const std::vector<Box>& gt_boxes, int gw, int gh,
                         const DetectorConfig& cfg) {
    cfg.validate();
    const double s = cfg.feature_stride;
    const double anchor_half = 0.5 * cfg.anchor_scale * s;
    const std::size_t n = static_cast<std::size_t>(gw) * gh;

    DenseTargets t;
    t.gw = gw;
    t.gh = gh;
    t.q.assign(n, 0.0);
    t.ltrb.assign(4 * n, 0.0);
    t.positive.assign(n, 0);
    t.gt_index.assign(n, -1);
    if (gt_boxes.empty()) return t;

    auto center_x = [&](std::size_t i) { return (static_cast<double>(i % gw) + 0.5) * s; };
    auto center_y = [&](std::size_t i) { return (static_cast<double>(i / gw) + 0.5) * s; };
    auto anchor_of = [&](std::size_t i) {
        const double cx = center_x(i), cy = center_y(i);
        return Box{cx - anchor_half, cy - anchor_half, cx + anchor_half, cy + anchor_half};
    };

    std::vector<double> best_iou(n, 0.0);
    std::vector<int> best_gt(n, -1);
    std::vector<int> assigned_count(gt_boxes.size(), 0);
    std::vector<std::size_t> order(n);

    auto nearest_order = [&](const Box& gt) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::vector<double> d2(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double dx = center_x(i) - gt.cx();
            const double dy = center_y(i) - gt.cy();
            d2[i] = dx * dx + dy * dy;
        }
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (d2[a] != d2[b]) return d2[a] < d2[b];
            return a < b;
        });
    };

    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
        const Box& gt = gt_boxes[g];
        nearest_order(gt);
        const std::size_t topk = std::min<std::size_t>(cfg.atss_topk, n);

        double sum = 0.0, sum_sq = 0.0;
        std::vector<double> cand_iou(topk);
        for (std::size_t c = 0; c < topk; ++c) {
            cand_iou[c] = iou(anchor_of(order[c]), gt);
            sum += cand_iou[c];
            sum_sq += cand_iou[c] * cand_iou[c];
        }
        const double mean = sum / static_cast<double>(topk);
        const double var = std::max(0.0, sum_sq / static_cast<double>(topk) - mean * mean);
        const double thr = mean + std::sqrt(var);

        for (std::size_t c = 0; c < topk; ++c) {
            const std::size_t i = order[c];
            const double cx = center_x(i), cy = center_y(i);
            const bool inside = cx >= gt.x0 && cx <= gt.x1 && cy >= gt.y0 && cy <= gt.y1;
            if (cand_iou[c] >= thr && inside && cand_iou[c] > best_iou[i]) {
                if (best_gt[i] >= 0) --assigned_count[best_gt[i]];
                best_iou[i] = cand_iou[c];
                best_gt[i] = static_cast<int>(g);
                ++assigned_count[g];
            }
        }
    }

    // A GT with no positive gets its nearest location, overriding any claim.
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
        if (assigned_count[g] > 0) continue;
        nearest_order(gt_boxes[g]);
        const std::size_t i = order[0];
        if (best_gt[i] >= 0) --assigned_count[best_gt[i]];
        best_gt[i] = static_cast<int>(g);
        best_iou[i] = std::max(iou(anchor_of(i), gt_boxes[g]), 1e-6);
        ++assigned_count[g];
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (best_gt[i] < 0) continue;
        const Box& gt = gt_boxes[best_gt[i]];
        const double cx = center_x(i), cy = center_y(i);
        t.positive[i] = 1;
        t.q[i] = best_iou[i];
        t.gt_index[i] = best_gt[i];
        t.ltrb[4 * i + 0] = std::max((cx - gt.x0) / s, 1e-3);
        t.ltrb[4 * i + 1] = std::max((cy - gt.y0) / s, 1e-3);
        t.ltrb[4 * i + 2] = std::max((gt.x1 - cx) / s, 1e-3);
        t.ltrb[4 * i + 3] = std::max((gt.y1 - cy) / s, 1e-3);
    }
    return t;
}

// --- losses -----------------------------------------------------------------

VflResult varifocal_loss(double p, double q, const DetectorConfig& cfg) {
    constexpr double kEps = 1e-7;
    const bool clamped = p < kEps || p > 1.0 - kEps;
    const double pc = std::clamp(p, kEps, 1.0 - kEps);
    VflResult r{};
    if (q > 0.0) {
        r.loss = -q * (q * std::log(pc) + (1.0 - q) * std::log(1.0 - pc));
        r.dp = clamped ? 0.0 : -q * (q / pc - (1.0 - q) / (1.0 - pc));
    } else {
        const double pg = std::pow(pc, cfg.vfl_gamma);
        r.loss = -cfg.vfl_alpha * pg * std::log(1.0 - pc);
        if (clamped) {
            r.dp = 0.0;
        } else {
            const double dpow = cfg.vfl_gamma > 0.0
                                    ? cfg.vfl_gamma * std::pow(pc, cfg.vfl_gamma - 1.0)
                                    : 0.0;
            r.dp = -cfg.vfl_alpha * (dpow * std::log(1.0 - pc) - pg / (1.0 - pc));
        }
    }
    return r;
}

BoxLossResult box_loss(const std::array<double, 4>& pred_ltrb,
                       const std::array<double, 4>& target_ltrb, double stride, double weight) {
    const double s = stride;
    const double px0 = -pred_ltrb[0] * s, py0 = -pred_ltrb[1] * s;
    const double px1 = pred_ltrb[2] * s, py1 = pred_ltrb[3] * s;
    const double tx0 = -target_ltrb[0] * s, ty0 = -target_ltrb[1] * s;
    const double tx1 = target_ltrb[2] * s, ty1 = target_ltrb[3] * s;

    const double ap = (px1 - px0) * (py1 - py0);
    const double at = (tx1 - tx0) * (ty1 - ty0);
    const double ix0 = std::max(px0, tx0), iy0 = std::max(py0, ty0);
    const double ix1 = std::min(px1, tx1), iy1 = std::min(py1, ty1);
    const double iw = ix1 - ix0, ih = iy1 - iy0;
    const bool overlap = iw > 0.0 && ih > 0.0;
    const double inter = overlap ? iw * ih : 0.0;
    const double uni = ap + at - inter;
    const double cw = std::max(px1, tx1) - std::min(px0, tx0);
    const double ch = std::max(py1, ty1) - std::min(py0, ty0);
    const double carea = cw * ch;

    const double giou = inter / uni + uni / carea - 1.0;

    // Partials wrt pred box coordinates (x0, y0, x1, y1).
    const double dap[4] = {-(py1 - py0), -(px1 - px0), py1 - py0, px1 - px0};
    double dinter[4] = {0, 0, 0, 0};
    if (overlap) {
        dinter[0] = px0 > tx0 ? -ih : 0.0;
        dinter[1] = py0 > ty0 ? -iw : 0.0;
        dinter[2] = px1 < tx1 ? ih : 0.0;
        dinter[3] = py1 < ty1 ? iw : 0.0;
    }
    const double dc[4] = {px0 < tx0 ? -ch : 0.0, py0 < ty0 ? -cw : 0.0,
                          px1 > tx1 ? ch : 0.0, py1 > ty1 ? cw : 0.0};

    BoxLossResult r{};
    r.loss = weight * (1.0 - giou);
    for (int i = 0; i < 4; ++i) {
        const double duni = dap[i] - dinter[i];
        const double dgiou = (dinter[i] * uni - inter * duni) / (uni * uni) +
                             (duni * carea - uni * dc[i]) / (carea * carea);
        const double chain = i < 2 ? -s : s;  // x0 = -l*s, y0 = -t*s, x1 = r*s, y1 = b*s
        r.dpred[i] = -weight * dgiou * chain;
    }
    return r;
}

// --- backward ---------------------------------------------------------------

namespace {

double accumulate_loss_and_output_grads(const Workspace& ws, const DenseTargets& targets,
                                        const DetectorConfig& cfg, double stride, double scale,
                                        std::vector<double>* dp, std::vector<double>* dltrb,
                                        std::vector<double>* ddelta, int* n_pos_out) {
    const std::size_t n = ws.p.size();
    if (targets.q.size() != n)
        throw ConfigError("backward: target grid does not match prediction grid");
    const int n_pos = targets.count_positive();
    if (n_pos_out) *n_pos_out = n_pos;

    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    const double inv_pos = n_pos > 0 ? 1.0 / static_cast<double>(n_pos) : 0.0;

    for (std::size_t i = 0; i < n; ++i) {
        const VflResult vfl = varifocal_loss(ws.p[i], targets.q[i], cfg);
        loss += vfl.loss * inv_n;
        if (dp) (*dp)[i] += scale * vfl.dp * inv_n;

        if (!targets.positive[i]) continue;
        const std::array<double, 4> pred{ws.ltrb[4 * i], ws.ltrb[4 * i + 1], ws.ltrb[4 * i + 2],
                                         ws.ltrb[4 * i + 3]};
        const std::array<double, 4> tgt{targets.ltrb[4 * i], targets.ltrb[4 * i + 1],
                                        targets.ltrb[4 * i + 2], targets.ltrb[4 * i + 3]};
        const BoxLossResult init = box_loss(pred, tgt, stride, targets.q[i]);
        loss += init.loss * inv_pos;
        if (dltrb)
            for (int k = 0; k < 4; ++k) (*dltrb)[4 * i + k] += scale * init.dpred[k] * inv_pos;

        if (cfg.refine_enabled) {
            const std::array<double, 4> pred_ref{ws.ltrb_ref[4 * i], ws.ltrb_ref[4 * i + 1],
                                                 ws.ltrb_ref[4 * i + 2], ws.ltrb_ref[4 * i + 3]};
            const BoxLossResult ref = box_loss(pred_ref, tgt, stride, targets.q[i]);
            loss += ref.loss * inv_pos;
            if (dltrb && ddelta) {
                for (int k = 0; k < 4; ++k) {
                    // l_ref = l * delta: product rule splits the gradient.
                    (*ddelta)[4 * i + k] += scale * ref.dpred[k] * ws.ltrb[4 * i + k] * inv_pos;
                    (*dltrb)[4 * i + k] += scale * ref.dpred[k] * ws.delta[4 * i + k] * inv_pos;
                }
            }
        }
    }
    return loss;
}

}  // namespace

double compute_loss(const ModelParams& params, const Sample25D& x, const DenseTargets& targets,
                    const DetectorConfig& cfg) {
    Workspace ws;
    run_forward(params, x, cfg, ws);
    return accumulate_loss_and_output_grads(ws, targets, cfg, cfg.feature_stride, 1.0, nullptr,
                                            nullptr, nullptr, nullptr);
}

BackwardResult backward(const ModelParams& params, const Sample25D& x,
                        const DenseTargets& targets, const DetectorConfig& cfg,
                        double loss_scale) {
    const ParamOffsets o = param_offsets(cfg);
    Workspace ws;
    run_forward(params, x, cfg, ws);

    const std::size_t n = ws.p.size();
    std::vector<double> dp(n, 0.0), dltrb(4 * n, 0.0), ddelta(4 * n, 0.0);
    BackwardResult result;
    result.grad.assign(o.total, 0.0);
    result.loss = accumulate_loss_and_output_grads(ws, targets, cfg, cfg.feature_stride,
                                                   loss_scale, &dp, &dltrb, &ddelta,
                                                   &result.n_positive);

    const double* pv = params.values.data();
    double* gv = result.grad.data();
    const int C = cfg.base_c2;

    Tensor da3(ws.a3.c, ws.a3.h, ws.a3.w);

    // Star refinement backward: squash -> linear -> sampled features and
    // sample positions (positions depend on the initial box).
    if (cfg.refine_enabled) {
        const double* sw = pv + o.star_w;
        std::array<std::array<double, 2>, 9> pts;
        std::vector<double> dfeat(9 * C);
        for (int iy = 0; iy < ws.gh; ++iy) {
            for (int ix = 0; ix < ws.gw; ++ix) {
                const std::size_t i = static_cast<std::size_t>(iy) * ws.gw + ix;
                bool any = false;
                double dy4[4];
                for (int k = 0; k < 4; ++k) {
                    const double g = ddelta[4 * i + k];
                    if (g != 0.0) any = true;
                    const double th = std::tanh(ws.ylin[4 * i + k]);
                    dy4[k] = g * ws.delta[4 * i + k] * kLn2 * (1.0 - th * th);
                }
                if (!any) continue;

                const double* feat = &ws.feat[i * 9 * C];
                std::fill(dfeat.begin(), dfeat.end(), 0.0);
                for (int k = 0; k < 4; ++k) {
                    if (dy4[k] == 0.0) continue;
                    double* gw_row = gv + o.star_w + static_cast<std::size_t>(k) * 9 * C;
                    const double* w_row = sw + static_cast<std::size_t>(k) * 9 * C;
                    for (int j = 0; j < 9 * C; ++j) {
                        gw_row[j] += dy4[k] * feat[j];
                        dfeat[j] += w_row[j] * dy4[k];
                    }
                    gv[o.star_b + k] += dy4[k];
                }

                star_points(ix, iy, &ws.ltrb[4 * i], pts.data());
                for (int j = 0; j < 9; ++j) {
                    double du = 0.0, dv = 0.0;
                    bilinear_sample_backward(ws.a3, pts[j][0], pts[j][1], &dfeat[j * C], da3, du,
                                             dv);
                    const int col = j % 3, row = j / 3;
                    // u: col 0 -> ix - l, col 1 -> ix + (r-l)/2, col 2 -> ix + r
                    if (col == 0) dltrb[4 * i + 0] -= du;
                    if (col == 1) { dltrb[4 * i + 0] -= 0.5 * du; dltrb[4 * i + 2] += 0.5 * du; }
                    if (col == 2) dltrb[4 * i + 2] += du;
                    if (row == 0) dltrb[4 * i + 1] -= dv;
                    if (row == 1) { dltrb[4 * i + 1] -= 0.5 * dv; dltrb[4 * i + 3] += 0.5 * dv; }
                    if (row == 2) dltrb[4 * i + 3] += dv;
                }
            }
        }
    }

    // Head output gradients in tensor form.
    Tensor dzs(1, ws.gh, ws.gw), dzb(4, ws.gh, ws.gw);
    for (std::size_t i = 0; i < n; ++i) {
        dzs.v[i] = dp[i] * ws.p[i] * (1.0 - ws.p[i]);
        for (int k = 0; k < 4; ++k) dzb.v[k * n + i] = dltrb[4 * i + k] * ws.ltrb[4 * i + k];
    }

    conv_backward(spec_score(cfg), pv + o.score_w, ws.a3, dzs, gv + o.score_w, gv + o.score_b,
                  &da3);
    conv_backward(spec_box(cfg), pv + o.box_w, ws.a3, dzb, gv + o.box_w, gv + o.box_b, &da3);

    relu_backward_inplace(ws.a3, da3);
    Tensor da2(ws.a2.c, ws.a2.h, ws.a2.w);
    conv_backward(spec_c3(cfg), pv + o.c3w, ws.a2, da3, gv + o.c3w, gv + o.c3b, &da2);
    relu_backward_inplace(ws.a2, da2);
    Tensor da1(ws.a1.c, ws.a1.h, ws.a1.w);
    conv_backward(spec_c2(cfg), pv + o.c2w, ws.a1, da2, gv + o.c2w, gv + o.c2b, &da1);
    relu_backward_inplace(ws.a1, da1);
    conv_backward(spec_c1(cfg), pv + o.c1w, ws.x, da1, gv + o.c1w, gv + o.c1b, nullptr);

    result.loss *= loss_scale;
    return result;
}

// --- training ---------------------------------------------------------------

namespace {

struct SampleRef {
    int study;
    int slice;
};

std::vector<SampleRef> collect_samples(const std::vector<const Study*>& studies) {
    std::vector<SampleRef> refs;
    for (std::size_t si = 0; si < studies.size(); ++si)
        for (int z : enumerate_keyslices(*studies[si]))
            refs.push_back({static_cast<int>(si), z});
    return refs;
}

struct OptimizerState {
    std::vector<double> m, v;  // adam moments / sgd velocity
    long long t = 0;

    void init(std::size_t size) {
        m.assign(size, 0.0);
        v.assign(size, 0.0);
        t = 0;
    }

    void step(std::vector<double>& theta, const std::vector<double>& grad,
              const TrainConfig& cfg) {
        ++t;
        if (cfg.optimizer == Optimizer::adam) {
            const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double g = grad[i] + cfg.weight_decay * theta[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                theta[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
            }
        } else {
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double g = grad[i] + cfg.weight_decay * theta[i];
                m[i] = cfg.momentum * m[i] + g;
                theta[i] -= cfg.learning_rate * m[i];
            }
        }
    }
};

int grid_dim(int n, int stride) { return (n + stride - 1) / stride; }

}  // namespace

TrainResult train(const std::vector<const Study*>& train_studies,
                  const std::vector<const Study*>& val_studies, CompositionMode mode,
                  const ILLConfig& ill, const ClassicAugConfig& aug, const TrainConfig& tcfg,
                  const DetectorConfig& dcfg, int jobs) {
    tcfg.validate();
    dcfg.validate();
    ill.validate();
    aug.validate();
    if (ill.enabled && !mode_uses_both_domains(mode))
        throw ConfigError("ill: selective augmentation is undefined for single-domain mode " +
                          to_string(mode));

    const auto train_refs = collect_samples(train_studies);
    auto val_refs = collect_samples(val_studies);
    if (train_refs.empty()) throw DataError("train: empty training stream");
    if (val_refs.empty()) throw DataError("train: empty validation stream");
    jobs = std::max(1, jobs);

    const std::uint64_t ill_stream = mix_seed(tcfg.seed, ill.seed ^ 0x494c4cULL);
    const std::uint64_t aug_stream = mix_seed(tcfg.seed, aug.seed ^ 0x415547ULL);

    ModelParams params = init_params(dcfg, tcfg.seed);
    OptimizerState opt;
    opt.init(params.values.size());

    auto val_loss_of = [&](const ModelParams& p) {
        double acc = 0.0;
        for (const auto& ref : val_refs) {
            const Study& st = *val_studies[ref.study];
            const Sample25D sample = compose_25d(st, ref.slice, mode);
            const DenseTargets targets = atss_assign(
                sample.boxes, grid_dim(sample.nx(), dcfg.feature_stride),
                grid_dim(sample.ny(), dcfg.feature_stride), dcfg);
            acc += compute_loss(p, sample, targets, dcfg);
        }
        return acc / static_cast<double>(val_refs.size());
    };

    TrainResult result;
    std::vector<Checkpoint> all_ckpts;
    std::vector<std::size_t> order(train_refs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    const std::size_t n_train = train_refs.size();
    bool diverged = false;

    for (int epoch = 0; epoch < tcfg.epochs && !diverged; ++epoch) {
        Rng shuffle_rng = Rng::keyed(tcfg.seed, 0xe90cULL + static_cast<std::uint64_t>(epoch));
        for (std::size_t i = n_train - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i)));
            std::swap(order[i], order[j]);
        }

        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < n_train && !diverged; start += tcfg.batch_size) {
            const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(tcfg.batch_size));
            const std::size_t bs = end - start;
            std::vector<BackwardResult> partials(bs);

            auto worker = [&](std::size_t w) {
                for (std::size_t b = w; b < bs; b += static_cast<std::size_t>(jobs)) {
                    const std::uint64_t draw = static_cast<std::uint64_t>(epoch) * n_train +
                                               (start + b);
                    const SampleRef& ref = train_refs[order[start + b]];
                    const Study& st = *train_studies[ref.study];
                    Rng rng_ill = Rng::keyed(ill_stream, draw);
                    Rng rng_aug = Rng::keyed(aug_stream, draw);
                    const Sample25D sample =
                        make_training_sample(st, ref.slice, mode, ill, aug, rng_ill, rng_aug);
                    const DenseTargets targets = atss_assign(
                        sample.boxes, grid_dim(sample.nx(), dcfg.feature_stride),
                        grid_dim(sample.ny(), dcfg.feature_stride), dcfg);
                    partials[b] = backward(params, sample, targets, dcfg);
                }
            };
            if (jobs == 1 || bs == 1) {
                worker(0);
            } else {
                std::vector<std::thread> pool;
                for (int w = 0; w < jobs; ++w) pool.emplace_back(worker, static_cast<std::size_t>(w));
                for (auto& th : pool) th.join();
            }

            // Fixed reduction order keeps results identical across job counts.
            std::vector<double> grad(params.values.size(), 0.0);
            double batch_loss = 0.0;
            for (const auto& part : partials) {
                batch_loss += part.loss;
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += part.grad[i];
            }
            batch_loss /= static_cast<double>(bs);
            const double inv_bs = 1.0 / static_cast<double>(bs);
            for (auto& g : grad) g *= inv_bs;

            if (!std::isfinite(batch_loss)) {
                diverged = true;
                break;
            }
            epoch_loss += batch_loss;
            ++steps;
            opt.step(params.values, grad, tcfg);
        }

        if (diverged) break;
        const double vl = val_loss_of(params);
        if (!std::isfinite(vl)) {
            diverged = true;
            break;
        }
        result.history.push_back({epoch, steps ? epoch_loss / static_cast<double>(steps) : 0.0, vl});
        all_ckpts.push_back({epoch, vl, params});
    }

    result.diverged = diverged;
    if (all_ckpts.empty()) {
        // Divergence before the first epoch completed: retain the last finite
        // parameter state so downstream stages have something to run with.
        double vl = std::numeric_limits<double>::infinity();
        try {
            vl = val_loss_of(params);
        } catch (const NumericError&) {
        }
        all_ckpts.push_back({0, vl, params});
    }

    std::stable_sort(all_ckpts.begin(), all_ckpts.end(), [](const Checkpoint& a, const Checkpoint& b) {
        if (a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
        return a.epoch < b.epoch;
    });
    const std::size_t keep = std::min<std::size_t>(tcfg.checkpoint_keep, all_ckpts.size());
    result.checkpoints.assign(all_ckpts.begin(), all_ckpts.begin() + keep);
    return result;
}

// --- inference --------------------------------------------------------------

std::vector<Detection> predict(const ModelParams& params, const Study& study,
                               CompositionMode mode, const DetectorConfig& cfg,
                               const std::string& source_id, int test_stride) {
    cfg.validate();
    const double s = cfg.feature_stride;
    std::vector<Detection> out;
    for (const int z : enumerate_keyslices(study, test_stride)) {
        const Sample25D sample = compose_25d(study, z, mode);
        const DensePred pred = forward(params, sample, cfg);
        std::vector<Detection> slice_dets;
        for (int iy = 0; iy < pred.gh; ++iy) {
            for (int ix = 0; ix < pred.gw; ++ix) {
                const std::size_t i = static_cast<std::size_t>(iy) * pred.gw + ix;
                const double p = pred.score[i];
                if (p < cfg.score_threshold) continue;
                const double* box =
                    cfg.refine_enabled ? &pred.ltrb_ref[4 * i] : &pred.ltrb[4 * i];
                const double cx = (ix + 0.5) * s, cy = (iy + 0.5) * s;
                Box b{cx - box[0] * s, cy - box[1] * s, cx + box[2] * s, cy + box[3] * s};
                b = clip_box(b, study.nx(), study.ny());
                if (b.degenerate()) continue;
                slice_dets.push_back({z, b, p, source_id});
            }
        }
        if (!cfg.nms_free && slice_dets.size() > 1) {
            std::stable_sort(slice_dets.begin(), slice_dets.end(),
                             [](const Detection& a, const Detection& b) { return a.score > b.score; });
            std::vector<Detection> kept;
            for (const auto& d : slice_dets) {
                bool suppressed = false;
                for (const auto& k : kept)
                    if (iou(d.box, k.box) > cfg.nms_iou) suppressed = true;
                if (!suppressed) kept.push_back(d);
            }
            slice_dets = std::move(kept);
        }
        out.insert(out.end(), slice_dets.begin(), slice_dets.end());
    }
    return out;
}

// --- checkpoints ------------------------------------------------------------

namespace {

json detector_cfg_to_json(const DetectorConfig& c) {
    return json{{"feature_stride", c.feature_stride},
                {"base_channels", {c.base_c1, c.base_c2}},
                {"anchor_scale", c.anchor_scale},
                {"atss_topk", c.atss_topk},
                {"vfl_alpha", c.vfl_alpha},
                {"vfl_gamma", c.vfl_gamma},
                {"refine_enabled", c.refine_enabled},
                {"score_threshold", c.score_threshold},
                {"nms_free", c.nms_free},
                {"nms_iou", c.nms_iou}};
}

DetectorConfig detector_cfg_from_json(const json& j) {
    DetectorConfig c;
    c.feature_stride = j.value("feature_stride", c.feature_stride);
    if (j.contains("base_channels")) {
        c.base_c1 = j.at("base_channels").at(0).get<int>();
        c.base_c2 = j.at("base_channels").at(1).get<int>();
    }
    c.anchor_scale = j.value("anchor_scale", c.anchor_scale);
    c.atss_topk = j.value("atss_topk", c.atss_topk);
    c.vfl_alpha = j.value("vfl_alpha", c.vfl_alpha);
    c.vfl_gamma = j.value("vfl_gamma", c.vfl_gamma);
    c.refine_enabled = j.value("refine_enabled", c.refine_enabled);
    c.score_threshold = j.value("score_threshold", c.score_threshold);
    c.nms_free = j.value("nms_free", c.nms_free);
    c.nms_iou = j.value("nms_iou", c.nms_iou);
    return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const ParamOffsets o = param_offsets(ckpt.params.cfg);

    std::vector<float> flat(ckpt.params.values.size());
    for (std::size_t i = 0; i < flat.size(); ++i)
        flat[i] = static_cast<float>(ckpt.params.values[i]);
    std::ofstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) throw DataError((dir / "params.bin").string() + ": cannot open for writing");
    bin.write(reinterpret_cast<const char*>(flat.data()),
              static_cast<std::streamsize>(flat.size() * sizeof(float)));
    if (!bin) throw DataError((dir / "params.bin").string() + ": write failed");

    json j;
    j["epoch"] = ckpt.epoch;
    j["val_loss"] = ckpt.val_loss;
    j["param_count"] = o.total;
    j["detector"] = detector_cfg_to_json(ckpt.params.cfg);
    j["segments"] = json::array({
        json{{"name", "conv1.w"}, {"offset", o.c1w}}, json{{"name", "conv1.b"}, {"offset", o.c1b}},
        json{{"name", "conv2.w"}, {"offset", o.c2w}}, json{{"name", "conv2.b"}, {"offset", o.c2b}},
        json{{"name", "conv3.w"}, {"offset", o.c3w}}, json{{"name", "conv3.b"}, {"offset", o.c3b}},
        json{{"name", "score.w"}, {"offset", o.score_w}}, json{{"name", "score.b"}, {"offset", o.score_b}},
        json{{"name", "box.w"}, {"offset", o.box_w}}, json{{"name", "box.b"}, {"offset", o.box_b}},
        json{{"name", "star.w"}, {"offset", o.star_w}}, json{{"name", "star.b"}, {"offset", o.star_b}},
    });
    std::ofstream meta(dir / "params.json", std::ios::binary);
    if (!meta) throw DataError((dir / "params.json").string() + ": cannot open for writing");
    meta << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "params.json");
    if (!meta) throw DataError((dir / "params.json").string() + ": missing or unreadable");
    json j;
    try {
        meta >> j;
    } catch (const json::exception& e) {
        throw DataError((dir / "params.json").string() + ": malformed JSON (" + e.what() + ")");
    }

    Checkpoint ckpt;
    ckpt.epoch = j.value("epoch", 0);
    ckpt.val_loss = j.value("val_loss", 0.0);
    ckpt.params.cfg = detector_cfg_from_json(j.at("detector"));
    const ParamOffsets o = param_offsets(ckpt.params.cfg);

    std::ifstream bin(dir / "params.bin", std::ios::binary | std::ios::ate);
    if (!bin) throw DataError((dir / "params.bin").string() + ": missing or unreadable");
    const std::streamoff bytes = bin.tellg();
    if (static_cast<std::size_t>(bytes) != o.total * sizeof(float))
        throw DataError((dir / "params.bin").string() + ": has " + std::to_string(bytes) +
                        " bytes, config implies " + std::to_string(o.total * sizeof(float)));
    std::vector<float> flat(o.total);
    bin.seekg(0);
    bin.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(bytes));
    if (!bin) throw DataError((dir / "params.bin").string() + ": short read");

    ckpt.params.values.resize(o.total);
    for (std::size_t i = 0; i < o.total; ++i) {
        if (!std::isfinite(flat[i]))
            throw DataError((dir / "params.bin").string() + ": non-finite parameter at index " +
                            std::to_string(i));
        ckpt.params.values[i] = flat[i];
    }
    return ckpt;
}

}  // namespace lndet
