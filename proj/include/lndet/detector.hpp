#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lndet/net.hpp"
#include "lndet/sampler.hpp"
#include "lndet/volume.hpp"

namespace lndet {

enum class Optimizer { sgd_momentum, adam };

std::string to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

/// Desk-scale anchor-free one-stage detector: a 3-conv backbone producing one
/// feature level at stride 4, a dense IoU-aware score head, a distance box
/// head, and a 9-point star refinement head sampling the initial box.
struct DetectorConfig {
    int feature_stride = 4;   // fixed by the two stride-2 convolutions
    int base_c1 = 16;
    int base_c2 = 32;
    double anchor_scale = 8.0;  // anchor side = anchor_scale * stride
    int atss_topk = 9;
    double vfl_alpha = 0.75;
    double vfl_gamma = 2.0;
    bool refine_enabled = true;
    double score_threshold = 0.01;
    bool nms_free = true;     // duplicates are fused downstream by WBF
    double nms_iou = 0.6;     // used only when nms_free == false

    void validate() const;
};

struct TrainConfig {
    int batch_size = 8;
    double learning_rate = 1e-3;
    int epochs = 12;
    Optimizer optimizer = Optimizer::adam;
    double momentum = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    int checkpoint_keep = 3;  // lowest validation loss

    void validate() const;
};

/// Flat offsets of every parameter segment (declaration order, the layout of
/// params.bin).
struct ParamOffsets {
    std::size_t c1w, c1b, c2w, c2b, c3w, c3b;
    std::size_t score_w, score_b, box_w, box_b, star_w, star_b;
    std::size_t total;
};

ParamOffsets param_offsets(const DetectorConfig& cfg);

struct ModelParams {
    DetectorConfig cfg;
    std::vector<double> values;  // flat, declaration order

    std::size_t size() const { return values.size(); }
};

ModelParams zero_params(const DetectorConfig& cfg);
ModelParams init_params(const DetectorConfig& cfg, std::uint64_t seed);

/// Dense per-location predictions on the stride-4 grid
/// (gw = ceil(nx/stride), gh = ceil(ny/stride); row-major, y outer).
struct DensePred {
    int gw = 0, gh = 0;
    std::vector<double> score;      // IACS estimate, in (0,1)
    std::vector<double> ltrb;       // 4 per location, stride units, > 0
    std::vector<double> ltrb_ref;   // refined box; empty when refine disabled
};

DensePred forward(const ModelParams& params, const Sample25D& x, const DetectorConfig& cfg);

/// ATSS assignment result over the feature grid.
struct DenseTargets {
    int gw = 0, gh = 0;
    std::vector<double> q;          // anchor-GT IoU for positives, 0 otherwise
    std::vector<double> ltrb;       // 4 per location, stride units
    std::vector<std::uint8_t> positive;
    std::vector<int> gt_index;      // -1 for negatives

    int count_positive() const {
        int n = 0;
        for (auto p : positive) n += p;
        return n;
    }
};

/// Positive/negative assignment: per GT the atss_topk nearest locations are
/// candidates, the IoU threshold is mean+std of their fixed-anchor IoUs, and
/// positives additionally need their center inside the GT. Contended
/// locations go to the GT of highest IoU; a GT left empty gets its nearest
/// location forced positive.
DenseTargets atss_assign(const std::vector<Box>& gt_boxes, int gw, int gh,
                         const DetectorConfig& cfg);

struct VflResult {
    double loss;
    double dp;
};

/// Varifocal loss on one location. q > 0 branch: -q(q log p + (1-q) log(1-p));
/// q = 0 branch: -alpha p^gamma log(1-p). p is clamped to [1e-7, 1-1e-7].
VflResult varifocal_loss(double p, double q, const DetectorConfig& cfg);

struct BoxLossResult {
    double loss;
    std::array<double, 4> dpred;  // d loss / d pred ltrb (stride units)
};

/// GIoU regression loss (1 - GIoU) * weight between boxes decoded from
/// (l,t,r,b) distances about a shared center.
BoxLossResult box_loss(const std::array<double, 4>& pred_ltrb,
                       const std::array<double, 4>& target_ltrb, double stride, double weight);

struct BackwardResult {
    double loss = 0.0;
    std::vector<double> grad;
    int n_positive = 0;
};

/// Total loss = mean varifocal over locations + mean weighted GIoU loss over
/// positives for the initial box (and the refined box when enabled).
/// Gradients cover every parameter, including the star-refinement path
/// through bilinear sample positions. loss_scale multiplies loss and grads.
BackwardResult backward(const ModelParams& params, const Sample25D& x,
                        const DenseTargets& targets, const DetectorConfig& cfg,
                        double loss_scale = 1.0);

/// Loss only (validation); identical value to backward().loss.
double compute_loss(const ModelParams& params, const Sample25D& x, const DenseTargets& targets,
                    const DetectorConfig& cfg);

struct Checkpoint {
    int epoch = 0;
    double val_loss = 0.0;
    ModelParams params;
};

struct EpochStats {
    int epoch;
    double train_loss;
    double val_loss;
};

struct TrainResult {
    std::vector<Checkpoint> checkpoints;  // ascending val loss, `checkpoint_keep` entries
    std::vector<EpochStats> history;
    bool diverged = false;
};

/// Minibatch gradient descent over the training stream; validation loss each
/// epoch; returns the lowest-val-loss checkpoints. Batch members may be
/// processed by `jobs` threads; gradients are reduced in sample order so the
/// result is independent of the worker count.
TrainResult train(const std::vector<const Study*>& train_studies,
                  const std::vector<const Study*>& val_studies, CompositionMode mode,
                  const ILLConfig& ill, const ClassicAugConfig& aug, const TrainConfig& tcfg,
                  const DetectorConfig& dcfg, int jobs = 1);

/// Detections for every enumerated slice of the study (no ILL, no classic
/// augmentation at inference). Boxes are clamped to image bounds.
std::vector<Detection> predict(const ModelParams& params, const Study& study,
                               CompositionMode mode, const DetectorConfig& cfg,
                               const std::string& source_id, int test_stride = 1);

/// Checkpoint directory: params.bin (flat little-endian float32 in
/// declaration order) + params.json (shapes, config echo, val loss, epoch).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace lndet
