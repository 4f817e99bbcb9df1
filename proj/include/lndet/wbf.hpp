#pragma once

#include <vector>

#include "lndet/volume.hpp"

namespace lndet::wbf {

struct WbfConfig {
    double iou_thr = 0.55;   // cluster matching; distinct from the 0.25 evaluation IoU
    int num_sources = 1;     // T, the number of contributing models/checkpoints
    double score_floor = 0.0;

    void validate() const {
        if (!(iou_thr > 0.0 && iou_thr < 1.0)) throw ConfigError("wbf: iou_thr outside (0,1)");
        if (num_sources < 1) throw ConfigError("wbf: num_sources must be >= 1");
        if (score_floor < 0.0 || score_floor > 1.0)
            throw ConfigError("wbf: score_floor outside [0,1]");
    }
};

/// Weighted boxes fusion of detections on one slice. Detections are taken in
/// descending score (ties broken by lexicographic box order, so the result is
/// a pure function of the input multiset); each joins the first cluster whose
/// running fused box overlaps it above iou_thr, else starts a new cluster.
/// A cluster's fused box is the score-weighted mean of its members; its score
/// is the member mean rescaled by min(N, T)/T.
std::vector<Detection> fuse_slice(const std::vector<Detection>& dets, const WbfConfig& cfg);

/// Per-slice fusion over whole detection files; all inputs must reference the
/// same study. The output source_id lists the contributing sources.
DetectionsFile fuse_study(const std::vector<DetectionsFile>& per_source, const WbfConfig& cfg);

}  // namespace lndet::wbf
