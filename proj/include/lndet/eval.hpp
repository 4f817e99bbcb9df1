#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lndet/volume.hpp"

namespace lndet::eval {

/// TP/FP labels from greedy per-slice matching at a fixed IoU threshold.
struct MatchResult {
    struct DetMatch {
        int det_index;  // index into the input detection list
        bool tp;
        int gt_index;   // matched GT annotation index, -1 for FP
        double score;
    };
    std::vector<DetMatch> dets;  // in descending-score processing order
    std::vector<bool> gt_hit;
};

/// Greedy matching in descending score order (ties by input order): a
/// detection is TP iff some unmatched GT on its slice reaches IoU >= iou_thr;
/// it takes the highest-IoU such GT (ties by GT index).
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<BoxAnnotation>& gts, double iou_thr = 0.25);

/// Per-volume inputs to the FROC sweep.
struct VolumeMatches {
    std::vector<std::pair<double, bool>> scored;  // (score, is_tp). Order free.
    int n_gt = 0;
};

struct FrocPoint {
    double fp_per_vol;
    double sensitivity;
};

struct FrocResult {
    std::vector<FrocPoint> points;     // ascending FP/vol, max sensitivity per FP level
    std::vector<double> sens_at_fp;    // aligned with the requested thresholds
};

/// Threshold sweep over all distinct detection scores. sens_at_fp reads the
/// curve by linear interpolation between bracketing operating points, clamped
/// to the extreme points outside the swept range.
FrocResult froc(const std::vector<VolumeMatches>& volumes, const std::vector<double>& fp_thresholds);

/// Single-class average precision: all-point interpolated area under the
/// precision-recall curve of the descending-score sweep.
double average_precision(const std::vector<VolumeMatches>& volumes);

struct MetricReport {
    double map = 0.0;
    std::vector<FrocPoint> froc_points;
    std::vector<double> fp_thresholds;
    std::vector<double> sens_at_fp;
    std::vector<MetricReport> per_fold;
    int n_volumes = 0;
    int n_gt = 0;
};

MetricReport evaluate(const std::vector<VolumeMatches>& volumes,
                      const std::vector<double>& fp_thresholds);

/// Arithmetic mean of mAP and each S@FP entry; per_fold retained; the
/// aggregate carries no curve of its own.
MetricReport aggregate_folds(const std::vector<MetricReport>& reports);

/// Deterministic fold id in [0, n_folds) from the study id (FNV hash).
int fold_of_study(const std::string& study_id, int n_folds);

enum class ReportFormat { csv, svg };

/// CSV: header "mAP,S@0.5,..." in Table order + one value row + a trailing
/// provenance comment when a config hash is supplied. SVG: FROC curve with
/// the requested FP thresholds marked.
void render_report(const MetricReport& r, ReportFormat fmt, const std::filesystem::path& path,
                   const std::string& config_hash = "");

std::string report_csv_header(const std::vector<double>& fp_thresholds);
std::string format_metric(double v);

}  // namespace lndet::eval
