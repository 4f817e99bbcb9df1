#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lndet/detector.hpp"
#include "lndet/eval.hpp"
#include "lndet/phantom.hpp"
#include "lndet/preprocess.hpp"
#include "lndet/sampler.hpp"
#include "lndet/wbf.hpp"

namespace lndet {

struct EvalConfig {
    double iou_thr = 0.25;
    std::vector<double> fp_thresholds{0.5, 1.0, 2.0, 4.0, 6.0, 8.0};
    int folds = 0;        // > 1 enables cross-validation style aggregation
    int test_stride = 1;  // slice enumeration stride on test volumes

    void validate() const {
        if (!(iou_thr > 0.0 && iou_thr < 1.0)) throw ConfigError("eval: iou_thr outside (0,1)");
        if (fp_thresholds.empty()) throw ConfigError("eval: fp_thresholds empty");
        if (test_stride < 0) throw ConfigError("eval: test_stride must be >= 0");
    }
};

struct PathsConfig {
    std::string data_dir;
    std::string out_dir;
};

/// Fully resolved experiment description; the single JSON config document.
struct ExperimentConfig {
    std::string name = "experiment";
    CompositionMode mode = CompositionMode::E_21;
    ILLConfig ill;
    ClassicAugConfig aug;
    PreprocessConfig preprocess;
    DetectorConfig detector;
    TrainConfig train;
    wbf::WbfConfig wbf;
    EvalConfig eval;
    PathsConfig paths;
    int n_runs = 5;
    std::uint64_t seed = 1;
    int jobs = 1;

    void validate() const;

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    /// FNV-1a hash of the canonical JSON dump; embedded in every artifact.
    std::string hash() const;
};

std::vector<std::string> preset_names();
/// The comparison grid: et, ed, e12-nsa, e12-ill, e21-nsa, e21-ill
/// (ILL is rejected for the single-domain modes, so the grid has 6 cells).
ExperimentConfig preset(const std::string& name);

struct RunSummary {
    std::uint64_t seed;
    bool diverged;
    std::vector<std::pair<int, double>> checkpoints;  // (epoch, val loss)
};

struct ExperimentResult {
    eval::MetricReport report;
    std::vector<RunSummary> runs;
    int wbf_sources = 0;
    double wall_seconds = 0.0;
};

/// Full pipeline: n_runs trainings, top-k checkpoints each, prediction on the
/// test split, WBF fusion across all checkpoints of all runs, evaluation, and
/// report.csv / froc.svg / run_log.json under paths.out_dir. Stage failures
/// rethrow with the stage name prefixed; artifacts written so far remain.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Evaluate pre-computed detections against a dataset's test ground truth.
eval::MetricReport evaluate_detections(const std::filesystem::path& dataset_dir,
                                       const std::vector<DetectionsFile>& fused_per_study,
                                       const EvalConfig& cfg);

struct NamedReportRow {
    std::string name;
    double map;
    std::vector<double> sens_at_fp;
};

NamedReportRow parse_report_csv(const std::filesystem::path& path, const std::string& name);

/// Comparison table (CSV) + FROC overlay (SVG, one polyline per report) with
/// delta rows against the baseline report (index into `reports`).
void compare_reports(const std::vector<std::filesystem::path>& reports, std::size_t baseline,
                     const std::filesystem::path& out_csv, const std::filesystem::path& out_svg);

}  // namespace lndet
