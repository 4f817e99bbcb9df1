#include "lndet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "lndet/rng.hpp"

namespace lndet::eval {

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<BoxAnnotation>& gts, double iou_thr) {
    MatchResult result;
    result.gt_hit.assign(gts.size(), false);

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });

    for (const std::size_t di : order) {
        const Detection& d = dets[di];
        int best_gt = -1;
        double best_iou = 0.0;
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
            if (result.gt_hit[gi] || gts[gi].slice != d.slice) continue;
            const double v = iou(d.box, gts[gi].box);
            if (v >= iou_thr && v > best_iou) {
                best_iou = v;
                best_gt = static_cast<int>(gi);
            }
        }
        if (best_gt >= 0) result.gt_hit[best_gt] = true;
        result.dets.push_back({static_cast<int>(di), best_gt >= 0, best_gt, d.score});
    }
    return result;
}

FrocResult froc(const std::vector<VolumeMatches>& volumes,
                const std::vector<double>& fp_thresholds) {
    if (volumes.empty()) throw DataError("froc: no volumes");
    long long total_gt = 0;
    for (const auto& v : volumes) total_gt += v.n_gt;
    if (total_gt == 0) throw DataError("froc: zero ground-truth boxes; sensitivity undefined");

    std::vector<std::pair<double, bool>> all;
    for (const auto& v : volumes) all.insert(all.end(), v.scored.begin(), v.scored.end());
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

    FrocResult result;
    const double n_vol = static_cast<double>(volumes.size());
    long long tp = 0, fp = 0;
    std::vector<FrocPoint> raw;
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (all[i].second) ++tp; else ++fp;
        // Close an operating point at every distinct score (cutoff = that score).
        if (i + 1 < all.size() && all[i + 1].first == all[i].first) continue;
        raw.push_back({static_cast<double>(fp) / n_vol,
                       static_cast<double>(tp) / static_cast<double>(total_gt)});
    }

    // Lowering the cutoff only adds detections, so sensitivity is already
    // non-decreasing; collapse equal-FP points onto the best sensitivity.
    for (const auto& pt : raw) {
        if (!result.points.empty() && result.points.back().fp_per_vol == pt.fp_per_vol)
            result.points.back().sensitivity = std::max(result.points.back().sensitivity, pt.sensitivity);
        else
            result.points.push_back(pt);
    }

    auto read_curve = [&](double f) {
        if (result.points.empty()) return 0.0;
        if (f <= result.points.front().fp_per_vol) return result.points.front().sensitivity;
        if (f >= result.points.back().fp_per_vol) return result.points.back().sensitivity;
        for (std::size_t i = 1; i < result.points.size(); ++i) {
            const auto& lo = result.points[i - 1];
            const auto& hi = result.points[i];
            if (f <= hi.fp_per_vol) {
                const double span = hi.fp_per_vol - lo.fp_per_vol;
                const double w = span > 0.0 ? (f - lo.fp_per_vol) / span : 1.0;
                return lo.sensitivity + w * (hi.sensitivity - lo.sensitivity);
            }
        }
        return result.points.back().sensitivity;
    };
    for (const double f : fp_thresholds) result.sens_at_fp.push_back(read_curve(f));
    return result;
}

double average_precision(const std::vector<VolumeMatches>& volumes) {
    long long total_gt = 0;
    for (const auto& v : volumes) total_gt += v.n_gt;
    if (total_gt == 0) throw DataError("average_precision: zero ground-truth boxes");

    std::vector<std::pair<double, bool>> all;
    for (const auto& v : volumes) all.insert(all.end(), v.scored.begin(), v.scored.end());
    std::stable_sort(all.begin(), all.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    if (all.empty()) return 0.0;

    std::vector<double> precision(all.size()), recall(all.size());
    long long tp = 0, fp = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (all[i].second) ++tp; else ++fp;
        precision[i] = static_cast<double>(tp) / static_cast<double>(tp + fp);
        recall[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
    }

    // All-point interpolation: precision envelope from the right.
    for (std::size_t i = all.size() - 1; i > 0; --i)
        precision[i - 1] = std::max(precision[i - 1], precision[i]);

    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    return ap;
}

MetricReport evaluate(const std::vector<VolumeMatches>& volumes,
                      const std::vector<double>& fp_thresholds) {
    MetricReport r;
    const FrocResult fr = froc(volumes, fp_thresholds);
    r.map = average_precision(volumes);
    r.froc_points = fr.points;
    r.fp_thresholds = fp_thresholds;
    r.sens_at_fp = fr.sens_at_fp;
    r.n_volumes = static_cast<int>(volumes.size());
    for (const auto& v : volumes) r.n_gt += v.n_gt;
    return r;
}

MetricReport aggregate_folds(const std::vector<MetricReport>& reports) {
    if (reports.empty()) throw DataError("aggregate_folds: no fold reports");
    const auto& thresholds = reports.front().fp_thresholds;
    for (const auto& r : reports)
        if (r.fp_thresholds != thresholds)
            throw DataError("aggregate_folds: FP threshold lists differ between folds");

    MetricReport agg;
    agg.fp_thresholds = thresholds;
    agg.sens_at_fp.assign(thresholds.size(), 0.0);
    const double n = static_cast<double>(reports.size());
    for (const auto& r : reports) {
        agg.map += r.map / n;
        for (std::size_t i = 0; i < thresholds.size(); ++i)
            agg.sens_at_fp[i] += r.sens_at_fp[i] / n;
        agg.n_volumes += r.n_volumes;
        agg.n_gt += r.n_gt;
    }
    agg.per_fold = reports;
    return agg;
}

int fold_of_study(const std::string& study_id, int n_folds) {
    if (n_folds < 1) throw ConfigError("fold_of_study: n_folds must be >= 1");
    return static_cast<int>(fnv1a64(study_id.data(), study_id.size()) %
                            static_cast<std::uint64_t>(n_folds));
}

std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

namespace {

std::string format_threshold(double f) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", f);
    return buf;
}

}  // namespace

std::string report_csv_header(const std::vector<double>& fp_thresholds) {
    std::string header = "mAP";
    for (const double f : fp_thresholds) header += ",S@" + format_threshold(f);
    return header;
}

void render_report(const MetricReport& r, ReportFormat fmt, const std::filesystem::path& path,
                   const std::string& config_hash) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string() + ": cannot open for writing");

    if (fmt == ReportFormat::csv) {
        out << report_csv_header(r.fp_thresholds) << "\n";
        out << format_metric(r.map);
        for (const double s : r.sens_at_fp) out << "," << format_metric(s);
        out << "\n";
        for (std::size_t fi = 0; fi < r.per_fold.size(); ++fi) {
            out << format_metric(r.per_fold[fi].map);
            for (const double s : r.per_fold[fi].sens_at_fp) out << "," << format_metric(s);
            out << "\n";
        }
        if (!config_hash.empty()) out << "# config=" << config_hash << "\n";
        if (!out) throw DataError(path.string() + ": write failed");
        return;
    }

    // FROC curve as a standalone SVG.
    const int W = 480, H = 360, ml = 50, mb = 40, mt = 16, mr = 16;
    const double max_fp =
        r.fp_thresholds.empty() ? 8.0 : *std::max_element(r.fp_thresholds.begin(), r.fp_thresholds.end());
    auto px = [&](double f) { return ml + (W - ml - mr) * std::min(f, max_fp) / max_fp; };
    auto py = [&](double s) { return H - mb - (H - mb - mt) * std::clamp(s, 0.0, 1.0); };

    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    out << "  <rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    out << "  <line x1=\"" << ml << "\" y1=\"" << py(0) << "\" x2=\"" << W - mr << "\" y2=\""
        << py(0) << "\" stroke=\"black\"/>\n";
    out << "  <line x1=\"" << ml << "\" y1=\"" << py(0) << "\" x2=\"" << ml << "\" y2=\"" << py(1)
        << "\" stroke=\"black\"/>\n";
    out << "  <text x=\"" << (W / 2) << "\" y=\"" << (H - 8)
        << "\" font-size=\"12\" text-anchor=\"middle\">mean FP per volume</text>\n";
    out << "  <text x=\"14\" y=\"" << (H / 2)
        << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << (H / 2)
        << ")\">sensitivity</text>\n";
    if (!r.froc_points.empty()) {
        out << "  <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
        for (const auto& pt : r.froc_points)
            out << px(pt.fp_per_vol) << "," << py(pt.sensitivity) << " ";
        out << "\"/>\n";
    }
    for (std::size_t i = 0; i < r.fp_thresholds.size() && i < r.sens_at_fp.size(); ++i) {
        out << "  <circle cx=\"" << px(r.fp_thresholds[i]) << "\" cy=\"" << py(r.sens_at_fp[i])
            << "\" r=\"3\" fill=\"#d62728\"/>\n";
        out << "  <text x=\"" << px(r.fp_thresholds[i]) << "\" y=\"" << py(0) + 14
            << "\" font-size=\"10\" text-anchor=\"middle\">" << format_threshold(r.fp_thresholds[i])
            << "</text>\n";
    }
    if (!config_hash.empty())
        out << "  <!-- config=" << config_hash << " -->\n";
    out << "</svg>\n";
    if (!out) throw DataError(path.string() + ": write failed");
}

}  // namespace lndet::eval
