#include "lndet/wbf.hpp"

#include <algorithm>
#include <map>

namespace lndet::wbf {

namespace {

// Descending score; ties by (slice, x0, y0, x1, y1) ascending.
bool det_order(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.slice != b.slice) return a.slice < b.slice;
    if (a.box.x0 != b.box.x0) return a.box.x0 < b.box.x0;
    if (a.box.y0 != b.box.y0) return a.box.y0 < b.box.y0;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    return a.box.y1 < b.box.y1;
}

struct Cluster {
    std::vector<Detection> members;
    Box fused;

    void refresh() {
        double wsum = 0.0;
        for (const auto& m : members) wsum += m.score;
        Box acc{0, 0, 0, 0};
        if (wsum > 0.0) {
            for (const auto& m : members) {
                acc.x0 += m.score * m.box.x0;
                acc.y0 += m.score * m.box.y0;
                acc.x1 += m.score * m.box.x1;
                acc.y1 += m.score * m.box.y1;
            }
            fused = Box{acc.x0 / wsum, acc.y0 / wsum, acc.x1 / wsum, acc.y1 / wsum};
        } else {  // all-zero scores: plain mean
            for (const auto& m : members) {
                acc.x0 += m.box.x0;
                acc.y0 += m.box.y0;
                acc.x1 += m.box.x1;
                acc.y1 += m.box.y1;
            }
            const double n = static_cast<double>(members.size());
            fused = Box{acc.x0 / n, acc.y0 / n, acc.x1 / n, acc.y1 / n};
        }
    }

    double mean_score() const {
        double s = 0.0;
        for (const auto& m : members) s += m.score;
        return s / static_cast<double>(members.size());
    }
};

}  // namespace

std::vector<Detection> fuse_slice(const std::vector<Detection>& dets, const WbfConfig& cfg) {
    cfg.validate();
    if (dets.empty()) return {};
    const int slice = dets.front().slice;
    for (const auto& d : dets)
        if (d.slice != slice)
            throw DataError("wbf: fuse_slice received detections from mixed slices");

    std::vector<Detection> sorted = dets;
    std::sort(sorted.begin(), sorted.end(), det_order);

    std::vector<Cluster> clusters;
    for (const auto& d : sorted) {
        bool joined = false;
        for (auto& c : clusters) {
            if (iou(c.fused, d.box) > cfg.iou_thr) {
                c.members.push_back(d);
                c.refresh();
                joined = true;
                break;
            }
        }
        if (!joined) {
            Cluster c;
            c.members.push_back(d);
            c.refresh();
            clusters.push_back(std::move(c));
        }
    }

    std::vector<Detection> out;
    const double T = static_cast<double>(cfg.num_sources);
    for (const auto& c : clusters) {
        const double n = static_cast<double>(c.members.size());
        Detection d;
        d.slice = slice;
        d.box = c.fused;
        d.score = c.mean_score() * std::min(n, T) / T;
        d.source_id = "wbf";
        if (d.score < cfg.score_floor) continue;
        out.push_back(d);
    }
    std::sort(out.begin(), out.end(), det_order);
    return out;
}

DetectionsFile fuse_study(const std::vector<DetectionsFile>& per_source, const WbfConfig& cfg) {
    cfg.validate();
    if (per_source.empty()) throw DataError("wbf: no detection files to fuse");
    const std::string& study = per_source.front().study_id;
    for (const auto& f : per_source)
        if (f.study_id != study)
            throw DataError("wbf: study_id mismatch: \"" + f.study_id + "\" vs \"" + study + "\"");

    std::map<int, std::vector<Detection>> by_slice;
    for (const auto& f : per_source)
        for (const auto& d : f.items) by_slice[d.slice].push_back(d);

    DetectionsFile out;
    out.study_id = study;
    std::vector<std::string> sources;
    for (const auto& f : per_source) sources.push_back(f.source_id);
    std::sort(sources.begin(), sources.end());
    out.source_id = "wbf:";
    for (std::size_t i = 0; i < sources.size(); ++i)
        out.source_id += (i ? "," : "") + sources[i];

    for (auto& [slice, dets] : by_slice) {
        auto fused = fuse_slice(dets, cfg);
        for (auto& d : fused) d.source_id = out.source_id;
        out.items.insert(out.items.end(), fused.begin(), fused.end());
    }
    return out;
}

}  // namespace lndet::wbf
