#include "lndet/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "lndet/rng.hpp"

namespace lndet {

using nlohmann::json;

void ExperimentConfig::validate() const {
    ill.validate();
    aug.validate();
    preprocess.validate();
    detector.validate();
    train.validate();
    wbf.validate();
    eval.validate();
    if (n_runs < 1) throw ConfigError("experiment: n_runs must be >= 1");
    if (jobs < 1) throw ConfigError("experiment: jobs must be >= 1");
    // ILL interpolates across domains; a silent no-op on single-domain modes
    // would hide misconfiguration, so it is a hard error.
    if (ill.enabled && !mode_uses_both_domains(mode))
        throw ConfigError("experiment: ILL is undefined for single-domain mode " +
                          to_string(mode) + "; use E_12 or E_21");
}

json ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    j["mode"] = lndet::to_string(mode);
    j["n_runs"] = n_runs;
    j["seed"] = seed;
    j["jobs"] = jobs;
    j["ill"] = {{"enabled", ill.enabled},       {"beta_alpha", ill.beta_alpha},
                {"beta_beta", ill.beta_beta},   {"apply_prob", ill.apply_prob},
                {"seed", ill.seed}};
    j["aug"] = {{"flip_prob", aug.flip_prob},
                {"crop", aug.crop},
                {"crop_scale_min", aug.crop_scale_min},
                {"shift_px_max", aug.shift_px_max},
                {"rotate_deg_max", aug.rotate_deg_max},
                {"contrast_range", aug.contrast_range},
                {"gamma_range", aug.gamma_range},
                {"seed", aug.seed}};
    j["preprocess"] = {{"p_low", preprocess.p_low},
                       {"p_high", preprocess.p_high},
                       {"hist_eq_bins", preprocess.hist_eq_bins},
                       {"enable_hist_eq", preprocess.enable_hist_eq},
                       {"n4", preprocess.request_n4}};
    j["detector"] = {{"feature_stride", detector.feature_stride},
                     {"base_channels", {detector.base_c1, detector.base_c2}},
                     {"anchor_scale", detector.anchor_scale},
                     {"atss_topk", detector.atss_topk},
                     {"vfl_alpha", detector.vfl_alpha},
                     {"vfl_gamma", detector.vfl_gamma},
                     {"refine_enabled", detector.refine_enabled},
                     {"score_threshold", detector.score_threshold},
                     {"nms_free", detector.nms_free},
                     {"nms_iou", detector.nms_iou}};
    j["train"] = {{"batch_size", train.batch_size},
                  {"learning_rate", train.learning_rate},
                  {"epochs", train.epochs},
                  {"optimizer", lndet::to_string(train.optimizer)},
                  {"momentum", train.momentum},
                  {"adam_betas", {train.adam_beta1, train.adam_beta2}},
                  {"weight_decay", train.weight_decay},
                  {"checkpoint_keep", train.checkpoint_keep}};
    j["wbf"] = {{"iou_thr", wbf.iou_thr}, {"score_floor", wbf.score_floor}};
    j["eval"] = {{"iou_thr", eval.iou_thr},
                 {"fp_thresholds", eval.fp_thresholds},
                 {"folds", eval.folds},
                 {"test_stride", eval.test_stride}};
    j["paths"] = {{"data_dir", paths.data_dir}, {"out_dir", paths.out_dir}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    try {
        c.name = j.value("name", c.name);
        if (j.contains("mode")) c.mode = composition_mode_from_string(j.at("mode").get<std::string>());
        c.n_runs = j.value("n_runs", c.n_runs);
        c.seed = j.value("seed", c.seed);
        c.jobs = j.value("jobs", c.jobs);
        if (j.contains("ill")) {
            const json& i = j.at("ill");
            c.ill.enabled = i.value("enabled", c.ill.enabled);
            c.ill.beta_alpha = i.value("beta_alpha", c.ill.beta_alpha);
            c.ill.beta_beta = i.value("beta_beta", c.ill.beta_beta);
            c.ill.apply_prob = i.value("apply_prob", c.ill.apply_prob);
            c.ill.seed = i.value("seed", c.ill.seed);
        }
        if (j.contains("aug")) {
            const json& a = j.at("aug");
            c.aug.flip_prob = a.value("flip_prob", c.aug.flip_prob);
            c.aug.crop = a.value("crop", c.aug.crop);
            c.aug.crop_scale_min = a.value("crop_scale_min", c.aug.crop_scale_min);
            c.aug.shift_px_max = a.value("shift_px_max", c.aug.shift_px_max);
            c.aug.rotate_deg_max = a.value("rotate_deg_max", c.aug.rotate_deg_max);
            if (a.contains("contrast_range")) c.aug.contrast_range = a.at("contrast_range").get<std::array<double, 2>>();
            if (a.contains("gamma_range")) c.aug.gamma_range = a.at("gamma_range").get<std::array<double, 2>>();
            c.aug.seed = a.value("seed", c.aug.seed);
        }
        if (j.contains("preprocess")) {
            const json& p = j.at("preprocess");
            c.preprocess.p_low = p.value("p_low", c.preprocess.p_low);
            c.preprocess.p_high = p.value("p_high", c.preprocess.p_high);
            c.preprocess.hist_eq_bins = p.value("hist_eq_bins", c.preprocess.hist_eq_bins);
            c.preprocess.enable_hist_eq = p.value("enable_hist_eq", c.preprocess.enable_hist_eq);
            c.preprocess.request_n4 = p.value("n4", c.preprocess.request_n4);
        }
        if (j.contains("detector")) {
            const json& d = j.at("detector");
            c.detector.feature_stride = d.value("feature_stride", c.detector.feature_stride);
            if (d.contains("base_channels")) {
                c.detector.base_c1 = d.at("base_channels").at(0).get<int>();
                c.detector.base_c2 = d.at("base_channels").at(1).get<int>();
            }
            c.detector.anchor_scale = d.value("anchor_scale", c.detector.anchor_scale);
            c.detector.atss_topk = d.value("atss_topk", c.detector.atss_topk);
            c.detector.vfl_alpha = d.value("vfl_alpha", c.detector.vfl_alpha);
            c.detector.vfl_gamma = d.value("vfl_gamma", c.detector.vfl_gamma);
            c.detector.refine_enabled = d.value("refine_enabled", c.detector.refine_enabled);
            c.detector.score_threshold = d.value("score_threshold", c.detector.score_threshold);
            c.detector.nms_free = d.value("nms_free", c.detector.nms_free);
            c.detector.nms_iou = d.value("nms_iou", c.detector.nms_iou);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            c.train.batch_size = t.value("batch_size", c.train.batch_size);
            c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
            c.train.epochs = t.value("epochs", c.train.epochs);
            if (t.contains("optimizer"))
                c.train.optimizer = optimizer_from_string(t.at("optimizer").get<std::string>());
            c.train.momentum = t.value("momentum", c.train.momentum);
            if (t.contains("adam_betas")) {
                c.train.adam_beta1 = t.at("adam_betas").at(0).get<double>();
                c.train.adam_beta2 = t.at("adam_betas").at(1).get<double>();
            }
            c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
            c.train.checkpoint_keep = t.value("checkpoint_keep", c.train.checkpoint_keep);
        }
        if (j.contains("wbf")) {
            const json& w = j.at("wbf");
            c.wbf.iou_thr = w.value("iou_thr", c.wbf.iou_thr);
            c.wbf.score_floor = w.value("score_floor", c.wbf.score_floor);
        }
        if (j.contains("eval")) {
            const json& e = j.at("eval");
            c.eval.iou_thr = e.value("iou_thr", c.eval.iou_thr);
            if (e.contains("fp_thresholds"))
                c.eval.fp_thresholds = e.at("fp_thresholds").get<std::vector<double>>();
            c.eval.folds = e.value("folds", c.eval.folds);
            c.eval.test_stride = e.value("test_stride", c.eval.test_stride);
        }
        if (j.contains("paths")) {
            const json& p = j.at("paths");
            c.paths.data_dir = p.value("data_dir", c.paths.data_dir);
            c.paths.out_dir = p.value("out_dir", c.paths.out_dir);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: malformed document (") + e.what() + ")");
    }
    return c;
}

std::string ExperimentConfig::hash() const {
    const std::string dump = to_json().dump();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(dump.data(), dump.size())));
    return buf;
}

std::vector<std::string> preset_names() {
    return {"et", "ed", "e12-nsa", "e12-ill", "e21-nsa", "e21-ill"};
}

ExperimentConfig preset(const std::string& name) {
    ExperimentConfig c;
    c.name = name;
    // Defaults tuned for the 96x96 phantom scale; shift range stays within
    // the supplementary's [0,32] bound but a third of the image would be
    // excessive here.
    c.aug.shift_px_max = 8;
    if (name == "et") {
        c.mode = CompositionMode::E_T;
        c.ill.enabled = false;
    } else if (name == "ed") {
        c.mode = CompositionMode::E_D;
        c.ill.enabled = false;
    } else if (name == "e12-nsa") {
        c.mode = CompositionMode::E_12;
        c.ill.enabled = false;
    } else if (name == "e12-ill") {
        c.mode = CompositionMode::E_12;
        c.ill.enabled = true;
    } else if (name == "e21-nsa") {
        c.mode = CompositionMode::E_21;
        c.ill.enabled = false;
    } else if (name == "e21-ill") {
        c.mode = CompositionMode::E_21;
        c.ill.enabled = true;
    } else {
        throw ConfigError("preset: unknown name \"" + name + "\" (available: et, ed, e12-nsa, "
                          "e12-ill, e21-nsa, e21-ill)");
    }
    return c;
}

namespace {

template <typename F>
auto stage(const char* name, F&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(name) + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError(std::string(name) + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(std::string(name) + ": " + e.what());
    }
}

}  // namespace

eval::MetricReport evaluate_detections(const std::filesystem::path& dataset_dir,
                                       const std::vector<DetectionsFile>& fused_per_study,
                                       const EvalConfig& cfg) {
    cfg.validate();
    const auto studies = phantom::load_dataset(dataset_dir);
    std::map<std::string, const Study*> by_id;
    for (const auto& s : studies)
        if (s.split == Split::test) by_id[s.study_id] = &s;

    std::vector<std::pair<std::string, eval::VolumeMatches>> volumes;
    std::map<std::string, bool> seen;
    for (const auto& f : fused_per_study) {
        const auto it = by_id.find(f.study_id);
        if (it == by_id.end())
            throw DataError("eval: detections reference unknown test study \"" + f.study_id + "\"");
        const Study& st = *it->second;
        const auto match = eval::match_detections(f.items, st.annotations, cfg.iou_thr);
        eval::VolumeMatches vm;
        vm.n_gt = static_cast<int>(st.annotations.size());
        for (const auto& dm : match.dets) vm.scored.emplace_back(dm.score, dm.tp);
        volumes.emplace_back(f.study_id, std::move(vm));
        seen[f.study_id] = true;
    }
    // Test studies without a detections file still count as volumes (their
    // GT is missed at every operating point).
    for (const auto& [id, st] : by_id) {
        if (seen.count(id)) continue;
        eval::VolumeMatches vm;
        vm.n_gt = static_cast<int>(st->annotations.size());
        volumes.emplace_back(id, std::move(vm));
    }

    if (cfg.folds > 1) {
        std::vector<std::vector<eval::VolumeMatches>> folds(cfg.folds);
        for (const auto& [id, vm] : volumes)
            folds[eval::fold_of_study(id, cfg.folds)].push_back(vm);
        std::vector<eval::MetricReport> fold_reports;
        for (const auto& fold : folds) {
            long long gt = 0;
            for (const auto& vm : fold) gt += vm.n_gt;
            if (fold.empty() || gt == 0) continue;  // hash partition left this fold empty
            fold_reports.push_back(eval::evaluate(fold, cfg.fp_thresholds));
        }
        if (fold_reports.empty()) throw DataError("eval: every fold is empty");
        return eval::aggregate_folds(fold_reports);
    }

    std::vector<eval::VolumeMatches> flat;
    flat.reserve(volumes.size());
    for (auto& [id, vm] : volumes) flat.push_back(std::move(vm));
    return eval::evaluate(flat, cfg.fp_thresholds);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    const auto t_start = std::chrono::steady_clock::now();
    cfg.validate();
    const std::string hash = cfg.hash();
    const std::filesystem::path out_dir = cfg.paths.out_dir.empty() ? "." : cfg.paths.out_dir;
    std::filesystem::create_directories(out_dir);

    // Load + preprocess once; all runs share the processed studies.
    const std::vector<Study> studies = stage("load", [&] {
        std::vector<Study> raw = phantom::load_dataset(cfg.paths.data_dir);
        std::vector<Study> processed;
        processed.reserve(raw.size());
        for (const auto& s : raw) processed.push_back(preprocess_study(s, cfg.preprocess));
        return processed;
    });

    std::vector<const Study*> train_set, val_set, test_set;
    for (const auto& s : studies) {
        if (s.split == Split::train) train_set.push_back(&s);
        else if (s.split == Split::val) val_set.push_back(&s);
        else test_set.push_back(&s);
    }

    ExperimentResult result;
    // study_id -> per-source detection files
    std::map<std::string, std::vector<DetectionsFile>> per_study_sources;

    for (int r = 0; r < cfg.n_runs; ++r) {
        TrainConfig tcfg = cfg.train;
        tcfg.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(r));

        const TrainResult tr = stage("train", [&] {
            return train(train_set, val_set, cfg.mode, cfg.ill, cfg.aug, tcfg, cfg.detector,
                         cfg.jobs);
        });

        RunSummary summary;
        summary.seed = tcfg.seed;
        summary.diverged = tr.diverged;
        const auto run_dir = out_dir / ("runs/run_" + std::to_string(r));
        for (std::size_t k = 0; k < tr.checkpoints.size(); ++k) {
            const Checkpoint& ckpt = tr.checkpoints[k];
            summary.checkpoints.emplace_back(ckpt.epoch, ckpt.val_loss);
            const std::string source =
                "run" + std::to_string(r) + "/epoch" + std::to_string(ckpt.epoch);
            stage("checkpoint", [&] {
                save_checkpoint(ckpt, run_dir / ("ckpt_" + std::to_string(k)));
                return 0;
            });

            stage("predict", [&] {
                for (const Study* st : test_set) {
                    DetectionsFile f;
                    f.study_id = st->study_id;
                    f.source_id = source;
                    f.items = predict(ckpt.params, *st, cfg.mode, cfg.detector, source,
                                      cfg.eval.test_stride);
                    save_detections(f, run_dir / ("ckpt_" + std::to_string(k)) / "detections" /
                                           (st->study_id + ".json"));
                    per_study_sources[st->study_id].push_back(std::move(f));
                }
                return 0;
            });
        }
        result.runs.push_back(std::move(summary));
    }

    int n_sources = 0;
    for (const auto& run : result.runs) n_sources += static_cast<int>(run.checkpoints.size());
    result.wbf_sources = n_sources;

    std::vector<DetectionsFile> fused;
    stage("fuse", [&] {
        wbf::WbfConfig wcfg = cfg.wbf;
        wcfg.num_sources = std::max(1, n_sources);
        for (const Study* st : test_set) {
            auto it = per_study_sources.find(st->study_id);
            if (it == per_study_sources.end()) continue;
            DetectionsFile f = wbf::fuse_study(it->second, wcfg);
            save_detections(f, out_dir / "fused" / (st->study_id + ".json"));
            fused.push_back(std::move(f));
        }
        return 0;
    });

    result.report = stage("eval", [&] {
        return evaluate_detections(cfg.paths.data_dir, fused, cfg.eval);
    });

    stage("report", [&] {
        eval::render_report(result.report, eval::ReportFormat::csv, out_dir / "report.csv", hash);
        eval::render_report(result.report, eval::ReportFormat::svg, out_dir / "froc.svg", hash);
        return 0;
    });

    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    json log;
    log["config"] = cfg.to_json();
    log["config_hash"] = hash;
    log["wbf_sources"] = result.wbf_sources;
    log["wall_seconds"] = result.wall_seconds;
    json runs = json::array();
    for (const auto& run : result.runs) {
        json jr;
        jr["seed"] = run.seed;
        jr["diverged"] = run.diverged;
        json cks = json::array();
        for (const auto& [epoch, vl] : run.checkpoints)
            cks.push_back({{"epoch", epoch}, {"val_loss", vl}});
        jr["checkpoints"] = cks;
        runs.push_back(jr);
    }
    log["runs"] = runs;
    std::ofstream log_out(out_dir / "run_log.json", std::ios::binary);
    log_out << log.dump(2) << "\n";

    return result;
}

NamedReportRow parse_report_csv(const std::filesystem::path& path, const std::string& name) {
    std::ifstream in(path);
    if (!in) throw DataError(path.string() + ": missing or unreadable");
    std::string header, row;
    if (!std::getline(in, header) || !std::getline(in, row))
        throw DataError(path.string() + ": expected a header and a value row");

    NamedReportRow out;
    out.name = name;
    std::stringstream hs(header), rs(row);
    std::string hcell, rcell;
    bool first = true;
    while (std::getline(hs, hcell, ',')) {
        if (!std::getline(rs, rcell, ','))
            throw DataError(path.string() + ": value row shorter than header");
        const double v = std::stod(rcell);
        if (first) {
            if (hcell != "mAP") throw DataError(path.string() + ": first column must be mAP");
            out.map = v;
            first = false;
        } else {
            if (hcell.rfind("S@", 0) != 0)
                throw DataError(path.string() + ": unexpected column \"" + hcell + "\"");
            out.sens_at_fp.push_back(v);
        }
    }
    return out;
}

void compare_reports(const std::vector<std::filesystem::path>& reports, std::size_t baseline,
                     const std::filesystem::path& out_csv, const std::filesystem::path& out_svg) {
    if (reports.size() < 2) throw ConfigError("compare: need at least two reports");
    if (baseline >= reports.size()) throw ConfigError("compare: baseline index out of range");

    std::vector<NamedReportRow> rows;
    for (const auto& p : reports) {
        std::string name = p.filename() == "report.csv" && p.has_parent_path()
                               ? p.parent_path().filename().string()
                               : p.stem().string();
        rows.push_back(parse_report_csv(p, name));
    }
    const std::size_t n_cols = rows.front().sens_at_fp.size();
    for (const auto& r : rows)
        if (r.sens_at_fp.size() != n_cols)
            throw DataError("compare: reports have different S@ column counts");

    if (out_csv.has_parent_path()) std::filesystem::create_directories(out_csv.parent_path());
    std::ofstream csv(out_csv, std::ios::binary);
    if (!csv) throw DataError(out_csv.string() + ": cannot open for writing");
    // Table-order metric columns after the experiment label.
    csv << "experiment,mAP,S@0.5,S@1,S@2,S@4,S@6,S@8\n";
    auto write_row = [&](const std::string& name, double map, const std::vector<double>& sens) {
        csv << name << "," << eval::format_metric(map);
        for (const double s : sens) csv << "," << eval::format_metric(s);
        csv << "\n";
    };
    for (const auto& r : rows) write_row(r.name, r.map, r.sens_at_fp);
    const NamedReportRow& base = rows[baseline];
    for (const auto& r : rows) {
        std::vector<double> delta(r.sens_at_fp.size());
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = r.sens_at_fp[i] - base.sens_at_fp[i];
        write_row("delta:" + r.name, r.map - base.map, delta);
    }

    // Overlay: S@FP polyline per report.
    const int W = 480, H = 360, ml = 50, mb = 40, mt = 16, mr = 110;
    const std::vector<double> fps{0.5, 1, 2, 4, 6, 8};
    auto px = [&](double f) { return ml + (W - ml - mr) * f / fps.back(); };
    auto py = [&](double s) { return H - mb - (H - mb - mt) * std::clamp(s, 0.0, 1.0); };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    if (out_svg.has_parent_path()) std::filesystem::create_directories(out_svg.parent_path());
    std::ofstream svg(out_svg, std::ios::binary);
    if (!svg) throw DataError(out_svg.string() + ": cannot open for writing");
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    svg << "  <rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    svg << "  <line x1=\"" << ml << "\" y1=\"" << py(0) << "\" x2=\"" << W - mr << "\" y2=\"" << py(0)
        << "\" stroke=\"black\"/>\n";
    svg << "  <line x1=\"" << ml << "\" y1=\"" << py(0) << "\" x2=\"" << ml << "\" y2=\"" << py(1)
        << "\" stroke=\"black\"/>\n";
    for (std::size_t ri = 0; ri < rows.size(); ++ri) {
        const auto& r = rows[ri];
        const char* color = colors[ri % 6];
        svg << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < r.sens_at_fp.size() && i < fps.size(); ++i)
            svg << px(fps[i]) << "," << py(r.sens_at_fp[i]) << " ";
        svg << "\"/>\n";
        svg << "  <text x=\"" << (W - mr + 8) << "\" y=\"" << (mt + 14 * (ri + 1))
            << "\" font-size=\"11\" fill=\"" << color << "\">" << r.name << "</text>\n";
    }
    svg << "</svg>\n";
}

}  // namespace lndet
