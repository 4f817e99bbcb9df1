// lndet: phantom mpMRI lymph-node detection pipeline.
// Subcommands: phantom, preprocess, train, predict, fuse, eval, experiment, compare.
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical fault.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lndet/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw lndet::DataError(p.string() + ": missing or unreadable");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw lndet::ConfigError(p.string() + ": malformed JSON (" + e.what() + ")");
    }
    return j;
}

lndet::ExperimentConfig resolve_config(const std::string& preset_name,
                                       const std::string& config_path) {
    lndet::ExperimentConfig cfg =
        preset_name.empty() ? lndet::ExperimentConfig{} : lndet::preset(preset_name);
    if (!config_path.empty()) {
        json merged = cfg.to_json();
        merged.merge_patch(read_json(config_path));
        cfg = lndet::ExperimentConfig::from_json(merged);
    }
    return cfg;
}

std::vector<lndet::DetectionsFile> load_detection_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<lndet::DetectionsFile> out;
    for (const auto& f : files) out.push_back(lndet::load_detections(f));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"phantom mpMRI lymph-node detection pipeline"};
    app.require_subcommand(1);

    std::string config_path, preset_name, out_dir, data_dir;
    std::uint64_t seed = 0;
    bool seed_set = false, print_config = false;
    int jobs = 0;

    app.add_option("--config", config_path, "JSON config file (overrides preset values)");
    app.add_option("--preset", preset_name, "experiment preset: et, ed, e12-nsa, e12-ill, e21-nsa, e21-ill");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--data", data_dir, "dataset directory");
    app.add_option("--seed", seed, "master seed")->each([&](const std::string&) { seed_set = true; });
    app.add_option("--jobs", jobs, "worker threads for batch gradients");
    app.add_flag("--print-config", print_config, "echo the fully resolved config and exit");

    // phantom gen
    auto* cmd_phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
    int n_train = 60, n_val = 10, n_test = 20;
    cmd_phantom->add_option("--train", n_train, "training studies");
    cmd_phantom->add_option("--val", n_val, "validation studies");
    cmd_phantom->add_option("--test", n_test, "test studies");

    auto* cmd_pre = app.add_subcommand("preprocess", "normalize + equalize a dataset to a new directory");

    auto* cmd_train = app.add_subcommand("train", "train one detector run");
    int dump_samples = 0;
    cmd_train->add_option("--dump-samples", dump_samples, "write the first N training samples as PNG triplets");

    auto* cmd_predict = app.add_subcommand("predict", "run a checkpoint over the test split");
    std::string ckpt_dir;
    cmd_predict->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();

    auto* cmd_fuse = app.add_subcommand("fuse", "weighted boxes fusion of detection files");
    std::vector<std::string> fuse_inputs;
    double fuse_iou = 0.55;
    int fuse_sources = 0;
    cmd_fuse->add_option("inputs", fuse_inputs, "detection .json files or directories")->required();
    cmd_fuse->add_option("--iou-thr", fuse_iou, "cluster matching IoU");
    cmd_fuse->add_option("--num-sources", fuse_sources, "number of contributing sources T (default: input count)");

    auto* cmd_eval = app.add_subcommand("eval", "evaluate detections against dataset ground truth");
    std::string gt_dir, dets_path;
    double eval_iou = 0.25;
    std::string fp_list = "0.5,1,2,4,6,8";
    int folds = 0;
    cmd_eval->add_option("--gt", gt_dir, "dataset directory with ground truth")->required();
    cmd_eval->add_option("--dets", dets_path, "fused detections directory")->required();
    cmd_eval->add_option("--iou", eval_iou, "matching IoU threshold");
    cmd_eval->add_option("--fp", fp_list, "comma-separated FP/volume thresholds");
    cmd_eval->add_option("--folds", folds, "aggregate over hash-partitioned folds");

    auto* cmd_experiment = app.add_subcommand("experiment", "full pipeline: train, predict, fuse, eval, report");
    int n_runs = 0;
    cmd_experiment->add_option("--runs", n_runs, "number of independent runs");

    auto* cmd_compare = app.add_subcommand("compare", "comparison table + FROC overlay from report.csv files");
    std::vector<std::string> compare_inputs;
    std::size_t baseline = 0;
    cmd_compare->add_option("reports", compare_inputs, "report.csv paths")->required();
    cmd_compare->add_option("--baseline", baseline, "baseline row index for deltas");

    for (auto* sub : app.get_subcommands({})) sub->fallthrough(true);

    CLI11_PARSE(app, argc, argv);

    try {
        lndet::ExperimentConfig cfg = resolve_config(preset_name, config_path);
        if (seed_set) cfg.seed = seed;
        if (!out_dir.empty()) cfg.paths.out_dir = out_dir;
        if (!data_dir.empty()) cfg.paths.data_dir = data_dir;
        if (jobs > 0) cfg.jobs = jobs;
        if (n_runs > 0) cfg.n_runs = n_runs;

        if (print_config) {
            std::cout << cfg.to_json().dump(2) << "\n";
            return 0;
        }

        if (*cmd_phantom) {
            lndet::phantom::PhantomConfig pcfg;
            pcfg.seed = seed_set ? seed : pcfg.seed;
            if (!config_path.empty()) {
                const json j = read_json(config_path);
                if (j.contains("phantom")) {
                    const json& p = j.at("phantom");
                    if (p.contains("dims")) pcfg.dims = p.at("dims").get<std::array<int, 3>>();
                    if (p.contains("spacing_mm")) pcfg.spacing_mm = p.at("spacing_mm").get<std::array<double, 3>>();
                    pcfg.nodes_min = p.value("nodes_min", pcfg.nodes_min);
                    pcfg.nodes_max = p.value("nodes_max", pcfg.nodes_max);
                    pcfg.sad_min_mm = p.value("sad_min_mm", pcfg.sad_min_mm);
                    pcfg.sad_max_mm = p.value("sad_max_mm", pcfg.sad_max_mm);
                    pcfg.background_texture = p.value("background_texture", pcfg.background_texture);
                    pcfg.t2_node_contrast = p.value("t2_node_contrast", pcfg.t2_node_contrast);
                    pcfg.dwi_node_contrast = p.value("dwi_node_contrast", pcfg.dwi_node_contrast);
                    pcfg.dwi_blur_sigma = p.value("dwi_blur_sigma", pcfg.dwi_blur_sigma);
                    pcfg.bias_field_amp = p.value("bias_field_amp", pcfg.bias_field_amp);
                    if (p.contains("dwi_b_values")) pcfg.dwi_b_values = p.at("dwi_b_values").get<std::vector<double>>();
                    if (p.contains("domain_shift")) {
                        const json& d = p.at("domain_shift");
                        pcfg.domain_shift.gain = d.value("gain", pcfg.domain_shift.gain);
                        pcfg.domain_shift.offset = d.value("offset", pcfg.domain_shift.offset);
                        pcfg.domain_shift.node_contrast_scale =
                            d.value("node_contrast_scale", pcfg.domain_shift.node_contrast_scale);
                        pcfg.domain_shift.extra_blur_sigma =
                            d.value("extra_blur_sigma", pcfg.domain_shift.extra_blur_sigma);
                    }
                    pcfg.seed = p.value("seed", pcfg.seed);
                }
            }
            if (cfg.paths.out_dir.empty()) throw lndet::ConfigError("phantom: --out is required");
            const auto manifest = lndet::phantom::generate_dataset(pcfg, n_train, n_val, n_test,
                                                                   cfg.paths.out_dir);
            std::cout << "generated " << manifest.studies.size() << " studies under "
                      << cfg.paths.out_dir << " (config " << manifest.config_hash << ")\n";
            return 0;
        }

        if (*cmd_pre) {
            if (cfg.paths.data_dir.empty() || cfg.paths.out_dir.empty())
                throw lndet::ConfigError("preprocess: --data and --out are required");
            const auto manifest = lndet::phantom::load_manifest(cfg.paths.data_dir);
            fs::create_directories(cfg.paths.out_dir);
            for (const auto& e : manifest.studies) {
                const lndet::Study s = lndet::load_study(fs::path(cfg.paths.data_dir) / e.path);
                lndet::save_study(lndet::preprocess_study(s, cfg.preprocess),
                                  fs::path(cfg.paths.out_dir) / e.path);
            }
            fs::copy_file(fs::path(cfg.paths.data_dir) / "manifest.json",
                          fs::path(cfg.paths.out_dir) / "manifest.json",
                          fs::copy_options::overwrite_existing);
            std::cout << "preprocessed " << manifest.studies.size() << " studies\n";
            return 0;
        }

        if (*cmd_train) {
            if (cfg.paths.data_dir.empty() || cfg.paths.out_dir.empty())
                throw lndet::ConfigError("train: --data and --out are required");
            const auto studies_raw = lndet::phantom::load_dataset(cfg.paths.data_dir);
            std::vector<lndet::Study> studies;
            for (const auto& s : studies_raw)
                studies.push_back(lndet::preprocess_study(s, cfg.preprocess));
            std::vector<const lndet::Study*> train_set, val_set;
            for (const auto& s : studies) {
                if (s.split == lndet::Split::train) train_set.push_back(&s);
                if (s.split == lndet::Split::val) val_set.push_back(&s);
            }
            lndet::TrainConfig tcfg = cfg.train;
            tcfg.seed = cfg.seed;

            if (dump_samples > 0) {
                for (int i = 0; i < dump_samples && i < static_cast<int>(train_set.size()); ++i) {
                    const auto slices = lndet::enumerate_keyslices(*train_set[i]);
                    if (slices.empty()) continue;
                    lndet::Rng ri = lndet::Rng::keyed(cfg.seed, 1000 + i);
                    lndet::Rng ra = lndet::Rng::keyed(cfg.seed, 2000 + i);
                    const auto sample = lndet::make_training_sample(
                        *train_set[i], slices.front(), cfg.mode, cfg.ill, cfg.aug, ri, ra);
                    lndet::dump_sample(sample, fs::path(cfg.paths.out_dir) / "samples",
                                       "sample_" + std::to_string(i));
                }
            }

            const auto result = lndet::train(train_set, val_set, cfg.mode, cfg.ill, cfg.aug, tcfg,
                                             cfg.detector, cfg.jobs);
            for (std::size_t k = 0; k < result.checkpoints.size(); ++k)
                lndet::save_checkpoint(result.checkpoints[k],
                                       fs::path(cfg.paths.out_dir) / ("ckpt_" + std::to_string(k)));
            for (const auto& e : result.history)
                std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss "
                          << e.val_loss << "\n";
            std::cout << "kept " << result.checkpoints.size() << " checkpoints under "
                      << cfg.paths.out_dir << (result.diverged ? " (diverged)" : "") << "\n";
            return result.diverged ? 4 : 0;
        }

        if (*cmd_predict) {
            if (cfg.paths.data_dir.empty() || cfg.paths.out_dir.empty())
                throw lndet::ConfigError("predict: --data and --out are required");
            const auto ckpt = lndet::load_checkpoint(ckpt_dir);
            const auto studies_raw = lndet::phantom::load_dataset(cfg.paths.data_dir);
            int count = 0;
            for (const auto& raw : studies_raw) {
                if (raw.split != lndet::Split::test) continue;
                const lndet::Study s = lndet::preprocess_study(raw, cfg.preprocess);
                lndet::DetectionsFile f;
                f.study_id = s.study_id;
                f.source_id = ckpt_dir;
                f.items = lndet::predict(ckpt.params, s, cfg.mode, ckpt.params.cfg, ckpt_dir,
                                         cfg.eval.test_stride);
                lndet::save_detections(f, fs::path(cfg.paths.out_dir) / (s.study_id + ".json"));
                ++count;
            }
            std::cout << "predicted " << count << " test studies\n";
            return 0;
        }

        if (*cmd_fuse) {
            if (cfg.paths.out_dir.empty()) throw lndet::ConfigError("fuse: --out is required");
            // Inputs: files -> one group (all same study); directories -> one
            // source per directory, fused per study.
            lndet::wbf::WbfConfig wcfg;
            wcfg.iou_thr = fuse_iou;
            std::map<std::string, std::vector<lndet::DetectionsFile>> groups;
            int source_count = 0;
            for (const auto& input : fuse_inputs) {
                if (fs::is_directory(input)) {
                    ++source_count;
                    for (auto& f : load_detection_dir(input)) groups[f.study_id].push_back(std::move(f));
                } else {
                    ++source_count;
                    auto f = lndet::load_detections(input);
                    groups[f.study_id].push_back(std::move(f));
                }
            }
            wcfg.num_sources = fuse_sources > 0 ? fuse_sources : source_count;
            for (const auto& [study, files] : groups) {
                const auto fused = lndet::wbf::fuse_study(files, wcfg);
                lndet::save_detections(fused, fs::path(cfg.paths.out_dir) / (study + ".json"));
            }
            std::cout << "fused " << groups.size() << " studies from " << source_count
                      << " sources\n";
            return 0;
        }

        if (*cmd_eval) {
            lndet::EvalConfig ecfg = cfg.eval;
            ecfg.iou_thr = eval_iou;
            ecfg.folds = folds;
            ecfg.fp_thresholds.clear();
            std::stringstream ss(fp_list);
            std::string tok;
            while (std::getline(ss, tok, ',')) ecfg.fp_thresholds.push_back(std::stod(tok));
            const auto dets = fs::is_directory(dets_path)
                                  ? load_detection_dir(dets_path)
                                  : std::vector<lndet::DetectionsFile>{lndet::load_detections(dets_path)};
            const auto report = lndet::evaluate_detections(gt_dir, dets, ecfg);
            const fs::path out = cfg.paths.out_dir.empty() ? fs::path(".") : fs::path(cfg.paths.out_dir);
            lndet::eval::render_report(report, lndet::eval::ReportFormat::csv, out / "report.csv",
                                       cfg.hash());
            lndet::eval::render_report(report, lndet::eval::ReportFormat::svg, out / "froc.svg",
                                       cfg.hash());
            std::cout << lndet::eval::report_csv_header(ecfg.fp_thresholds) << "\n";
            std::cout << lndet::eval::format_metric(report.map);
            for (const double s : report.sens_at_fp) std::cout << "," << lndet::eval::format_metric(s);
            std::cout << "\n";
            return 0;
        }

        if (*cmd_experiment) {
            if (cfg.paths.data_dir.empty() || cfg.paths.out_dir.empty())
                throw lndet::ConfigError("experiment: --data and --out are required");
            const auto result = lndet::run_experiment(cfg);
            std::cout << "experiment " << cfg.name << " done in " << result.wall_seconds
                      << " s; report under " << cfg.paths.out_dir << "\n";
            std::cout << lndet::eval::report_csv_header(cfg.eval.fp_thresholds) << "\n";
            std::cout << lndet::eval::format_metric(result.report.map);
            for (const double s : result.report.sens_at_fp)
                std::cout << "," << lndet::eval::format_metric(s);
            std::cout << "\n";
            return 0;
        }

        if (*cmd_compare) {
            const fs::path out = cfg.paths.out_dir.empty() ? fs::path(".") : fs::path(cfg.paths.out_dir);
            std::vector<fs::path> paths(compare_inputs.begin(), compare_inputs.end());
            lndet::compare_reports(paths, baseline, out / "compare.csv", out / "compare.svg");
            std::cout << "wrote " << (out / "compare.csv").string() << " and "
                      << (out / "compare.svg").string() << "\n";
            return 0;
        }
    } catch (const lndet::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const lndet::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const lndet::NumericError& e) {
        std::cerr << "numerical fault: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
