// Command-line front end: scan / train / eval / predict / ablate / describe.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 runtime error (including training divergence).

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "a4unet/dataset.hpp"
#include "a4unet/kernels.hpp"
#include "a4unet/metrics.hpp"
#include "a4unet/model.hpp"
#include "a4unet/trainer.hpp"

namespace fs = std::filesystem;
using namespace a4;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

struct ModelFlagSet {
    int64_t input_size = -1;
    int64_t in_channels = -1;
    int64_t num_classes = -1;
    std::vector<int64_t> encoder_channels;
    int64_t lk_kernel = -1, lk_dilation = -1;
    std::vector<int64_t> windows;
    int64_t embed_dim = -1, heads = -1, depth = -1;
    int64_t reduction = -1;
    uint64_t model_seed = 0;
    bool model_seed_set = false;
    bool no_dlka = false, no_sspp = false, no_cam = false, no_gates = false;

    void add_flags(CLI::App* cmd) {
        cmd->add_option("--input-size", input_size, "square input resolution (divisible by 16)");
        cmd->add_option("--in-channels", in_channels, "input modalities per sample");
        cmd->add_option("--num-classes", num_classes, "output classes");
        cmd->add_option("--encoder-channels", encoder_channels, "per-stage channel widths")->delimiter(',');
        cmd->add_option("--lk-kernel", lk_kernel, "large-kernel size K");
        cmd->add_option("--lk-dilation", lk_dilation, "large-kernel dilation rate d");
        cmd->add_option("--windows", windows, "bottleneck branch window sizes")->delimiter(',');
        cmd->add_option("--embed-dim", embed_dim, "branch embedding dim");
        cmd->add_option("--heads", heads, "attention heads per branch");
        cmd->add_option("--branch-depth", depth, "Swin blocks per branch");
        cmd->add_option("--reduction", reduction, "attention MLP reduction ratio");
        cmd->add_option("--model-seed", model_seed, "parameter init seed")->each([this](const std::string&) {
            model_seed_set = true;
        });
        cmd->add_flag("--no-dlka", no_dlka, "disable the encoder DLKA blocks");
        cmd->add_flag("--no-sspp", no_sspp, "disable the bottleneck attention branches");
        cmd->add_flag("--no-cam", no_cam, "disable the decoder attention (CAM + gates)");
        cmd->add_flag("--no-gates", no_gates, "disable attention gates only");
    }

    void apply(ModelConfig& cfg) const {
        if (input_size > 0) cfg.input_size = input_size;
        if (in_channels > 0) cfg.in_channels = in_channels;
        if (num_classes > 0) cfg.num_classes = num_classes;
        if (!encoder_channels.empty()) cfg.encoder_channels = encoder_channels;
        if (lk_kernel > 0 || lk_dilation > 0) {
            LkGeometry g = cfg.lk_geometry.empty() ? LkGeometry{} : cfg.lk_geometry[0];
            if (lk_kernel > 0) g.kernel = lk_kernel;
            if (lk_dilation > 0) g.dilation = lk_dilation;
            cfg.lk_geometry = {g};
        }
        if (!windows.empty()) {
            cfg.branches.clear();
            for (int64_t w : windows) {
                SwinBranchConfig b;
                b.window = w;
                cfg.branches.push_back(b);
            }
        }
        for (auto& b : cfg.branches) {
            if (embed_dim > 0) b.embed_dim = embed_dim;
            if (heads > 0) b.heads = heads;
            if (depth > 0) b.depth = depth;
        }
        if (reduction > 0) cfg.attention_reduction = reduction;
        if (model_seed_set) cfg.seed = model_seed;
        if (no_dlka) cfg.ablation.use_dlka = false;
        if (no_sspp) cfg.ablation.use_sspp = false;
        if (no_cam) cfg.ablation.use_cam = false;
        if (no_gates) cfg.attention_gates = false;
    }
};

struct TrainFlagSet {
    int64_t batch_size = -1, epochs = -1, runs = -1, folds = -1, max_steps = -1, eval_batch = -1;
    double lr = -1.0, weight_decay = -1.0;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string loss;
    bool cosine = false;

    void add_flags(CLI::App* cmd) {
        cmd->add_option("--batch-size", batch_size, "slices per optimizer step");
        cmd->add_option("--lr", lr, "initial learning rate");
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--weight-decay", weight_decay, "decoupled weight decay");
        cmd->add_option("--seed", seed, "training seed (data order + init default)")->each([this](const std::string&) {
            seed_set = true;
        });
        cmd->add_option("--loss", loss, "loss: dice_ce | ce | dice");
        cmd->add_option("--runs", runs, "independent runs (seed offsets)");
        cmd->add_option("--folds", folds, "subject-level cross-validation folds");
        cmd->add_option("--max-steps", max_steps, "cap on optimizer steps (0 = none)");
        cmd->add_flag("--cosine-lr", cosine, "cosine learning-rate decay");
        cmd->add_option("--eval-batch-size", eval_batch, "validation batch size");
    }

    void apply(TrainConfig& cfg) const {
        if (batch_size > 0) cfg.batch_size = batch_size;
        if (lr > 0) cfg.learning_rate = lr;
        if (epochs > 0) cfg.epochs = epochs;
        if (weight_decay >= 0) cfg.weight_decay = weight_decay;
        if (seed_set) cfg.seed = seed;
        if (!loss.empty()) cfg.loss = loss;
        if (runs > 0) cfg.runs = runs;
        if (folds > 0) cfg.folds = folds;
        if (max_steps >= 0) cfg.max_steps = max_steps;
        if (cosine) cfg.cosine_lr = true;
        if (eval_batch > 0) cfg.eval_batch_size = eval_batch;
    }
};

Json load_config_file(const std::string& path) {
    if (path.empty()) return Json::object();
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    Json j = Json::parse(is, nullptr, false);
    if (j.is_discarded()) throw ConfigError(path + " is not valid JSON");
    return j;
}

ModelConfig model_config_from(const Json& file_cfg, const ModelFlagSet& flags) {
    ModelConfig cfg;
    if (file_cfg.contains("model")) cfg = file_cfg.at("model").get<ModelConfig>();
    flags.apply(cfg);
    cfg.validate();
    return cfg;
}

TrainConfig train_config_from(const Json& file_cfg, const TrainFlagSet& flags) {
    TrainConfig cfg;
    if (file_cfg.contains("train")) cfg = file_cfg.at("train").get<TrainConfig>();
    flags.apply(cfg);
    cfg.validate();
    return cfg;
}

DatasetManifest manifest_or_fail(const std::string& path) {
    if (path.empty()) throw ConfigError("--manifest is required");
    return read_manifest(path);
}

/// subject-level folds, deterministic in seed
std::vector<std::vector<size_t>> make_folds(size_t n, int64_t folds, uint64_t seed) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<size_t>> out(static_cast<size_t>(folds));
    for (size_t i = 0; i < n; ++i) out[i % static_cast<size_t>(folds)].push_back(order[i]);
    return out;
}

int run_train(const std::string& manifest_path, const Json& file_cfg, const ModelFlagSet& mflags,
              const TrainFlagSet& tflags, const std::string& out_dir, const std::string& resume) {
    DatasetManifest manifest = manifest_or_fail(manifest_path);
    ModelConfig mcfg = model_config_from(file_cfg, mflags);
    TrainConfig tcfg = train_config_from(file_cfg, tflags);
    fs::create_directories(out_dir);

    Json summary = Json::array();
    bool any_diverged = false;
    for (int64_t run = 0; run < tcfg.runs; ++run) {
        TrainConfig run_cfg = tcfg;
        run_cfg.seed = tcfg.seed + static_cast<uint64_t>(run);
        ModelConfig run_mcfg = mcfg;
        run_mcfg.seed = mcfg.seed + static_cast<uint64_t>(run);

        std::vector<DatasetManifest> fold_manifests;
        if (tcfg.folds > 1) {
            auto folds = make_folds(manifest.records.size(), tcfg.folds, run_cfg.seed);
            for (int64_t f = 0; f < tcfg.folds; ++f) {
                DatasetManifest fm = manifest;
                for (auto& r : fm.records) r.split = Split::train;
                for (size_t idx : folds[static_cast<size_t>(f)]) fm.records[idx].split = Split::val;
                fold_manifests.push_back(std::move(fm));
            }
        } else {
            fold_manifests.push_back(manifest);
        }

        for (size_t f = 0; f < fold_manifests.size(); ++f) {
            fs::path dir = fs::path(out_dir);
            if (tcfg.runs > 1) dir /= "run" + std::to_string(run);
            if (tcfg.folds > 1) dir /= "fold" + std::to_string(f);
            A4Unet model(run_mcfg);
            TrainOptions opts;
            opts.out_dir = dir.string();
            opts.resume_from = (tcfg.runs == 1 && tcfg.folds == 1) ? resume : "";
            TrainResult r = train_model(model, fold_manifests[f], run_cfg, opts);
            any_diverged = any_diverged || r.diverged;
            summary.push_back(Json{{"run", run},
                                   {"fold", static_cast<int64_t>(f)},
                                   {"best_val_dice", r.best_val_dice},
                                   {"epochs", static_cast<int64_t>(r.log.size())},
                                   {"diverged", r.diverged},
                                   {"best_checkpoint", r.best_checkpoint}});
        }
    }
    std::ofstream os(fs::path(out_dir) / "training_summary.json");
    os << summary.dump(2) << "\n";
    if (any_diverged) {
        std::cerr << "at least one run diverged\n";
        return kExitRuntime;
    }
    std::cout << "training summary written to " << (fs::path(out_dir) / "training_summary.json").string() << "\n";
    return kExitOk;
}

int run_eval(const std::string& manifest_path, const std::vector<std::string>& checkpoints,
             const std::string& split_name, const std::string& out_path, int64_t batch, double percentile) {
    DatasetManifest manifest = manifest_or_fail(manifest_path);
    if (checkpoints.empty()) throw ConfigError("--checkpoint is required");
    const Split split = split_from_string(split_name);

    EvalConfig ec;
    ec.batch_size = batch;
    ec.percentile = percentile;

    std::vector<MetricReport> reports;
    for (const auto& path : checkpoints) {
        CheckpointData data = read_checkpoint(path);
        A4Unet model = model_from_checkpoint(data);
        MetricReport r = evaluate_dataset(model, manifest, split, ec);
        r.run_meta = Json{{"checkpoint", path}, {"split", split_name}, {"percentile", percentile}};
        reports.push_back(std::move(r));
    }

    Json out;
    if (reports.size() == 1) {
        out = report_to_json(reports[0]);
    } else {
        Json runs = Json::array();
        std::vector<double> dsc, miou_v;
        for (const auto& r : reports) {
            runs.push_back(report_to_json(r));
            dsc.push_back(r.dsc_mean);
            miou_v.push_back(r.miou_mean);
        }
        auto mean = [](const std::vector<double>& v) {
            double s = 0;
            for (double x : v) s += x;
            return s / static_cast<double>(v.size());
        };
        auto stdev = [&](const std::vector<double>& v, double m) {
            double ss = 0;
            for (double x : v) ss += (x - m) * (x - m);
            return std::sqrt(ss / static_cast<double>(v.size() - 1));
        };
        const double dm = mean(dsc), mm = mean(miou_v);
        out = Json{{"runs", runs},
                   {"aggregate_across_runs", Json{{"runs", static_cast<int64_t>(reports.size())},
                                                  {"dsc_mean", dm},
                                                  {"dsc_std", stdev(dsc, dm)},
                                                  {"miou_mean", mm},
                                                  {"miou_std", stdev(miou_v, mm)}}}};
    }
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        if (!os) throw DataError("cannot open " + out_path);
        os << out.dump(2) << "\n";
    }
    for (const auto& r : reports) std::cout << report_table(r);
    std::cout << (out_path.empty() ? "" : "report written to " + out_path + "\n");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"A4-Unet brain-tumor segmentation toolkit"};
    app.require_subcommand(1);

    const char* env_root = std::getenv("A4UNET_DATA_ROOT");
    const std::string default_root = env_root ? env_root : "";

    // ----- scan -----
    auto* scan = app.add_subcommand("scan", "index a dataset tree and write a manifest");
    std::string scan_root = default_root, scan_layout = "flat", scan_policy = "whole_tumor_binary";
    std::string scan_out = "manifest.jsonl";
    std::vector<std::string> scan_modalities;
    double scan_train_frac = -1.0, scan_val_frac = -1.0;
    uint64_t scan_seed = 1234;
    scan->add_option("--data-root", scan_root, "dataset root (default: $A4UNET_DATA_ROOT)");
    scan->add_option("--layout", scan_layout, "brats2019 | brats2020 | brats2021 | flat");
    scan->add_option("--modalities", scan_modalities, "modality order override")->delimiter(',');
    scan->add_option("--label-policy", scan_policy, "whole_tumor_binary | raw_labels");
    scan->add_option("--train-frac", scan_train_frac, "assign subject-level splits: train fraction");
    scan->add_option("--val-frac", scan_val_frac, "assign subject-level splits: val fraction");
    scan->add_option("--seed", scan_seed, "split shuffle seed");
    scan->add_option("--out", scan_out, "manifest output path");

    // ----- train -----
    auto* train = app.add_subcommand("train", "train a model from a manifest");
    std::string train_manifest, train_out = "runs", train_config_path, train_resume;
    ModelFlagSet train_mflags;
    TrainFlagSet train_tflags;
    train->add_option("--manifest", train_manifest, "manifest from `scan`")->required();
    train->add_option("--out-dir", train_out, "output directory");
    train->add_option("--config", train_config_path, "JSON config file ({\"model\":…, \"train\":…})");
    train->add_option("--resume", train_resume, "checkpoint to resume from (single run/fold only)");
    train_mflags.add_flags(train);
    train_tflags.add_flags(train);

    // ----- eval -----
    auto* eval = app.add_subcommand("eval", "evaluate checkpoints on a split");
    std::string eval_manifest, eval_split = "val", eval_out;
    std::vector<std::string> eval_ckpts;
    int64_t eval_batch = 8;
    double eval_percentile = 95.0;
    eval->add_option("--manifest", eval_manifest, "manifest from `scan`")->required();
    eval->add_option("--checkpoint", eval_ckpts, "checkpoint path (repeat for multi-run aggregation)")->required();
    eval->add_option("--split", eval_split, "train | val | test");
    eval->add_option("--batch-size", eval_batch, "inference batch size");
    eval->add_option("--percentile", eval_percentile, "Hausdorff percentile");
    eval->add_option("--out", eval_out, "report JSON path");

    // ----- predict -----
    auto* predict = app.add_subcommand("predict", "segment one subject directory");
    std::string pred_ckpt, pred_subject, pred_out = "predictions", pred_layout = "flat";
    std::vector<std::string> pred_modalities;
    bool pred_overlay = false, pred_no_slices = false;
    int64_t pred_slice = -1, pred_batch = 8;
    predict->add_option("--checkpoint", pred_ckpt, "trained checkpoint")->required();
    predict->add_option("--subject-dir", pred_subject, "directory with <id>_<modality>.nii.gz files")->required();
    predict->add_option("--layout", pred_layout, "naming layout for default modalities");
    predict->add_option("--modalities", pred_modalities, "modality order override")->delimiter(',');
    predict->add_option("--out-dir", pred_out, "output directory");
    predict->add_flag("--overlay", pred_overlay, "write overlay images (green truth, red prediction)");
    predict->add_flag("--no-slice-masks", pred_no_slices, "skip per-slice mask files");
    predict->add_option("--slice-index", pred_slice, "predict a single slice only");
    predict->add_option("--batch-size", pred_batch, "inference batch size");

    // ----- ablate -----
    auto* ablate = app.add_subcommand("ablate", "train all eight ablation combinations");
    std::string abl_manifest, abl_out = "ablation", abl_config_path;
    ModelFlagSet abl_mflags;
    TrainFlagSet abl_tflags;
    ablate->add_option("--manifest", abl_manifest, "manifest from `scan`")->required();
    ablate->add_option("--out-dir", abl_out, "output directory");
    ablate->add_option("--config", abl_config_path, "JSON config file");
    abl_mflags.add_flags(ablate);
    abl_tflags.add_flags(ablate);

    // ----- describe -----
    auto* describe = app.add_subcommand("describe", "print the model structure and parameter counts");
    std::string desc_config_path, desc_json_out;
    ModelFlagSet desc_mflags;
    describe->add_option("--config", desc_config_path, "JSON config file");
    describe->add_option("--json", desc_json_out, "also write the structured summary here");
    desc_mflags.add_flags(describe);

    // ----- backend (global) -----
    std::string backend = "openmp";
    app.add_option("--backend", backend, "kernel backend: openmp | serial");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        kernels::set_backend(backend == "serial" ? kernels::Backend::serial : kernels::Backend::openmp);

        if (*scan) {
            if (scan_root.empty())
                throw ConfigError("--data-root is required (or set A4UNET_DATA_ROOT)");
            DatasetManifest m = scan_dataset(scan_root, layout_from_string(scan_layout), scan_modalities,
                                             policy_from_string(scan_policy));
            if (scan_train_frac >= 0.0 || scan_val_frac >= 0.0) {
                const double tf = scan_train_frac < 0 ? 0.8 : scan_train_frac;
                const double vf = scan_val_frac < 0 ? 0.2 : scan_val_frac;
                try {
                    make_splits(m, scan_seed, tf, vf);
                } catch (const DataError& e) {
                    throw ConfigError(e.what());  // bad fractions are a usage problem
                }
            }
            write_manifest(scan_out, m);
            std::cout << "subjects: " << m.records.size() << "\n"
                      << "slices_per_volume: " << m.slices_per_volume << "\n"
                      << "total_slices: " << m.total_slices << "\n"
                      << "manifest written to " << scan_out << "\n";
            return kExitOk;
        }
        if (*train)
            return run_train(train_manifest, load_config_file(train_config_path), train_mflags, train_tflags,
                             train_out, train_resume);
        if (*eval) return run_eval(eval_manifest, eval_ckpts, eval_split, eval_out, eval_batch, eval_percentile);
        if (*predict) {
            CheckpointData data = read_checkpoint(pred_ckpt);
            A4Unet model = model_from_checkpoint(data);
            const fs::path subject(pred_subject);
            if (!fs::is_directory(subject)) throw DataError(pred_subject + " is not a directory");
            const std::string id = subject.filename().string();
            std::vector<std::string> mods =
                pred_modalities.empty() ? default_modalities(layout_from_string(pred_layout)) : pred_modalities;
            VolumeRecord rec;
            rec.subject_id = id;
            for (const auto& mod : mods) {
                for (const char* ext : {".nii.gz", ".nii"}) {
                    fs::path p = subject / (id + "_" + mod + ext);
                    if (fs::exists(p)) {
                        rec.modality_paths[mod] = p.string();
                        break;
                    }
                }
                if (!rec.modality_paths.count(mod))
                    throw DataError(id + ": missing modality '" + mod + "' under " + pred_subject);
            }
            for (const char* ext : {".nii.gz", ".nii"}) {
                fs::path p = subject / (id + "_seg" + ext);
                if (fs::exists(p)) rec.label_path = p.string();
            }
            PredictOptions popts;
            popts.out_dir = pred_out;
            popts.overlays = pred_overlay;
            popts.export_slices = !pred_no_slices;
            popts.batch_size = pred_batch;
            if (pred_slice >= 0) popts.slice_index = pred_slice;
            auto files = predict_volume(model, rec, mods, popts);
            std::cout << "wrote " << files.size() << " files under " << pred_out << "\n";
            return kExitOk;
        }
        if (*ablate) {
            DatasetManifest manifest = manifest_or_fail(abl_manifest);
            Json file_cfg = load_config_file(abl_config_path);
            ModelConfig mcfg = model_config_from(file_cfg, abl_mflags);
            TrainConfig tcfg = train_config_from(file_cfg, abl_tflags);
            TrainOptions opts;
            opts.out_dir = abl_out;
            auto rows = run_ablation_suite(mcfg, tcfg, manifest, opts);
            std::cout << ablation_table(rows);
            return kExitOk;
        }
        if (*describe) {
            ModelConfig cfg = model_config_from(load_config_file(desc_config_path), desc_mflags);
            A4Unet model(cfg);
            std::cout << model.describe_text();
            if (!desc_json_out.empty()) {
                std::ofstream os(desc_json_out);
                if (!os) throw DataError("cannot open " + desc_json_out);
                os << model.describe().dump(2) << "\n";
            }
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
