#include "a4unet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

namespace fs = std::filesystem;

namespace a4 {

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("learning rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
    if (loss != "dice_ce" && loss != "ce" && loss != "dice")
        throw ConfigError("loss must be dice_ce, ce or dice; got '" + loss + "'");
    if (runs < 1) throw ConfigError("runs must be >= 1");
    if (folds < 1) throw ConfigError("folds must be >= 1");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
}

void to_json(Json& j, const TrainConfig& c) {
    j = Json{{"batch_size", c.batch_size},
             {"learning_rate", c.learning_rate},
             {"epochs", c.epochs},
             {"weight_decay", c.weight_decay},
             {"seed", c.seed},
             {"loss", c.loss},
             {"runs", c.runs},
             {"folds", c.folds},
             {"max_steps", c.max_steps},
             {"cosine_lr", c.cosine_lr},
             {"eval_batch_size", c.eval_batch_size}};
}

void from_json(const Json& j, TrainConfig& c) {
    c.batch_size = j.value("batch_size", int64_t{16});
    c.learning_rate = j.value("learning_rate", 1e-5);
    c.epochs = j.value("epochs", int64_t{30});
    c.weight_decay = j.value("weight_decay", 1e-2);
    c.seed = j.value("seed", uint64_t{1234});
    c.loss = j.value("loss", std::string("dice_ce"));
    c.runs = j.value("runs", int64_t{5});
    c.folds = j.value("folds", int64_t{1});
    c.max_steps = j.value("max_steps", int64_t{0});
    c.cosine_lr = j.value("cosine_lr", false);
    c.eval_batch_size = j.value("eval_batch_size", int64_t{8});
}

AdamW::AdamW(std::vector<Variable*> params, double lr, double weight_decay)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Variable* p : params_) {
        m_.emplace_back(p->value().shape());
        v_.emplace_back(p->value().shape());
    }
}

void AdamW::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Variable* p = params_[i];
        if (!p->has_grad()) continue;
        Tensor& theta = p->value_mut();
        const Tensor& g = p->grad();
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (int64_t j = 0; j < theta.numel(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            theta[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * theta[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (Variable* p : params_) p->zero_grad();
}

void AdamW::collect_state(std::vector<std::pair<std::string, Tensor>>& out) const {
    for (size_t i = 0; i < params_.size(); ++i) {
        out.emplace_back("opt/m/" + std::to_string(i), m_[i]);
        out.emplace_back("opt/v/" + std::to_string(i), v_[i]);
    }
}

void AdamW::restore_state(const std::vector<std::pair<std::string, Tensor>>& tensors, int64_t step_count) {
    step_count_ = step_count;
    for (const auto& [name, t] : tensors) {
        if (name.rfind("opt/m/", 0) == 0) {
            const size_t i = static_cast<size_t>(std::stoll(name.substr(6)));
            if (i < m_.size() && t.shape() == m_[i].shape()) m_[i] = t;
        } else if (name.rfind("opt/v/", 0) == 0) {
            const size_t i = static_cast<size_t>(std::stoll(name.substr(6)));
            if (i < v_.size() && t.shape() == v_[i].shape()) v_[i] = t;
        }
    }
}

namespace {

Tensor one_hot_nhwc(const std::vector<int32_t>& targets, int64_t n, int64_t h, int64_t w, int64_t classes) {
    Tensor out({n, h, w, classes});
    for (int64_t i = 0; i < n * h * w; ++i) {
        const int32_t t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= classes)
            throw ShapeError("target label " + std::to_string(t) + " outside 0.." + std::to_string(classes - 1));
        out[i * classes + t] = 1.0;
    }
    return out;
}

}  // namespace

Variable segmentation_loss(const Variable& logits, const std::vector<int32_t>& targets, const std::string& kind) {
    const int64_t n = logits.value().size(0), c = logits.value().size(1);
    const int64_t h = logits.value().size(2), w = logits.value().size(3);
    if (static_cast<int64_t>(targets.size()) != n * h * w)
        throw ShapeError("target count " + std::to_string(targets.size()) + " != N*H*W");
    Variable nhwc = ops::permute(logits, {0, 2, 3, 1});
    Variable onehot = Variable::constant(one_hot_nhwc(targets, n, h, w, c));

    Variable ce, dice_loss;
    if (kind == "ce" || kind == "dice_ce") {
        Variable logp = ops::log_softmax(nhwc);
        ce = ops::neg(ops::mean_all(ops::sum(ops::mul(logp, onehot), {3}, false)));
    }
    if (kind == "dice" || kind == "dice_ce") {
        Variable probs = ops::softmax(nhwc);
        Variable num = ops::sum(ops::mul(probs, onehot), {0, 1, 2}, false);      // [C]
        Variable den = ops::add(ops::sum(probs, {0, 1, 2}, false), ops::sum(onehot, {0, 1, 2}, false));
        Variable dice_c = ops::div(ops::add_scalar(ops::scale(num, 2.0), 1.0), ops::add_scalar(den, 1.0));
        dice_loss = ops::add_scalar(ops::neg(ops::mean_all(dice_c)), 1.0);
    }
    if (kind == "ce") return ce;
    if (kind == "dice") return dice_loss;
    return ops::add(ce, dice_loss);
}

double batch_dice(const Tensor& logits, const std::vector<int32_t>& targets) {
    const auto pred = argmax_over_channel(logits);
    int64_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = targets[i] != 0;
        if (p && g)
            ++tp;
        else if (p)
            ++fp;
        else if (g)
            ++fn;
    }
    const int64_t denom = fn + fp + 2 * tp;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

namespace {

struct PreparedSlice {
    Tensor image;               // [C, S, S]
    std::vector<int32_t> mask;  // S*S
    std::string subject_id;
};

std::vector<PreparedSlice> preload_split(const DatasetManifest& manifest, Split split, int64_t size) {
    std::vector<PreparedSlice> out;
    for (const VolumeRecord* rec : manifest.split_records(split)) {
        LoadedVolume vol = load_volume(*rec, manifest.modalities);
        normalize_volume(vol);
        for (auto& sl : slice_volume(vol, manifest.label_policy, rec->subject_id)) {
            PreparedSlice ps;
            ps.image = center_crop_pad(sl.image, size);
            if (!sl.mask.empty()) ps.mask = center_crop_pad_mask(sl.mask, sl.height, sl.width, size);
            ps.subject_id = sl.subject_id;
            out.push_back(std::move(ps));
        }
    }
    return out;
}

double evaluate_dice_on(A4Unet& model, const std::vector<PreparedSlice>& slices, int64_t batch_size) {
    if (slices.empty()) return 0.0;
    const int64_t size = model.config().input_size;
    const int64_t ch = model.config().in_channels;
    double total = 0.0;
    int64_t counted = 0;
    for (size_t s0 = 0; s0 < slices.size(); s0 += static_cast<size_t>(batch_size)) {
        const size_t s1 = std::min(slices.size(), s0 + static_cast<size_t>(batch_size));
        const int64_t n = static_cast<int64_t>(s1 - s0);
        Tensor batch({n, ch, size, size});
        std::vector<int32_t> targets(static_cast<size_t>(n * size * size));
        for (int64_t i = 0; i < n; ++i) {
            const auto& ps = slices[s0 + static_cast<size_t>(i)];
            std::copy(ps.image.data(), ps.image.data() + ps.image.numel(), batch.data() + i * ps.image.numel());
            std::copy(ps.mask.begin(), ps.mask.end(), targets.begin() + i * size * size);
        }
        Tensor logits = model.infer(batch);
        // per-slice dice, averaged over slices
        const auto pred = argmax_over_channel(logits);
        const int64_t hw = size * size;
        for (int64_t i = 0; i < n; ++i) {
            int64_t tp = 0, fp = 0, fn = 0;
            for (int64_t j = 0; j < hw; ++j) {
                const bool p = pred[static_cast<size_t>(i * hw + j)] != 0;
                const bool g = targets[static_cast<size_t>(i * hw + j)] != 0;
                if (p && g)
                    ++tp;
                else if (p)
                    ++fp;
                else if (g)
                    ++fn;
            }
            const int64_t denom = fn + fp + 2 * tp;
            total += denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
            ++counted;
        }
    }
    return total / static_cast<double>(counted);
}

}  // namespace

void save_training_checkpoint(const std::string& path, A4Unet& model, const AdamW* optimizer,
                              const TrainConfig& cfg, int64_t epochs_completed, double best_val_dice) {
    CheckpointData data;
    Json mcfg, tcfg;
    to_json(mcfg, model.config());
    to_json(tcfg, cfg);
    data.header = Json{{"version", 1},
                       {"model_config", mcfg},
                       {"meta", Json{{"epochs_completed", epochs_completed},
                                     {"best_val_dice", best_val_dice},
                                     {"optimizer_steps", optimizer ? optimizer->step_count() : 0},
                                     {"train_config", tcfg}}}};
    collect_model_tensors(model, data.tensors);
    if (optimizer) optimizer->collect_state(data.tensors);
    write_checkpoint(path, data);
}

A4Unet model_from_checkpoint(const CheckpointData& data) {
    if (!data.header.contains("model_config")) throw DataError("checkpoint lacks model_config");
    ModelConfig cfg = data.header.at("model_config").get<ModelConfig>();
    A4Unet model(cfg);
    load_model_tensors(model, data);
    return model;
}

TrainResult train_model(A4Unet& model, const DatasetManifest& manifest, const TrainConfig& cfg,
                        const TrainOptions& opts) {
    cfg.validate();
    fs::create_directories(opts.out_dir);
    const int64_t size = model.config().input_size;

    auto train_slices = preload_split(manifest, Split::train, size);
    if (train_slices.empty()) throw DataError("train split is empty");
    for (const auto& s : train_slices)
        if (s.mask.empty()) throw DataError(s.subject_id + ": training slice has no labels");
    auto val_slices = preload_split(manifest, Split::val, size);

    nn::ParamCollector pc;
    model.visit(pc);
    std::vector<Variable*> params;
    params.reserve(pc.params.size());
    for (auto& [name, p] : pc.params) params.push_back(p);
    AdamW opt(params, cfg.learning_rate, cfg.weight_decay);

    TrainResult result;
    result.best_checkpoint = (fs::path(opts.out_dir) / "best.ckpt").string();
    result.last_checkpoint = (fs::path(opts.out_dir) / "last.ckpt").string();
    result.log_path = (fs::path(opts.out_dir) / "train_log.jsonl").string();
    result.best_val_dice = -1.0;

    int64_t start_epoch = 0;
    if (!opts.resume_from.empty()) {
        CheckpointData data = read_checkpoint(opts.resume_from);
        load_model_tensors(model, data);
        start_epoch = data.header.at("meta").value("epochs_completed", int64_t{0});
        result.best_val_dice = data.header.at("meta").value("best_val_dice", -1.0);
        opt.restore_state(data.tensors, data.header.at("meta").value("optimizer_steps", int64_t{0}));
    }

    std::ofstream log_file(result.log_path, start_epoch == 0 ? std::ios::trunc : std::ios::app);
    if (!log_file) throw DataError("cannot open " + result.log_path);

    const int64_t n_train = static_cast<int64_t>(train_slices.size());
    const int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t planned_steps =
        cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * steps_per_epoch;

    int64_t global_step = opt.step_count();
    for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        // deterministic per-epoch order, independent of any resume point
        std::vector<int64_t> order(static_cast<size_t>(n_train));
        for (int64_t i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;
        std::mt19937_64 shuffle_rng(cfg.seed * 1000003ULL + static_cast<uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        int64_t loss_count = 0;
        for (int64_t s0 = 0; s0 < n_train; s0 += cfg.batch_size) {
            if (cfg.max_steps > 0 && global_step >= cfg.max_steps) break;
            const int64_t n = std::min(cfg.batch_size, n_train - s0);
            Tensor batch({n, model.config().in_channels, size, size});
            std::vector<int32_t> targets(static_cast<size_t>(n * size * size));
            for (int64_t i = 0; i < n; ++i) {
                const auto& ps = train_slices[static_cast<size_t>(order[static_cast<size_t>(s0 + i)])];
                std::copy(ps.image.data(), ps.image.data() + ps.image.numel(),
                          batch.data() + i * ps.image.numel());
                std::copy(ps.mask.begin(), ps.mask.end(), targets.begin() + i * size * size);
            }
            if (cfg.cosine_lr) {
                const double t = static_cast<double>(global_step) / static_cast<double>(std::max<int64_t>(planned_steps, 1));
                opt.set_lr(cfg.learning_rate * 0.5 * (1.0 + std::cos(t * std::acos(-1.0))));
            }
            opt.zero_grad();
            Variable logits = model.forward_logits(Variable::constant(batch), /*training=*/true);
            Variable loss = segmentation_loss(logits, targets, cfg.loss);
            const double loss_value = loss.value()[0];
            if (!std::isfinite(loss_value)) {
                result.diverged = true;
                if (!opts.quiet)
                    std::cerr << "training diverged (non-finite loss) at step " << global_step
                              << "; last good checkpoint: " << result.last_checkpoint << "\n";
                return result;
            }
            backward(loss);
            opt.step();
            ++global_step;
            loss_sum += loss_value;
            ++loss_count;
        }

        EpochLog entry;
        entry.epoch = epoch + 1;
        entry.train_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
        entry.steps = global_step;
        entry.lr = opt.lr();
        entry.val_dice = val_slices.empty() ? evaluate_dice_on(model, train_slices, cfg.eval_batch_size)
                                            : evaluate_dice_on(model, val_slices, cfg.eval_batch_size);
        result.log.push_back(entry);
        log_file << Json{{"epoch", entry.epoch},
                         {"train_loss", entry.train_loss},
                         {"val_dice", entry.val_dice},
                         {"lr", entry.lr},
                         {"steps", entry.steps}}
                        .dump()
                 << "\n";
        log_file.flush();
        if (!opts.quiet)
            std::cout << "epoch " << entry.epoch << "/" << cfg.epochs << "  loss " << entry.train_loss
                      << "  val_dice " << entry.val_dice << "\n";

        save_training_checkpoint(result.last_checkpoint, model, &opt, cfg, epoch + 1, result.best_val_dice);
        if (entry.val_dice > result.best_val_dice) {
            result.best_val_dice = entry.val_dice;
            save_training_checkpoint(result.best_checkpoint, model, &opt, cfg, epoch + 1, result.best_val_dice);
        }
        if (cfg.max_steps > 0 && global_step >= cfg.max_steps) break;
    }
    return result;
}

std::vector<AblationResult> run_ablation_suite(const ModelConfig& base, const TrainConfig& train_cfg,
                                               const DatasetManifest& manifest, const TrainOptions& opts) {
    static const AblationSwitches kOrder[8] = {
        {false, false, false}, {true, false, false}, {false, true, false}, {false, false, true},
        {true, true, false},   {true, false, true},  {false, true, true},  {true, true, true},
    };
    std::vector<AblationResult> rows;
    fs::create_directories(opts.out_dir);
    for (const auto& sw : kOrder) {
        ModelConfig cfg = base;
        cfg.ablation = sw;
        A4Unet model(cfg);
        TrainOptions run_opts = opts;
        run_opts.out_dir = (fs::path(opts.out_dir) /
                            (std::string("ablation_") + (sw.use_dlka ? "d" : "x") + (sw.use_sspp ? "s" : "x") +
                             (sw.use_cam ? "c" : "x")))
                               .string();
        TrainResult tr = train_model(model, manifest, train_cfg, run_opts);
        AblationResult row;
        row.label = cfg.ablation_label();
        row.switches = sw;
        row.val_dice = tr.best_val_dice;
        rows.push_back(row);
        if (!opts.quiet) std::cout << row.label << "  val_dice " << row.val_dice << "\n";
    }

    Json table = Json::array();
    for (const auto& r : rows) {
        Json sw;
        to_json(sw, r.switches);
        table.push_back(Json{{"model", r.label}, {"switches", sw}, {"val_dice", r.val_dice}});
    }
    std::ofstream os(fs::path(opts.out_dir) / "ablation_results.json");
    os << table.dump(2) << "\n";
    std::ofstream ts(fs::path(opts.out_dir) / "ablation_results.txt");
    ts << ablation_table(rows);
    return rows;
}

std::string ablation_table(const std::vector<AblationResult>& rows) {
    std::ostringstream os;
    os << "model                          val dice\n";
    for (const auto& r : rows) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%-30s %.4f\n", r.label.c_str(), r.val_dice);
        os << buf;
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Prediction export
// ---------------------------------------------------------------------------

namespace {

void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels, int64_t h, int64_t w) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_ppm(const std::string& path, const std::vector<uint8_t>& rgb, int64_t h, int64_t w) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

}  // namespace

std::vector<std::string> predict_volume(A4Unet& model, const VolumeRecord& record,
                                        const std::vector<std::string>& modalities, const PredictOptions& opts) {
    fs::create_directories(opts.out_dir);
    LoadedVolume vol = load_volume(record, modalities);

    // keep a display copy of the first modality before normalization
    const int64_t hw = vol.height * vol.width;
    std::vector<float> display(vol.voxels.begin(), vol.voxels.begin() + vol.depth * hw);
    normalize_volume(vol);
    auto slices = slice_volume(vol, LabelPolicy::whole_tumor_binary, record.subject_id);

    const int64_t size = model.config().input_size;
    const int64_t classes = model.config().num_classes;
    std::vector<std::string> written;
    std::vector<uint8_t> mask_volume(static_cast<size_t>(vol.depth * hw), 0);

    int64_t z_begin = 0, z_end = vol.depth;
    if (opts.slice_index) {
        if (*opts.slice_index < 0 || *opts.slice_index >= vol.depth)
            throw DataError("slice index " + std::to_string(*opts.slice_index) + " outside 0.." +
                            std::to_string(vol.depth - 1));
        z_begin = *opts.slice_index;
        z_end = z_begin + 1;
    }

    for (int64_t z0 = z_begin; z0 < z_end; z0 += opts.batch_size) {
        const int64_t n = std::min(opts.batch_size, z_end - z0);
        Tensor batch({n, vol.channels, size, size});
        for (int64_t i = 0; i < n; ++i) {
            Tensor img = center_crop_pad(slices[static_cast<size_t>(z0 + i)].image, size);
            std::copy(img.data(), img.data() + img.numel(), batch.data() + i * img.numel());
        }
        Tensor logits = model.infer(batch);
        const auto pred = argmax_over_channel(logits);
        for (int64_t i = 0; i < n; ++i) {
            std::vector<int64_t> slice_pred(pred.begin() + i * size * size, pred.begin() + (i + 1) * size * size);
            auto restored = restore_mask_frame(slice_pred, size, vol.height, vol.width);
            std::copy(restored.begin(), restored.end(), mask_volume.begin() + (z0 + i) * hw);
        }
    }

    const double level_max = static_cast<double>(classes - 1);
    for (int64_t z = z_begin; z < z_end; ++z) {
        if (!opts.export_slices) break;
        std::vector<uint8_t> pix(static_cast<size_t>(hw));
        for (int64_t i = 0; i < hw; ++i)
            pix[static_cast<size_t>(i)] =
                static_cast<uint8_t>(std::lround(255.0 * static_cast<double>(mask_volume[static_cast<size_t>(z * hw + i)]) / level_max));
        char name[64];
        std::snprintf(name, sizeof(name), "%s_slice%04lld_mask.pgm", record.subject_id.c_str(),
                      static_cast<long long>(z));
        const std::string path = (fs::path(opts.out_dir) / name).string();
        write_pgm(path, pix, vol.height, vol.width);
        written.push_back(path);
    }

    if (opts.overlays) {
        // window the display modality to 0..255
        float lo = display.empty() ? 0.0f : display[0], hi = lo;
        for (float v : display) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
        for (int64_t z = z_begin; z < z_end; ++z) {
            std::vector<uint8_t> rgb(static_cast<size_t>(hw * 3));
            for (int64_t i = 0; i < hw; ++i) {
                const auto g = static_cast<uint8_t>((display[static_cast<size_t>(z * hw + i)] - lo) * scale);
                uint8_t r = g, gr = g, b = g;
                if (vol.has_labels && vol.labels[static_cast<size_t>(z * hw + i)] > 0) gr = 255;  // ground truth: green
                if (mask_volume[static_cast<size_t>(z * hw + i)] > 0) r = 255;                    // prediction: red
                rgb[static_cast<size_t>(3 * i)] = r;
                rgb[static_cast<size_t>(3 * i + 1)] = gr;
                rgb[static_cast<size_t>(3 * i + 2)] = b;
            }
            char name[64];
            std::snprintf(name, sizeof(name), "%s_slice%04lld_overlay.ppm", record.subject_id.c_str(),
                          static_cast<long long>(z));
            const std::string path = (fs::path(opts.out_dir) / name).string();
            write_ppm(path, rgb, vol.height, vol.width);
            written.push_back(path);
        }
    }

    if (!opts.slice_index) {
        const std::string nii_path = (fs::path(opts.out_dir) / (record.subject_id + "_pred.nii.gz")).string();
        write_nifti_u8(nii_path, vol.source_header, mask_volume);
        written.push_back(nii_path);
    }
    return written;
}

}  // namespace a4
