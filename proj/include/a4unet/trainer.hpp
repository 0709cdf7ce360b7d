#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "a4unet/dataset.hpp"
#include "a4unet/metrics.hpp"
#include "a4unet/model.hpp"

namespace a4 {

struct TrainConfig {
    int64_t batch_size = 16;
    double learning_rate = 1e-5;
    int64_t epochs = 30;
    double weight_decay = 1e-2;
    uint64_t seed = 1234;
    std::string loss = "dice_ce";  // dice_ce | ce | dice
    int64_t runs = 5;
    int64_t folds = 1;
    int64_t max_steps = 0;  // 0 = uncapped; small-scale runs cap optimizer steps
    bool cosine_lr = false;
    int64_t eval_batch_size = 8;

    void validate() const;
};

void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);

/// Decoupled weight decay Adam over a fixed parameter list.
class AdamW {
public:
    AdamW(std::vector<Variable*> params, double lr, double weight_decay);
    void step();
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    void zero_grad();
    int64_t step_count() const { return step_count_; }

    /// optimizer state as checkpoint tensors ("opt/m/<i>", "opt/v/<i>")
    void collect_state(std::vector<std::pair<std::string, Tensor>>& out) const;
    void restore_state(const std::vector<std::pair<std::string, Tensor>>& tensors, int64_t step_count);

private:
    std::vector<Variable*> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_;
    int64_t step_count_ = 0;
};

/// logits [N, C, H, W] against integer targets (length N*H*W).
/// kind: "ce", "dice" (soft, eps 1), or their sum "dice_ce".
Variable segmentation_loss(const Variable& logits, const std::vector<int32_t>& targets, const std::string& kind);

/// Mean foreground Dice of argmax predictions against targets.
double batch_dice(const Tensor& logits, const std::vector<int32_t>& targets);

struct EpochLog {
    int64_t epoch = 0;
    double train_loss = 0.0;
    double val_dice = 0.0;
    double lr = 0.0;
    int64_t steps = 0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::string best_checkpoint, last_checkpoint, log_path;
    double best_val_dice = 0.0;
    bool diverged = false;
};

struct TrainOptions {
    std::string out_dir = ".";
    std::string resume_from;  // checkpoint to continue from
    bool quiet = false;
};

TrainResult train_model(A4Unet& model, const DatasetManifest& manifest, const TrainConfig& cfg,
                        const TrainOptions& opts);

/// Checkpoint helpers shared by train/eval/predict.
void save_training_checkpoint(const std::string& path, A4Unet& model, const AdamW* optimizer,
                              const TrainConfig& cfg, int64_t epochs_completed, double best_val_dice);
/// Builds the model from the checkpoint's stored config.
A4Unet model_from_checkpoint(const CheckpointData& data);

struct AblationResult {
    std::string label;
    AblationSwitches switches;
    double val_dice = 0.0;
};

/// Trains and evaluates all eight ablation combinations with a shared seed
/// and data order; rows follow the baseline / +DLKA / +SSPP / +CAM / pairs /
/// full ordering. Writes "<out_dir>/ablation_results.json" plus a text table.
std::vector<AblationResult> run_ablation_suite(const ModelConfig& base, const TrainConfig& train_cfg,
                                               const DatasetManifest& manifest, const TrainOptions& opts);
std::string ablation_table(const std::vector<AblationResult>& rows);

struct PredictOptions {
    std::string out_dir = ".";
    bool overlays = false;
    bool export_slices = true;
    std::optional<int64_t> slice_index;
    int64_t batch_size = 8;
};

/// Runs inference over one subject; writes per-slice mask files (PGM),
/// optional overlays (PPM, ground truth green / prediction red), and for
/// whole volumes a 3D mask NIfTI with the source header geometry.
std::vector<std::string> predict_volume(A4Unet& model, const VolumeRecord& record,
                                        const std::vector<std::string>& modalities, const PredictOptions& opts);

}  // namespace a4
