#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "a4unet/bottleneck.hpp"
#include "a4unet/decoder.hpp"
#include "a4unet/encoder.hpp"

namespace a4 {

using Json = nlohmann::ordered_json;

/// The three Table-style ablation switches. All eight combinations build;
/// (false,false,false) is the ResUnet baseline, (true,true,true) is A4-Unet.
struct AblationSwitches {
    bool use_dlka = true;
    bool use_sspp = true;
    bool use_cam = true;
};

struct ModelConfig {
    int64_t input_size = 224;
    int64_t in_channels = 4;
    int64_t num_classes = 2;
    std::vector<int64_t> encoder_channels{64, 128, 256, 512};
    std::vector<LkGeometry> lk_geometry{{21, 3}};
    std::vector<SwinBranchConfig> branches;  // empty -> defaults derived from the grid
    int64_t attention_reduction = 4;
    bool attention_gates = true;  // effective only together with use_cam
    AblationSwitches ablation;
    uint64_t seed = 1234;

    int64_t stages() const { return static_cast<int64_t>(encoder_channels.size()); }
    int64_t downsample_factor() const { return int64_t{1} << stages(); }
    int64_t grid() const { return input_size / downsample_factor(); }
    std::vector<SwinBranchConfig> effective_branches() const;
    std::string ablation_label() const;
    void validate() const;
};

void to_json(Json& j, const LkGeometry& g);
void from_json(const Json& j, LkGeometry& g);
void to_json(Json& j, const SwinBranchConfig& c);
void from_json(const Json& j, SwinBranchConfig& c);
void to_json(Json& j, const AblationSwitches& a);
void from_json(const Json& j, AblationSwitches& a);
void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);

struct ModelOutput {
    Variable logits;        // [N, N_c, H, W]
    Tensor probabilities;   // softmax over the class axis, detached
};

/// Pixel-wise softmax over axis 1 of [N, C, H, W] logits (plain tensors).
Tensor softmax_over_channel(const Tensor& logits);
/// Per-pixel argmax over axis 1 -> [N, H, W] class ids.
std::vector<int64_t> argmax_over_channel(const Tensor& logits);

class A4Unet {
public:
    explicit A4Unet(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    Variable forward_logits(const Variable& x, bool training);
    ModelOutput forward(const Tensor& batch, bool training);
    /// inference without graph construction
    Tensor infer(const Tensor& batch);

    void visit(nn::ModuleVisitor& v);
    int64_t parameter_count();
    Json describe();
    std::string describe_text();

private:
    ModelConfig cfg_;
    Encoder encoder_;
    SsppBottleneck bottleneck_;
    Decoder decoder_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: a JSON header plus named f64 tensors.
// ---------------------------------------------------------------------------

struct CheckpointData {
    Json header;  // { "version", "model_config", "meta": {...} }
    std::vector<std::pair<std::string, Tensor>> tensors;
};

/// Atomic write (temp file + rename).
void write_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::string& path);

/// Collects model parameters and buffers into checkpoint tensors
/// ("param/<name>", "buffer/<name>").
void collect_model_tensors(A4Unet& model, std::vector<std::pair<std::string, Tensor>>& out);
/// Restores parameters/buffers in place; throws DataError when the
/// checkpoint's model_config differs (field-level diff) or tensors are
/// missing/mis-shaped.
void load_model_tensors(A4Unet& model, const CheckpointData& data);

/// "a.b: 1 vs 2" lines for every leaf that differs between two JSON trees.
std::vector<std::string> json_diff(const Json& a, const Json& b, const std::string& prefix = "");

}  // namespace a4
