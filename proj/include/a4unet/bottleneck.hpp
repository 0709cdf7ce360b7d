#pragma once

#include <vector>

#include "a4unet/nn.hpp"

namespace a4 {

struct SwinBranchConfig {
    int64_t window = 7;
    int64_t heads = 4;
    int64_t depth = 2;     // blocks; odd-indexed blocks use shifted windows
    int64_t embed_dim = 96;
};

/// [N, H, W, C] -> [N*nW, window*window, C]
Variable window_partition(const Variable& x, int64_t window);
/// inverse of window_partition
Variable window_merge(const Variable& tokens, int64_t n, int64_t h, int64_t w, int64_t window);

/// Multi-head self-attention inside one window, with a learned relative
/// position bias per head. `mask`, when non-null, holds [nW, T, T] additive
/// logits that block attention across cyclic-shift boundaries.
struct WindowAttention {
    nn::Linear qkv, proj;
    Variable rel_pos_table;          // [(2w-1)^2, heads]
    std::vector<int64_t> rel_index;  // [T*T]
    int64_t dim = 0, heads = 0, window = 0;

    WindowAttention() = default;
    WindowAttention(int64_t dim, int64_t heads, int64_t window, nn::Rng& rng);
    Variable forward(const Variable& tokens, const Tensor* mask, int64_t windows_per_image) const;
};

struct SwinBlock {
    nn::LayerNorm norm1, norm2;
    WindowAttention attn;
    nn::Linear mlp_fc1, mlp_fc2;
    int64_t window = 0, shift = 0, grid_h = 0, grid_w = 0;
    Tensor attn_mask;  // empty when shift == 0

    SwinBlock() = default;
    SwinBlock(int64_t dim, int64_t heads, int64_t window, int64_t shift, int64_t grid_h, int64_t grid_w,
              nn::Rng& rng);
    Variable forward(const Variable& x_nhwc) const;
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

/// One SSPP branch: 1x1 embedding followed by `depth` Swin blocks at a fixed
/// window size; emits flattened tokens [N, P, C].
struct SsppBranch {
    nn::Conv2d embed;
    std::vector<SwinBlock> blocks;
    int64_t window = 0, embed_dim = 0;

    SsppBranch() = default;
    SsppBranch(int64_t in_ch, const SwinBranchConfig& cfg, int64_t grid_h, int64_t grid_w, nn::Rng& rng);
    Variable tokens(const Variable& x) const;
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

/// Two-level reweighting of the concatenated branch tokens: first per
/// channel (scale attention), then per token.
struct CrossContextualAttention {
    nn::Linear scale_fc1, scale_fc2;  // MC -> MC/r -> MC
    nn::Linear token_fc1, token_fc2;  // P -> P/r -> P

    CrossContextualAttention() = default;
    CrossContextualAttention(int64_t total_dim, int64_t tokens, int64_t reduction, nn::Rng& rng);
    Variable scale_gates(const Variable& z) const;  // [N, MC], sigmoid outputs
    Variable token_gates(const Variable& z) const;  // [N, P]
    Variable scale_stage(const Variable& z) const;
    Variable token_stage(const Variable& z) const;
    Variable forward(const Variable& z) const { return token_stage(scale_stage(z)); }
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

/// Bottleneck: a residual conv block (the baseline path) optionally followed
/// by M windowed-attention branches fused by cross-contextual attention and
/// a 1x1 projection back to the conv width.
struct SsppBottleneck {
    bool enabled = false;
    nn::ResidualConvBlock base;
    std::vector<SsppBranch> branches;
    CrossContextualAttention fuse;
    nn::Conv2d out_proj;
    int64_t grid_h = 0, grid_w = 0, channels = 0;

    SsppBottleneck() = default;
    SsppBottleneck(int64_t channels, int64_t grid_h, int64_t grid_w, const std::vector<SwinBranchConfig>& cfgs,
                   int64_t reduction, bool enabled, nn::Rng& rng);
    /// concatenated per-branch tokens [N, P, M*C] for the given feature map
    Variable multi_scale_tokens(const Variable& x) const;
    Variable forward(const Variable& x, bool training);
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

}  // namespace a4
