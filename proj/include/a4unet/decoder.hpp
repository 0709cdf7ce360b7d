#pragma once

#include <utility>
#include <vector>

#include "a4unet/nn.hpp"

namespace a4 {

/// Per-channel orthonormal 2D filters seeded from the DCT-II basis.
struct DctFilterBank {
    Tensor filters;                                     // [C, H, W]
    std::vector<std::pair<int64_t, int64_t>> source_frequencies;  // (u, v) per channel
};

/// The C lowest-frequency (u, v) pairs of an H x W grid in zigzag order
/// starting at (0, 0).
std::vector<std::pair<int64_t, int64_t>> zigzag_frequencies(int64_t count, int64_t h, int64_t w);

/// In-place Gram-Schmidt over rows of a [C, H*W] matrix; throws when a row
/// degenerates (norm below 1e-8) during orthogonalization.
void gram_schmidt_rows(Tensor& rows);

/// Seeds C DCT-II basis filters in zigzag order and orthonormalizes them.
/// Requires C <= H*W.
DctFilterBank build_dct_filter_bank(int64_t channels, int64_t h, int64_t w);

/// Channel gates from per-channel inner products with a fixed orthonormal
/// filter bank, squashed through a small MLP + sigmoid.
struct OrthogonalChannelAttention {
    Variable bank;  // constant, rebuilt from config; not checkpointed
    nn::Linear fc1, fc2;

    OrthogonalChannelAttention() = default;
    OrthogonalChannelAttention(int64_t channels, int64_t h, int64_t w, int64_t reduction, nn::Rng& rng);
    Variable gates(const Variable& x) const;  // [N, C] in (0,1)
    Variable forward(const Variable& x) const;
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

/// Channel-axis max/avg -> 2-plane map -> 7x7 conv -> sigmoid.
struct SpatialAttention {
    nn::Conv2d conv;

    SpatialAttention() = default;
    explicit SpatialAttention(nn::Rng& rng);
    Variable map(const Variable& x) const;  // [N, 1, H, W] in (0,1)
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

/// alpha = sigmoid(psi(relu(Wx x + Wg g + b_g)) + b_psi); out = x (*) alpha.
/// The gating signal is resampled bilinearly onto x's grid when they differ.
struct AttentionGate {
    nn::Conv2d wx;   // 1x1, no bias
    nn::Conv2d wg;   // 1x1, carries b_g
    nn::Conv2d psi;  // 1x1 -> 1 channel, carries b_psi

    AttentionGate() = default;
    AttentionGate(int64_t x_ch, int64_t g_ch, int64_t inter_ch, nn::Rng& rng);
    Variable alpha(const Variable& x, const Variable& g) const;
    Variable forward(const Variable& x, const Variable& g) const;
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

/// Combined attention: orthogonal channel attention, then the spatial
/// attention map, then a 1x1 projection. With attention disabled only the
/// projection remains.
struct CamBlock {
    bool attention_enabled = false;
    OrthogonalChannelAttention oca;
    SpatialAttention sa;
    nn::Conv2d proj;

    CamBlock() = default;
    CamBlock(int64_t in_ch, int64_t out_ch, int64_t h, int64_t w, int64_t reduction, bool attention_enabled,
             nn::Rng& rng);
    Variable forward(const Variable& x) const;
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

/// One decoder stage: gate the skip with the current decoder map, fuse by
/// concat + residual block, upsample x2 (bilinear + 1x1), then CAM.
struct DecoderStage {
    bool gated = false;
    AttentionGate gate;
    nn::ResidualConvBlock fuse;
    nn::Conv2d up_proj;
    CamBlock cam;

    DecoderStage() = default;
    DecoderStage(int64_t dec_ch, int64_t skip_ch, int64_t out_ch, int64_t out_h, int64_t out_w, int64_t reduction,
                 bool cam_enabled, bool gate_enabled, nn::Rng& rng);
    Variable forward(const Variable& dec, const Variable& skip, bool training);
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

struct Decoder {
    std::vector<DecoderStage> stages;
    nn::Conv2d head;
    int64_t num_classes = 2;

    Decoder() = default;
    Decoder(const std::vector<int64_t>& encoder_channels, int64_t bottleneck_ch, int64_t grid_h, int64_t grid_w,
            int64_t num_classes, int64_t reduction, bool cam_enabled, bool gates_enabled, nn::Rng& rng);
    Variable forward(const std::vector<Variable>& pyramid, const Variable& bottleneck_out, bool training);
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

}  // namespace a4
