#pragma once

#include <vector>

#include "a4unet/nn.hpp"

namespace a4 {

/// Decomposed large-kernel geometry. For a target kernel K realized with
/// dilation rate d, the depth-wise kernel is (2d-1)x(2d-1) and the dilated
/// depth-wise kernel is ceil(K/d) x ceil(K/d).
struct LkGeometry {
    int64_t kernel = 21;
    int64_t dilation = 3;

    int64_t depthwise_kernel() const { return 2 * dilation - 1; }
    int64_t dilated_kernel() const { return (kernel + dilation - 1) / dilation; }
};

/// Validates (K, d) and evaluates the two kernel-size formulas.
LkGeometry lk_kernel_sizes(int64_t kernel, int64_t dilation);

/// out = Conv1x1(Attention (*) F) + F with
/// Attention = Conv1x1(ConvDC(ConvDW(F))), where ConvDW / ConvDC are
/// deformable depth-wise convolutions at dilation 1 / d.
struct DlkaBlock {
    nn::DeformConv2d conv_dw;  // (2d-1)^2, dilation 1
    nn::DeformConv2d conv_dc;  // ceil(K/d)^2, dilation d
    nn::Conv2d attn_proj;      // 1x1
    nn::Conv2d out_proj;       // 1x1

    DlkaBlock() = default;
    DlkaBlock(int64_t channels, const LkGeometry& geom, nn::Rng& rng);
    Variable forward(const Variable& x) const;
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

struct EncoderStage {
    nn::Conv2d down;  // 3x3 stride-2
    nn::ResidualConvBlock res;
    nn::BatchNorm2d post;  // keeps stage outputs scale-controlled before the
                           // multiplicative DLKA attention and the skip export
    bool use_dlka = false;
    DlkaBlock dlka;

    EncoderStage() = default;
    EncoderStage(int64_t in_ch, int64_t out_ch, bool dlka_enabled, const LkGeometry& geom, nn::Rng& rng);
    Variable forward(const Variable& x, bool training);
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

struct EncoderOutput {
    std::vector<Variable> pyramid;  // stage outputs, spatial dims H/2^i
    Variable bottleneck_in;         // deepest map (aliases pyramid.back())
};

/// Four downsampling stages; each halves the spatial dims. With DLKA
/// disabled a stage is a plain stride-2 conv + residual block.
struct Encoder {
    std::vector<EncoderStage> stages;

    Encoder() = default;
    Encoder(int64_t in_ch, const std::vector<int64_t>& channels, const std::vector<LkGeometry>& geom,
            bool dlka_enabled, nn::Rng& rng);
    EncoderOutput forward(const Variable& x, bool training);
    void visit(const std::string& prefix, nn::ModuleVisitor& v);
};

}  // namespace a4
