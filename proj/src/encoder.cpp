#include "a4unet/encoder.hpp"

namespace a4 {

LkGeometry lk_kernel_sizes(int64_t kernel, int64_t dilation) {
    if (dilation < 1) throw ConfigError("dilation rate must be >= 1, got " + std::to_string(dilation));
    if (kernel < dilation)
        throw ConfigError("kernel size " + std::to_string(kernel) + " must be >= dilation rate " +
                          std::to_string(dilation));
    return LkGeometry{kernel, dilation};
}

DlkaBlock::DlkaBlock(int64_t channels, const LkGeometry& geom, nn::Rng& rng) {
    const LkGeometry checked = lk_kernel_sizes(geom.kernel, geom.dilation);
    const int64_t k_dw = checked.depthwise_kernel();
    const int64_t k_dc = checked.dilated_kernel();
    conv_dw = nn::DeformConv2d(channels, channels, k_dw, (k_dw - 1) / 2, rng, 1, channels);
    if ((checked.dilation * (k_dc - 1)) % 2 != 0)
        throw ConfigError("large-kernel decomposition (K=" + std::to_string(checked.kernel) +
                          ", d=" + std::to_string(checked.dilation) +
                          ") has no shape-preserving padding for the dilated kernel");
    conv_dc = nn::DeformConv2d(channels, channels, k_dc, checked.dilation * (k_dc - 1) / 2, rng,
                               checked.dilation, channels);
    attn_proj = nn::Conv2d(channels, channels, 1, 1, 0, rng);
    out_proj = nn::Conv2d(channels, channels, 1, 1, 0, rng);
}

Variable DlkaBlock::forward(const Variable& x) const {
    Variable attention = attn_proj.forward(conv_dc.forward(conv_dw.forward(x)));
    return ops::add(out_proj.forward(ops::mul(attention, x)), x);
}

void DlkaBlock::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    conv_dw.visit(prefix + ".conv_dw", v);
    conv_dc.visit(prefix + ".conv_dc", v);
    attn_proj.visit(prefix + ".attn_proj", v);
    out_proj.visit(prefix + ".out_proj", v);
}

EncoderStage::EncoderStage(int64_t in_ch, int64_t out_ch, bool dlka_enabled, const LkGeometry& geom, nn::Rng& rng)
    : use_dlka(dlka_enabled) {
    down = nn::Conv2d(in_ch, out_ch, 3, 2, 1, rng);
    res = nn::ResidualConvBlock(out_ch, out_ch, rng);
    post = nn::BatchNorm2d(out_ch);
    if (use_dlka) dlka = DlkaBlock(out_ch, geom, rng);
}

Variable EncoderStage::forward(const Variable& x, bool training) {
    Variable h = res.forward(down.forward(x), training);
    h = post.forward(h, training);
    if (use_dlka) h = dlka.forward(h);
    return h;
}

void EncoderStage::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    down.visit(prefix + ".down", v);
    res.visit(prefix + ".res", v);
    post.visit(prefix + ".post", v);
    if (use_dlka) dlka.visit(prefix + ".dlka", v);
}

Encoder::Encoder(int64_t in_ch, const std::vector<int64_t>& channels, const std::vector<LkGeometry>& geom,
                 bool dlka_enabled, nn::Rng& rng) {
    if (channels.empty()) throw ConfigError("encoder needs at least one stage");
    if (!geom.empty() && geom.size() != 1 && geom.size() != channels.size())
        throw ConfigError("LK geometry list must have 1 entry or one per stage");
    int64_t prev = in_ch;
    for (size_t s = 0; s < channels.size(); ++s) {
        const LkGeometry g = geom.empty() ? LkGeometry{} : (geom.size() == 1 ? geom[0] : geom[s]);
        stages.emplace_back(prev, channels[s], dlka_enabled, g, rng);
        prev = channels[s];
    }
}

EncoderOutput Encoder::forward(const Variable& x, bool training) {
    if (x.value().rank() != 4) throw ShapeError("encoder input must be [N,C,H,W], got " + x.value().shape_str());
    const int64_t div = int64_t{1} << stages.size();
    if (x.value().size(2) % div != 0 || x.value().size(3) % div != 0)
        throw ShapeError("input spatial dims " + std::to_string(x.value().size(2)) + "x" +
                         std::to_string(x.value().size(3)) + " must be divisible by " + std::to_string(div));
    EncoderOutput out;
    Variable h = x;
    for (auto& stage : stages) {
        h = stage.forward(h, training);
        out.pyramid.push_back(h);
    }
    out.bottleneck_in = h;
    return out;
}

void Encoder::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    for (size_t s = 0; s < stages.size(); ++s) stages[s].visit(prefix + ".stage" + std::to_string(s + 1), v);
}

}  // namespace a4
