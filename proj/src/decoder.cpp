#include "a4unet/decoder.hpp"

#include <cmath>

namespace a4 {

std::vector<std::pair<int64_t, int64_t>> zigzag_frequencies(int64_t count, int64_t h, int64_t w) {
    std::vector<std::pair<int64_t, int64_t>> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t s = 0; s <= h + w - 2 && static_cast<int64_t>(out.size()) < count; ++s) {
        if (s % 2 == 0) {
            // walk the anti-diagonal upward: u decreasing
            for (int64_t u = std::min(s, h - 1); u >= 0 && s - u < w; --u) {
                out.emplace_back(u, s - u);
                if (static_cast<int64_t>(out.size()) == count) break;
            }
        } else {
            for (int64_t v = std::min(s, w - 1); v >= 0 && s - v < h; --v) {
                out.emplace_back(s - v, v);
                if (static_cast<int64_t>(out.size()) == count) break;
            }
        }
    }
    return out;
}

void gram_schmidt_rows(Tensor& rows) {
    const int64_t c = rows.size(0);
    const int64_t d = rows.numel() / c;
    double* data = rows.data();
    for (int64_t i = 0; i < c; ++i) {
        double* ri = data + i * d;
        for (int64_t j = 0; j < i; ++j) {
            const double* rj = data + j * d;
            double dot = 0.0;
            for (int64_t p = 0; p < d; ++p) dot += ri[p] * rj[p];
            for (int64_t p = 0; p < d; ++p) ri[p] -= dot * rj[p];
        }
        double norm = 0.0;
        for (int64_t p = 0; p < d; ++p) norm += ri[p] * ri[p];
        norm = std::sqrt(norm);
        if (norm < 1e-8)
            throw ConfigError("Gram-Schmidt degenerate vector at row " + std::to_string(i) + " (norm " +
                              std::to_string(norm) + " below 1e-8)");
        const double inv = 1.0 / norm;
        for (int64_t p = 0; p < d; ++p) ri[p] *= inv;
    }
}

DctFilterBank build_dct_filter_bank(int64_t channels, int64_t h, int64_t w) {
    if (channels < 1) throw ConfigError("filter bank needs at least one channel");
    if (channels > h * w)
        throw ConfigError("cannot build " + std::to_string(channels) + " orthogonal filters on a " +
                          std::to_string(h) + "x" + std::to_string(w) + " grid (capacity " +
                          std::to_string(h * w) + ")");
    DctFilterBank bank;
    bank.source_frequencies = zigzag_frequencies(channels, h, w);
    bank.filters = Tensor({channels, h, w});
    const double pi = std::acos(-1.0);
    for (int64_t c = 0; c < channels; ++c) {
        const auto [u, v] = bank.source_frequencies[static_cast<size_t>(c)];
        const double au = u == 0 ? std::sqrt(1.0 / static_cast<double>(h)) : std::sqrt(2.0 / static_cast<double>(h));
        const double av = v == 0 ? std::sqrt(1.0 / static_cast<double>(w)) : std::sqrt(2.0 / static_cast<double>(w));
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                bank.filters.at({c, y, x}) = au * av *
                                             std::cos(pi * (2.0 * static_cast<double>(y) + 1.0) * static_cast<double>(u) /
                                                      (2.0 * static_cast<double>(h))) *
                                             std::cos(pi * (2.0 * static_cast<double>(x) + 1.0) * static_cast<double>(v) /
                                                      (2.0 * static_cast<double>(w)));
    }
    Tensor flat = bank.filters.reshaped({channels, h * w});
    gram_schmidt_rows(flat);
    bank.filters = flat.reshaped({channels, h, w});
    return bank;
}

OrthogonalChannelAttention::OrthogonalChannelAttention(int64_t channels, int64_t h, int64_t w, int64_t reduction,
                                                       nn::Rng& rng) {
    bank = Variable::constant(build_dct_filter_bank(channels, h, w).filters);
    const int64_t hidden = std::max<int64_t>(channels / reduction, 2);
    fc1 = nn::Linear(channels, hidden, rng);
    fc2 = nn::Linear(hidden, channels, rng);
}

Variable OrthogonalChannelAttention::gates(const Variable& x) const {
    Variable d = ops::channel_dct_pool(x, bank);  // [N, C]
    return ops::sigmoid(fc2.forward(ops::gelu(fc1.forward(d))));
}

Variable OrthogonalChannelAttention::forward(const Variable& x) const {
    const int64_t n = x.value().size(0), c = x.value().size(1);
    return ops::mul(x, ops::reshape(gates(x), {n, c, 1, 1}));
}

void OrthogonalChannelAttention::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    fc1.visit(prefix + ".fc1", v);
    fc2.visit(prefix + ".fc2", v);
}

SpatialAttention::SpatialAttention(nn::Rng& rng) { conv = nn::Conv2d(2, 1, 7, 1, 3, rng); }

Variable SpatialAttention::map(const Variable& x) const {
    Variable planes = ops::concat({ops::channel_max(x), ops::channel_mean(x)}, 1);
    return ops::sigmoid(conv.forward(planes));
}

void SpatialAttention::visit(const std::string& prefix, nn::ModuleVisitor& v) { conv.visit(prefix + ".conv", v); }

AttentionGate::AttentionGate(int64_t x_ch, int64_t g_ch, int64_t inter_ch, nn::Rng& rng) {
    wx = nn::Conv2d(x_ch, inter_ch, 1, 1, 0, rng);
    wx.bias = Variable();  // b_g lives on the gating projection
    wg = nn::Conv2d(g_ch, inter_ch, 1, 1, 0, rng);
    psi = nn::Conv2d(inter_ch, 1, 1, 1, 0, rng);
}

Variable AttentionGate::alpha(const Variable& x, const Variable& g) const {
    Variable gx = wx.forward(x);
    Variable gg = wg.forward(g);
    if (g.value().size(2) != x.value().size(2) || g.value().size(3) != x.value().size(3))
        gg = ops::resize_bilinear(gg, x.value().size(2), x.value().size(3));
    return ops::sigmoid(psi.forward(ops::relu(ops::add(gx, gg))));
}

Variable AttentionGate::forward(const Variable& x, const Variable& g) const { return ops::mul(x, alpha(x, g)); }

void AttentionGate::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    v.param(prefix + ".wx.weight", wx.weight);
    wg.visit(prefix + ".wg", v);
    psi.visit(prefix + ".psi", v);
}

CamBlock::CamBlock(int64_t in_ch, int64_t out_ch, int64_t h, int64_t w, int64_t reduction, bool attention_enabled_,
                   nn::Rng& rng)
    : attention_enabled(attention_enabled_) {
    if (attention_enabled) {
        oca = OrthogonalChannelAttention(in_ch, h, w, reduction, rng);
        sa = SpatialAttention(rng);
    }
    proj = nn::Conv2d(in_ch, out_ch, 1, 1, 0, rng);
}

Variable CamBlock::forward(const Variable& x) const {
    Variable h = x;
    if (attention_enabled) {
        h = oca.forward(h);
        h = ops::mul(h, sa.map(h));
    }
    return proj.forward(h);
}

void CamBlock::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    if (attention_enabled) {
        oca.visit(prefix + ".oca", v);
        sa.visit(prefix + ".sa", v);
    }
    proj.visit(prefix + ".proj", v);
}

DecoderStage::DecoderStage(int64_t dec_ch, int64_t skip_ch, int64_t out_ch, int64_t out_h, int64_t out_w,
                           int64_t reduction, bool cam_enabled, bool gate_enabled, nn::Rng& rng)
    : gated(gate_enabled) {
    if (gated) gate = AttentionGate(skip_ch, dec_ch, std::max<int64_t>(skip_ch / 2, 1), rng);
    fuse = nn::ResidualConvBlock(dec_ch + skip_ch, skip_ch, rng);
    up_proj = nn::Conv2d(skip_ch, out_ch, 1, 1, 0, rng);
    cam = CamBlock(out_ch, out_ch, out_h, out_w, reduction, cam_enabled, rng);
}

Variable DecoderStage::forward(const Variable& dec, const Variable& skip, bool training) {
    Variable s = gated ? gate.forward(skip, dec) : skip;
    Variable z = fuse.forward(ops::concat({dec, s}, 1), training);
    z = ops::resize_bilinear(z, z.value().size(2) * 2, z.value().size(3) * 2);
    z = up_proj.forward(z);
    return cam.forward(z);
}

void DecoderStage::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    if (gated) gate.visit(prefix + ".gate", v);
    fuse.visit(prefix + ".fuse", v);
    up_proj.visit(prefix + ".up_proj", v);
    cam.visit(prefix + ".cam", v);
}

Decoder::Decoder(const std::vector<int64_t>& encoder_channels, int64_t bottleneck_ch, int64_t grid_h,
                 int64_t grid_w, int64_t num_classes_, int64_t reduction, bool cam_enabled, bool gates_enabled,
                 nn::Rng& rng)
    : num_classes(num_classes_) {
    if (num_classes_ < 2) throw ConfigError("decoder needs at least 2 classes");
    const size_t n_stages = encoder_channels.size();
    int64_t dec_ch = bottleneck_ch;
    int64_t h = grid_h, w = grid_w;
    for (size_t s = 0; s < n_stages; ++s) {
        const int64_t skip_ch = encoder_channels[n_stages - 1 - s];
        const int64_t out_ch = std::max<int64_t>(skip_ch / 2, 1);
        stages.emplace_back(dec_ch, skip_ch, out_ch, 2 * h, 2 * w, reduction, cam_enabled, gates_enabled, rng);
        dec_ch = out_ch;
        h *= 2;
        w *= 2;
    }
    head = nn::Conv2d(dec_ch, num_classes_, 1, 1, 0, rng);
}

Variable Decoder::forward(const std::vector<Variable>& pyramid, const Variable& bottleneck_out, bool training) {
    if (pyramid.size() != stages.size())
        throw ConfigError("decoder has " + std::to_string(stages.size()) + " stages but pyramid has " +
                          std::to_string(pyramid.size()) + " levels");
    Variable dec = bottleneck_out;
    for (size_t s = 0; s < stages.size(); ++s) dec = stages[s].forward(dec, pyramid[pyramid.size() - 1 - s], training);
    return head.forward(dec);
}

void Decoder::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    for (size_t s = 0; s < stages.size(); ++s) stages[s].visit(prefix + ".stage" + std::to_string(s + 1), v);
    head.visit(prefix + ".head", v);
}

}  // namespace a4
