#include "a4unet/bottleneck.hpp"

#include <cmath>

namespace a4 {

Variable window_partition(const Variable& x, int64_t window) {
    const int64_t n = x.value().size(0), h = x.value().size(1), w = x.value().size(2), c = x.value().size(3);
    if (h % window != 0 || w % window != 0)
        throw ShapeError("window size " + std::to_string(window) + " does not divide grid " + std::to_string(h) +
                         "x" + std::to_string(w));
    Variable t = ops::reshape(x, {n, h / window, window, w / window, window, c});
    t = ops::permute(t, {0, 1, 3, 2, 4, 5});
    return ops::reshape(t, {n * (h / window) * (w / window), window * window, c});
}

Variable window_merge(const Variable& tokens, int64_t n, int64_t h, int64_t w, int64_t window) {
    const int64_t c = tokens.value().size(2);
    Variable t = ops::reshape(tokens, {n, h / window, w / window, window, window, c});
    t = ops::permute(t, {0, 1, 3, 2, 4, 5});
    return ops::reshape(t, {n, h, w, c});
}

WindowAttention::WindowAttention(int64_t dim_, int64_t heads_, int64_t window_, nn::Rng& rng)
    : dim(dim_), heads(heads_), window(window_) {
    if (dim_ % heads_ != 0)
        throw ConfigError("embed dim " + std::to_string(dim_) + " not divisible by heads " + std::to_string(heads_));
    qkv = nn::Linear(dim_, 3 * dim_, rng);
    proj = nn::Linear(dim_, dim_, rng);
    const int64_t span = 2 * window_ - 1;
    // a 1-token window attends only to itself; a position bias would be a
    // dead parameter there
    if (window_ > 1) rel_pos_table = Variable::leaf(nn::trunc_normal({span * span, heads_}, 0.02, rng), true);
    const int64_t t = window_ * window_;
    rel_index.resize(static_cast<size_t>(t * t));
    for (int64_t i = 0; i < t; ++i) {
        const int64_t yi = i / window_, xi = i % window_;
        for (int64_t j = 0; j < t; ++j) {
            const int64_t yj = j / window_, xj = j % window_;
            rel_index[static_cast<size_t>(i * t + j)] = (yi - yj + window_ - 1) * span + (xi - xj + window_ - 1);
        }
    }
}

Variable WindowAttention::forward(const Variable& tokens, const Tensor* mask, int64_t windows_per_image) const {
    const int64_t b = tokens.value().size(0);
    const int64_t t = tokens.value().size(1);
    const int64_t dh = dim / heads;
    Variable qkv_out = qkv.forward(tokens);  // [B, T, 3C]

    auto to_heads = [&](const Variable& part) {
        Variable r = ops::reshape(part, {b, t, heads, dh});
        r = ops::permute(r, {0, 2, 1, 3});
        return ops::reshape(r, {b * heads, t, dh});
    };
    Variable q = to_heads(ops::slice(qkv_out, 2, 0, dim));
    Variable k = to_heads(ops::slice(qkv_out, 2, dim, dim));
    Variable v = to_heads(ops::slice(qkv_out, 2, 2 * dim, dim));

    Variable attn = ops::scale(ops::bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));

    Variable attn4 = ops::reshape(attn, {b, heads, t, t});
    if (rel_pos_table.defined()) {
        Variable bias = ops::embedding_rows(rel_pos_table, rel_index);  // [T*T, heads]
        bias = ops::permute(ops::reshape(bias, {t, t, heads}), {2, 0, 1});  // [heads, T, T]
        attn4 = ops::add(attn4, bias);
    }

    if (mask != nullptr) {
        Variable masked = ops::reshape(attn4, {b / windows_per_image, windows_per_image, heads, t, t});
        masked = ops::add(masked, Variable::constant(*mask));  // mask broadcasts as [nW, 1, T, T]
        attn4 = ops::reshape(masked, {b, heads, t, t});
    }
    Variable attn_p = ops::softmax(ops::reshape(attn4, {b * heads, t, t}));

    Variable out = ops::bmm(attn_p, v, /*transpose_b=*/false);  // [B*H, T, dh]
    out = ops::reshape(out, {b, heads, t, dh});
    out = ops::permute(out, {0, 2, 1, 3});
    out = ops::reshape(out, {b, t, dim});
    return proj.forward(out);
}

SwinBlock::SwinBlock(int64_t dim, int64_t heads, int64_t window_, int64_t shift_, int64_t grid_h_,
                     int64_t grid_w_, nn::Rng& rng)
    : window(window_), shift(shift_), grid_h(grid_h_), grid_w(grid_w_) {
    norm1 = nn::LayerNorm(dim);
    norm2 = nn::LayerNorm(dim);
    attn = WindowAttention(dim, heads, window_, rng);
    mlp_fc1 = nn::Linear(dim, 4 * dim, rng);
    mlp_fc2 = nn::Linear(4 * dim, dim, rng);

    if (shift > 0) {
        // label the cyclic-shift regions, then forbid attention across labels
        const int64_t t = window_ * window_;
        const int64_t nw = (grid_h_ / window_) * (grid_w_ / window_);
        std::vector<int64_t> labels(static_cast<size_t>(grid_h_ * grid_w_));
        auto band = [&](int64_t v, int64_t extent) {
            if (v < extent - window_) return int64_t{0};
            if (v < extent - shift) return int64_t{1};
            return int64_t{2};
        };
        for (int64_t y = 0; y < grid_h_; ++y)
            for (int64_t x = 0; x < grid_w_; ++x)
                labels[static_cast<size_t>(y * grid_w_ + x)] = band(y, grid_h_) * 3 + band(x, grid_w_);
        attn_mask = Tensor({nw, 1, t, t});
        int64_t wi = 0;
        for (int64_t wy = 0; wy < grid_h_ / window_; ++wy)
            for (int64_t wx = 0; wx < grid_w_ / window_; ++wx, ++wi) {
                std::vector<int64_t> win(static_cast<size_t>(t));
                for (int64_t i = 0; i < t; ++i) {
                    const int64_t y = wy * window_ + i / window_;
                    const int64_t x = wx * window_ + i % window_;
                    win[static_cast<size_t>(i)] = labels[static_cast<size_t>(y * grid_w_ + x)];
                }
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t j = 0; j < t; ++j)
                        attn_mask.at({wi, 0, i, j}) = win[static_cast<size_t>(i)] == win[static_cast<size_t>(j)]
                                                          ? 0.0
                                                          : -1e9;
            }
    }
}

Variable SwinBlock::forward(const Variable& x_nhwc) const {
    const int64_t n = x_nhwc.value().size(0);
    const int64_t nw = (grid_h / window) * (grid_w / window);
    Variable h = x_nhwc;
    Variable t = norm1.forward(x_nhwc);
    if (shift > 0) t = ops::roll_hw(t, -shift, -shift);
    Variable tokens = window_partition(t, window);
    tokens = attn.forward(tokens, shift > 0 ? &attn_mask : nullptr, nw);
    t = window_merge(tokens, n, grid_h, grid_w, window);
    if (shift > 0) t = ops::roll_hw(t, shift, shift);
    Variable x1 = ops::add(h, t);

    Variable t2 = norm2.forward(x1);
    t2 = mlp_fc2.forward(ops::gelu(mlp_fc1.forward(t2)));
    return ops::add(x1, t2);
}

void SwinBlock::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    norm1.visit(prefix + ".norm1", v);
    v.param(prefix + ".attn.qkv.weight", attn.qkv.weight);
    v.param(prefix + ".attn.qkv.bias", attn.qkv.bias);
    v.param(prefix + ".attn.proj.weight", attn.proj.weight);
    v.param(prefix + ".attn.proj.bias", attn.proj.bias);
    if (attn.rel_pos_table.defined()) v.param(prefix + ".attn.rel_pos_table", attn.rel_pos_table);
    norm2.visit(prefix + ".norm2", v);
    mlp_fc1.visit(prefix + ".mlp_fc1", v);
    mlp_fc2.visit(prefix + ".mlp_fc2", v);
}

SsppBranch::SsppBranch(int64_t in_ch, const SwinBranchConfig& cfg, int64_t grid_h, int64_t grid_w, nn::Rng& rng)
    : window(cfg.window), embed_dim(cfg.embed_dim) {
    if (cfg.window < 1) throw ConfigError("window size must be >= 1");
    if (grid_h % cfg.window != 0 || grid_w % cfg.window != 0)
        throw ConfigError("window size " + std::to_string(cfg.window) + " does not divide bottleneck grid " +
                          std::to_string(grid_h) + "x" + std::to_string(grid_w));
    embed = nn::Conv2d(in_ch, cfg.embed_dim, 1, 1, 0, rng);
    for (int64_t d = 0; d < cfg.depth; ++d) {
        const bool shifted = (d % 2 == 1) && cfg.window > 1 && cfg.window < std::min(grid_h, grid_w);
        const int64_t shift = shifted ? cfg.window / 2 : 0;
        blocks.emplace_back(cfg.embed_dim, cfg.heads, cfg.window, shift, grid_h, grid_w, rng);
    }
}

Variable SsppBranch::tokens(const Variable& x) const {
    const int64_t n = x.value().size(0);
    const int64_t h = x.value().size(2), w = x.value().size(3);
    Variable t = ops::permute(embed.forward(x), {0, 2, 3, 1});  // [N, H, W, C]
    for (const auto& blk : blocks) t = blk.forward(t);
    return ops::reshape(t, {n, h * w, embed_dim});
}

void SsppBranch::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    embed.visit(prefix + ".embed", v);
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".block" + std::to_string(i + 1), v);
}

CrossContextualAttention::CrossContextualAttention(int64_t total_dim, int64_t tokens, int64_t reduction,
                                                   nn::Rng& rng) {
    const int64_t hidden_c = std::max<int64_t>(total_dim / reduction, 2);
    const int64_t hidden_t = std::max<int64_t>(tokens / reduction, 2);
    scale_fc1 = nn::Linear(total_dim, hidden_c, rng);
    scale_fc2 = nn::Linear(hidden_c, total_dim, rng);
    token_fc1 = nn::Linear(tokens, hidden_t, rng);
    token_fc2 = nn::Linear(hidden_t, tokens, rng);
}

Variable CrossContextualAttention::scale_gates(const Variable& z) const {
    Variable g = ops::mean(z, {1}, false);  // GAP over tokens -> [N, MC]
    return ops::sigmoid(scale_fc2.forward(ops::relu(scale_fc1.forward(g))));
}

Variable CrossContextualAttention::token_gates(const Variable& z) const {
    Variable g = ops::mean(z, {2}, false);  // GAP over channels -> [N, P]
    return ops::sigmoid(token_fc2.forward(ops::relu(token_fc1.forward(g))));
}

Variable CrossContextualAttention::scale_stage(const Variable& z) const {
    const int64_t n = z.value().size(0), mc = z.value().size(2);
    Variable w = scale_gates(z);
    return ops::mul(z, ops::reshape(w, {n, 1, mc}));
}

Variable CrossContextualAttention::token_stage(const Variable& z) const {
    const int64_t n = z.value().size(0), p = z.value().size(1);
    Variable w = token_gates(z);
    return ops::mul(z, ops::reshape(w, {n, p, 1}));
}

void CrossContextualAttention::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    scale_fc1.visit(prefix + ".scale_fc1", v);
    scale_fc2.visit(prefix + ".scale_fc2", v);
    token_fc1.visit(prefix + ".token_fc1", v);
    token_fc2.visit(prefix + ".token_fc2", v);
}

SsppBottleneck::SsppBottleneck(int64_t channels_, int64_t grid_h_, int64_t grid_w_,
                               const std::vector<SwinBranchConfig>& cfgs, int64_t reduction, bool enabled_,
                               nn::Rng& rng)
    : enabled(enabled_), grid_h(grid_h_), grid_w(grid_w_), channels(channels_) {
    base = nn::ResidualConvBlock(channels_, channels_, rng);
    if (!enabled) return;
    if (cfgs.empty()) throw ConfigError("SSPP enabled but no branch configs given");
    const int64_t c0 = cfgs[0].embed_dim;
    int64_t total = 0;
    for (const auto& cfg : cfgs) {
        if (cfg.embed_dim != c0)
            throw ConfigError("all SSPP branches must share the embed dim; got " + std::to_string(cfg.embed_dim) +
                              " vs " + std::to_string(c0));
        branches.emplace_back(channels_, cfg, grid_h_, grid_w_, rng);
        total += cfg.embed_dim;
    }
    fuse = CrossContextualAttention(total, grid_h_ * grid_w_, reduction, rng);
    out_proj = nn::Conv2d(total, channels_, 1, 1, 0, rng);
}

Variable SsppBottleneck::multi_scale_tokens(const Variable& x) const {
    std::vector<Variable> zs;
    zs.reserve(branches.size());
    for (const auto& br : branches) zs.push_back(br.tokens(x));
    return zs.size() == 1 ? zs[0] : ops::concat(zs, 2);
}

Variable SsppBottleneck::forward(const Variable& x, bool training) {
    Variable y = base.forward(x, training);
    if (!enabled) return y;
    Variable z = fuse.forward(multi_scale_tokens(y));
    const int64_t n = z.value().size(0), mc = z.value().size(2);
    Variable fm = ops::permute(ops::reshape(z, {n, grid_h, grid_w, mc}), {0, 3, 1, 2});
    return out_proj.forward(fm);
}

void SsppBottleneck::visit(const std::string& prefix, nn::ModuleVisitor& v) {
    base.visit(prefix + ".base", v);
    if (!enabled) return;
    for (size_t i = 0; i < branches.size(); ++i) branches[i].visit(prefix + ".branch" + std::to_string(i + 1), v);
    fuse.visit(prefix + ".fuse", v);
    out_proj.visit(prefix + ".out_proj", v);
}

}  // namespace a4
