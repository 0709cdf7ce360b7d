#include "a4unet/nn.hpp"

#include <cmath>

namespace a4::nn {

Tensor fan_in_normal(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

Tensor trunc_normal(std::vector<int64_t> shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v = rng.normal(0.0, stddev);
        while (std::fabs(v) > 2.0 * stddev) v = rng.normal(0.0, stddev);
        t[i] = v;
    }
    return t;
}

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride_, int64_t pad_, Rng& rng,
               int64_t dilation_, int64_t groups_, bool zero_init)
    : stride(stride_), pad(pad_), dilation(dilation_), groups(groups_) {
    if (in_ch % groups_ != 0 || out_ch % groups_ != 0)
        throw ConfigError("conv channels (" + std::to_string(in_ch) + "->" + std::to_string(out_ch) +
                          ") not divisible by groups " + std::to_string(groups_));
    const int64_t fan_in = (in_ch / groups_) * kernel * kernel;
    Tensor w = zero_init ? Tensor({out_ch, in_ch / groups_, kernel, kernel})
                         : fan_in_normal({out_ch, in_ch / groups_, kernel, kernel}, fan_in, rng);
    weight = Variable::leaf(std::move(w), true);
    bias = Variable::leaf(Tensor({out_ch}), true);
}

void Conv2d::visit(const std::string& prefix, ModuleVisitor& v) {
    v.param(prefix + ".weight", weight);
    v.param(prefix + ".bias", bias);
}

Linear::Linear(int64_t in, int64_t out, Rng& rng) {
    weight = Variable::leaf(trunc_normal({out, in}, 0.02, rng), true);
    bias = Variable::leaf(Tensor({out}), true);
}

void Linear::visit(const std::string& prefix, ModuleVisitor& v) {
    v.param(prefix + ".weight", weight);
    v.param(prefix + ".bias", bias);
}

BatchNorm2d::BatchNorm2d(int64_t channels) {
    gamma = Variable::leaf(Tensor::full({channels}, 1.0), true);
    beta = Variable::leaf(Tensor({channels}), true);
    running_mean = Tensor({channels});
    running_var = Tensor::full({channels}, 1.0);
}

void BatchNorm2d::visit(const std::string& prefix, ModuleVisitor& v) {
    v.param(prefix + ".gamma", gamma);
    v.param(prefix + ".beta", beta);
    v.buffer(prefix + ".running_mean", running_mean);
    v.buffer(prefix + ".running_var", running_var);
}

LayerNorm::LayerNorm(int64_t dim) {
    gamma = Variable::leaf(Tensor::full({dim}, 1.0), true);
    beta = Variable::leaf(Tensor({dim}), true);
}

void LayerNorm::visit(const std::string& prefix, ModuleVisitor& v) {
    v.param(prefix + ".gamma", gamma);
    v.param(prefix + ".beta", beta);
}

DeformConv2d::DeformConv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t pad_, Rng& rng,
                           int64_t dilation_, int64_t groups_)
    : pad(pad_), dilation(dilation_), groups(groups_) {
    if (dilation_ * (kernel - 1) != 2 * pad_)
        throw ConfigError("deformable conv needs pad = dilation*(kernel-1)/2 to preserve shape; kernel " +
                          std::to_string(kernel) + " dilation " + std::to_string(dilation_) +
                          " has no integral padding");
    offset_conv = Conv2d(in_ch, 2 * kernel * kernel, 3, 1, 1, rng, 1, 1, /*zero_init=*/true);
    const int64_t fan_in = (in_ch / groups_) * kernel * kernel;
    weight = Variable::leaf(fan_in_normal({out_ch, in_ch / groups_, kernel, kernel}, fan_in, rng), true);
    bias = Variable::leaf(Tensor({out_ch}), true);
}

void DeformConv2d::visit(const std::string& prefix, ModuleVisitor& v) {
    offset_conv.visit(prefix + ".offset_conv", v);
    v.param(prefix + ".weight", weight);
    v.param(prefix + ".bias", bias);
}

ResidualConvBlock::ResidualConvBlock(int64_t in_ch, int64_t out_ch, Rng& rng) {
    n1 = BatchNorm2d(in_ch);
    c1 = Conv2d(in_ch, out_ch, 3, 1, 1, rng);
    n2 = BatchNorm2d(out_ch);
    c2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng);
    projected = in_ch != out_ch;
    if (projected) shortcut = Conv2d(in_ch, out_ch, 1, 1, 0, rng);
}

Variable ResidualConvBlock::forward(const Variable& x, bool training) {
    Variable h = c1.forward(ops::gelu(n1.forward(x, training)));
    h = c2.forward(ops::gelu(n2.forward(h, training)));
    Variable s = projected ? shortcut.forward(x) : x;
    return ops::add(s, h);
}

void ResidualConvBlock::visit(const std::string& prefix, ModuleVisitor& v) {
    n1.visit(prefix + ".norm1", v);
    c1.visit(prefix + ".conv1", v);
    n2.visit(prefix + ".norm2", v);
    c2.visit(prefix + ".conv2", v);
    if (projected) shortcut.visit(prefix + ".shortcut", v);
}

}  // namespace a4::nn
