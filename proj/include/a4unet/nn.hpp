#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "a4unet/autograd.hpp"
#include "a4unet/tensor.hpp"

namespace a4::nn {

/// Walks a module tree; used by the optimizer, checkpoint I/O and describe().
/// Buffers are non-learned state that still belongs in a checkpoint
/// (batch-norm running statistics). Traversal order is construction order
/// and therefore stable.
class ModuleVisitor {
public:
    virtual ~ModuleVisitor() = default;
    virtual void param(const std::string& name, Variable& p) = 0;
    virtual void buffer(const std::string& name, Tensor& b) = 0;
};

class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}
    double normal(double mean, double stddev) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// Unit-gain fan-in scaling (stddev 1/sqrt(fan_in)); keeps activation
/// variance roughly constant through the long 1x1-projection chains.
Tensor fan_in_normal(std::vector<int64_t> shape, int64_t fan_in, Rng& rng);
Tensor trunc_normal(std::vector<int64_t> shape, double stddev, Rng& rng);

struct Conv2d {
    Variable weight, bias;
    int64_t stride = 1, pad = 0, dilation = 1, groups = 1;

    Conv2d() = default;
    Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad, Rng& rng,
           int64_t dilation = 1, int64_t groups = 1, bool zero_init = false);
    Variable forward(const Variable& x) const { return ops::conv2d(x, weight, bias, stride, pad, dilation, groups); }
    void visit(const std::string& prefix, ModuleVisitor& v);
};

struct Linear {
    Variable weight, bias;

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng);
    Variable forward(const Variable& x) const { return ops::linear(x, weight, bias); }
    void visit(const std::string& prefix, ModuleVisitor& v);
};

struct BatchNorm2d {
    Variable gamma, beta;
    Tensor running_mean, running_var;
    double momentum = 0.1, eps = 1e-5;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int64_t channels);
    Variable forward(const Variable& x, bool training) {
        return ops::batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }
    void visit(const std::string& prefix, ModuleVisitor& v);
};

struct LayerNorm {
    Variable gamma, beta;
    double eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(int64_t dim);
    Variable forward(const Variable& x) const { return ops::layer_norm(x, gamma, beta, eps); }
    void visit(const std::string& prefix, ModuleVisitor& v);
};

/// Deformable convolution with its offset field produced by a standard 3x3
/// convolution. The offset branch starts at zero weights and biases, so a
/// freshly built layer behaves exactly like its dense counterpart.
struct DeformConv2d {
    Conv2d offset_conv;
    Variable weight, bias;
    int64_t pad = 0, dilation = 1, groups = 1;

    DeformConv2d() = default;
    DeformConv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t pad, Rng& rng, int64_t dilation = 1,
                 int64_t groups = 1);
    Variable forward(const Variable& x) const {
        Variable off = offset_conv.forward(x);
        return ops::deform_conv2d(x, off, weight, bias, pad, dilation, groups);
    }
    void visit(const std::string& prefix, ModuleVisitor& v);
};

/// Pre-activation residual block: out = shortcut(x) + W2 g(N2 (W1 g(N1 x))).
/// The shortcut is identity when in_ch == out_ch, else a 1x1 projection.
struct ResidualConvBlock {
    BatchNorm2d n1, n2;
    Conv2d c1, c2;
    Conv2d shortcut;
    bool projected = false;

    ResidualConvBlock() = default;
    ResidualConvBlock(int64_t in_ch, int64_t out_ch, Rng& rng);
    Variable forward(const Variable& x, bool training);
    void visit(const std::string& prefix, ModuleVisitor& v);
};

/// Collects parameter tensors (name -> Variable) in traversal order.
struct ParamCollector : ModuleVisitor {
    std::vector<std::pair<std::string, Variable*>> params;
    std::vector<std::pair<std::string, Tensor*>> buffers;
    void param(const std::string& name, Variable& p) override { params.emplace_back(name, &p); }
    void buffer(const std::string& name, Tensor& b) override { buffers.emplace_back(name, &b); }
};

}  // namespace a4::nn
