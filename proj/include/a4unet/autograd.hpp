#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "a4unet/tensor.hpp"

namespace a4 {

/// One node of the dynamic computation graph.
struct VarNode {
    Tensor value;
    Tensor grad;  // allocated on first accumulation during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<VarNode>> parents;
    std::function<void(VarNode&)> backward_fn;  // null for leaves
};

/// Shared handle to a graph node. Copies alias the same node, which is how
/// parameters stay shared between the model and the optimizer.
class Variable {
public:
    Variable() = default;
    explicit Variable(std::shared_ptr<VarNode> node) : node_(std::move(node)) {}

    static Variable leaf(Tensor value, bool requires_grad = false);
    static Variable constant(Tensor value) { return leaf(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& value_mut() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool has_grad() const { return defined() && node_->grad.numel() > 0; }
    void zero_grad() { node_->grad = Tensor(); }
    bool requires_grad() const { return defined() && node_->requires_grad; }
    const std::vector<int64_t>& shape() const { return node_->value.shape(); }
    int64_t numel() const { return node_->value.numel(); }
    const std::shared_ptr<VarNode>& node() const { return node_; }

private:
    std::shared_ptr<VarNode> node_;
};

/// Reverse-mode sweep from a scalar root; accumulates into .grad of every
/// reachable node with requires_grad set.
void backward(const Variable& root);

/// While a guard is alive, newly created ops record no graph edges; forward
/// values are unaffected. Used for inference and finite-difference probes.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

namespace ops {

// arithmetic, NumPy-style broadcasting
Variable add(const Variable& a, const Variable& b);
Variable sub(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable div(const Variable& a, const Variable& b);
Variable neg(const Variable& a);
Variable scale(const Variable& a, double s);
Variable add_scalar(const Variable& a, double s);

// shape manipulation (all copying)
Variable reshape(const Variable& a, std::vector<int64_t> shape);
Variable permute(const Variable& a, std::vector<int> perm);
Variable concat(const std::vector<Variable>& parts, int axis);
Variable slice(const Variable& a, int axis, int64_t start, int64_t length);
/// cyclic shift of axes 1 (rows) and 2 (cols) of a rank-4 [N, H, W, C] tensor
Variable roll_hw(const Variable& a, int64_t shift_h, int64_t shift_w);

// reductions
Variable sum(const Variable& a, std::vector<int> axes, bool keepdims = false);
Variable mean(const Variable& a, std::vector<int> axes, bool keepdims = false);
Variable sum_all(const Variable& a);
Variable mean_all(const Variable& a);
Variable channel_max(const Variable& a);   // [N,C,H,W] -> [N,1,H,W]
Variable channel_mean(const Variable& a);  // [N,C,H,W] -> [N,1,H,W]

// elementwise
Variable relu(const Variable& a);
Variable gelu(const Variable& a);
Variable sigmoid(const Variable& a);

// softmax family over the last axis
Variable softmax(const Variable& a);
Variable log_softmax(const Variable& a);

// matrix products
Variable matmul(const Variable& a, const Variable& b);                    // [m,k]x[k,n]
Variable bmm(const Variable& a, const Variable& b, bool transpose_b);     // [B,m,k]x[B,k,n] or [B,n,k]
Variable linear(const Variable& x, const Variable& w, const Variable& b); // x[...,in], w[out,in]

// structured network ops
Variable conv2d(const Variable& x, const Variable& w, const Variable& b, int64_t stride, int64_t pad,
                int64_t dilation = 1, int64_t groups = 1);
Variable deform_conv2d(const Variable& x, const Variable& offsets, const Variable& w, const Variable& b,
                       int64_t pad, int64_t dilation = 1, int64_t groups = 1);
Variable resize_bilinear(const Variable& x, int64_t out_h, int64_t out_w);
Variable batch_norm2d(const Variable& x, const Variable& gamma, const Variable& beta, Tensor& running_mean,
                      Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);
Variable layer_norm(const Variable& x, const Variable& gamma, const Variable& beta, double eps = 1e-5);
/// descriptor[n,c] = <x[n,c,:,:], bank[c,:,:]>
Variable channel_dct_pool(const Variable& x, const Variable& bank);
/// row gather: out[i,:] = table[idx[i],:]
Variable embedding_rows(const Variable& table, std::vector<int64_t> idx);

}  // namespace ops

}  // namespace a4
