#include "a4unet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "a4unet/kernels.hpp"

namespace a4 {

namespace {

thread_local int g_no_grad_depth = 0;

Tensor& ensure_grad(VarNode& n) {
    if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void axpy(Tensor& dst, const Tensor& src) {
    double* d = dst.data();
    const double* s = src.data();
    const int64_t n = dst.numel();
    for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

// strides of `shape` aligned to rank `out_rank`, with 0 where the dim broadcasts
std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& shape, const std::vector<int64_t>& out_shape) {
    const size_t out_rank = out_shape.size();
    std::vector<int64_t> st(out_rank, 0);
    int64_t stride = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        const size_t oi = out_rank - (shape.size() - static_cast<size_t>(i));
        st[oi] = (shape[static_cast<size_t>(i)] == 1 && out_shape[oi] != 1) ? 0 : stride;
        stride *= shape[static_cast<size_t>(i)];
    }
    return st;
}

template <class Fn>
Tensor broadcast_combine(const Tensor& a, const Tensor& b, Fn fn) {
    if (a.same_shape(b)) {
        Tensor out(a.shape());
        const double* pa = a.data();
        const double* pb = b.data();
        double* po = out.data();
        const int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = fn(pa[i], pb[i]);
        return out;
    }
    const auto out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor out(out_shape);
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    const size_t r = out_shape.size();
    std::vector<int64_t> idx(r, 0);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    int64_t oa = 0, ob = 0;
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
        po[i] = fn(pa[oa], pb[ob]);
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            oa += sa[d];
            ob += sb[d];
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    return out;
}

// sum `g` over the axes that were broadcast to reach its shape from `target`
Tensor reduce_to_shape(const Tensor& g, const std::vector<int64_t>& target) {
    if (g.shape() == target) return g;
    Tensor out(target);
    const auto st = broadcast_strides(target, g.shape());
    const auto& gs = g.shape();
    const size_t r = gs.size();
    std::vector<int64_t> idx(r, 0);
    const double* pg = g.data();
    double* po = out.data();
    int64_t off = 0;
    const int64_t n = g.numel();
    for (int64_t i = 0; i < n; ++i) {
        po[off] += pg[i];
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            off += st[d];
            if (++idx[d] < gs[d]) break;
            idx[d] = 0;
            off -= st[d] * gs[d];
        }
    }
    return out;
}

Variable make_op(Tensor value, std::vector<Variable> parents, std::function<void(VarNode&)> backward_fn) {
    auto n = std::make_shared<VarNode>();
    n->value = std::move(value);
    if (grad_enabled()) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || p.requires_grad();
        n->requires_grad = rg;
        if (rg) {
            n->parents.reserve(parents.size());
            for (auto& p : parents) n->parents.push_back(p.node());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Variable(n);
}

void add_reduced(VarNode& parent, const Tensor& delta) {
    if (delta.shape() == parent.value.shape()) {
        ensure_grad(parent);
        axpy(parent.grad, delta);
    } else {
        Tensor r = reduce_to_shape(delta, parent.value.shape());
        ensure_grad(parent);
        axpy(parent.grad, r);
    }
}

}  // namespace

Variable Variable::leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<VarNode>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Variable(n);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const Variable& root) {
    if (!root.defined()) throw ShapeError("backward on undefined Variable");
    VarNode* r = root.node().get();
    if (r->value.numel() != 1) throw ShapeError("backward root must be a scalar, got " + r->value.shape_str());
    if (!r->requires_grad) return;

    std::vector<VarNode*> order;
    std::unordered_set<VarNode*> visited;
    struct Frame {
        VarNode* n;
        size_t next;
    };
    std::vector<Frame> stack{{r, 0}};
    visited.insert(r);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            VarNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    r->grad = Tensor::full(r->value.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        VarNode* n = *it;
        if (n->backward_fn && n->grad.numel() > 0) n->backward_fn(*n);
    }
}

namespace ops {

Variable add(const Variable& a, const Variable& b) {
    Tensor v = broadcast_combine(a.value(), b.value(), [](double x, double y) { return x + y; });
    return make_op(std::move(v), {a, b}, [](VarNode& self) {
        for (int i = 0; i < 2; ++i)
            if (self.parents[i]->requires_grad) add_reduced(*self.parents[i], self.grad);
    });
}

Variable sub(const Variable& a, const Variable& b) {
    Tensor v = broadcast_combine(a.value(), b.value(), [](double x, double y) { return x - y; });
    return make_op(std::move(v), {a, b}, [](VarNode& self) {
        if (self.parents[0]->requires_grad) add_reduced(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
            Tensor neg_g(self.grad.shape());
            const double* g = self.grad.data();
            double* o = neg_g.data();
            for (int64_t i = 0; i < neg_g.numel(); ++i) o[i] = -g[i];
            add_reduced(*self.parents[1], neg_g);
        }
    });
}

Variable mul(const Variable& a, const Variable& b) {
    Tensor v = broadcast_combine(a.value(), b.value(), [](double x, double y) { return x * y; });
    return make_op(std::move(v), {a, b}, [](VarNode& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
            Tensor da = broadcast_combine(self.grad, bv, [](double g, double y) { return g * y; });
            add_reduced(*self.parents[0], da);
        }
        if (self.parents[1]->requires_grad) {
            Tensor db = broadcast_combine(self.grad, av, [](double g, double x) { return g * x; });
            add_reduced(*self.parents[1], db);
        }
    });
}

Variable div(const Variable& a, const Variable& b) {
    Tensor v = broadcast_combine(a.value(), b.value(), [](double x, double y) { return x / y; });
    return make_op(std::move(v), {a, b}, [](VarNode& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
            Tensor da = broadcast_combine(self.grad, bv, [](double g, double y) { return g / y; });
            add_reduced(*self.parents[0], da);
        }
        if (self.parents[1]->requires_grad) {
            Tensor gxa = broadcast_combine(self.grad, av, [](double g, double x) { return g * x; });
            Tensor db = broadcast_combine(gxa, bv, [](double t, double y) { return -t / (y * y); });
            add_reduced(*self.parents[1], db);
        }
    });
}

Variable neg(const Variable& a) { return scale(a, -1.0); }

Variable scale(const Variable& a, double s) {
    Tensor v(a.shape());
    const double* pa = a.value().data();
    double* pv = v.data();
    for (int64_t i = 0; i < v.numel(); ++i) pv[i] = pa[i] * s;
    return make_op(std::move(v), {a}, [s](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        const double* g = self.grad.data();
        double* o = pg.data();
        for (int64_t i = 0; i < pg.numel(); ++i) o[i] += g[i] * s;
    });
}

Variable add_scalar(const Variable& a, double s) {
    Tensor v(a.shape());
    const double* pa = a.value().data();
    double* pv = v.data();
    for (int64_t i = 0; i < v.numel(); ++i) pv[i] = pa[i] + s;
    return make_op(std::move(v), {a}, [](VarNode& self) {
        if (self.parents[0]->requires_grad) add_reduced(*self.parents[0], self.grad);
    });
}

Variable reshape(const Variable& a, std::vector<int64_t> shape) {
    Tensor v = a.value().reshaped(std::move(shape));
    return make_op(std::move(v), {a}, [](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        add_reduced(*self.parents[0], self.grad.reshaped(self.parents[0]->value.shape()));
    });
}

namespace {

Tensor permute_copy(const Tensor& t, const std::vector<int>& perm) {
    const auto& in_shape = t.shape();
    const size_t r = in_shape.size();
    std::vector<int64_t> out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
    Tensor out(out_shape);
    const auto in_strides = t.strides();
    // stride of the output index along each *input* axis
    Tensor dummy;
    std::vector<int64_t> out_strides_by_in(r, 0);
    {
        std::vector<int64_t> os(r, 1);
        for (int i = static_cast<int>(r) - 2; i >= 0; --i) os[i] = os[i + 1] * out_shape[i + 1];
        for (size_t i = 0; i < r; ++i) out_strides_by_in[static_cast<size_t>(perm[i])] = os[i];
    }
    std::vector<int64_t> idx(r, 0);
    const double* pi = t.data();
    double* po = out.data();
    int64_t ooff = 0;
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
        po[ooff] = pi[i];
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            ooff += out_strides_by_in[d];
            if (++idx[d] < in_shape[d]) break;
            idx[d] = 0;
            ooff -= out_strides_by_in[d] * in_shape[d];
        }
    }
    return out;
}

}  // namespace

Variable permute(const Variable& a, std::vector<int> perm) {
    if (static_cast<int>(perm.size()) != a.value().rank())
        throw ShapeError("permute rank mismatch for " + a.value().shape_str());
    Tensor v = permute_copy(a.value(), perm);
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    return make_op(std::move(v), {a}, [inv](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        add_reduced(*self.parents[0], permute_copy(self.grad, inv));
    });
}

Variable concat(const std::vector<Variable>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const auto& first = parts[0].value();
    int r = first.rank();
    if (axis < 0) axis += r;
    std::vector<int64_t> out_shape = first.shape();
    int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.value().rank() != r) throw ShapeError("concat rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && p.value().size(d) != first.size(d))
                throw ShapeError("concat shape mismatch at axis " + std::to_string(d) + ": " +
                                 p.value().shape_str() + " vs " + first.shape_str());
        axis_total += p.value().size(axis);
    }
    out_shape[static_cast<size_t>(axis)] = axis_total;
    Tensor out(out_shape);

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<size_t>(d)];

    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t len = p.value().size(axis) * inner;
        const double* src = p.value().data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(src + o * len, src + (o + 1) * len, out.data() + o * axis_total * inner + off);
        off += len;
    }

    std::vector<Variable> vars = parts;
    return make_op(std::move(out), std::move(vars), [axis, outer, inner, axis_total](VarNode& self) {
        int64_t off = 0;
        for (auto& pn : self.parents) {
            const int64_t len = pn->value.size(axis) * inner;
            if (pn->requires_grad) {
                Tensor& pg = ensure_grad(*pn);
                const double* g = self.grad.data();
                for (int64_t o = 0; o < outer; ++o) {
                    const double* gsrc = g + o * axis_total * inner + off;
                    double* dst = pg.data() + o * len;
                    for (int64_t i = 0; i < len; ++i) dst[i] += gsrc[i];
                }
            }
            off += len;
        }
    });
}

Variable slice(const Variable& a, int axis, int64_t start, int64_t length) {
    const auto& t = a.value();
    int r = t.rank();
    if (axis < 0) axis += r;
    if (start < 0 || start + length > t.size(axis)) throw ShapeError("slice out of range on " + t.shape_str());
    std::vector<int64_t> out_shape = t.shape();
    out_shape[static_cast<size_t>(axis)] = length;
    Tensor out(out_shape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= t.size(d);
    for (int d = axis + 1; d < r; ++d) inner *= t.size(d);
    const int64_t in_axis = t.size(axis);
    for (int64_t o = 0; o < outer; ++o)
        std::copy(t.data() + (o * in_axis + start) * inner, t.data() + (o * in_axis + start + length) * inner,
                  out.data() + o * length * inner);
    return make_op(std::move(out), {a}, [axis, start, length, outer, inner, in_axis](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        const double* g = self.grad.data();
        for (int64_t o = 0; o < outer; ++o) {
            double* dst = pg.data() + (o * in_axis + start) * inner;
            const double* src = g + o * length * inner;
            for (int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
        }
    });
}

namespace {

Tensor roll_hw_copy(const Tensor& t, int64_t sh, int64_t sw) {
    const int64_t n = t.size(0), h = t.size(1), w = t.size(2), c = t.size(3);
    Tensor out(t.shape());
    auto wrap = [](int64_t v, int64_t m) { return ((v % m) + m) % m; };
    for (int64_t b = 0; b < n; ++b)
        for (int64_t y = 0; y < h; ++y) {
            const int64_t oy = wrap(y + sh, h);
            for (int64_t x = 0; x < w; ++x) {
                const int64_t ox = wrap(x + sw, w);
                const double* src = t.data() + ((b * h + y) * w + x) * c;
                double* dst = out.data() + ((b * h + oy) * w + ox) * c;
                std::copy(src, src + c, dst);
            }
        }
    return out;
}

}  // namespace

Variable roll_hw(const Variable& a, int64_t shift_h, int64_t shift_w) {
    if (a.value().rank() != 4) throw ShapeError("roll_hw expects [N,H,W,C], got " + a.value().shape_str());
    Tensor v = roll_hw_copy(a.value(), shift_h, shift_w);
    return make_op(std::move(v), {a}, [shift_h, shift_w](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        add_reduced(*self.parents[0], roll_hw_copy(self.grad, -shift_h, -shift_w));
    });
}

namespace {

struct ReducePlan {
    std::vector<int64_t> out_shape;       // with keepdims
    std::vector<int64_t> final_shape;     // after optional squeeze
    std::vector<int64_t> out_stride_by_in;  // 0 on reduced axes
    int64_t count = 1;
};

ReducePlan make_reduce_plan(const std::vector<int64_t>& shape, std::vector<int> axes, bool keepdims) {
    const int r = static_cast<int>(shape.size());
    std::vector<bool> reduced(static_cast<size_t>(r), false);
    for (int a : axes) {
        if (a < 0) a += r;
        if (a < 0 || a >= r) throw ShapeError("reduce axis out of range");
        reduced[static_cast<size_t>(a)] = true;
    }
    ReducePlan p;
    p.out_shape.resize(static_cast<size_t>(r));
    for (int d = 0; d < r; ++d) {
        p.out_shape[static_cast<size_t>(d)] = reduced[static_cast<size_t>(d)] ? 1 : shape[static_cast<size_t>(d)];
        if (reduced[static_cast<size_t>(d)]) p.count *= shape[static_cast<size_t>(d)];
    }
    for (int d = 0; d < r; ++d)
        if (!reduced[static_cast<size_t>(d)] || keepdims) p.final_shape.push_back(p.out_shape[static_cast<size_t>(d)]);
    if (p.final_shape.empty()) p.final_shape.push_back(1);
    std::vector<int64_t> os(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) os[static_cast<size_t>(i)] = os[static_cast<size_t>(i + 1)] * p.out_shape[static_cast<size_t>(i + 1)];
    p.out_stride_by_in.assign(static_cast<size_t>(r), 0);
    for (int d = 0; d < r; ++d)
        p.out_stride_by_in[static_cast<size_t>(d)] = reduced[static_cast<size_t>(d)] ? 0 : os[static_cast<size_t>(d)];
    return p;
}

Variable reduce_impl(const Variable& a, std::vector<int> axes, bool keepdims, bool take_mean) {
    const auto& t = a.value();
    ReducePlan plan = make_reduce_plan(t.shape(), std::move(axes), keepdims);
    Tensor out(plan.out_shape);
    {
        const auto& in_shape = t.shape();
        const size_t r = in_shape.size();
        std::vector<int64_t> idx(r, 0);
        const double* pi = t.data();
        double* po = out.data();
        int64_t ooff = 0;
        const int64_t n = t.numel();
        for (int64_t i = 0; i < n; ++i) {
            po[ooff] += pi[i];
            for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
                ooff += plan.out_stride_by_in[static_cast<size_t>(d)];
                if (++idx[static_cast<size_t>(d)] < in_shape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
                ooff -= plan.out_stride_by_in[static_cast<size_t>(d)] * in_shape[static_cast<size_t>(d)];
            }
        }
    }
    const double scale_v = take_mean ? 1.0 / static_cast<double>(plan.count) : 1.0;
    if (take_mean)
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= scale_v;
    Tensor shaped = out.reshaped(plan.final_shape);
    return make_op(std::move(shaped), {a}, [plan, scale_v](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        const auto& in_shape = pg.shape();
        const size_t r = in_shape.size();
        std::vector<int64_t> idx(r, 0);
        const double* g = self.grad.data();
        double* po = pg.data();
        int64_t ooff = 0;
        const int64_t n = pg.numel();
        for (int64_t i = 0; i < n; ++i) {
            po[i] += g[ooff] * scale_v;
            for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
                ooff += plan.out_stride_by_in[static_cast<size_t>(d)];
                if (++idx[static_cast<size_t>(d)] < in_shape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
                ooff -= plan.out_stride_by_in[static_cast<size_t>(d)] * in_shape[static_cast<size_t>(d)];
            }
        }
    });
}

}  // namespace

Variable sum(const Variable& a, std::vector<int> axes, bool keepdims) { return reduce_impl(a, std::move(axes), keepdims, false); }
Variable mean(const Variable& a, std::vector<int> axes, bool keepdims) { return reduce_impl(a, std::move(axes), keepdims, true); }

Variable sum_all(const Variable& a) {
    std::vector<int> axes(static_cast<size_t>(a.value().rank()));
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return sum(a, axes, false);
}

Variable mean_all(const Variable& a) {
    std::vector<int> axes(static_cast<size_t>(a.value().rank()));
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return mean(a, axes, false);
}

Variable channel_max(const Variable& a) {
    const auto& t = a.value();
    if (t.rank() != 4) throw ShapeError("channel_max expects [N,C,H,W], got " + t.shape_str());
    const int64_t n = t.size(0), c = t.size(1), hw = t.size(2) * t.size(3);
    Tensor out({n, 1, t.size(2), t.size(3)});
    auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(n * hw));
    for (int64_t b = 0; b < n; ++b) {
        const double* xp = t.data() + b * c * hw;
        for (int64_t p = 0; p < hw; ++p) {
            double best = xp[p];
            int32_t bi = 0;
            for (int64_t ch = 1; ch < c; ++ch) {
                const double v = xp[ch * hw + p];
                if (v > best) {
                    best = v;
                    bi = static_cast<int32_t>(ch);
                }
            }
            out[b * hw + p] = best;
            (*argmax)[static_cast<size_t>(b * hw + p)] = bi;
        }
    }
    return make_op(std::move(out), {a}, [n, c, hw, argmax](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        const double* g = self.grad.data();
        for (int64_t b = 0; b < n; ++b)
            for (int64_t p = 0; p < hw; ++p) {
                const int64_t ch = (*argmax)[static_cast<size_t>(b * hw + p)];
                pg.data()[(b * c + ch) * hw + p] += g[b * hw + p];
            }
    });
}

Variable channel_mean(const Variable& a) {
    const auto& t = a.value();
    if (t.rank() != 4) throw ShapeError("channel_mean expects [N,C,H,W], got " + t.shape_str());
    return mean(a, {1}, true);
}

namespace {

template <class FwdFn, class GradFn>
Variable unary_elementwise(const Variable& a, FwdFn fwd, GradFn grad_from_x) {
    Tensor v(a.shape());
    const double* pa = a.value().data();
    double* pv = v.data();
    for (int64_t i = 0; i < v.numel(); ++i) pv[i] = fwd(pa[i]);
    return make_op(std::move(v), {a}, [grad_from_x](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        const double* x = self.parents[0]->value.data();
        const double* g = self.grad.data();
        double* o = pg.data();
        for (int64_t i = 0; i < pg.numel(); ++i) o[i] += g[i] * grad_from_x(x[i]);
    });
}

}  // namespace

Variable relu(const Variable& a) {
    return unary_elementwise(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Variable gelu(const Variable& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return unary_elementwise(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x) {
            return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        });
}

Variable sigmoid(const Variable& a) {
    Tensor v(a.shape());
    const double* pa = a.value().data();
    double* pv = v.data();
    for (int64_t i = 0; i < v.numel(); ++i) {
        const double x = pa[i];
        pv[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return make_op(std::move(v), {a}, [](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        const double* y = self.value.data();
        const double* g = self.grad.data();
        double* o = pg.data();
        for (int64_t i = 0; i < pg.numel(); ++i) o[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Variable softmax(const Variable& a) {
    const auto& t = a.value();
    const int64_t cols = t.size(-1);
    const int64_t rows = t.numel() / cols;
    Tensor v(t.shape());
    kernels::softmax_rows(t.data(), v.data(), rows, cols);
    return make_op(std::move(v), {a}, [rows, cols](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor dx(self.value.shape());
        kernels::softmax_backward_rows(self.value.data(), self.grad.data(), dx.data(), rows, cols);
        add_reduced(*self.parents[0], dx);
    });
}

Variable log_softmax(const Variable& a) {
    const auto& t = a.value();
    const int64_t cols = t.size(-1);
    const int64_t rows = t.numel() / cols;
    Tensor v(t.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = t.data() + r * cols;
        double* yr = v.data() + r * cols;
        double m = xr[0];
        for (int64_t c = 1; c < cols; ++c) m = xr[c] > m ? xr[c] : m;
        double s = 0.0;
        for (int64_t c = 0; c < cols; ++c) s += std::exp(xr[c] - m);
        const double lse = m + std::log(s);
        for (int64_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
    }
    return make_op(std::move(v), {a}, [rows, cols](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        const double* y = self.value.data();
        const double* g = self.grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            double gsum = 0.0;
            for (int64_t c = 0; c < cols; ++c) gsum += g[r * cols + c];
            double* o = pg.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) o[c] += g[r * cols + c] - std::exp(y[r * cols + c]) * gsum;
        }
    });
}

Variable matmul(const Variable& a, const Variable& b) {
    const auto& ta = a.value();
    const auto& tb = b.value();
    if (ta.rank() != 2 || tb.rank() != 2 || ta.size(1) != tb.size(0))
        throw ShapeError("matmul shapes " + ta.shape_str() + " x " + tb.shape_str());
    const int64_t m = ta.size(0), k = ta.size(1), n = tb.size(1);
    Tensor v({m, n});
    kernels::matmul_nn(ta.data(), tb.data(), v.data(), m, k, n, false);
    return make_op(std::move(v), {a, b}, [m, k, n](VarNode& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[0]);
            kernels::matmul_nt(self.grad.data(), bv.data(), pg.data(), m, n, k, true);
        }
        if (self.parents[1]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[1]);
            kernels::matmul_tn(av.data(), self.grad.data(), pg.data(), k, m, n, true);
        }
    });
}

Variable bmm(const Variable& a, const Variable& b, bool transpose_b) {
    const auto& ta = a.value();
    const auto& tb = b.value();
    if (ta.rank() != 3 || tb.rank() != 3 || ta.size(0) != tb.size(0))
        throw ShapeError("bmm shapes " + ta.shape_str() + " x " + tb.shape_str());
    const int64_t bt = ta.size(0), m = ta.size(1), k = ta.size(2);
    const int64_t n = transpose_b ? tb.size(1) : tb.size(2);
    if ((transpose_b ? tb.size(2) : tb.size(1)) != k)
        throw ShapeError("bmm inner dim mismatch " + ta.shape_str() + " x " + tb.shape_str());
    Tensor v({bt, m, n});
    for (int64_t i = 0; i < bt; ++i) {
        if (transpose_b)
            kernels::matmul_nt(ta.data() + i * m * k, tb.data() + i * n * k, v.data() + i * m * n, m, k, n, false);
        else
            kernels::matmul_nn(ta.data() + i * m * k, tb.data() + i * k * n, v.data() + i * m * n, m, k, n, false);
    }
    return make_op(std::move(v), {a, b}, [bt, m, k, n, transpose_b](VarNode& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        const double* g = self.grad.data();
        if (self.parents[0]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[0]);
            for (int64_t i = 0; i < bt; ++i) {
                // da = g * B (or g * B when b was transposed: da = g[m,n] x b[n,k])
                if (transpose_b)
                    kernels::matmul_nn(g + i * m * n, bv.data() + i * n * k, pg.data() + i * m * k, m, n, k, true);
                else
                    kernels::matmul_nt(g + i * m * n, bv.data() + i * k * n, pg.data() + i * m * k, m, n, k, true);
            }
        }
        if (self.parents[1]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[1]);
            for (int64_t i = 0; i < bt; ++i) {
                if (transpose_b)
                    // db[n,k] = g^T[n,m] x a[m,k]
                    kernels::matmul_tn(g + i * m * n, av.data() + i * m * k, pg.data() + i * n * k, n, m, k, true);
                else
                    // db[k,n] = a^T[k,m] x g[m,n]
                    kernels::matmul_tn(av.data() + i * m * k, g + i * m * n, pg.data() + i * k * n, k, m, n, true);
            }
        }
    });
}

Variable linear(const Variable& x, const Variable& w, const Variable& b) {
    const auto& tx = x.value();
    const auto& tw = w.value();
    const int64_t in = tx.size(-1);
    if (tw.rank() != 2 || tw.size(1) != in)
        throw ShapeError("linear: x " + tx.shape_str() + " vs w " + tw.shape_str());
    const int64_t out = tw.size(0);
    const int64_t rows = tx.numel() / in;
    std::vector<int64_t> out_shape = tx.shape();
    out_shape.back() = out;
    Tensor v(out_shape);
    kernels::matmul_nt(tx.data(), tw.data(), v.data(), rows, in, out, false);
    if (b.defined()) {
        if (b.value().numel() != out) throw ShapeError("linear bias size mismatch");
        const double* pb = b.value().data();
        for (int64_t r = 0; r < rows; ++r) {
            double* vr = v.data() + r * out;
            for (int64_t j = 0; j < out; ++j) vr[j] += pb[j];
        }
    }
    std::vector<Variable> parents = b.defined() ? std::vector<Variable>{x, w, b} : std::vector<Variable>{x, w};
    return make_op(std::move(v), std::move(parents), [rows, in, out](VarNode& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& wv = self.parents[1]->value;
        const double* g = self.grad.data();
        if (self.parents[0]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[0]);
            kernels::matmul_nn(g, wv.data(), pg.data(), rows, out, in, true);
        }
        if (self.parents[1]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[1]);
            kernels::matmul_tn(g, xv.data(), pg.data(), out, rows, in, true);
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[2]);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < out; ++j) pg[j] += g[r * out + j];
        }
    });
}

Variable conv2d(const Variable& x, const Variable& w, const Variable& b, int64_t stride, int64_t pad,
                int64_t dilation, int64_t groups) {
    const auto& tx = x.value();
    const auto& tw = w.value();
    if (tx.rank() != 4) throw ShapeError("conv2d input must be rank 4, got " + tx.shape_str());
    if (tw.rank() != 4) throw ShapeError("conv2d weight must be rank 4, got " + tw.shape_str());
    kernels::ConvGeom g;
    g.batch = tx.size(0);
    g.in_ch = tx.size(1);
    g.in_h = tx.size(2);
    g.in_w = tx.size(3);
    g.out_ch = tw.size(0);
    g.k_h = tw.size(2);
    g.k_w = tw.size(3);
    g.stride = stride;
    g.pad_h = pad;
    g.pad_w = pad;
    g.dilation = dilation;
    g.groups = groups;
    if (g.in_ch % groups != 0 || g.out_ch % groups != 0 || tw.size(1) != g.in_ch / groups)
        throw ShapeError("conv2d channel/group mismatch: x " + tx.shape_str() + " w " + tw.shape_str() +
                         " groups " + std::to_string(groups));
    if (b.defined() && b.value().numel() != g.out_ch) throw ShapeError("conv2d bias size mismatch");
    Tensor v({g.batch, g.out_ch, g.out_h(), g.out_w()});
    kernels::conv2d_forward(tx.data(), tw.data(), b.defined() ? b.value().data() : nullptr, v.data(), g);
    std::vector<Variable> parents = b.defined() ? std::vector<Variable>{x, w, b} : std::vector<Variable>{x, w};
    return make_op(std::move(v), std::move(parents), [g](VarNode& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& wv = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[0]);
            kernels::conv2d_backward_input(self.grad.data(), wv.data(), pg.data(), g);
        }
        const bool need_w = self.parents[1]->requires_grad;
        const bool need_b = self.parents.size() > 2 && self.parents[2]->requires_grad;
        if (need_w || need_b) {
            Tensor tmp_dw;
            double* dw_ptr = nullptr;
            if (need_w) {
                dw_ptr = ensure_grad(*self.parents[1]).data();
            } else {
                tmp_dw = Tensor(wv.shape());
                dw_ptr = tmp_dw.data();
            }
            double* db_ptr = need_b ? ensure_grad(*self.parents[2]).data() : nullptr;
            kernels::conv2d_backward_weights(xv.data(), self.grad.data(), dw_ptr, db_ptr, g);
        }
    });
}

Variable deform_conv2d(const Variable& x, const Variable& offsets, const Variable& w, const Variable& b,
                       int64_t pad, int64_t dilation, int64_t groups) {
    const auto& tx = x.value();
    const auto& toff = offsets.value();
    const auto& tw = w.value();
    if (tx.rank() != 4 || toff.rank() != 4 || tw.rank() != 4)
        throw ShapeError("deform_conv2d expects rank-4 input/offsets/weight");
    kernels::DeformGeom g;
    g.batch = tx.size(0);
    g.in_ch = tx.size(1);
    g.in_h = tx.size(2);
    g.in_w = tx.size(3);
    g.out_ch = tw.size(0);
    g.k_h = tw.size(2);
    g.k_w = tw.size(3);
    g.pad_h = pad;
    g.pad_w = pad;
    g.dilation = dilation;
    g.groups = groups;
    if (g.in_ch % groups != 0 || g.out_ch % groups != 0 || tw.size(1) != g.in_ch / groups)
        throw ShapeError("deform_conv2d channel/group mismatch");
    if (toff.size(1) != 2 * g.k_h * g.k_w)
        throw ShapeError("offset channels " + std::to_string(toff.size(1)) + " do not match 2*taps = " +
                         std::to_string(2 * g.k_h * g.k_w));
    if (toff.size(0) != g.batch || toff.size(2) != g.out_h() || toff.size(3) != g.out_w())
        throw ShapeError("offset field " + toff.shape_str() + " does not match output grid");
    if (b.defined() && b.value().numel() != g.out_ch) throw ShapeError("deform_conv2d bias size mismatch");
    Tensor v({g.batch, g.out_ch, g.out_h(), g.out_w()});
    kernels::deform_conv2d_forward(tx.data(), toff.data(), tw.data(), b.defined() ? b.value().data() : nullptr,
                                   v.data(), g);
    std::vector<Variable> parents =
        b.defined() ? std::vector<Variable>{x, offsets, w, b} : std::vector<Variable>{x, offsets, w};
    return make_op(std::move(v), std::move(parents), [g](VarNode& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& offv = self.parents[1]->value;
        const Tensor& wv = self.parents[2]->value;
        if (self.parents[0]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[0]);
            kernels::deform_conv2d_backward_input(self.grad.data(), offv.data(), wv.data(), pg.data(), g);
        }
        if (self.parents[1]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[1]);
            kernels::deform_conv2d_backward_offsets(xv.data(), self.grad.data(), offv.data(), wv.data(), pg.data(), g);
        }
        const bool need_w = self.parents[2]->requires_grad;
        const bool need_b = self.parents.size() > 3 && self.parents[3]->requires_grad;
        if (need_w || need_b) {
            Tensor tmp_dw;
            double* dw_ptr = nullptr;
            if (need_w) {
                dw_ptr = ensure_grad(*self.parents[2]).data();
            } else {
                tmp_dw = Tensor(wv.shape());
                dw_ptr = tmp_dw.data();
            }
            double* db_ptr = need_b ? ensure_grad(*self.parents[3]).data() : nullptr;
            kernels::deform_conv2d_backward_weights(xv.data(), offv.data(), self.grad.data(), dw_ptr, db_ptr, g);
        }
    });
}

Variable resize_bilinear(const Variable& x, int64_t out_h, int64_t out_w) {
    const auto& tx = x.value();
    if (tx.rank() != 4) throw ShapeError("resize_bilinear expects [N,C,H,W]");
    const int64_t planes = tx.size(0) * tx.size(1);
    const int64_t ih = tx.size(2), iw = tx.size(3);
    Tensor v({tx.size(0), tx.size(1), out_h, out_w});
    kernels::resize_bilinear_forward(tx.data(), v.data(), planes, ih, iw, out_h, out_w);
    return make_op(std::move(v), {x}, [planes, ih, iw, out_h, out_w](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        kernels::resize_bilinear_backward(self.grad.data(), pg.data(), planes, ih, iw, out_h, out_w);
    });
}

Variable batch_norm2d(const Variable& x, const Variable& gamma, const Variable& beta, Tensor& running_mean,
                      Tensor& running_var, bool training, double momentum, double eps) {
    const auto& tx = x.value();
    if (tx.rank() != 4) throw ShapeError("batch_norm2d expects [N,C,H,W]");
    const int64_t n = tx.size(0), c = tx.size(1), hw = tx.size(2) * tx.size(3);
    if (gamma.value().numel() != c || beta.value().numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        throw ShapeError("batch_norm2d parameter size mismatch for C = " + std::to_string(c));
    const int64_t cnt = n * hw;

    Tensor mean_c({c}), var_c({c});
    if (training) {
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int64_t b = 0; b < n; ++b) {
                const double* xp = tx.data() + (b * c + ch) * hw;
                for (int64_t p = 0; p < hw; ++p) s += xp[p];
            }
            mean_c[ch] = s / static_cast<double>(cnt);
        }
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int64_t b = 0; b < n; ++b) {
                const double* xp = tx.data() + (b * c + ch) * hw;
                for (int64_t p = 0; p < hw; ++p) {
                    const double d = xp[p] - mean_c[ch];
                    s += d * d;
                }
            }
            var_c[ch] = s / static_cast<double>(cnt);
        }
        // running stats keep the unbiased estimate
        const double unbias = cnt > 1 ? static_cast<double>(cnt) / static_cast<double>(cnt - 1) : 1.0;
        for (int64_t ch = 0; ch < c; ++ch) {
            running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean_c[ch];
            running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var_c[ch] * unbias;
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mean_c[ch] = running_mean[ch];
            var_c[ch] = running_var[ch];
        }
    }

    auto xhat = std::make_shared<Tensor>(tx.shape());
    Tensor inv_std({c});
    for (int64_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var_c[ch] + eps);
    Tensor v(tx.shape());
    const double* gm = gamma.value().data();
    const double* bt = beta.value().data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* xp = tx.data() + (b * c + ch) * hw;
            double* hp = xhat->data() + (b * c + ch) * hw;
            double* vp = v.data() + (b * c + ch) * hw;
            const double mu = mean_c[ch], is = inv_std[ch], gv = gm[ch], bv = bt[ch];
            for (int64_t p = 0; p < hw; ++p) {
                hp[p] = (xp[p] - mu) * is;
                vp[p] = gv * hp[p] + bv;
            }
        }

    return make_op(std::move(v), {x, gamma, beta}, [n, c, hw, cnt, xhat, inv_std, training](VarNode& self) {
        const double* g = self.grad.data();
        const double* gm = self.parents[1]->value.data();
        const bool need_x = self.parents[0]->requires_grad;
        const bool need_gamma = self.parents[1]->requires_grad;
        const bool need_beta = self.parents[2]->requires_grad;
        Tensor sum_g({c}), sum_gx({c});
        for (int64_t ch = 0; ch < c; ++ch) {
            double sg = 0.0, sgx = 0.0;
            for (int64_t b = 0; b < n; ++b) {
                const double* gp = g + (b * c + ch) * hw;
                const double* hp = xhat->data() + (b * c + ch) * hw;
                for (int64_t p = 0; p < hw; ++p) {
                    sg += gp[p];
                    sgx += gp[p] * hp[p];
                }
            }
            sum_g[ch] = sg;
            sum_gx[ch] = sgx;
        }
        if (need_gamma) {
            Tensor& pg = ensure_grad(*self.parents[1]);
            for (int64_t ch = 0; ch < c; ++ch) pg[ch] += sum_gx[ch];
        }
        if (need_beta) {
            Tensor& pg = ensure_grad(*self.parents[2]);
            for (int64_t ch = 0; ch < c; ++ch) pg[ch] += sum_g[ch];
        }
        if (need_x) {
            Tensor& pg = ensure_grad(*self.parents[0]);
            for (int64_t b = 0; b < n; ++b)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const double* gp = g + (b * c + ch) * hw;
                    const double* hp = xhat->data() + (b * c + ch) * hw;
                    double* op = pg.data() + (b * c + ch) * hw;
                    const double k = gm[ch] * inv_std[ch];
                    if (training) {
                        const double mg = sum_g[ch] / static_cast<double>(cnt);
                        const double mgx = sum_gx[ch] / static_cast<double>(cnt);
                        for (int64_t p = 0; p < hw; ++p) op[p] += k * (gp[p] - mg - hp[p] * mgx);
                    } else {
                        for (int64_t p = 0; p < hw; ++p) op[p] += k * gp[p];
                    }
                }
        }
    });
}

Variable layer_norm(const Variable& x, const Variable& gamma, const Variable& beta, double eps) {
    const auto& tx = x.value();
    const int64_t d = tx.size(-1);
    const int64_t rows = tx.numel() / d;
    if (gamma.value().numel() != d || beta.value().numel() != d)
        throw ShapeError("layer_norm parameter size mismatch for D = " + std::to_string(d));
    auto xhat = std::make_shared<Tensor>(tx.shape());
    auto inv_std = std::make_shared<Tensor>(std::vector<int64_t>{rows});
    Tensor v(tx.shape());
    const double* gm = gamma.value().data();
    const double* bt = beta.value().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = tx.data() + r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xp[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double t = xp[j] - mu;
            var += t * t;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        double* hp = xhat->data() + r * d;
        double* vp = v.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            hp[j] = (xp[j] - mu) * is;
            vp[j] = gm[j] * hp[j] + bt[j];
        }
    }
    return make_op(std::move(v), {x, gamma, beta}, [rows, d, xhat, inv_std](VarNode& self) {
        const double* g = self.grad.data();
        const double* gm = self.parents[1]->value.data();
        if (self.parents[1]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[1]);
            for (int64_t r = 0; r < rows; ++r) {
                const double* hp = xhat->data() + r * d;
                for (int64_t j = 0; j < d; ++j) pg[j] += g[r * d + j] * hp[j];
            }
        }
        if (self.parents[2]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[2]);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) pg[j] += g[r * d + j];
        }
        if (self.parents[0]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[0]);
            for (int64_t r = 0; r < rows; ++r) {
                const double* gp = g + r * d;
                const double* hp = xhat->data() + r * d;
                double* op = pg.data() + r * d;
                double mgg = 0.0, mggx = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double gg = gp[j] * gm[j];
                    mgg += gg;
                    mggx += gg * hp[j];
                }
                mgg /= static_cast<double>(d);
                mggx /= static_cast<double>(d);
                const double is = (*inv_std)[r];
                for (int64_t j = 0; j < d; ++j) op[j] += is * (gp[j] * gm[j] - mgg - hp[j] * mggx);
            }
        }
    });
}

Variable channel_dct_pool(const Variable& x, const Variable& bank) {
    const auto& tx = x.value();
    const auto& tb = bank.value();
    if (tx.rank() != 4 || tb.rank() != 3) throw ShapeError("channel_dct_pool expects x[N,C,H,W], bank[C,H,W]");
    if (tb.size(0) != tx.size(1) || tb.size(1) != tx.size(2) || tb.size(2) != tx.size(3))
        throw ShapeError("filter bank " + tb.shape_str() + " does not match feature map " + tx.shape_str());
    const int64_t n = tx.size(0), c = tx.size(1), hw = tx.size(2) * tx.size(3);
    Tensor v({n, c});
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* xp = tx.data() + (b * c + ch) * hw;
            const double* fp = tb.data() + ch * hw;
            double s = 0.0;
            for (int64_t p = 0; p < hw; ++p) s += xp[p] * fp[p];
            v[b * c + ch] = s;
        }
    return make_op(std::move(v), {x, bank}, [n, c, hw](VarNode& self) {
        const double* g = self.grad.data();
        if (self.parents[0]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[0]);
            const double* fp = self.parents[1]->value.data();
            for (int64_t b = 0; b < n; ++b)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double* op = pg.data() + (b * c + ch) * hw;
                    const double gv = g[b * c + ch];
                    const double* f = fp + ch * hw;
                    for (int64_t p = 0; p < hw; ++p) op[p] += gv * f[p];
                }
        }
        if (self.parents[1]->requires_grad) {
            Tensor& pg = ensure_grad(*self.parents[1]);
            const double* xp = self.parents[0]->value.data();
            for (int64_t b = 0; b < n; ++b)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double* op = pg.data() + ch * hw;
                    const double gv = g[b * c + ch];
                    const double* xr = xp + (b * c + ch) * hw;
                    for (int64_t p = 0; p < hw; ++p) op[p] += gv * xr[p];
                }
        }
    });
}

Variable embedding_rows(const Variable& table, std::vector<int64_t> idx) {
    const auto& tt = table.value();
    if (tt.rank() != 2) throw ShapeError("embedding_rows expects a 2D table");
    const int64_t h = tt.size(1);
    Tensor v({static_cast<int64_t>(idx.size()), h});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= tt.size(0)) throw ShapeError("embedding index out of range");
        std::copy(tt.data() + idx[i] * h, tt.data() + (idx[i] + 1) * h, v.data() + static_cast<int64_t>(i) * h);
    }
    auto ids = std::make_shared<std::vector<int64_t>>(std::move(idx));
    return make_op(std::move(v), {table}, [ids, h](VarNode& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& pg = ensure_grad(*self.parents[0]);
        const double* g = self.grad.data();
        for (size_t i = 0; i < ids->size(); ++i) {
            double* dst = pg.data() + (*ids)[i] * h;
            const double* src = g + static_cast<int64_t>(i) * h;
            for (int64_t j = 0; j < h; ++j) dst[j] += src[j];
        }
    });
}

}  // namespace ops

}  // namespace a4
