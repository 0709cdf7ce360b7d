#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "a4unet/bottleneck.hpp"
#include "test_util.hpp"

using namespace a4;
using namespace a4::testutil;

namespace {

template <class M>
void zero_params(M& m) {
    nn::ParamCollector pc;
    m.visit("m", pc);
    for (auto& [name, p] : pc.params) p->value_mut().fill(0.0);
}

void set_identity(Variable& w) {
    Tensor& t = w.value_mut();
    t.fill(0.0);
    const int64_t n = t.size(0);
    for (int64_t i = 0; i < std::min(n, t.size(1)); ++i) t.at({i, i}) = 1.0;
}

// dense multi-head attention over all tokens, written independently of the
// windowed implementation
Tensor reference_global_attention(const WindowAttention& wa, const Tensor& tokens) {
    const int64_t t = tokens.size(0), c = tokens.size(1);
    const int64_t heads = wa.heads, dh = c / heads;
    const Tensor& wqkv = wa.qkv.weight.value();  // [3C, C]
    const Tensor& bqkv = wa.qkv.bias.value();
    auto project = [&](int64_t row0, int64_t tok, int64_t j) {
        double s = bqkv[row0 + j];
        for (int64_t i = 0; i < c; ++i) s += wqkv.at({row0 + j, i}) * tokens.at({tok, i});
        return s;
    };
    Tensor out({t, c});
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < t; ++i) {
            std::vector<double> scores(static_cast<size_t>(t));
            for (int64_t j = 0; j < t; ++j) {
                double dot = 0.0;
                for (int64_t d = 0; d < dh; ++d)
                    dot += project(0, i, h * dh + d) * project(c, j, h * dh + d);
                const int64_t rel = wa.rel_index[static_cast<size_t>(i * t + j)];
                scores[static_cast<size_t>(j)] =
                    dot / std::sqrt(static_cast<double>(dh)) + wa.rel_pos_table.value().at({rel, h});
            }
            double m = scores[0];
            for (double s : scores) m = std::max(m, s);
            double z = 0.0;
            for (double& s : scores) {
                s = std::exp(s - m);
                z += s;
            }
            for (int64_t d = 0; d < dh; ++d) {
                double acc = 0.0;
                for (int64_t j = 0; j < t; ++j) acc += scores[static_cast<size_t>(j)] / z * project(2 * c, j, h * dh + d);
                out.at({i, h * dh + d}) = acc;
            }
        }
    }
    // output projection
    Tensor final({t, c});
    const Tensor& wp = wa.proj.weight.value();
    const Tensor& bp = wa.proj.bias.value();
    for (int64_t i = 0; i < t; ++i)
        for (int64_t o = 0; o < c; ++o) {
            double s = bp[o];
            for (int64_t j = 0; j < c; ++j) s += wp.at({o, j}) * out.at({i, j});
            final.at({i, o}) = s;
        }
    return final;
}

}  // namespace

TEST_CASE("window partition and merge are inverse") {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor({2, 6, 6, 3}, rng);
    Variable vx = Variable::constant(x);
    Variable tokens = window_partition(vx, 3);
    CHECK(tokens.value().shape() == std::vector<int64_t>({8, 9, 3}));
    Variable back = window_merge(tokens, 2, 6, 6, 3);
    CHECK(max_abs_diff(back.value(), x) == 0.0);
    CHECK_THROWS_AS(window_partition(vx, 4), ShapeError);
}

TEST_CASE("window attention equals global attention when the window spans the grid") {
    nn::Rng rng(17);
    WindowAttention wa(8, 2, 4, rng);  // dim 8, heads 2, window 4 on a 4x4 grid
    std::mt19937_64 r2(3);
    Tensor grid = random_tensor({1, 16, 8}, r2);
    NoGradGuard ng;
    Variable out = wa.forward(Variable::constant(grid), nullptr, 1);
    Tensor ref = reference_global_attention(wa, grid.reshaped({16, 8}));
    CHECK(max_abs_diff(out.value(), ref.reshaped({1, 16, 8})) < 1e-5);
}

TEST_CASE("zeroed scores with identity value path average each window") {
    nn::Rng rng(4);
    WindowAttention wa(3, 1, 2, rng);
    // zero q/k so scores vanish; value block = identity; identity output proj
    wa.qkv.weight.value_mut().fill(0.0);
    wa.qkv.bias.value_mut().fill(0.0);
    for (int64_t i = 0; i < 3; ++i) wa.qkv.weight.value_mut().at({6 + i, i}) = 1.0;
    set_identity(wa.proj.weight);
    wa.proj.bias.value_mut().fill(0.0);
    wa.rel_pos_table.value_mut().fill(0.0);

    std::mt19937_64 r2(8);
    Tensor x = random_tensor({1, 4, 4, 3}, r2);  // N,H,W,C -> windows of 2x2
    NoGradGuard ng;
    Variable tokens = window_partition(Variable::constant(x), 2);
    Variable out = wa.forward(tokens, nullptr, 4);
    for (int64_t w = 0; w < 4; ++w)
        for (int64_t c = 0; c < 3; ++c) {
            double mean = 0.0;
            for (int64_t t = 0; t < 4; ++t) mean += tokens.value().at({w, t, c});
            mean /= 4.0;
            for (int64_t t = 0; t < 4; ++t) CHECK(out.value().at({w, t, c}) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("sspp branch concatenation") {
    SUBCASE("four branches at the paper layout give z_all [196 x 384]") {
        nn::Rng rng(9);
        std::vector<SwinBranchConfig> cfgs;
        for (int64_t w : {1, 2, 7, 14}) {
            SwinBranchConfig c;
            c.window = w;
            cfgs.push_back(c);
        }
        SsppBottleneck bn(32, 14, 14, cfgs, 4, true, rng);
        std::mt19937_64 r2(2);
        Tensor x = random_tensor({1, 32, 14, 14}, r2);
        NoGradGuard ng;
        Variable z = bn.multi_scale_tokens(Variable::constant(x));
        CHECK(z.value().shape() == std::vector<int64_t>({1, 196, 384}));
    }

    SUBCASE("single branch passes through unconcatenated") {
        nn::Rng rng(9);
        SwinBranchConfig c;
        c.window = 2;
        c.embed_dim = 8;
        c.heads = 2;
        SsppBottleneck bn(4, 4, 4, {c}, 4, true, rng);
        std::mt19937_64 r2(2);
        Tensor x = random_tensor({2, 4, 4, 4}, r2);
        NoGradGuard ng;
        Variable z = bn.multi_scale_tokens(Variable::constant(x));
        CHECK(z.value().shape() == std::vector<int64_t>({2, 16, 8}));
    }

    SUBCASE("identical branches with identical weights produce equal column blocks") {
        nn::Rng rng(9);
        SwinBranchConfig c;
        c.window = 2;
        c.embed_dim = 8;
        c.heads = 2;
        SsppBottleneck bn(4, 4, 4, {c, c}, 4, true, rng);
        // copy branch 1 parameters onto branch 2
        nn::ParamCollector pc;
        bn.visit("bn", pc);
        std::map<std::string, Variable*> by_name;
        for (auto& [name, p] : pc.params) by_name[name] = p;
        for (auto& [name, p] : pc.params) {
            const auto pos = name.find(".branch1.");
            if (pos == std::string::npos) continue;
            std::string other = name;
            other.replace(pos, 9, ".branch2.");
            by_name.at(other)->value_mut() = p->value();
        }
        std::mt19937_64 r2(2);
        Tensor x = random_tensor({1, 4, 4, 4}, r2);
        NoGradGuard ng;
        Variable z = bn.multi_scale_tokens(Variable::constant(x));
        for (int64_t p = 0; p < 16; ++p)
            for (int64_t ch = 0; ch < 8; ++ch)
                CHECK(z.value().at({0, p, ch}) == doctest::Approx(z.value().at({0, p, ch + 8})).epsilon(1e-12));
    }
}

TEST_CASE("cross-contextual attention") {
    SUBCASE("token-axis GAP of a handcrafted matrix") {
        Tensor z({1, 2, 2}, {2, 0, 4, 0});
        Variable g = ops::mean(Variable::constant(z), {1}, false);
        CHECK(g.value().at({0, 0}) == doctest::Approx(3.0));
        CHECK(g.value().at({0, 1}) == doctest::Approx(0.0));
    }

    SUBCASE("zero parameters give 0.5 gates and 0.25 composition") {
        nn::Rng rng(6);
        CrossContextualAttention cca(6, 8, 2, rng);
        zero_params(cca);
        std::mt19937_64 r2(3);
        Tensor z = random_tensor({2, 8, 6}, r2);
        NoGradGuard ng;
        Variable vz = Variable::constant(z);
        Tensor ws = cca.scale_gates(vz).value();
        Tensor wt = cca.token_gates(vz).value();
        for (int64_t i = 0; i < ws.numel(); ++i) CHECK(ws[i] == doctest::Approx(0.5).epsilon(1e-12));
        for (int64_t i = 0; i < wt.numel(); ++i) CHECK(wt[i] == doctest::Approx(0.5).epsilon(1e-12));
        Tensor full = cca.forward(vz).value();
        for (int64_t i = 0; i < full.numel(); ++i) CHECK(full[i] == doctest::Approx(0.25 * z[i]).epsilon(1e-9));
    }

    SUBCASE("gates are strictly inside (0,1) and preserve signs") {
        nn::Rng rng(6);
        CrossContextualAttention cca(6, 8, 2, rng);
        std::mt19937_64 r2(14);
        Tensor z = random_tensor({2, 8, 6}, r2, -3.0, 3.0);
        NoGradGuard ng;
        Variable vz = Variable::constant(z);
        Tensor ws = cca.scale_gates(vz).value();
        Tensor wt = cca.token_gates(vz).value();
        for (int64_t i = 0; i < ws.numel(); ++i) {
            CHECK(ws[i] > 0.0);
            CHECK(ws[i] < 1.0);
        }
        for (int64_t i = 0; i < wt.numel(); ++i) {
            CHECK(wt[i] > 0.0);
            CHECK(wt[i] < 1.0);
        }
        Tensor out = cca.forward(vz).value();
        for (int64_t i = 0; i < out.numel(); ++i) {
            if (z[i] > 0.0) CHECK(out[i] > 0.0);
            if (z[i] < 0.0) CHECK(out[i] < 0.0);
        }
    }
}

TEST_CASE("full bottleneck gradient matches finite differences") {
    nn::Rng rng(31);
    std::vector<SwinBranchConfig> cfgs;
    for (int64_t w : {2, 4}) {
        SwinBranchConfig c;
        c.window = w;
        c.embed_dim = 8;
        c.heads = 2;
        cfgs.push_back(c);
    }
    SsppBottleneck bn(8, 8, 8, cfgs, 4, true, rng);
    std::mt19937_64 r2(77);
    Tensor x = random_tensor({1, 8, 8, 8}, r2);
    Tensor wts = random_tensor({1, 8, 8, 8}, r2);

    Variable vx = Variable::leaf(x, true);
    Variable loss = ops::sum_all(ops::mul(bn.forward(vx, true), Variable::constant(wts)));
    backward(loss);
    auto f = [&]() {
        NoGradGuard ng;
        Variable out = bn.forward(Variable::constant(x), true);
        double s = 0.0;
        for (int64_t i = 0; i < out.value().numel(); ++i) s += out.value()[i] * wts[i];
        return s;
    };
    Tensor fd = finite_diff(f, x, 1e-4);
    CHECK(max_rel_err(vx.grad(), fd, 1e-4) < 1e-3);
}

TEST_CASE("disabled bottleneck is the plain residual block") {
    nn::Rng rng(3);
    SsppBottleneck bn(6, 4, 4, {}, 4, false, rng);
    std::mt19937_64 r2(4);
    Tensor x = random_tensor({2, 6, 4, 4}, r2);
    NoGradGuard ng;
    Variable y = bn.forward(Variable::constant(x), false);
    CHECK(y.value().shape() == x.shape());
    nn::ParamCollector pc;
    bn.visit("bn", pc);
    for (auto& [name, p] : pc.params) CHECK(name.find("branch") == std::string::npos);
}
