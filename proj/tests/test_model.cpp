#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>
#include <set>

#include "a4unet/model.hpp"
#include "test_util.hpp"

using namespace a4;
using namespace a4::testutil;

namespace {

ModelConfig tiny_config(bool dlka, bool sspp, bool cam) {
    ModelConfig cfg;
    cfg.input_size = 32;
    cfg.in_channels = 2;
    cfg.num_classes = 2;
    cfg.encoder_channels = {4, 6, 8, 12};
    cfg.lk_geometry = {LkGeometry{5, 2}};
    SwinBranchConfig b1, b2;
    b1.window = 1;
    b1.embed_dim = 8;
    b1.heads = 2;
    b2.window = 2;
    b2.embed_dim = 8;
    b2.heads = 2;
    cfg.branches = {b1, b2};
    cfg.ablation = {dlka, sspp, cam};
    cfg.seed = 99;
    return cfg;
}

std::set<std::string> param_names(A4Unet& m) {
    nn::ParamCollector pc;
    m.visit(pc);
    std::set<std::string> names;
    for (auto& [name, p] : pc.params) names.insert(name);
    return names;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config(true, true, true);
    CHECK_NOTHROW(cfg.validate());
    ModelConfig bad = cfg;
    bad.input_size = 30;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.branches[1].window = 3;  // does not divide the 2x2 grid
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("does not divide"), ConfigError);
    bad = cfg;
    bad.branches[0].heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("default branch windows for the 224 layout") {
    ModelConfig cfg;  // defaults: 224 input, grid 14
    auto branches = cfg.effective_branches();
    REQUIRE(branches.size() == 4);
    CHECK(branches[0].window == 1);
    CHECK(branches[1].window == 2);
    CHECK(branches[2].window == 7);
    CHECK(branches[3].window == 14);
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("deterministic construction") {
    ModelConfig cfg = tiny_config(true, true, true);
    A4Unet m1(cfg), m2(cfg);
    nn::ParamCollector p1, p2;
    m1.visit(p1);
    m2.visit(p2);
    REQUIRE(p1.params.size() == p2.params.size());
    for (size_t i = 0; i < p1.params.size(); ++i) {
        CHECK(p1.params[i].first == p2.params[i].first);
        CHECK(max_abs_diff(p1.params[i].second->value(), p2.params[i].second->value()) == 0.0);
    }
}

TEST_CASE("ablation structure") {
    A4Unet baseline(tiny_config(false, false, false));
    A4Unet full(tiny_config(true, true, true));
    const auto base_names = param_names(baseline);
    const auto full_names = param_names(full);
    CHECK(full.parameter_count() > baseline.parameter_count());
    // every baseline parameter survives, enabling blocks only adds
    for (const auto& n : base_names) CHECK(full_names.count(n) == 1);

    for (bool d : {false, true})
        for (bool s : {false, true})
            for (bool c : {false, true}) {
                A4Unet m(tiny_config(d, s, c));
                const auto names = param_names(m);
                for (const auto& n : base_names) CHECK(names.count(n) == 1);
                std::mt19937_64 rng(1);
                Tensor x = random_tensor({1, 2, 32, 32}, rng);
                Tensor logits = m.infer(x);
                CHECK(logits.shape() == std::vector<int64_t>({1, 2, 32, 32}));
            }
}

TEST_CASE("forward output contract") {
    A4Unet m(tiny_config(true, true, true));
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 2, 32, 32}, rng);
    ModelOutput out = m.forward(x, /*training=*/false);
    CHECK(out.logits.value().shape() == std::vector<int64_t>({2, 2, 32, 32}));

    // per-pixel probabilities sum to one
    const auto& p = out.probabilities;
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t pix = 0; pix < 32 * 32; ++pix) {
            double s = 0.0;
            for (int64_t c = 0; c < 2; ++c) s += p[(b * 2 + c) * 32 * 32 + pix];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }

    // inference determinism
    Tensor again = m.infer(x);
    CHECK(max_abs_diff(out.logits.value(), again) == 0.0);

    Tensor bad({1, 3, 32, 32});
    CHECK_THROWS_AS(m.forward(bad, false), ShapeError);
    Tensor odd({1, 2, 40, 40});  // 40 not divisible by 16
    CHECK_THROWS_AS(m.forward(odd, false), ShapeError);
}

TEST_CASE("gradient reaches every parameter on some batch") {
    A4Unet m(tiny_config(true, true, true));
    nn::ParamCollector pc;
    m.visit(pc);
    std::vector<double> grad_mass(pc.params.size(), 0.0);
    std::mt19937_64 rng(6);
    // single-unit ReLU bottlenecks can be dead on one draw, so give every
    // parameter a few batches to light up
    for (int batch = 0; batch < 5; ++batch) {
        for (auto& [name, p] : pc.params) p->zero_grad();
        Tensor x = random_tensor({2, 2, 32, 32}, rng);
        Variable logits = m.forward_logits(Variable::constant(x), true);
        backward(ops::mean_all(ops::mul(logits, logits)));
        for (size_t i = 0; i < pc.params.size(); ++i) {
            if (!pc.params[i].second->has_grad()) continue;
            const Tensor& g = pc.params[i].second->grad();
            for (int64_t j = 0; j < g.numel(); ++j) grad_mass[i] += std::fabs(g[j]);
        }
    }
    for (size_t i = 0; i < pc.params.size(); ++i) CHECK_MESSAGE(grad_mass[i] > 0.0, pc.params[i].first);
}

TEST_CASE("describe") {
    A4Unet m(tiny_config(true, true, true));
    Json d = m.describe();
    CHECK(d["stages"].size() == 9);  // 4 encoder + 1 bottleneck + 4 decoder
    CHECK(d["bottleneck_branches"].size() == 2);

    int64_t sum = 0;
    for (const auto& s : d["stages"]) sum += s["parameters"].get<int64_t>();
    sum += d["head"]["parameters"].get<int64_t>();
    CHECK(sum == d["total_parameters"].get<int64_t>());
    CHECK(sum == m.parameter_count());

    A4Unet plain(tiny_config(true, false, true));
    CHECK(plain.describe()["bottleneck_branches"].empty());
    CHECK(plain.describe_text().find("decoder.head") != std::string::npos);
}

TEST_CASE("checkpoint round trip and config mismatch") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "a4unet_test_ckpt.bin";

    ModelConfig cfg = tiny_config(true, true, true);
    A4Unet m(cfg);
    std::mt19937_64 rng(8);
    Tensor x = random_tensor({1, 2, 32, 32}, rng);
    Tensor before = m.infer(x);

    CheckpointData data;
    Json mcfg;
    to_json(mcfg, m.config());
    data.header = Json{{"version", 1}, {"model_config", mcfg}, {"meta", Json{{"epoch", 3}}}};
    collect_model_tensors(m, data.tensors);
    write_checkpoint(path.string(), data);

    // perturb, reload, verify restoration
    nn::ParamCollector pc;
    m.visit(pc);
    pc.params[0].second->value_mut().fill(1.5);
    CHECK(max_abs_diff(m.infer(x), before) > 0.0);
    CheckpointData loaded = read_checkpoint(path.string());
    CHECK(loaded.header["meta"]["epoch"].get<int>() == 3);
    load_model_tensors(m, loaded);
    CHECK(max_abs_diff(m.infer(x), before) == 0.0);

    // a config mismatch is refused with a field-level diff
    ModelConfig other = cfg;
    other.encoder_channels = {4, 6, 8, 16};
    A4Unet m2(other);
    CHECK_THROWS_WITH_AS(load_model_tensors(m2, loaded), doctest::Contains("encoder_channels"), DataError);

    CHECK_THROWS_AS(read_checkpoint("/nonexistent/path.ckpt"), DataError);
    fs::remove(path);
}
