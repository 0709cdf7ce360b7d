#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "a4unet/metrics.hpp"
#include "metric_oracles.hpp"
#include "synthetic_data.hpp"
#include "test_util.hpp"

using namespace a4;
using namespace a4::testutil;
namespace fs = std::filesystem;

namespace {

std::vector<int32_t> random_mask(std::mt19937_64& rng, int64_t n, double fg_prob) {
    std::vector<int32_t> m(static_cast<size_t>(n));
    std::bernoulli_distribution d(fg_prob);
    for (auto& v : m) v = d(rng) ? 1 : 0;
    return m;
}

}  // namespace

TEST_CASE("dice") {
    CHECK(dice({1, 1, 0, 0}, {1, 1, 0, 0}) == 1.0);
    CHECK(dice({1, 0, 0, 0}, {0, 0, 0, 1}) == 0.0);
    // TP=2, FP=1, FN=1 -> 2*2 / (1+1+4)
    CHECK(dice({1, 1, 1, 0}, {1, 1, 0, 1}) == doctest::Approx(4.0 / 6.0));
    CHECK(dice({0, 0}, {0, 0}) == 1.0);
    CHECK_THROWS_AS(dice({1, 0}, {1, 0, 0}), ShapeError);
    CHECK_THROWS_AS(dice({2, 0}, {1, 0}), ShapeError);

    SUBCASE("symmetry and the 2IoU/(1+IoU) identity") {
        std::mt19937_64 rng(9);
        for (int trial = 0; trial < 1000; ++trial) {
            auto p = random_mask(rng, 64, 0.4);
            auto g = random_mask(rng, 64, 0.4);
            const double d = dice(p, g);
            CHECK(d == dice(g, p));
            const ConfusionCounts c = binary_confusion(p, g);
            const int64_t uni = c.tp + c.fp + c.fn;
            const double iou = uni == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(uni);
            CHECK(std::fabs(d - 2.0 * iou / (1.0 + iou)) < 1e-12);
        }
    }
}

TEST_CASE("miou") {
    CHECK(miou({1, 1, 0, 0}, {1, 1, 0, 0}, 1) == 1.0);
    // gt [[1,1],[0,0]], pred [[1,0],[0,0]]: IoU_fg 1/2, IoU_bg 2/3
    CHECK(miou({1, 0, 0, 0}, {1, 1, 0, 0}, 1) == doctest::Approx(7.0 / 12.0));
    CHECK(miou({0, 0, 0, 0}, {0, 0, 0, 0}, 1) == 1.0);  // absent class counts as 1
    CHECK_THROWS_AS(miou({3, 0}, {1, 0}, 2), ShapeError);

    SUBCASE("symmetry") {
        std::mt19937_64 rng(10);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<int32_t> p(36), g(36);
            std::uniform_int_distribution<int32_t> d(0, 3);
            for (auto& v : p) v = d(rng);
            for (auto& v : g) v = d(rng);
            CHECK(miou(p, g, 3) == miou(g, p, 3));
        }
    }
}

TEST_CASE("hd95") {
    SUBCASE("identical masks give zero") {
        std::vector<int32_t> m(64, 0);
        m[9] = m[10] = m[17] = m[18] = 1;
        auto d = hd95(m, m, 8, 8);
        REQUIRE(d.has_value());
        CHECK(*d == 0.0);
    }
    SUBCASE("single-pixel pair is the Euclidean distance at any percentile") {
        std::vector<int32_t> a(40, 0), b(40, 0);
        a[0] = 1;           // (0,0)
        b[3 * 8 + 4] = 1;   // (3,4) on an 5x8 grid
        for (double q : {100.0, 95.0, 50.0}) {
            auto d = hd95(a, b, 5, 8, 1.0, 1.0, q);
            REQUIRE(d.has_value());
            CHECK(*d == doctest::Approx(5.0));
        }
    }
    SUBCASE("anisotropic spacing scales distances") {
        std::vector<int32_t> a(25, 0), b(25, 0);
        a[0] = 1;          // (0,0)
        b[2 * 5 + 1] = 1;  // (2,1)
        auto d = hd95(a, b, 5, 5, 2.0, 3.0, 100.0);
        REQUIRE(d.has_value());
        CHECK(*d == doctest::Approx(std::sqrt(16.0 + 9.0)));
    }
    SUBCASE("empty masks are undefined") {
        std::vector<int32_t> empty(16, 0), full(16, 0);
        full[5] = 1;
        CHECK_FALSE(hd95(empty, full, 4, 4).has_value());
        CHECK_FALSE(hd95(full, empty, 4, 4).has_value());
        CHECK_FALSE(hd95(empty, empty, 4, 4).has_value());
    }
    SUBCASE("percentile monotonicity") {
        std::mt19937_64 rng(11);
        for (int trial = 0; trial < 100; ++trial) {
            auto p = random_mask(rng, 256, 0.3);
            auto g = random_mask(rng, 256, 0.3);
            auto d100 = hd95(p, g, 16, 16, 1.0, 1.0, 100.0);
            auto d95 = hd95(p, g, 16, 16, 1.0, 1.0, 95.0);
            if (!d100) continue;
            CHECK(*d100 >= *d95 - 1e-12);
        }
    }
}

TEST_CASE("metrics match brute-force oracles on random masks") {
    std::mt19937_64 rng(12345);
    int hd_defined = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const double fg = 0.05 + 0.5 * std::uniform_real_distribution<double>(0, 1)(rng);
        auto p = random_mask(rng, 256, fg);
        auto g = random_mask(rng, 256, fg);
        CHECK(dice(p, g) == oracle::dice_oracle(p, g));
        CHECK(miou(p, g, 1) == oracle::miou_oracle(p, g, 1));
        auto mine = hd95(p, g, 16, 16, 1.0, 1.0, 95.0);
        auto ref = oracle::hd_oracle(p, g, 16, 16, 1.0, 1.0, 95.0);
        CHECK(mine.has_value() == ref.has_value());
        if (mine && ref) {
            CHECK(*mine == *ref);
            ++hd_defined;
        }
        auto mine100 = hd95(p, g, 16, 16, 1.0, 1.0, 100.0);
        auto ref100 = oracle::hd_oracle(p, g, 16, 16, 1.0, 1.0, 100.0);
        if (mine100 && ref100) CHECK(*mine100 == *ref100);
    }
    CHECK(hd_defined > 400);  // the comparison actually exercised distances

    SUBCASE("anisotropic spacing agrees within rounding") {
        for (int trial = 0; trial < 50; ++trial) {
            auto p = random_mask(rng, 256, 0.3);
            auto g = random_mask(rng, 256, 0.3);
            auto mine = hd95(p, g, 16, 16, 0.7, 1.3, 95.0);
            auto ref = oracle::hd_oracle(p, g, 16, 16, 0.7, 1.3, 95.0);
            REQUIRE(mine.has_value() == ref.has_value());
            if (mine) CHECK(*mine == doctest::Approx(*ref).epsilon(1e-12));
        }
    }
}

TEST_CASE("boundary extraction") {
    // a filled 3x3 square: the center pixel is interior
    std::vector<int32_t> m(25, 0);
    for (int64_t y = 1; y <= 3; ++y)
        for (int64_t x = 1; x <= 3; ++x) m[static_cast<size_t>(y * 5 + x)] = 1;
    auto b = boundary_pixels(m, 5, 5);
    CHECK(b.size() == 8);
    for (const auto& [y, x] : b) CHECK((y != 2 || x != 2));

    // image border counts as background: a full row is all boundary
    std::vector<int32_t> row(10, 1);
    CHECK(boundary_pixels(row, 2, 5).size() == 10);
}

namespace {

struct TempTree {
    std::string root;
    explicit TempTree(const std::string& tag) : root(unique_temp_dir(tag)) {}
    ~TempTree() { fs::remove_all(root); }
};

ModelConfig eval_model_config() {
    ModelConfig cfg;
    cfg.input_size = 32;
    cfg.in_channels = 2;
    cfg.num_classes = 2;
    cfg.encoder_channels = {4, 4, 8, 8};
    cfg.lk_geometry = {LkGeometry{5, 2}};
    SwinBranchConfig b;
    b.window = 2;
    b.embed_dim = 8;
    b.heads = 2;
    cfg.branches = {b};
    cfg.seed = 17;
    return cfg;
}

}  // namespace

TEST_CASE("evaluate_dataset") {
    TempTree tmp("eval");
    make_blob_tree(tmp.root, 2, {"t1", "t2"}, 28, 28, 3, 5);
    DatasetManifest m = scan_dataset(tmp.root, DatasetLayout::flat, {"t1", "t2"});
    for (auto& r : m.records) r.split = Split::val;

    A4Unet model(eval_model_config());
    EvalConfig ec;
    ec.batch_size = 4;

    MetricReport report = evaluate_dataset(model, m, Split::val, ec);
    REQUIRE(report.per_case.size() == 2);
    CHECK(report.per_case[0].slices == 3);

    SUBCASE("deterministic across reruns") {
        MetricReport again = evaluate_dataset(model, m, Split::val, ec);
        CHECK(report_to_json(report) == report_to_json(again));
    }
    SUBCASE("report file has stable bytes") {
        write_report(tmp.root + "/r1.json", report);
        write_report(tmp.root + "/r2.json", report);
        std::ifstream a(tmp.root + "/r1.json"), b(tmp.root + "/r2.json");
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
        CHECK(report_table(report).find("mean") != std::string::npos);
    }
    SUBCASE("all-background predictions: zero dice, undefined HD95") {
        A4Unet biased(eval_model_config());
        nn::ParamCollector pc;
        biased.visit(pc);
        for (auto& [name, p] : pc.params) {
            if (name == "decoder.head.weight") p->value_mut().fill(0.0);
            if (name == "decoder.head.bias") {
                p->value_mut().at({0}) = 1.0;  // class 0 wins everywhere
                p->value_mut().at({1}) = -1.0;
            }
        }
        MetricReport bg = evaluate_dataset(biased, m, Split::val, ec);
        CHECK(bg.hd95_undefined_count == 2);
        for (const auto& c : bg.per_case) {
            CHECK(c.dsc == 0.0);
            CHECK_FALSE(c.hd95_mm.has_value());
        }
    }
    SUBCASE("empty split is rejected") {
        CHECK_THROWS_WITH_AS(evaluate_dataset(model, m, Split::test, ec), doctest::Contains("empty"), DataError);
    }
}
