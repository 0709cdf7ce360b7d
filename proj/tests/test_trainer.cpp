#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "a4unet/trainer.hpp"
#include "synthetic_data.hpp"
#include "test_util.hpp"

using namespace a4;
using namespace a4::testutil;
namespace fs = std::filesystem;

namespace {

struct TempTree {
    std::string root;
    explicit TempTree(const std::string& tag) : root(unique_temp_dir(tag)) {}
    ~TempTree() { fs::remove_all(root); }
};

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.input_size = 32;
    cfg.in_channels = 2;
    cfg.num_classes = 2;
    cfg.encoder_channels = {4, 6, 8, 8};
    cfg.lk_geometry = {LkGeometry{5, 2}};
    SwinBranchConfig b;
    b.window = 2;
    b.embed_dim = 8;
    b.heads = 2;
    cfg.branches = {b};
    cfg.seed = 3;
    return cfg;
}

DatasetManifest tiny_dataset(const std::string& root, int64_t subjects, int64_t depth) {
    make_blob_tree(root, subjects, {"t1", "t2"}, 32, 32, depth, 77);
    DatasetManifest m = scan_dataset(root, DatasetLayout::flat, {"t1", "t2"});
    for (auto& r : m.records) r.split = Split::train;
    return m;
}

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.loss = "mse";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(TrainConfig{}.runs == 5);
    CHECK(TrainConfig{}.epochs == 30);
    CHECK(TrainConfig{}.batch_size == 16);
    CHECK(TrainConfig{}.learning_rate == doctest::Approx(1e-5));
}

TEST_CASE("segmentation loss") {
    SUBCASE("cross entropy of uniform logits is log C") {
        Tensor logits({1, 3, 2, 2});
        std::vector<int32_t> targets(4, 1);
        Variable loss = segmentation_loss(Variable::constant(logits), targets, "ce");
        CHECK(loss.value()[0] == doctest::Approx(std::log(3.0)));
    }
    SUBCASE("perfect logits drive both losses toward zero") {
        Tensor logits({1, 2, 2, 2});
        std::vector<int32_t> targets{0, 1, 1, 0};
        for (int64_t p = 0; p < 4; ++p) {
            logits[targets[static_cast<size_t>(p)] * 4 + p] = 60.0;
            logits[(1 - targets[static_cast<size_t>(p)]) * 4 + p] = -60.0;
        }
        CHECK(segmentation_loss(Variable::constant(logits), targets, "ce").value()[0] ==
              doctest::Approx(0.0).epsilon(1e-9));
        // soft dice keeps the +1 smoothing, so "near zero" rather than zero
        CHECK(segmentation_loss(Variable::constant(logits), targets, "dice").value()[0] < 0.2);
    }
    SUBCASE("dice_ce is the sum of the two") {
        std::mt19937_64 rng(5);
        Tensor logits = random_tensor({2, 2, 4, 4}, rng);
        std::vector<int32_t> targets(32);
        for (auto& t : targets) t = std::uniform_int_distribution<int32_t>(0, 1)(rng);
        Variable v = Variable::constant(logits);
        const double sum = segmentation_loss(v, targets, "ce").value()[0] +
                           segmentation_loss(v, targets, "dice").value()[0];
        CHECK(segmentation_loss(v, targets, "dice_ce").value()[0] == doctest::Approx(sum));
    }
    SUBCASE("gradient matches finite differences") {
        std::mt19937_64 rng(6);
        Tensor logits = random_tensor({1, 3, 4, 4}, rng);
        std::vector<int32_t> targets(16);
        for (auto& t : targets) t = std::uniform_int_distribution<int32_t>(0, 2)(rng);
        Variable v = Variable::leaf(logits, true);
        backward(segmentation_loss(v, targets, "dice_ce"));
        auto f = [&]() {
            NoGradGuard ng;
            return segmentation_loss(Variable::constant(logits), targets, "dice_ce").value()[0];
        };
        Tensor fd = finite_diff(f, logits, 1e-6);
        CHECK(max_rel_err(v.grad(), fd, 1e-5) < 1e-4);
    }
    SUBCASE("out-of-range labels are rejected") {
        Tensor logits({1, 2, 2, 2});
        std::vector<int32_t> targets{0, 1, 2, 0};
        CHECK_THROWS_AS(segmentation_loss(Variable::constant(logits), targets, "ce"), ShapeError);
    }
}

TEST_CASE("adamw") {
    SUBCASE("quadratic bowl converges") {
        Variable p = Variable::leaf(Tensor({2}, {5.0, -3.0}), true);
        std::vector<Variable*> params{&p};
        AdamW opt(params, 0.1, 0.0);
        for (int step = 0; step < 300; ++step) {
            opt.zero_grad();
            backward(ops::sum_all(ops::mul(p, p)));
            opt.step();
        }
        CHECK(std::fabs(p.value()[0]) < 1e-3);
        CHECK(std::fabs(p.value()[1]) < 1e-3);
    }
    SUBCASE("weight decay is decoupled") {
        Variable p = Variable::leaf(Tensor({1}, {2.0}), true);
        std::vector<Variable*> params{&p};
        AdamW opt(params, 0.01, 0.5);
        // zero gradient: only the decay term acts
        p.zero_grad();
        Variable loss = ops::scale(p, 0.0);
        backward(ops::sum_all(loss));
        opt.step();
        CHECK(p.value()[0] == doctest::Approx(2.0 * (1.0 - 0.01 * 0.5)));
    }
}

TEST_CASE("training loop") {
    TempTree data("train_data");
    DatasetManifest manifest = tiny_dataset(data.root + "/ds", 1, 6);

    TrainConfig cfg;
    cfg.batch_size = 3;
    cfg.epochs = 3;
    cfg.learning_rate = 1e-3;
    cfg.seed = 11;
    cfg.runs = 1;

    SUBCASE("epoch log length and loss improvement") {
        TempTree out("train_out");
        A4Unet model(tiny_model());
        TrainOptions opts;
        opts.out_dir = out.root;
        opts.quiet = true;
        TrainResult r = train_model(model, manifest, cfg, opts);
        REQUIRE(r.log.size() == 3);
        CHECK(r.log.back().train_loss < r.log.front().train_loss);
        CHECK(fs::exists(r.best_checkpoint));
        CHECK(fs::exists(r.last_checkpoint));
        std::ifstream log(r.log_path);
        int lines = 0;
        std::string line;
        while (std::getline(log, line))
            if (!line.empty()) ++lines;
        CHECK(lines == 3);
    }

    SUBCASE("fixed seed reproduces the first-epoch loss") {
        TempTree o1("t1"), o2("t2");
        TrainConfig one = cfg;
        one.epochs = 1;
        A4Unet m1(tiny_model()), m2(tiny_model());
        TrainOptions opt1{o1.root, "", true}, opt2{o2.root, "", true};
        TrainResult r1 = train_model(m1, manifest, one, opt1);
        TrainResult r2 = train_model(m2, manifest, one, opt2);
        CHECK(r1.log[0].train_loss == r2.log[0].train_loss);
    }

    SUBCASE("resume reproduces uninterrupted training") {
        TempTree oa("full"), ob("split");
        A4Unet full_model(tiny_model());
        TrainOptions full_opts{oa.root, "", true};
        TrainConfig four = cfg;
        four.epochs = 4;
        TrainResult full = train_model(full_model, manifest, four, full_opts);
        REQUIRE(full.log.size() == 4);

        A4Unet part_model(tiny_model());
        TrainConfig two = cfg;
        two.epochs = 2;
        TrainOptions part_opts{ob.root, "", true};
        train_model(part_model, manifest, two, part_opts);

        A4Unet resumed(tiny_model());
        TrainOptions resume_opts{ob.root, (fs::path(ob.root) / "last.ckpt").string(), true};
        TrainResult rest = train_model(resumed, manifest, four, resume_opts);
        CHECK(rest.log.size() == 2);  // epochs 3 and 4

        nn::ParamCollector pa, pb;
        full_model.visit(pa);
        resumed.visit(pb);
        REQUIRE(pa.params.size() == pb.params.size());
        double worst = 0.0;
        for (size_t i = 0; i < pa.params.size(); ++i)
            worst = std::max(worst, max_abs_diff(pa.params[i].second->value(), pb.params[i].second->value()));
        CHECK(worst < 1e-6);
    }

    SUBCASE("divergence aborts with the flag set") {
        TempTree out("diverge");
        A4Unet model(tiny_model());
        TrainConfig hot = cfg;
        hot.learning_rate = 1e18;
        hot.epochs = 4;
        TrainOptions opts{out.root, "", true};
        TrainResult r = train_model(model, manifest, hot, opts);
        CHECK(r.diverged);
    }

    SUBCASE("max_steps caps optimization") {
        TempTree out("steps");
        A4Unet model(tiny_model());
        TrainConfig capped = cfg;
        capped.epochs = 50;
        capped.max_steps = 3;
        TrainOptions opts{out.root, "", true};
        TrainResult r = train_model(model, manifest, capped, opts);
        CHECK(r.log.back().steps == 3);
    }
}

TEST_CASE("checkpoint rebuild from stored config") {
    TempTree data("ckpt_data"), out("ckpt_out");
    DatasetManifest manifest = tiny_dataset(data.root + "/ds", 1, 4);
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.epochs = 1;
    cfg.learning_rate = 1e-3;
    cfg.runs = 1;
    A4Unet model(tiny_model());
    TrainOptions opts{out.root, "", true};
    train_model(model, manifest, cfg, opts);

    CheckpointData data2 = read_checkpoint((fs::path(out.root) / "last.ckpt").string());
    A4Unet rebuilt = model_from_checkpoint(data2);
    std::mt19937_64 rng(4);
    Tensor x = random_tensor({1, 2, 32, 32}, rng);
    CHECK(max_abs_diff(rebuilt.infer(x), model.infer(x)) == 0.0);
}

TEST_CASE("ablation suite shape and determinism") {
    TempTree data("abl_data"), out("abl_out");
    DatasetManifest manifest = tiny_dataset(data.root + "/ds", 1, 4);
    // one val subject so best-val selection has something to do
    make_blob_tree(data.root + "/ds2", 1, {"t1", "t2"}, 32, 32, 2, 991);
    DatasetManifest extra = scan_dataset(data.root + "/ds2", DatasetLayout::flat, {"t1", "t2"});
    extra.records[0].split = Split::val;
    manifest.records.push_back(extra.records[0]);

    ModelConfig base = tiny_model();
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.epochs = 1;
    cfg.max_steps = 2;
    cfg.learning_rate = 1e-3;
    cfg.runs = 1;
    TrainOptions opts{out.root, "", true};

    auto rows = run_ablation_suite(base, cfg, manifest, opts);
    REQUIRE(rows.size() == 8);
    CHECK(rows[0].label == "ResUnet (baseline)");
    CHECK(rows[1].label == "ResUnet + DLKA");
    CHECK(rows[2].label == "ResUnet + SSPP");
    CHECK(rows[3].label == "ResUnet + CAM");
    CHECK(rows[7].label == "A4-Unet");
    CHECK(fs::exists(fs::path(out.root) / "ablation_results.json"));

    // the (F,F,F) row equals a standalone baseline training run
    ModelConfig baseline_cfg = base;
    baseline_cfg.ablation = {false, false, false};
    A4Unet baseline(baseline_cfg);
    TempTree solo("abl_solo");
    TrainOptions solo_opts{solo.root, "", true};
    TrainResult solo_run = train_model(baseline, manifest, cfg, solo_opts);
    CHECK(rows[0].val_dice == doctest::Approx(solo_run.best_val_dice));
}

TEST_CASE("predict export") {
    TempTree data("pred_data"), out("pred_out");
    make_blob_tree(data.root + "/ds", 1, {"t1", "t2"}, 40, 36, 4, 55);
    DatasetManifest manifest = scan_dataset(data.root + "/ds", DatasetLayout::flat, {"t1", "t2"});

    A4Unet model(tiny_model());
    PredictOptions popts;
    popts.out_dir = out.root;
    popts.overlays = true;

    auto written = predict_volume(model, manifest.records[0], manifest.modalities, popts);
    const std::string nii = (fs::path(out.root) / "sub000_pred.nii.gz").string();
    CHECK(std::find(written.begin(), written.end(), nii) != written.end());
    NiftiVolume mask = read_nifti(nii);
    CHECK(mask.header.nx == 36);
    CHECK(mask.header.ny == 40);
    CHECK(mask.header.nz == 4);

    SUBCASE("deterministic bytes on re-run") {
        TempTree out2("pred_out2");
        PredictOptions p2 = popts;
        p2.out_dir = out2.root;
        predict_volume(model, manifest.records[0], manifest.modalities, p2);
        std::ifstream a(nii, std::ios::binary), b(fs::path(out2.root) / "sub000_pred.nii.gz", std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }
    SUBCASE("single-slice mode writes mask and overlay only") {
        TempTree out3("pred_out3");
        PredictOptions p3 = popts;
        p3.out_dir = out3.root;
        p3.slice_index = 2;
        auto files = predict_volume(model, manifest.records[0], manifest.modalities, p3);
        CHECK(files.size() == 2);
        for (const auto& f : files) CHECK(f.find("slice0002") != std::string::npos);
        CHECK_FALSE(fs::exists(fs::path(out3.root) / "sub000_pred.nii.gz"));
    }
    SUBCASE("out-of-range slice index") {
        PredictOptions p4 = popts;
        p4.slice_index = 99;
        CHECK_THROWS_AS(predict_volume(model, manifest.records[0], manifest.modalities, p4), DataError);
    }
}
