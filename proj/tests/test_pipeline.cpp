#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "sbss/evalx.hpp"
#include "sbss/pipeline.hpp"
#include "sbss/trainer.hpp"

using namespace sbss;

namespace {

SceneProfile test_profile() {
    SceneProfile p;
    p.classes = {{0.45, 0.55}, {0.22, 0.25}, {0.21, 0.2}, {0.12, 0.1}};
    return p;
}

OracleConfig biased_cfg(uint64_t seed = 5) {
    OracleConfig cfg;
    cfg.classes = 4;
    cfg.preferred_scales = {0.5, 1.0, 1.0, 1.5};
    cfg.seed = seed;
    return cfg;
}

std::shared_ptr<const SceneSet> make_scenes(int count, int dims, uint64_t seed) {
    return std::make_shared<SceneSet>(generate_scenes(test_profile(), count, dims, dims, seed));
}

}  // namespace

TEST_CASE("single-scale schedule reduces to tiled segmentation") {
    auto scenes = make_scenes(1, 64, 11);
    auto backend = std::make_shared<OracleBackend>(biased_cfg(), scenes);

    RunConfig cfg;
    cfg.schedule = make_baseline_ss(32, 32);
    cfg.backend = backend;
    auto res = run_sbss(cfg, scenes->scenes[0].image, "scene_0000");

    auto direct = tiled_segment(*backend, scenes->scenes[0].image, 1.0, "scene_0000", 32, 32);
    REQUIRE(res.prob.values == direct.map.values);
    REQUIRE(res.ledger.ratio() == 1.0);
}

TEST_CASE("run_ss equals run_ms with a single unit scale") {
    auto scenes = make_scenes(1, 48, 12);
    auto backend = std::make_shared<OracleBackend>(biased_cfg(), scenes);
    auto a = run_ss(*backend, scenes->scenes[0].image, "scene_0000", 16, 16);
    auto b = run_ms(*backend, scenes->scenes[0].image, "scene_0000", {1.0}, 16, 16);
    REQUIRE(a.prob.values == b.prob.values);
    REQUIRE(a.labels == b.labels);
    REQUIRE(a.ledger.ratio() == 1.0);
}

TEST_CASE("act_only with identical maps across scales keeps the initial argmax") {
    // backend output does not depend on scale or position at all
    struct FlatBackend : Backend {
        ProbMap segment(const RgbImage& patch, double, const PatchContext&) const override {
            ProbMap m(4, patch.height, patch.width);
            float v[4] = {0.55f, 0.25f, 0.15f, 0.05f};
            for (int c = 0; c < 4; ++c)
                std::fill(m.plane(c), m.plane(c) + m.pixel_count(), v[c]);
            return m;
        }
        int classes() const override { return 4; }
        double flops_per_pixel() const override { return 1000.0; }
    };

    auto scenes = make_scenes(1, 64, 21);
    auto backend = std::make_shared<FlatBackend>();

    RunConfig cfg;
    cfg.schedule = make_ecs_ss(16, 16);
    cfg.backend = backend;
    cfg.mode = FusionMode::act_only;
    auto res = run_sbss(cfg, scenes->scenes[0].image, "scene_0000");

    auto initial = run_ss(*backend, scenes->scenes[0].image, "scene_0000", 16, 16);
    REQUIRE(res.labels == initial.labels);
    REQUIRE(res.prob.values == initial.prob.values);  // nothing ever changes
}

TEST_CASE("ecs_ss ledger ratio is exactly 0.75 on divisible dims") {
    auto scenes = make_scenes(1, 128, 31);  // scales .25,.5,1,1.5 -> 32,64,128,192: all /32
    auto backend = std::make_shared<OracleBackend>(biased_cfg(), scenes);

    RunConfig cfg;
    cfg.schedule = make_ecs_ss(32, 32);
    cfg.backend = backend;
    auto res = run_sbss(cfg, scenes->scenes[0].image, "scene_0000");
    REQUIRE(res.ledger.ratio() == 0.75);
    REQUIRE(res.ledger.total_slack_pixels() == 0);
    REQUIRE(res.ledger.ratio() == schedule_ratio(cfg.schedule));
}

TEST_CASE("pixels outside selected patches carry the resized map byte-exact") {
    auto scenes = make_scenes(1, 96, 41);
    auto backend = std::make_shared<OracleBackend>(biased_cfg(), scenes);

    ScaleSchedule sched;
    sched.scales = {0.5, 1.0};
    sched.fractions = {Fraction::one(), {1, 4}};
    sched.patch_h = sched.patch_w = 24;
    sched.tag = SchemeTag::custom;

    RunConfig cfg;
    cfg.schedule = sched;
    cfg.backend = backend;
    auto res = run_sbss(cfg, scenes->scenes[0].image, "scene_0000");

    // recompute the resized intermediate state independently
    RgbImage x0 = resize_image(scenes->scenes[0].image, 48, 48);
    ProbMap y0 = tiled_segment(*backend, x0, 0.5, "scene_0000", 24, 24).map;
    ProbMap resized = resize_probmap(y0, 96, 96);

    REQUIRE(res.diagnostics.size() == 1);
    REQUIRE(res.diagnostics[0].selected_patches == 4);  // k = round(16/4)
    std::vector<uint8_t> covered(96 * 96, 0);
    for (const auto& pd : res.diagnostics[0].patches)
        for (int y = pd.rect.y; y < pd.rect.y + pd.rect.h; ++y)
            for (int x = pd.rect.x; x < pd.rect.x + pd.rect.w; ++x)
                covered[static_cast<size_t>(y) * 96 + x] = 1;

    // final prob at scale 1.0 equals original dims here (no trailing resize distortion)
    for (int c = 0; c < 4; ++c)
        for (int y = 0; y < 96; ++y)
            for (int x = 0; x < 96; ++x)
                if (!covered[static_cast<size_t>(y) * 96 + x])
                    REQUIRE(res.prob.at(c, y, x) == resized.at(c, y, x));
}

TEST_CASE("output is identical for any worker count") {
    auto scenes = make_scenes(2, 64, 51);
    auto backend = std::make_shared<OracleBackend>(biased_cfg(), scenes);

    RunConfig cfg;
    cfg.schedule = make_ecs_ss(16, 16);
    cfg.backend = backend;
    cfg.mode = FusionMode::ecn_act;
    cfg.weights = {make_ecn_weights(4, 1), make_ecn_weights(4, 2), make_ecn_weights(4, 3)};

    for (const auto& scene : scenes->scenes) {
        RunResult base;
        for (int workers : {1, 4, 8}) {
            cfg.workers = workers;
            auto res = run_sbss(cfg, scene.image, scene.id);
            if (workers == 1) {
                base = std::move(res);
            } else {
                REQUIRE(res.prob.values == base.prob.values);
                REQUIRE(res.labels == base.labels);
            }
        }
    }
}

TEST_CASE("missing weights in ecn modes is a config error") {
    auto scenes = make_scenes(1, 64, 61);
    auto backend = std::make_shared<OracleBackend>(biased_cfg(), scenes);
    RunConfig cfg;
    cfg.schedule = make_ecs_ss(16, 16);
    cfg.backend = backend;
    cfg.mode = FusionMode::ecn_act;
    REQUIRE_THROWS_AS(run_sbss(cfg, scenes->scenes[0].image, "scene_0000"), ConfigError);
}

TEST_CASE("error-free oracle yields near-perfect mIoU in every mode") {
    OracleConfig cfg0;
    cfg0.classes = 3;
    cfg0.preferred_scales = {0.5, 1.0, 1.5};
    cfg0.e_min = 0.0;
    cfg0.gain = 0.0;
    cfg0.seed = 77;
    // large objects keep the per-patch boundary fraction low
    SceneProfile profile;
    profile.classes = {{0.5, 0.6}, {0.3, 0.4}, {0.2, 0.3}};
    auto scenes = std::make_shared<SceneSet>(generate_scenes(profile, 3, 64, 64, 71));
    auto backend = std::make_shared<OracleBackend>(cfg0, scenes);

    ScaleSchedule sched;
    sched.scales = {0.5, 1.0};
    sched.fractions = {Fraction::one(), Fraction::one()};
    sched.patch_h = sched.patch_w = 32;

    // brief training on the error-free data: the net learns to echo the upper map
    auto samples = build_training_set(*backend, *scenes, sched, 0, 2);
    TrainConfig tc;
    tc.iterations = 350;
    tc.batch = 2;
    tc.crop_h = tc.crop_w = 16;
    tc.lr = 0.006;
    tc.seed = 5;
    auto trained = train(tc, samples, 2);

    for (FusionMode mode : {FusionMode::act_only, FusionMode::ecn_only, FusionMode::ecn_act}) {
        RunConfig rc;
        rc.schedule = sched;
        rc.backend = backend;
        rc.mode = mode;
        if (mode != FusionMode::act_only) rc.weights = {trained.weights};
        rc.workers = 2;

        ConfusionMatrix cm(3);
        for (const auto& scene : scenes->scenes) {
            auto res = run_sbss(rc, scene.image, scene.id);
            accumulate(cm, res.labels, scene.labels);
        }
        auto rep = miou(cm);
        INFO("mode " << to_string(mode) << " mIoU " << rep.mean);
        REQUIRE(rep.mean >= 0.99);
    }
}

TEST_CASE("ms averaging beats the worst single scale on biased scenes") {
    auto scenes = make_scenes(6, 64, 81);
    auto backend = std::make_shared<OracleBackend>(biased_cfg(3), scenes);
    std::vector<double> scales{0.5, 1.0, 1.5};

    ConfusionMatrix ms_cm(4);
    std::vector<ConfusionMatrix> ss_cm(scales.size(), ConfusionMatrix(4));
    for (const auto& scene : scenes->scenes) {
        auto ms = run_ms(*backend, scene.image, scene.id, scales, 16, 16, 2);
        accumulate(ms_cm, ms.labels, scene.labels);
        for (size_t si = 0; si < scales.size(); ++si) {
            double s = scales[si];
            RgbImage xs = resize_image(scene.image, round_px(s * 64), round_px(s * 64));
            auto t = tiled_segment(*backend, xs, s, scene.id, 16, 16, 2);
            auto back = resize_probmap(t.map, 64, 64);
            accumulate(ss_cm[si], argmax_labels(back), scene.labels);
        }
    }
    double worst = 1.0;
    for (auto& cm : ss_cm) worst = std::min(worst, miou(cm).mean);
    REQUIRE(miou(ms_cm).mean >= worst);
}

TEST_CASE("full-coverage ecn_act composes every stage at every transition") {
    auto scenes = make_scenes(1, 64, 101);
    auto backend = std::make_shared<OracleBackend>(biased_cfg(), scenes);

    RunConfig cfg;
    cfg.schedule = make_ecs_ms(16, 16);
    cfg.backend = backend;
    cfg.mode = FusionMode::ecn_act;
    for (size_t t = 0; t < cfg.schedule.transition_count(); ++t)
        cfg.weights.push_back(make_ecn_weights(4, 100 + t));
    auto res = run_sbss(cfg, scenes->scenes[0].image, "scene_0000");

    // one diagnostic per transition, every patch selected and corrected
    REQUIRE(res.diagnostics.size() == 4);
    double expect_scale[4] = {0.75, 1.0, 1.25, 1.5};
    for (size_t t = 0; t < 4; ++t) {
        const auto& d = res.diagnostics[t];
        REQUIRE(d.scale == expect_scale[t]);
        REQUIRE(d.selected_patches == d.total_patches);
        REQUIRE(d.patches.size() == d.total_patches);
        int grid_dim = round_px(expect_scale[t] * 64) / 16;
        REQUIRE(d.total_patches == static_cast<size_t>(grid_dim) * grid_dim);
        for (const auto& p : d.patches) {
            REQUIRE(p.replaced_fraction >= 0.0);
            REQUIRE(p.replaced_fraction <= 0.5 + 1e-9);  // ACT replaces at most half
        }
    }
    // ECN pixels accounted at every corrected scale
    for (const auto& e : res.ledger.per_scale)
        if (e.scale != 0.5) REQUIRE(e.ecn_pixels == e.backend_pixels);
}

TEST_CASE("ms ledger matches the baseline budget on divisible dims") {
    auto scenes = make_scenes(1, 128, 91);
    auto backend = std::make_shared<OracleBackend>(biased_cfg(), scenes);
    auto sched = make_baseline_ms(32, 32);
    auto res = run_ms(*backend, scenes->scenes[0].image, "scene_0000", sched.scales, 32, 32, 2);
    REQUIRE(res.ledger.ratio() == 8.6875);

    auto ecs = make_ecs_ms(32, 32);
    RunConfig cfg;
    cfg.schedule = ecs;
    cfg.backend = backend;
    auto sbss = run_sbss(cfg, scenes->scenes[0].image, "scene_0000");
    REQUIRE(sbss.ledger.ratio() == 5.625);
}
