#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "oracles.hpp"
#include "sbss/trainer.hpp"

using namespace sbss;

namespace {

TrainSample random_sample(int classes, int h, int w, uint64_t seed, bool some_ignore = false) {
    TrainSample s;
    s.lower = oracle::random_probmap(classes, h, w, seed);
    s.upper = oracle::random_probmap(classes, h, w, seed + 1);
    s.target = LabelMap(h, w);
    std::mt19937_64 rng(seed + 2);
    for (auto& t : s.target.labels)
        t = (some_ignore && rng() % 11 == 0) ? LabelMap::kIgnore
                                             : static_cast<uint8_t>(rng() % classes);
    return s;
}

EcnWeights zero_weights(int classes) {
    EcnWeights w;
    w.classes = classes;
    w.allocate();
    return w;
}

double fd_relative_error(EcnParams<double>& params, std::span<const TrainSample> batch,
                         std::vector<double>& tensor, size_t idx, double analytic, double h) {
    double orig = tensor[idx];
    tensor[idx] = orig + h;
    double lp = loss_and_grads<double>(params, batch).loss;
    tensor[idx] = orig - h;
    double lm = loss_and_grads<double>(params, batch).loss;
    tensor[idx] = orig;
    double fd = (lp - lm) / (2 * h);
    return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-2});
}

}  // namespace

TEST_CASE("zero weights and class-0 targets give loss ln 2") {
    auto w = zero_weights(2);
    TrainSample s;
    s.lower = ProbMap(2, 4, 4, 0.5f);
    s.upper = ProbMap(2, 4, 4, 0.5f);
    s.target = LabelMap(4, 4, 0);
    auto lg = loss_and_grads<float>(w, std::span<const TrainSample>(&s, 1));
    REQUIRE(lg.loss == Catch::Approx(std::log(2.0)).epsilon(1e-6));
    REQUIRE(lg.valid_pixels == 16);
}

TEST_CASE("saturated logits give near-zero loss") {
    auto w = zero_weights(3);
    w.head_b = {20.f, -20.f, -20.f};  // all-zero convs leave only the head bias
    TrainSample s;
    s.lower = ProbMap(3, 4, 4, 1.f / 3);
    s.upper = ProbMap(3, 4, 4, 1.f / 3);
    s.target = LabelMap(4, 4, 0);
    auto lg = loss_and_grads<float>(w, std::span<const TrainSample>(&s, 1));
    REQUIRE(lg.loss < 1e-6);
}

TEST_CASE("loss_and_grads rejects empty batches and all-ignore targets") {
    auto w = zero_weights(2);
    std::vector<TrainSample> none;
    REQUIRE_THROWS_AS(loss_and_grads<float>(w, none), std::invalid_argument);

    TrainSample s;
    s.lower = ProbMap(2, 2, 2, 0.5f);
    s.upper = ProbMap(2, 2, 2, 0.5f);
    s.target = LabelMap(2, 2, LabelMap::kIgnore);
    std::vector<TrainSample> batch{s};
    REQUIRE_THROWS_AS(loss_and_grads<float>(w, batch), std::invalid_argument);
}

TEST_CASE("analytic gradients match central finite differences") {
    // narrow instantiation so every tensor can be probed densely
    auto weights = make_ecn_weights(3, 2024, /*width=*/12, /*expansion=*/24);
    auto params = convert_params<double>(weights);

    std::vector<TrainSample> batch{random_sample(3, 8, 8, 50, true)};
    auto lg = loss_and_grads<double>(params, batch);
    REQUIRE(lg.valid_pixels > 0);

    auto tensors = ecn_detail::tensor_list(params);
    auto grads = ecn_detail::tensor_list(lg.grads);
    std::mt19937_64 pick(7);
    double worst = 0.0;
    for (size_t t = 0; t < tensors.size(); ++t) {
        size_t n = tensors[t]->size();
        size_t probes = std::min<size_t>(n, 40);
        for (size_t k = 0; k < probes; ++k) {
            size_t idx = (probes == n) ? k : pick() % n;
            double rel =
                fd_relative_error(params, batch, *tensors[t], idx, (*grads[t])[idx], 1e-3);
            worst = std::max(worst, rel);
        }
    }
    INFO("worst relative error " << worst);
    REQUIRE(worst < 1e-4);
}

TEST_CASE("sgd_step basics") {
    TrainConfig cfg;
    cfg.iterations = 10;
    cfg.lr = 0.1;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0;

    auto w = zero_weights(2);
    w.stem_b[0] = 1.f;
    auto grads = w;
    ecn_detail::scale_params(grads, 0.f);
    auto momentum = grads;

    SECTION("zero grads, zero momentum, zero decay leave weights unchanged") {
        auto before = w.stem_b;
        sgd_step(w, grads, momentum, 0, cfg);
        REQUIRE(w.stem_b == before);
    }

    SECTION("single scalar update: v=1, w=0.9") {
        grads.stem_b[0] = 1.f;
        sgd_step(w, grads, momentum, 0, cfg);
        REQUIRE(momentum.stem_b[0] == 1.f);
        REQUIRE(w.stem_b[0] == Catch::Approx(0.9f));
    }

    SECTION("t = T gives lr = 0 and unchanged weights") {
        grads.stem_b[0] = 5.f;
        sgd_step(w, grads, momentum, cfg.iterations, cfg);
        REQUIRE(w.stem_b[0] == 1.f);
    }
}

TEST_CASE("training is deterministic and zero lr freezes the init") {
    std::vector<TrainSample> samples;
    for (uint64_t i = 0; i < 6; ++i) samples.push_back(random_sample(2, 8, 8, 100 + i * 10));

    TrainConfig cfg;
    cfg.iterations = 5;
    cfg.batch = 2;
    cfg.lr = 0.001;
    cfg.seed = 42;

    auto a = train(cfg, samples, 1);
    auto b = train(cfg, samples, 2);  // worker count must not matter
    REQUIRE(a.weights.stem_w == b.weights.stem_w);
    REQUIRE(a.weights.head_w == b.weights.head_w);
    for (size_t i = 0; i < a.log.size(); ++i) REQUIRE(a.log[i].loss == b.log[i].loss);

    TrainConfig frozen = cfg;
    frozen.lr = 0.0;
    auto c = train(frozen, samples, 1);
    auto init = make_ecn_weights(2, mix64(frozen.seed, 0xec4u));
    REQUIRE(c.weights.stem_w == init.stem_w);
    REQUIRE(c.weights.blocks[0].exp_w == init.blocks[0].exp_w);
}

TEST_CASE("loss is non-increasing over the first full-batch steps") {
    std::vector<TrainSample> samples;
    for (uint64_t i = 0; i < 3; ++i) samples.push_back(random_sample(2, 8, 8, 300 + i));

    TrainConfig cfg;
    cfg.iterations = 10;
    cfg.batch = static_cast<int>(samples.size());  // full batch
    cfg.lr = 0.001;
    cfg.flip = false;
    cfg.seed = 7;

    auto r = train(cfg, samples, 1);
    REQUIRE(r.log.size() == 10);
    for (size_t i = 1; i < r.log.size(); ++i) REQUIRE(r.log[i].loss <= r.log[i - 1].loss + 1e-7);
    REQUIRE(r.log.back().loss <= r.log.front().loss);
}

TEST_CASE("build_training_set counts and sample invariants") {
    SceneProfile profile;
    profile.classes = {{0.5, 0.5}, {0.3, 0.3}, {0.2, 0.15}};
    auto scenes = generate_scenes(profile, 2, 32, 32, 5);
    OracleConfig cfg;
    cfg.classes = 3;
    cfg.preferred_scales = {0.5, 1.0, 1.5};
    cfg.seed = 9;
    OracleBackend backend(cfg, std::make_shared<SceneSet>(scenes));

    ScaleSchedule sched;
    sched.scales = {0.5, 1.0};
    sched.fractions = {Fraction::one(), Fraction::one()};
    sched.patch_h = sched.patch_w = 16;
    auto samples = build_training_set(backend, scenes, sched, 0, 2);

    REQUIRE(samples.size() == 2 * 4);  // 2 scenes x 4 patches at scale 1.0
    for (const auto& s : samples) {
        REQUIRE_NOTHROW(s.validate());
        REQUIRE(probmap_ok(s.lower));
        REQUIRE(probmap_ok(s.upper));
    }

    REQUIRE_THROWS_AS(build_training_set(backend, scenes, sched, 1, 1), std::invalid_argument);
}

TEST_CASE("cascade training sets draw lower inputs from the corrected pipeline state") {
    SceneProfile profile;
    profile.classes = {{0.5, 0.5}, {0.3, 0.3}, {0.2, 0.15}};
    auto scenes = generate_scenes(profile, 2, 32, 32, 5);
    OracleConfig cfg;
    cfg.classes = 3;
    cfg.preferred_scales = {0.5, 1.0, 1.5};
    cfg.seed = 9;
    OracleBackend backend(cfg, std::make_shared<SceneSet>(scenes));

    ScaleSchedule sched;
    sched.scales = {0.5, 1.0, 1.5};
    sched.fractions = {Fraction::one(), Fraction::one(), Fraction::one()};
    sched.patch_h = sched.patch_w = 16;

    CascadePrefix cascade;
    cascade.mode = FusionMode::ecn_act;
    cascade.trained = {make_ecn_weights(3, 123)};

    // transition 0 has no prefix: cascade and raw sets agree
    auto raw0 = build_training_set(backend, scenes, sched, 0, 1);
    auto cas0 = build_training_set(backend, scenes, sched, 0, 1, &cascade);
    REQUIRE(raw0.size() == cas0.size());
    REQUIRE(raw0[0].lower.values == cas0[0].lower.values);

    // transition 1: lower now reflects the corrected state, uppers unchanged
    auto raw1 = build_training_set(backend, scenes, sched, 1, 1);
    auto cas1 = build_training_set(backend, scenes, sched, 1, 1, &cascade);
    REQUIRE(raw1.size() == cas1.size());
    REQUIRE(raw1[0].upper.values == cas1[0].upper.values);
    bool lower_differs = false;
    for (size_t i = 0; i < raw1.size() && !lower_differs; ++i)
        lower_differs = raw1[i].lower.values != cas1[i].lower.values;
    REQUIRE(lower_differs);
    for (const auto& s : cas1) {
        REQUIRE_NOTHROW(s.validate());
        REQUIRE(probmap_ok(s.lower));
    }

    CascadePrefix missing;
    missing.mode = FusionMode::ecn_act;
    REQUIRE_THROWS_AS(build_training_set(backend, scenes, sched, 1, 1, &missing),
                      std::invalid_argument);
}

TEST_CASE("error-free oracle yields agreeing lower/upper away from label edges") {
    SceneProfile profile;
    profile.classes = {{0.6, 0.5}, {0.4, 0.35}};
    auto scenes = generate_scenes(profile, 2, 64, 64, 77);
    OracleConfig ocfg;
    ocfg.classes = 2;
    ocfg.preferred_scales = {1.0, 1.0};
    ocfg.e_min = 0.0;
    ocfg.e_max = 0.5;
    ocfg.gain = 0.0;
    ocfg.seed = 4;
    OracleBackend backend(ocfg, std::make_shared<SceneSet>(scenes));

    ScaleSchedule sched;
    sched.scales = {0.5, 1.0};
    sched.fractions = {Fraction::one(), Fraction::one()};
    sched.patch_h = sched.patch_w = 32;
    auto samples = build_training_set(backend, scenes, sched, 0, 2);

    uint64_t interior = 0, lower_ok = 0, upper_ok = 0;
    for (const auto& s : samples) {
        auto lower_arg = argmax_labels(s.lower);
        auto upper_arg = argmax_labels(s.upper);
        int h = s.target.height, w = s.target.width;
        for (int y = 2; y < h - 2; ++y)
            for (int x = 2; x < w - 2; ++x) {
                bool edge = false;  // 5x5 uniformity mask: excludes resampled label edges
                for (int dy = -2; dy <= 2 && !edge; ++dy)
                    for (int dx = -2; dx <= 2 && !edge; ++dx)
                        if (s.target.at(y + dy, x + dx) != s.target.at(y, x)) edge = true;
                if (edge) continue;
                ++interior;
                if (lower_arg.at(y, x) == s.target.at(y, x)) ++lower_ok;
                if (upper_arg.at(y, x) == s.target.at(y, x)) ++upper_ok;
            }
    }
    REQUIRE(interior > 1000);
    REQUIRE(static_cast<double>(lower_ok) / interior >= 0.99);
    REQUIRE(static_cast<double>(upper_ok) / interior >= 0.99);
}
