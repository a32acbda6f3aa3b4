#include "doctest.h"

#include "support.hpp"

#include "reflex/diffusion.hpp"
#include "reflex/sampling.hpp"

using namespace reflex;
using reflex::test::ConstantNoise;
using reflex::test::LinearNoise;
using reflex::test::random_vector;

namespace {

constexpr int kSteps = 6;
constexpr int kDim = kSteps * kChannels;

// Smooth stand-in for the confidence score: depends on the clean estimate only.
ConfidenceFn toy_confidence(double scale = 5.0) {
    return [scale](const Eigen::VectorXd& x0) {
        ConfidenceReport r;
        r.c = 1.0 / (1.0 + x0.squaredNorm() / (scale * x0.size()));
        r.d_kin = r.g_align = r.s_margin = r.c;
        return r;
    };
}

ConditionSet toy_conditions(int cond_dim) {
    return {random_vector(cond_dim, 21), Eigen::VectorXd::Zero(cond_dim)};
}

NoiseSchedule sampling_schedule() { return make_schedule(100, 1e-3, 0.2).strided(20); }

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("four-step schedule by hand") {
    const NoiseSchedule s = make_schedule(4, 0.1, 0.4);
    const double a[] = {0.9, 0.8, 0.7, 0.6};
    const double ab[] = {0.9, 0.72, 0.504, 0.3024};
    for (int t = 1; t <= 4; ++t) {
        CHECK(std::abs(s.alpha_at(t) - a[t - 1]) < 1e-12);
        CHECK(std::abs(s.alpha_bar_at(t) - ab[t - 1]) < 1e-12);
    }
}

TEST_CASE("schedule invariants") {
    for (auto [T, lo, hi] : {std::tuple{10, 0.01, 0.3}, std::tuple{100, 1e-4, 2e-2}, std::tuple{100, 1e-3, 0.2},
                             std::tuple{1000, 1e-4, 0.02}}) {
        const NoiseSchedule s = make_schedule(T, lo, hi);
        for (int t = 1; t <= T; ++t) {
            CHECK(s.alpha_bar_at(t) <= s.alpha_at(t));
            if (t > 1) CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
        }
    }
    CHECK_THROWS_AS(make_schedule(1, 0.1, 0.2), InvalidArgument);
    CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1), InvalidArgument);
    CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), InvalidArgument);
}

TEST_CASE("training schedule reaches near-pure noise") {
    // the linear 1e-4..2e-2 range keeps alpha_bar_T near 0.36, which training refuses
    const NoiseSchedule narrow = make_schedule(100, 1e-4, 2e-2);
    CHECK(narrow.alpha_bar_at(100) == doctest::Approx(0.3636).epsilon(1e-3));
    TrainConfig cfg;
    cfg.model.beta_min = 1e-4;
    cfg.model.beta_max = 2e-2;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);

    const NoiseSchedule s = TrainConfig{}.model.schedule();
    CHECK(s.T == 100);
    CHECK(s.alpha_bar_at(100) < 0.05);
    CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("strided schedule") {
    const NoiseSchedule full = make_schedule(100, 1e-3, 0.2);
    const NoiseSchedule s = full.strided(20);
    CHECK(s.T == 20);
    for (int i = 1; i <= 20; ++i) {
        CHECK(s.model_timestep(i) == 5 * i);
        CHECK(s.alpha_bar_at(i) == full.alpha_bar_at(5 * i));
    }
    CHECK(s.alpha_bar_at(1) == doctest::Approx(s.alpha_at(1)));
    CHECK_THROWS_AS(full.strided(0), InvalidArgument);
}

TEST_CASE("forward noise") {
    const NoiseSchedule s = make_schedule(100, 1e-3, 0.2);
    const Eigen::VectorXd x0 = random_vector(50, 1, 3.0);
    const Eigen::VectorXd eps = random_vector(50, 2);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(50);
    CHECK(forward_noise(x0, 40, zero, s) == std::sqrt(s.alpha_bar_at(40)) * x0);

    const double ab = s.alpha_bar_at(100);
    const double bound = std::sqrt(ab) * x0.norm() + (1.0 - std::sqrt(1.0 - ab)) * eps.norm();
    CHECK((forward_noise(x0, 100, eps, s) - eps).norm() <= bound + 1e-12);

    for (int t : {1, 17, 100}) {
        const Eigen::VectorXd back = predict_x0(forward_noise(x0, t, eps, s), eps, t, s);
        CHECK((back - x0).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK_THROWS_AS(forward_noise(x0, 0, eps, s), InvalidArgument);
}

TEST_CASE("clean estimate by hand") {
    const NoiseSchedule s = schedule_from_betas(Eigen::Vector2d(0.2, 0.1));
    REQUIRE(s.alpha_bar_at(2) == doctest::Approx(0.72));
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 1.3), e = Eigen::VectorXd::Constant(1, -0.4);
    CHECK(predict_x0(x, e, 2, s)[0] == doctest::Approx((1.3 + 0.5292 * 0.4) / 0.8485).epsilon(1e-4));
    CHECK(std::abs(predict_x0(x, Eigen::VectorXd::Zero(1), 2, s)[0] - 1.3 / std::sqrt(0.72)) < 1e-12);
}

TEST_CASE("guidance identities") {
    const Eigen::VectorXd full = random_vector(30, 3), dec = random_vector(30, 4);
    CHECK(cfg_combine(full, dec, 1.0) == full);
    CHECK(cfg_combine(full, dec, 0.0) == dec);
    CHECK((cfg_combine(full, dec, 0.5) - 0.5 * (full + dec)).cwiseAbs().maxCoeff() < 1e-15);
    for (double l : {0.3, 0.9, 2.5}) {
        const Eigen::VectorXd lhs = cfg_combine(full, dec, l) - cfg_combine(full, dec, 0.0);
        const Eigen::VectorXd rhs = l * (cfg_combine(full, dec, 1.0) - cfg_combine(full, dec, 0.0));
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("cfg_noise evaluates the model twice") {
    const LinearNoise model(kDim, 7, 5);
    const NoiseSchedule s = sampling_schedule();
    const ConditionSet cs = toy_conditions(7);
    const Eigen::VectorXd x = random_vector(kDim, 8);
    model.reset_evaluations();
    const GuidedNoise g = cfg_noise(model, x, 3, cs, 0.9, s);
    CHECK(model.evaluations() == 2);
    CHECK(g.full == model.predict(x, s.model_timestep(3), cs.full));
    CHECK(g.decoupled == model.predict(x, s.model_timestep(3), cs.decouple));
    CHECK(g.combined == cfg_combine(g.full, g.decoupled, 0.9));
    CHECK(cfg_noise(model, x, 3, cs, 1.0, s).combined == g.full);
}

TEST_CASE("DDPM step") {
    const NoiseSchedule s = schedule_from_betas(Eigen::Vector2d(0.2, 0.1));
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 2.0), e = Eigen::VectorXd::Constant(1, 0.7);
    const Eigen::VectorXd z0 = Eigen::VectorXd::Zero(1);
    CHECK(std::abs(ddpm_step(x, z0, 2, s, z0)[0] - 2.0 / std::sqrt(0.9)) < 1e-12);
    const double exact = (2.0 - 0.1 / std::sqrt(0.28) * 0.7) / std::sqrt(0.9);
    CHECK(std::abs(ddpm_step(x, e, 2, s, z0)[0] - exact) < 1e-12);
    CHECK(ddpm_step(x, e, 2, s, z0)[0] == doctest::Approx((2.0 - 0.1889 * 0.7) / 0.9487).epsilon(1e-4));

    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    const int draws = 10000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < draws; ++i) {
        const double v = ddpm_step(x, e, 2, s, Eigen::VectorXd::Constant(1, n(rng)))[0];
        sum += v;
        sq += v * v;
    }
    const double mean = sum / draws;
    const double var = sq / draws - mean * mean;
    CHECK(var == doctest::Approx(0.1 / 0.9).epsilon(0.05));
}

TEST_CASE("DDIM step") {
    const NoiseSchedule s = make_schedule(100, 1e-3, 0.2);
    CHECK(s.ddim_coefficient(1) == doctest::Approx(std::sqrt(s.beta_at(1))).epsilon(1e-12));
    const NoiseSchedule hand = schedule_from_betas(Eigen::Vector2d(0.2, 0.1));
    CHECK(std::abs(hand.ddim_coefficient(2) - 0.1 / (std::sqrt(0.18) + std::sqrt(0.28))) < 1e-15);

    const Eigen::VectorXd x = random_vector(40, 9), e = random_vector(40, 10);
    CHECK((ddim_step(x, Eigen::VectorXd::Zero(40), 30, s) - x / std::sqrt(s.alpha_at(30))).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(ddim_step(x, e, 30, s) == ddim_step(x, e, 30, s));
    const Eigen::VectorXd expected = (x - s.ddim_coefficient(30) * e) / std::sqrt(s.alpha_at(30));
    CHECK((ddim_step(x, e, 30, s) - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("sampler config") {
    CHECK(parse_sampler("ddim_cfg") == SamplerKind::ddim_cfg);
    CHECK(parse_sampler(to_string(SamplerKind::ddpm_cfg)) == SamplerKind::ddpm_cfg);
    CHECK_THROWS_AS(parse_sampler("euler"), InvalidArgument);
    SamplerConfig c;
    CHECK(c.lambda1 == 0.9);
    c.lambda1 = -0.1;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("sampling without reflection is a pure function of its inputs") {
    const LinearNoise model(kDim, 7, 2);
    const ConditionSet cs = toy_conditions(7);
    const Normalizer norm = Normalizer::identity(1, kSteps);
    const NoiseSchedule s = sampling_schedule();
    for (SamplerKind kind : {SamplerKind::ddim_cfg, SamplerKind::ddpm_cfg}) {
        SampleOptions opt;
        opt.sampler.kind = kind;
        opt.sampler.seed = 4;
        const SampleResult a = sample(model, cs, opt, s, norm, toy_confidence());
        const SampleResult b = sample(model, cs, opt, s, norm, toy_confidence());
        CHECK(a.x0 == b.x0);
        CHECK(a.x0.allFinite());
        CHECK(a.triggers == 0);
        CHECK(a.trace.size() == 20);
        CHECK(a.evaluations == 40);
        opt.sampler.seed = 5;
        CHECK(sample(model, cs, opt, s, norm, toy_confidence()).x0 != a.x0);
    }
}

TEST_CASE("gamma zero never triggers") {
    const LinearNoise model(kDim, 7, 3);
    const ConditionSet cs = toy_conditions(7);
    const Normalizer norm = Normalizer::identity(1, kSteps);
    const NoiseSchedule s = sampling_schedule();
    SampleOptions off;
    off.sampler.seed = 8;
    SampleOptions on = off;
    on.reflection = ReflectionConfig{};
    on.reflection->gamma = 0.0;
    const SampleResult a = sample(model, cs, off, s, norm, toy_confidence());
    const SampleResult b = sample(model, cs, on, s, norm, toy_confidence());
    CHECK(b.triggers == 0);
    CHECK(b.x0 == a.x0);
    CHECK(b.trajectory == a.trajectory);
}

TEST_CASE("gamma one triggers every eligible step within budget") {
    const LinearNoise model(kDim, 7, 3);
    const ConditionSet cs = toy_conditions(7);
    const Normalizer norm = Normalizer::identity(1, kSteps);
    const NoiseSchedule s = sampling_schedule();
    for (int r_max : {1, 2, 3}) {
        SampleOptions on;
        on.sampler.seed = 8;
        on.reflection = ReflectionConfig{};
        on.reflection->gamma = 1.0;
        on.reflection->r_max = r_max;
        const SampleResult r = sample(model, cs, on, s, norm, toy_confidence());
        CHECK(r.triggers == s.T - 1);
        CHECK(r.attempts == r_max * (s.T - 1));
        CHECK(r.exhausted == s.T - 1);
        CHECK_FALSE(r.budget_exceeded);
        for (std::uint64_t calls : r.evaluations_per_step) CHECK(calls <= 2u + 4u * static_cast<std::uint64_t>(r_max));
    }
}

TEST_CASE("raising gamma never lowers the trigger count") {
    // a constant model with identity projection makes every reflect a fixed
    // point, so the sampling path is the same for all gammas
    const ConstantNoise model(random_vector(kDim, 31, 0.5), 7);
    const ConditionSet cs = toy_conditions(7);
    const Normalizer norm = Normalizer::identity(1, kSteps);
    const NoiseSchedule s = sampling_schedule();
    int previous = -1;
    for (int i = 0; i <= 20; ++i) {
        const double gamma = i / 20.0;
        SampleOptions on;
        on.sampler.seed = 12;
        on.reflection = ReflectionConfig{};
        on.reflection->gamma = gamma;
        on.reflection->projection = ProjectionMode::identity;
        const SampleResult r = sample(model, cs, on, s, norm, toy_confidence(0.3));
        CHECK(r.triggers >= previous);
        previous = r.triggers;
    }
    CHECK(previous == s.T - 1);
}

}  // TEST_SUITE
