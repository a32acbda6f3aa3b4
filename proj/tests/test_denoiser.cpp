#include "doctest.h"

#include "support.hpp"

#include "reflex/denoiser.hpp"
#include "reflex/scenario.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace reflex;
using reflex::test::tiny_spec;
namespace fs = std::filesystem;

namespace {

DenoiserShape small_shape(int d_model = 16) {
    DenoiserShape s;
    s.agents = 1;
    s.d_model = d_model;
    s.time_features = 8;
    return s;
}

std::vector<TrainingExample> small_dataset(int n) {
    std::vector<TrainingExample> out;
    for (int i = 0; i < n; ++i) out.push_back(make_example(generate_scenario(kAllKinds[i % 4], 100 + i), 1));
    return out;
}

TrainConfig small_train(int steps) {
    TrainConfig cfg;
    cfg.model.shape = small_shape();
    cfg.steps = steps;
    cfg.batch = 16;
    cfg.warmup_steps = 20;
    cfg.seed = 9;
    return cfg;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("reflex_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_all(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_all(const fs::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    os << s;
}

bool params_equal(const DenoiserParams<float>& a, const DenoiserParams<float>& b) {
    if (!(a.shape == b.shape)) return false;
    for (int i = 0; i < DenoiserParams<float>::count; ++i)
        if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols() || a[i] != b[i]) return false;
    return true;
}

}  // namespace

TEST_SUITE("denoiser") {

TEST_CASE("init is deterministic and sized") {
    const DenoiserShape shape = small_shape(8);
    CHECK(params_equal(init_params<float>(shape, 3), init_params<float>(shape, 3)));
    CHECK_FALSE(params_equal(init_params<float>(shape, 3), init_params<float>(shape, 4)));
    CHECK_THROWS_AS(init_params<float>(small_shape(4), 1), InvalidArgument);

    Denoiser model(DenoiserSpec{shape}, init_params<float>(shape, 3), Normalizer::identity(1, shape.steps));
    const Eigen::MatrixXd x = Eigen::MatrixXd::Random(shape.state_dim(), 3);
    const Eigen::MatrixXd c = Eigen::MatrixXd::Random(shape.cond_dim, 3);
    const Eigen::MatrixXd y = model.predict(x, 17, c);
    CHECK(y.rows() == shape.state_dim());
    CHECK(y.cols() == 3);
    CHECK(y.allFinite());
}

TEST_CASE("default network stays desk scale") {
    const DenoiserParams<float> p = init_params<float>(DenoiserShape{}, 1);
    CHECK(p.size() < 1000000);
}

TEST_CASE("head weight spread follows fan-in scaling") {
    DenoiserShape shape;
    const DenoiserParams<double> p = init_params<double>(shape, 5);
    const auto& w = p[DenoiserParams<double>::out_w];
    REQUIRE(w.size() >= 10000);
    const double mean = w.mean();
    const double sd = std::sqrt((w.array() - mean).square().mean());
    CHECK(std::abs(sd * std::sqrt(shape.d_model) - 1.0) < 0.2);
}

TEST_CASE("zero head gives zero noise under epsilon read-out") {
    const DenoiserShape shape = small_shape(8);
    DenoiserSpec spec{shape};
    spec.parameterization = Parameterization::epsilon;
    DenoiserParams<float> p = init_params<float>(shape, 2);
    p[DenoiserParams<float>::out_w].setZero();
    p[DenoiserParams<float>::out_b].setZero();
    Denoiser model(spec, p, Normalizer::identity(1, shape.steps));
    const Eigen::VectorXd eps = model.predict(reflex::test::random_vector(shape.state_dim(), 1),
                                              40, reflex::test::random_vector(shape.cond_dim, 2));
    CHECK(eps.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward is bit-identical and rejects non-finite input") {
    const DenoiserShape shape = small_shape(8);
    Denoiser model(DenoiserSpec{shape}, init_params<float>(shape, 2), Normalizer::identity(1, shape.steps));
    const Eigen::VectorXd x = reflex::test::random_vector(shape.state_dim(), 4);
    const Eigen::VectorXd c = reflex::test::random_vector(shape.cond_dim, 5);
    CHECK(model.predict(x, 30, c) == model.predict(x, 30, c));
    Eigen::VectorXd bad = x;
    bad[3] = std::nan("");
    CHECK_THROWS_WITH_AS(model.predict(bad, 30, c), doctest::Contains("x_t"), NumericalError);
    Eigen::VectorXd bad_c = c;
    bad_c[0] = INFINITY;
    CHECK_THROWS_WITH_AS(model.predict(x, 30, bad_c), doctest::Contains("condition"), NumericalError);
}

TEST_CASE("lane slice reaches the output only through the full condition") {
    const DenoiserShape shape = small_shape(8);
    Denoiser model(DenoiserSpec{shape}, init_params<float>(shape, 8), Normalizer::identity(1, shape.steps));
    const ConditionSet cs = assemble_conditions(generate_scenario(ScenarioKind::sharp_curve, 1).scene);
    Eigen::VectorXd lanes = cs.full;
    using L = ConditionLayout;
    lanes.segment(L::offset(L::lanes), L::width(L::lanes)).array() += 0.5;
    const Eigen::VectorXd x = reflex::test::random_vector(shape.state_dim(), 6);
    CHECK(model.predict(x, 50, cs.full) != model.predict(x, 50, lanes));
    CHECK(model.predict(x, 50, cs.decouple) == model.predict(x, 50, decouple(lanes)));
}

TEST_CASE("epsilon loss of a perfect predictor is zero") {
    const Eigen::MatrixXd eps = Eigen::MatrixXd::Random(20, 5);
    for (double l : epsilon_loss<double>(eps, eps)) CHECK(l == 0.0);
}

TEST_CASE("duplicating the batch leaves the mean loss unchanged") {
    const DenoiserSpec spec = tiny_spec();
    const NoiseSchedule s = spec.schedule();
    const auto params = init_params<double>(spec.shape, 1);
    TrainBatch<double> b;
    b.x0 = Eigen::MatrixXd::Random(spec.shape.state_dim(), 3);
    b.eps = Eigen::MatrixXd::Random(spec.shape.state_dim(), 3);
    b.cond = Eigen::MatrixXd::Random(spec.shape.cond_dim, 3);
    b.t = {1, 4, 9};
    TrainBatch<double> d;
    d.x0.resize(b.x0.rows(), 6);
    d.x0 << b.x0, b.x0;
    d.eps.resize(b.eps.rows(), 6);
    d.eps << b.eps, b.eps;
    d.cond.resize(b.cond.rows(), 6);
    d.cond << b.cond, b.cond;
    d.t = {1, 4, 9, 1, 4, 9};
    const double single = loss_and_grads(params, spec, s, b).loss;
    CHECK(loss_and_grads(params, spec, s, d).loss == doctest::Approx(single).epsilon(1e-12));
    CHECK(loss_and_grads(params, spec, s, d, 3).loss == loss_and_grads(params, spec, s, d, 1).loss);
}

TEST_CASE("analytic gradients match finite differences") {
    for (Parameterization p : {Parameterization::epsilon, Parameterization::sample}) {
        const DenoiserSpec spec = tiny_spec(8, p);
        const auto params = init_params<double>(spec.shape, 11);
        const GradCheckReport r20 = grad_check(params, spec, 20, 1);
        CHECK(r20.max_rel_error < 1e-4);
        const GradCheckReport r50 = grad_check(params, spec, 50, 2);
        CHECK(r50.probes.size() == 50);
        CHECK(r50.max_rel_error < 1e-4);
        CHECK(r50.passed());
    }
}

TEST_CASE("gradient check self-consistency and fault injection") {
    CHECK(relative_error(0.3, 0.3) == 0.0);
    CHECK(relative_error(0.0, 0.0) == 0.0);

    const DenoiserSpec spec = tiny_spec();
    const NoiseSchedule s = spec.schedule();
    const auto params = init_params<double>(spec.shape, 4);
    TrainBatch<double> b;
    b.x0 = Eigen::MatrixXd::Random(spec.shape.state_dim(), 2);
    b.eps = Eigen::MatrixXd::Random(spec.shape.state_dim(), 2);
    b.cond = Eigen::MatrixXd::Random(spec.shape.cond_dim, 2);
    b.t = {2, 7};
    auto grads = loss_and_grads(params, spec, s, b).grad;
    const LossFunction loss = [&](const DenoiserParams<double>& q) { return loss_and_grads(q, spec, s, b).loss; };

    // index 0 of hidden1.weight, found by walking the tensor sizes
    Eigen::Index flat = 0;
    for (int i = 0; i < DenoiserParams<double>::hidden1_w; ++i) flat += params[i].size();
    grads.entry(flat) += 0.5 + std::abs(grads.entry(flat));
    const GradCheckReport r = grad_check(params, loss, grads, 10, 3, 1e-4, {flat});
    CHECK_FALSE(r.passed());
    CHECK(r.worst.tensor == "hidden1.weight");
    CHECK(r.worst.local == 0);
}

TEST_CASE("training reduces the loss and is deterministic") {
    const auto data = small_dataset(24);
    const TrainConfig cfg = small_train(300);
    const TrainResult a = train(data, cfg);
    REQUIRE(a.loss_curve.size() == 300);
    auto window_mean = [](const std::vector<double>& v, std::size_t from, std::size_t n) {
        double sum = 0.0;
        for (std::size_t i = from; i < from + n; ++i) sum += v[i];
        return sum / static_cast<double>(n);
    };
    CHECK(window_mean(a.loss_curve, 280, 20) < 0.5 * window_mean(a.loss_curve, 0, 20));
    CHECK(a.decoupled_draws > 0);

    const TrainResult b = train(data, cfg);
    CHECK(params_equal(a.model.params(), b.model.params()));
    CHECK(a.loss_curve == b.loss_curve);

    // guidance signal and output sanity on a held-out scene
    const ConditionSet cs = assemble_conditions(generate_scenario(ScenarioKind::u_turn, 777).scene);
    const Eigen::VectorXd x = 10.0 * Eigen::VectorXd::Random(a.model.state_dim());
    const Eigen::VectorXd full = a.model.predict(x, 30, cs.full);
    const Eigen::VectorXd dec = a.model.predict(x, 30, cs.decouple);
    CHECK((full - dec).norm() > 0.0);
    CHECK(full.cwiseAbs().maxCoeff() < 1e6);
}

TEST_CASE("p_drop zero never draws the decoupled branch") {
    TrainConfig cfg = small_train(40);
    cfg.p_drop = 0.0;
    const TrainResult r = train(small_dataset(8), cfg);
    CHECK(r.decoupled_draws == 0);
    CHECK(r.draws == 40u * 16u);
}

TEST_CASE("paused then resumed training matches an uninterrupted run") {
    const auto data = small_dataset(8);
    const TrainConfig full_cfg = small_train(60);
    const TrainResult full = train(data, full_cfg);

    TrainConfig first = full_cfg;
    first.stop_at = 25;
    const TrainResult part = train(data, first);
    CHECK(part.next_step == 25);
    TrainResume resume{part.model.params(), part.velocity, part.second_moment, part.next_step};
    const TrainResult rest = train(data, full_cfg, {}, &resume);
    CHECK(params_equal(rest.model.params(), full.model.params()));
    REQUIRE(rest.loss_curve.size() == 35);
    for (int i = 0; i < 35; ++i) CHECK(rest.loss_curve[i] == full.loss_curve[25 + i]);
}

TEST_CASE("invalid training configs are rejected") {
    TrainConfig cfg;
    cfg.p_drop = 1.2;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg = TrainConfig{};
    cfg.model.beta_min = 1e-3;
    cfg.model.beta_max = 0.05;  // alpha_bar_T stays far above 0.05
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    CHECK_THROWS_AS(train({}, TrainConfig{}), InvalidArgument);
}

TEST_CASE("checkpoint round trip is bitwise") {
    const fs::path dir = scratch_dir("ckpt");
    const DenoiserShape shape = small_shape(8);
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 6; ++i) trajs.push_back(make_example(generate_scenario(ScenarioKind::u_turn, i), 1).x0);
    DenoiserSpec spec{shape};
    spec.seed = 77;
    const Denoiser model(spec, init_params<float>(shape, 7), Normalizer::fit(trajs, 1));
    save_checkpoint(dir / "m.ckpt", model);
    const Denoiser back = load_checkpoint(dir / "m.ckpt");
    CHECK(params_equal(back.params(), model.params()));
    CHECK(back.normalizer().mean == model.normalizer().mean);
    CHECK(back.normalizer().scale == model.normalizer().scale);
    CHECK(back.spec().seed == 77);
    CHECK(back.spec().parameterization == model.spec().parameterization);

    const std::string bytes = read_all(dir / "m.ckpt");
    write_all(dir / "short.ckpt", bytes.substr(0, bytes.size() - 4));
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "short.ckpt"), doctest::Contains("payload"), InvalidArgument);

    std::string edited = bytes;
    const auto pos = edited.find("\"d_model\":8");
    REQUIRE(pos != std::string::npos);
    edited.replace(pos, 11, "\"d_model\":9");
    write_all(dir / "edited.ckpt", edited);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "edited.ckpt"), doctest::Contains("shape mismatch"), InvalidArgument);

    std::string version = bytes;
    version.replace(version.find("\"version\":1"), 11, "\"version\":7");
    write_all(dir / "version.ckpt", version);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "version.ckpt"), doctest::Contains("version"), InvalidArgument);
}

TEST_CASE("train state round trip") {
    const fs::path dir = scratch_dir("state");
    const DenoiserShape shape = small_shape(8);
    TrainState st{init_params<float>(shape, 1), init_params<float>(shape, 2), 123};
    save_train_state(dir / "s.bin", st);
    const TrainState back = load_train_state(dir / "s.bin", shape);
    CHECK(back.step == 123);
    CHECK(params_equal(back.velocity, st.velocity));
    CHECK(params_equal(back.second_moment, st.second_moment));
    CHECK_THROWS_AS(load_train_state(dir / "s.bin", small_shape(16)), InvalidArgument);
}

TEST_CASE("DCT matrix is orthonormal") {
    for (int n : {1, 5, 80}) {
        const Eigen::MatrixXd& D = dct_matrix(n);
        CHECK((D * D.transpose() - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("normalizer maps are inverse and floored") {
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 12; ++i) trajs.push_back(make_example(generate_scenario(kAllKinds[i % 4], 50 + i), 2).x0);
    for (bool spectral : {true, false}) {
        const double floor = 0.04;
        const Normalizer n = Normalizer::fit(trajs, 2, floor, spectral);
        const Trajectory back = n.from_model(n.to_model(trajs[3]));
        CHECK((back.data() - trajs[3].data()).cwiseAbs().maxCoeff() < 1e-9);
        const Trajectory d = n.direction_from_model(n.direction_to_model(trajs[5]));
        CHECK((d.data() - trajs[5].data()).cwiseAbs().maxCoeff() < 1e-9);
        for (int r = 0; r < 2; ++r)
            for (int ch = 0; ch < kChannels; ++ch) {
                double top = 0.0, low = 1e300;
                for (int k = 0; k < n.steps(); ++k) {
                    top = std::max(top, n.scale(r, k * kChannels + ch));
                    low = std::min(low, n.scale(r, k * kChannels + ch));
                }
                CHECK(low >= floor * top * (1 - 1e-12));
                CHECK(low >= 1e-3);
            }
    }
    const Normalizer id = Normalizer::identity(2, kHorizonSteps);
    CHECK(id.to_model(trajs[0]) == trajs[0].flat());
    CHECK_THROWS_AS(Normalizer::fit(trajs, 2, 1.0), InvalidArgument);
}

}  // TEST_SUITE
