#include "doctest.h"

#include "support.hpp"

#include "json.hpp"
#include "reflex/dataset.hpp"
#include "reflex/evaluator.hpp"
#include "reflex/svg.hpp"


using namespace reflex;

namespace {

Scenario moved(const Scenario& s, const Rigid2& g) {
    Scenario out = s;
    out.scene = transform(s.scene, g);
    out.ground_truth = transform(s.ground_truth, g);
    return out;
}

Denoiser tiny_model() {
    DenoiserShape shape;
    shape.agents = 1;
    shape.d_model = 8;
    shape.time_features = 4;
    return Denoiser(DenoiserSpec{shape}, init_params<float>(shape, 3), Normalizer::identity(1, kHorizonSteps));
}

PlannerConfig planner_cfg(bool reflection) {
    PlannerConfig c;
    if (reflection) c.sample.reflection = ReflectionConfig{};
    return c;
}

// Minimal well-formedness check: every start tag is closed in order, no stray text outside the root.
bool balanced_xml(const std::string& doc) {
    std::vector<std::string> stack;
    std::size_t i = 0;
    bool seen_root = false;
    while ((i = doc.find('<', i)) != std::string::npos) {
        const std::size_t end = doc.find('>', i);
        if (end == std::string::npos) return false;
        const std::string tag = doc.substr(i + 1, end - i - 1);
        i = end + 1;
        if (tag.empty()) return false;
        if (tag[0] == '?' || tag[0] == '!') continue;
        if (tag[0] == '/') {
            const std::string name = tag.substr(1);
            if (stack.empty() || stack.back() != name) return false;
            stack.pop_back();
            continue;
        }
        const std::string name = tag.substr(0, tag.find_first_of(" \t\n/"));
        if (stack.empty()) {
            if (seen_root) return false;
            seen_root = true;
        }
        if (tag.back() != '/') stack.push_back(name);
    }
    return seen_root && stack.empty();
}

}  // namespace

TEST_SUITE("evaluator") {

TEST_CASE("reference replay on a straight road") {
    const Scenario s = generate_scenario(ScenarioKind::straight, 4);
    const RolloutConfig cfg;
    const RolloutResult r = rollout(ground_truth_planner(), s, cfg);
    CHECK_FALSE(r.failed);
    CHECK_FALSE(r.events.collision);
    CHECK_FALSE(r.events.out_of_corridor);
    CHECK_FALSE(r.events.stalled);
    CHECK(r.replans == 15);
    CHECK(r.executed.steps() == 151);
    const ScoreBreakdown b = score(r, s, cfg);
    CHECK(b.progress == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(b.score >= 99.0);
}

TEST_CASE("reference replay on a gentle curve scores at least 95") {
    const RolloutConfig cfg;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Scenario s = generate_scenario(ScenarioKind::gentle_curve, seed);
        CHECK(score(rollout(ground_truth_planner(), s, cfg), s, cfg).score >= 95.0);
    }
}

TEST_CASE("a planner that never moves stalls") {
    const Scenario s = generate_scenario(ScenarioKind::sharp_curve, 2);
    const RolloutConfig cfg;
    const RolloutResult r = rollout(stationary_planner(), s, cfg);
    CHECK(r.events.stalled);
    const ScoreBreakdown b = score(r, s, cfg);
    CHECK(b.progress == 0.0);
    CHECK(b.score <= 80.0);
}

TEST_CASE("collision zeroes the score") {
    Scenario s = generate_scenario(ScenarioKind::straight, 6);
    s.scene.neighbors.clear();
    const Vec2 ahead = s.scene.ego_init.position() + 30.0 * Vec2(s.scene.ego_init.cos_theta, s.scene.ego_init.sin_theta);
    s.scene.static_obstacles = {{ahead.x(), ahead.y(), 0.6}};
    const RolloutConfig cfg;
    const RolloutResult r = rollout(ground_truth_planner(), s, cfg);
    CHECK(r.events.collision);
    const ScoreBreakdown b = score(r, s, cfg);
    CHECK(b.no_collision == 0.0);
    CHECK(b.score == 0.0);
}

TEST_CASE("score is invariant under rigid motion of the scene") {
    const RolloutConfig cfg;
    for (ScenarioKind kind : {ScenarioKind::u_turn, ScenarioKind::gentle_curve}) {
        const Scenario s = generate_scenario(kind, 8);
        const Scenario m = moved(s, Rigid2::from_pose({-300.0, 75.0, 2.1}));
        for (const Planner& p : {ground_truth_planner(), stationary_planner()}) {
            const ScoreBreakdown a = score(rollout(p, s, cfg), s, cfg);
            const ScoreBreakdown b = score(rollout(p, m, cfg), m, cfg);
            CHECK(b.score == doctest::Approx(a.score).epsilon(1e-6));
            CHECK(b.violation_rate == doctest::Approx(a.violation_rate).epsilon(1e-9));
        }
    }
}

TEST_CASE("overlap primitives") {
    CHECK(boxes_overlap({0, 0, 0}, 4, 2, {3, 0, 0}, 4, 2));
    CHECK_FALSE(boxes_overlap({0, 0, 0}, 4, 2, {5, 0, 0}, 4, 2));
    CHECK(boxes_overlap({0, 0, 0}, 4, 2, {0, 2.5, kPi / 2}, 4, 2));
    CHECK_FALSE(boxes_overlap({0, 0, kPi / 4}, 4, 1, {2.5, -2.5, kPi / 4}, 4, 1));
    CHECK(box_circle_overlap({0, 0, 0}, 4, 2, {2.4, 0}, 0.5));
    CHECK_FALSE(box_circle_overlap({0, 0, 0}, 4, 2, {2.6, 1.6}, 0.5));
}

TEST_CASE("diffusion planner output and rollout determinism") {
    const Denoiser model = tiny_model();
    const DiffusionPlanner planner(model, planner_cfg(true));
    const Scenario s = generate_scenario(ScenarioKind::u_turn, 3);
    const PlanResult a = planner.plan(s.scene, 5);
    CHECK(a.ego.agents() == 1);
    CHECK(a.ego.steps() == kHorizonSteps);
    CHECK(a.ego.data().allFinite());
    CHECK(a.step_ms.size() == 20);
    CHECK(planner.plan(s.scene, 5).ego == a.ego);

    RolloutConfig cfg;
    cfg.horizon = 4.0;
    const RolloutResult r1 = rollout(planner.closure(), s, cfg);
    const RolloutResult r2 = rollout(planner.closure(), s, cfg);
    CHECK(r1.executed == r2.executed);
    CHECK(r1.triggers == r2.triggers);
    CHECK(r1.events.collision == r2.events.collision);
}

TEST_CASE("paired comparison") {
    const std::vector<Scenario> suite = generate_suite(SuiteSpec::parse("u_turn:2,straight:1", 5));
    const RolloutConfig cfg;
    const MetricsTable t = compare_suite({{"a", ground_truth_planner()}, {"b", ground_truth_planner()}}, suite, cfg, 2, 1);
    REQUIRE(t.rows.size() == 6);
    REQUIRE(t.summary.size() == 2);
    CHECK(t.summary[0].mean_score == t.summary[1].mean_score);
    CHECK(t.summary[0].mean_violation_rate == t.summary[1].mean_violation_rate);
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const MetricsRow& r = t.rows[i];
        for (const MetricsRow& o : t.rows)
            if (o.scenario == r.scenario) CHECK(o.breakdown.score == r.breakdown.score);
    }
    const MetricsTable again =
        compare_suite({{"a", ground_truth_planner()}, {"b", ground_truth_planner()}}, suite, cfg, 1, 1);
    CHECK(metrics_csv(again) == metrics_csv(t));

    CHECK_THROWS_AS(compare_suite({{"a", ground_truth_planner()}, {"b", stationary_planner()}}, {}, cfg, 1, 1),
                    InvalidArgument);
    CHECK_THROWS_AS(compare_suite({{"a", ground_truth_planner()}}, suite, cfg, 1, 1), InvalidArgument);
    CHECK_THROWS_AS(compare_suite({{"a", ground_truth_planner()}, {"b", stationary_planner()}}, suite, cfg),
                    InvalidArgument);
}

TEST_CASE("metrics CSV and summary JSON") {
    const std::vector<Scenario> suite = generate_suite(SuiteSpec::parse("gentle_curve:2", 1));
    const MetricsTable t =
        compare_suite({{"gt", ground_truth_planner()}, {"still", stationary_planner()}}, suite, RolloutConfig{}, 1, 1);
    const std::string csv = metrics_csv(t);
    std::istringstream is(csv);
    std::string header;
    std::getline(is, header);
    const auto columns = std::count(header.begin(), header.end(), ',');
    int lines = 0;
    for (std::string line; std::getline(is, line); ++lines) CHECK(std::count(line.begin(), line.end(), ',') == columns);
    CHECK(lines == 4);
    CHECK(header.rfind("planner,scenario,kind,seed,score", 0) == 0);

    const auto j = nlohmann::json::parse(summary_json(t));
    REQUIRE(j.at("planners").size() == 2);
    CHECK(j["planners"][0]["planner"] == "gt");
    CHECK(j["planners"][0]["mean_score"].get<double>() > j["planners"][1]["mean_score"].get<double>());
    CHECK(j["planners"][1]["scenarios"] == 2);
}

TEST_CASE("latency benchmark") {
    const Denoiser model = tiny_model();
    const DiffusionPlanner planner(model, planner_cfg(false));
    const Scenario s = generate_scenario(ScenarioKind::sharp_curve, 1);
    CHECK_THROWS_AS(bench_latency(planner, s.scene, 1), InvalidArgument);
    CHECK_THROWS_AS(bench_latency(planner, s.scene, 10, 1), InvalidArgument);
    const LatencyReport r = bench_latency(planner, s.scene, 10);
    CHECK(r.repetitions == 10);
    CHECK(r.per_step_mean_ms > 0.0);
    CHECK(r.per_step_p95_ms >= r.per_step_mean_ms * 0.5);
    CHECK(r.e2e_mean_ms >= r.per_step_mean_ms);
}

TEST_CASE("SVG output is well formed") {
    const Scenario s = generate_scenario(ScenarioKind::u_turn, 2);
    const Denoiser model = tiny_model();
    const DiffusionPlanner planner(model, planner_cfg(true));
    RolloutConfig cfg;
    cfg.horizon = 2.0;
    const RolloutResult r = rollout(planner.closure(), s, cfg);
    const std::string svg = scenario_svg(s, r, "u_turn <2> & co");
    CHECK(balanced_xml(svg));
    CHECK(svg.find("width=\"1000\"") != std::string::npos);
    CHECK(svg.find("height=\"700\"") != std::string::npos);
    CHECK(svg.find("&lt;2&gt; &amp; co") != std::string::npos);

    const std::string curve = curve_svg({0.6, 0.7, 0.8}, {{"on", {40, 42, 41}}, {"off", {39, 39, 39}}}, "gamma", "score", "sweep");
    CHECK(balanced_xml(curve));
    CHECK_FALSE(balanced_xml("<svg><g></svg>"));
}

}  // TEST_SUITE
