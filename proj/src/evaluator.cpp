#include "reflex/evaluator.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <future>
#include <numeric>
#include <sstream>

namespace reflex {

void RolloutConfig::validate() const {
    if (!(replan_interval > 0.0) || !(horizon >= replan_interval)) throw InvalidArgument("rollout: bad replan interval or horizon");
    if (steps_per_tick() < 2 || steps_per_tick() > kHorizonSteps)
        throw InvalidArgument("rollout: replan interval must cover 2..80 plan steps");
}

int RolloutConfig::ticks() const { return static_cast<int>(std::lround(horizon / replan_interval)); }
int RolloutConfig::steps_per_tick() const { return static_cast<int>(std::lround(replan_interval / kStepDt)); }

// ---------------------------------------------------------------- geometry

namespace {

std::array<Vec2, 4> box_corners(const Pose2& pose, double length, double width) {
    const Vec2 t = pose.tangent() * (0.5 * length);
    const Vec2 n = pose.normal() * (0.5 * width);
    const Vec2 c = pose.position();
    return {c + t + n, c + t - n, c - t - n, c - t + n};
}

bool separated_on(const Vec2& axis, const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b) {
    double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
    for (const auto& p : a) {
        amin = std::min(amin, p.dot(axis));
        amax = std::max(amax, p.dot(axis));
    }
    for (const auto& p : b) {
        bmin = std::min(bmin, p.dot(axis));
        bmax = std::max(bmax, p.dot(axis));
    }
    return amax < bmin || bmax < amin;
}

}  // namespace

bool boxes_overlap(const Pose2& a, double al, double aw, const Pose2& b, double bl, double bw) {
    const auto ca = box_corners(a, al, aw);
    const auto cb = box_corners(b, bl, bw);
    for (const Vec2& axis : {a.tangent(), a.normal(), b.tangent(), b.normal()})
        if (separated_on(axis, ca, cb)) return false;
    return true;
}

bool box_circle_overlap(const Pose2& box, double length, double width, const Vec2& center, double radius) {
    const Vec2 d = center - box.position();
    const double u = std::clamp(d.dot(box.tangent()), -0.5 * length, 0.5 * length);
    const double v = std::clamp(d.dot(box.normal()), -0.5 * width, 0.5 * width);
    const Vec2 closest = box.position() + u * box.tangent() + v * box.normal();
    return (center - closest).norm() < radius;
}

// ---------------------------------------------------------------- rollout

namespace {

Pose2 pose_at(const Trajectory& traj, int k) {
    const Vec2 p = traj.position(0, k);
    const Vec2 h = traj.heading(0, k);
    return {p.x(), p.y(), std::atan2(h.y(), h.x())};
}

void detect_events(RolloutResult& r, const Scenario& sc, const RolloutConfig& cfg, int filled) {
    const Road road(sc.scene.road);
    const double hw = sc.scene.road.lane_half_width;
    std::vector<double> s(static_cast<std::size_t>(filled));
    for (int j = 0; j < filled; ++j) {
        const RoadProjection proj = road.project(r.executed.position(0, j));
        s[static_cast<std::size_t>(j)] = proj.s;
        if (std::abs(proj.lateral) > hw) r.events.out_of_corridor = true;
        if (j == 0) continue;
        const Pose2 ego = pose_at(r.executed, j);
        const double time = j * kStepDt;
        for (const auto& nb : sc.scene.neighbors) {
            const AgentState st = nb.state_at(road, time);
            if (boxes_overlap(ego, cfg.ego_length, cfg.ego_width, st.pose(), nb.attrs.length, nb.attrs.width))
                r.events.collision = true;
        }
        for (const auto& ob : sc.scene.static_obstacles)
            if (box_circle_overlap(ego, cfg.ego_length, cfg.ego_width, Vec2(ob.x, ob.y), ob.radius)) r.events.collision = true;
    }
    const int window = static_cast<int>(std::lround(cfg.stall_window / kStepDt));
    for (int j = 0; j + window < filled; ++j)
        if (s[static_cast<std::size_t>(j + window)] - s[static_cast<std::size_t>(j)] < cfg.stall_distance) r.events.stalled = true;
}

}  // namespace

RolloutResult rollout(const Planner& planner, const Scenario& scenario, const RolloutConfig& cfg) {
    cfg.validate();
    const int ticks = cfg.ticks();
    const int spt = cfg.steps_per_tick();
    RolloutResult r;
    r.executed = Trajectory(1, 1 + ticks * spt);
    AgentState ego = scenario.scene.ego_init;
    r.executed.set_state(0, 0, ego.position(), {ego.cos_theta, ego.sin_theta});
    const std::uint64_t base_seed = mix_seed(cfg.seed, scenario.seed);

    int filled = 1;
    for (int i = 0; i < ticks; ++i) {
        const double time = i * cfg.replan_interval;
        try {
            const SceneContext scene = i == 0 ? scenario.scene : advance_scene(scenario.scene, time, ego);
            const PlanResult plan = planner(scenario, scene, mix_seed(base_seed, static_cast<std::uint64_t>(i)));
            if (plan.ego.steps() < spt || !plan.ego.data().allFinite())
                throw NumericalError("plan too short or non-finite");
            for (int k = 0; k < spt; ++k) r.executed.set_state(0, filled + k, plan.ego.position(0, k), plan.ego.heading(0, k));
            filled += spt;
            const Vec2 p = plan.ego.position(0, spt - 1);
            const Vec2 h = plan.ego.heading(0, spt - 1);
            const double v = (p - plan.ego.position(0, spt - 2)).norm() / kStepDt;
            ego = {p.x(), p.y(), h.x(), h.y(), v};
            r.traces.push_back(plan.trace);
            r.step_ms.insert(r.step_ms.end(), plan.step_ms.begin(), plan.step_ms.end());
            r.triggers += plan.triggers;
            r.attempts += plan.attempts;
            r.degraded += plan.degraded ? 1 : 0;
            ++r.replans;
        } catch (const std::exception& e) {
            r.failed = true;
            r.error = "replan " + std::to_string(i) + ": " + e.what();
            break;
        }
    }
    detect_events(r, scenario, cfg, filled);
    return r;
}

ScoreBreakdown score(const RolloutResult& result, const Scenario& scenario, const RolloutConfig& cfg) {
    ScoreBreakdown b;
    if (result.failed) {
        b.no_collision = 0.0;
        return b;
    }
    const Trajectory& ex = result.executed;
    const int n = ex.steps();
    const Road road(scenario.scene.road);
    const double hw = scenario.scene.road.lane_half_width;

    int inside = 0;
    for (int j = 0; j < n; ++j) inside += std::abs(road.project(ex.position(0, j)).lateral) <= hw ? 1 : 0;
    b.corridor_compliance = static_cast<double>(inside) / n;

    const EgoReference ref(scenario.scene.road);
    const double s0 = road.project(ex.position(0, 0)).s;
    const double s_end = road.project(ex.position(0, n - 1)).s;
    const double s_ref = ref.s_at_time(ref.time_at(scenario.ego_s0) + cfg.horizon) - scenario.ego_s0;
    b.progress = s_ref > 0.0 ? std::clamp((s_end - s0) / s_ref, 0.0, 1.0) : 1.0;

    const KinematicProfile prof = kinematics(ex, 0);
    int comfy = 0;
    for (int j = 0; j < n; ++j)
        comfy += (std::abs(prof.j_lat[j]) <= cfg.j_max && std::abs(prof.a_y[j]) <= cfg.a_comfort) ? 1 : 0;
    b.comfort = static_cast<double>(comfy) / n;

    b.violation_rate = coupling_violations(ex, 0).rate;
    b.coupling_ok = 1.0 - b.violation_rate;
    b.no_collision = result.events.collision ? 0.0 : 1.0;
    b.score = 100.0 * b.no_collision *
              (0.4 * b.corridor_compliance + 0.2 * b.progress + 0.2 * b.comfort + 0.2 * b.coupling_ok);
    return b;
}

// ---------------------------------------------------------------- suites

MetricsTable compare_suite(const std::vector<NamedPlanner>& planners, const std::vector<Scenario>& suite,
                           const RolloutConfig& cfg, int workers, std::size_t min_scenarios) {
    if (suite.empty()) throw InvalidArgument("compare_suite: empty suite");
    if (planners.size() < 2) throw InvalidArgument("compare_suite: need at least two planners");
    if (suite.size() < min_scenarios)
        throw InvalidArgument("compare_suite: need at least " + std::to_string(min_scenarios) + " scenarios");
    cfg.validate();

    const std::size_t P = planners.size();
    MetricsTable table;
    table.rows.resize(suite.size() * P);
    table.rollouts.resize(suite.size() * P);

    auto run = [&](std::size_t si) {
        const Scenario& sc = suite[si];
        for (std::size_t pi = 0; pi < P; ++pi) {
            RolloutResult r = rollout(planners[pi].second, sc, cfg);
            MetricsRow row;
            row.planner = planners[pi].first;
            row.scenario = static_cast<int>(si);
            row.kind = sc.kind;
            row.seed = sc.seed;
            row.breakdown = score(r, sc, cfg);
            row.events = r.events;
            row.replans = r.replans;
            row.triggers = r.triggers;
            row.attempts = r.attempts;
            row.failed = r.failed;
            row.error = r.error;
            table.rows[si * P + pi] = std::move(row);
            table.rollouts[si * P + pi] = std::move(r);
        }
    };
    if (workers <= 1) {
        for (std::size_t si = 0; si < suite.size(); ++si) run(si);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::future<void>> jobs;
        for (int w = 0; w < workers; ++w)
            jobs.push_back(std::async(std::launch::async, [&] {
                for (std::size_t si = next++; si < suite.size(); si = next++) run(si);
            }));
        for (auto& j : jobs) j.get();
    }

    for (std::size_t pi = 0; pi < P; ++pi) {
        PlannerSummary s;
        s.planner = planners[pi].first;
        int replans = 0;
        for (std::size_t si = 0; si < suite.size(); ++si) {
            const MetricsRow& row = table.rows[si * P + pi];
            s.mean_score += row.breakdown.score;
            s.mean_violation_rate += row.breakdown.violation_rate;
            s.trigger_rate += row.triggers;
            s.mean_attempts += row.attempts;
            replans += row.replans;
            s.failures += row.failed ? 1 : 0;
        }
        s.scenarios = static_cast<int>(suite.size());
        s.mean_score /= static_cast<double>(suite.size());
        s.mean_violation_rate /= static_cast<double>(suite.size());
        s.trigger_rate = replans > 0 ? s.trigger_rate / replans : 0.0;
        s.mean_attempts = replans > 0 ? s.mean_attempts / replans : 0.0;
        table.summary.push_back(s);
    }
    return table;
}

std::string metrics_csv(const MetricsTable& table) {
    std::ostringstream os;
    os << "planner,scenario,kind,seed,score,no_collision,corridor,progress,comfort,coupling_ok,violation_rate,"
          "collision,out_of_corridor,stalled,replans,triggers,attempts,failed,error\n";
    char buf[512];
    for (const auto& r : table.rows) {
        const auto& b = r.breakdown;
        std::snprintf(buf, sizeof buf, "%s,%d,%s,%llu,%.6f,%.0f,%.6f,%.6f,%.6f,%.6f,%.6f,%d,%d,%d,%d,%d,%d,%d,",
                      r.planner.c_str(), r.scenario, to_string(r.kind).data(), static_cast<unsigned long long>(r.seed),
                      b.score, b.no_collision, b.corridor_compliance, b.progress, b.comfort, b.coupling_ok,
                      b.violation_rate, r.events.collision, r.events.out_of_corridor, r.events.stalled, r.replans,
                      r.triggers, r.attempts, r.failed);
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        os << buf << err << '\n';
    }
    return os.str();
}

std::string summary_json(const MetricsTable& table) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : table.summary)
        j.push_back({{"planner", s.planner},
                     {"mean_score", s.mean_score},
                     {"mean_violation_rate", s.mean_violation_rate},
                     {"trigger_rate", s.trigger_rate},
                     {"mean_attempts", s.mean_attempts},
                     {"failures", s.failures},
                     {"scenarios", s.scenarios}});
    return nlohmann::json({{"planners", j}}).dump(2);
}

// ---------------------------------------------------------------- latency

namespace {

double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) - 1;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
    return v[idx];
}

}  // namespace

LatencyReport bench_latency(const DiffusionPlanner& planner, const SceneContext& scene, int repetitions, int warmup,
                            std::uint64_t seed) {
    if (repetitions < 10) throw InvalidArgument("bench_latency: need at least 10 repetitions");
    if (warmup < 3) throw InvalidArgument("bench_latency: need at least 3 warmup runs");
    for (int i = 0; i < warmup; ++i) planner.plan(scene, seed);
    std::vector<double> steps, e2e;
    long attempts = 0;
    for (int i = 0; i < repetitions; ++i) {
        const PlanResult p = planner.plan(scene, seed);
        steps.insert(steps.end(), p.step_ms.begin(), p.step_ms.end());
        e2e.push_back(p.total_ms);
        attempts += p.attempts;
    }
    LatencyReport r;
    r.repetitions = repetitions;
    r.per_step_mean_ms = std::accumulate(steps.begin(), steps.end(), 0.0) / static_cast<double>(steps.size());
    r.per_step_p95_ms = percentile(steps, 0.95);
    r.e2e_mean_ms = std::accumulate(e2e.begin(), e2e.end(), 0.0) / static_cast<double>(e2e.size());
    r.e2e_p95_ms = percentile(e2e, 0.95);
    r.mean_attempts = static_cast<double>(attempts) / repetitions;
    return r;
}

}  // namespace reflex
