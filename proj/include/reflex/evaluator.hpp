#pragma once

#include "reflex/planner.hpp"

#include <string>
#include <utility>
#include <vector>

namespace reflex {

struct RolloutConfig {
    double replan_interval = 1.0;
    double horizon = 15.0;
    std::uint64_t seed = 0;
    double stall_window = 3.0;
    double stall_distance = 0.5;
    double j_max = 5.0;
    double a_comfort = 6.0;
    double ego_length = 4.6;
    double ego_width = 1.9;

    void validate() const;
    int ticks() const;
    int steps_per_tick() const;
};

struct RolloutEvents {
    bool collision = false;
    bool out_of_corridor = false;
    bool stalled = false;
};

struct RolloutResult {
    Trajectory executed;  ///< world frame; first column is the initial pose
    std::vector<ConfidenceTrace> traces;  ///< one per replan
    std::vector<double> step_ms;
    RolloutEvents events;
    int replans = 0;
    int triggers = 0;
    int attempts = 0;
    int degraded = 0;
    bool failed = false;
    std::string error;
};

/// Closed-loop-lite: replan every interval from the executed state, adopt the
/// first interval of each plan verbatim, non-reactive neighbors.
RolloutResult rollout(const Planner& planner, const Scenario& scenario, const RolloutConfig& cfg);

struct ScoreBreakdown {
    double score = 0.0;
    double no_collision = 1.0;
    double corridor_compliance = 0.0;
    double progress = 0.0;
    double comfort = 0.0;
    double coupling_ok = 0.0;
    double violation_rate = 0.0;
};

ScoreBreakdown score(const RolloutResult& result, const Scenario& scenario, const RolloutConfig& cfg);

/// Oriented-box overlap (separating axis test).
bool boxes_overlap(const Pose2& a, double a_length, double a_width, const Pose2& b, double b_length, double b_width);
bool box_circle_overlap(const Pose2& box, double length, double width, const Vec2& center, double radius);

struct MetricsRow {
    std::string planner;
    int scenario = 0;
    ScenarioKind kind = ScenarioKind::straight;
    std::uint64_t seed = 0;
    ScoreBreakdown breakdown;
    RolloutEvents events;
    int replans = 0;
    int triggers = 0;
    int attempts = 0;
    bool failed = false;
    std::string error;
};

struct PlannerSummary {
    std::string planner;
    double mean_score = 0.0;
    double mean_violation_rate = 0.0;
    double trigger_rate = 0.0;  ///< reflection-loop entries per replan
    double mean_attempts = 0.0;  ///< attempts per replan
    int failures = 0;
    int scenarios = 0;
};

struct MetricsTable {
    std::vector<MetricsRow> rows;
    std::vector<PlannerSummary> summary;
    std::vector<RolloutResult> rollouts;  ///< same order as rows
};

using NamedPlanner = std::pair<std::string, Planner>;

/// Paired comparison: every planner sees the same scenarios and replan seeds.
MetricsTable compare_suite(const std::vector<NamedPlanner>& planners, const std::vector<Scenario>& suite,
                           const RolloutConfig& cfg, int workers = 1, std::size_t min_scenarios = 20);

std::string metrics_csv(const MetricsTable& table);
std::string summary_json(const MetricsTable& table);

struct LatencyReport {
    double per_step_mean_ms = 0.0;
    double per_step_p95_ms = 0.0;
    double e2e_mean_ms = 0.0;
    double e2e_p95_ms = 0.0;
    int repetitions = 0;
    double mean_attempts = 0.0;
};

LatencyReport bench_latency(const DiffusionPlanner& planner, const SceneContext& scene, int repetitions,
                            int warmup = 3, std::uint64_t seed = 0);

}  // namespace reflex
