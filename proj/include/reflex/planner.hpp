#pragma once

#include "reflex/sampling.hpp"

#include <functional>

namespace reflex {

/// One plan: the ego's future in world coordinates plus sampling telemetry.
struct PlanResult {
    Trajectory ego;  ///< 1 x 80 x 4, world frame, steps at +0.1 s .. +8 s
    ConfidenceTrace trace;
    std::vector<double> step_ms;
    double total_ms = 0.0;
    int triggers = 0;
    int attempts = 0;
    std::uint64_t evaluations = 0;
    bool degraded = false;
};

/// Planner closure: the scenario (for planners that need privileged
/// information), the current scene and a seed for this replan.
using Planner = std::function<PlanResult(const Scenario&, const SceneContext&, std::uint64_t)>;

struct PlannerConfig {
    SampleOptions sample;
    ConfidenceConstants constants;
};

/// Diffusion planner: conditions and confidence context in the ego frame,
/// sampling in model space, output mapped back to world coordinates.
class DiffusionPlanner {
public:
    DiffusionPlanner(const Denoiser& model, PlannerConfig cfg);

    PlanResult plan(const SceneContext& scene, std::uint64_t seed) const;
    Planner closure() const;

    const PlannerConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }

private:
    const Denoiser& model_;
    PlannerConfig cfg_;
    NoiseSchedule schedule_;
};

/// Replays the scenario's reference motion from the current scene time.
Planner ground_truth_planner();

/// Always returns the current pose repeated (never moves).
Planner stationary_planner();

}  // namespace reflex
