#include "reflex/planner.hpp"

#include <chrono>

namespace reflex {

DiffusionPlanner::DiffusionPlanner(const Denoiser& model, PlannerConfig cfg)
    : model_(model), cfg_(std::move(cfg)), schedule_(model.schedule().strided(cfg_.sample.sampler.steps)) {
    cfg_.constants.validate();
}

PlanResult DiffusionPlanner::plan(const SceneContext& scene, std::uint64_t seed) const {
    const auto start = std::chrono::steady_clock::now();
    const Rigid2 ego_to_world = ego_frame(scene);
    const ConditionSet cs = assemble_conditions(scene);
    const ConfidenceContext ctx = make_confidence_context(scene, ego_to_world.inverse(), cfg_.constants,
                                                          model_.spec().shape.steps);
    const Normalizer& norm = model_.normalizer();
    const ConfidenceFn confidence = [&](const Eigen::VectorXd& x) { return evaluate_confidence(norm.from_model(x), ctx); };

    SampleOptions opt = cfg_.sample;
    opt.sampler.seed = seed;
    const SampleResult s = sample(model_, cs, opt, schedule_, norm, confidence);

    PlanResult out;
    out.ego = transform(agent_row(s.trajectory, 0), ego_to_world);
    out.trace = s.trace;
    out.step_ms = s.step_ms;
    out.triggers = s.triggers;
    out.attempts = s.attempts;
    out.evaluations = s.evaluations;
    out.degraded = s.budget_exceeded || s.reflection_aborted;
    out.total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return out;
}

Planner DiffusionPlanner::closure() const {
    return [this](const Scenario&, const SceneContext& scene, std::uint64_t seed) { return plan(scene, seed); };
}

Planner ground_truth_planner() {
    return [](const Scenario& sc, const SceneContext& scene, std::uint64_t) {
        const EgoReference ref(sc.scene.road);
        const double s = ref.s_at_time(ref.time_at(sc.ego_s0) + scene.time);
        PlanResult out;
        out.ego = ground_truth_from(sc.scene.road, s);
        return out;
    };
}

Planner stationary_planner() {
    return [](const Scenario&, const SceneContext& scene, std::uint64_t) {
        PlanResult out;
        out.ego = Trajectory(1, kHorizonSteps);
        const AgentState& e = scene.ego_init;
        for (int k = 0; k < kHorizonSteps; ++k) out.ego.set_state(0, k, e.position(), {e.cos_theta, e.sin_theta});
        return out;
    };
}

}  // namespace reflex
