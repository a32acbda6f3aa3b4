#pragma once

#include "reflex/reflection.hpp"

#include <optional>

namespace reflex {

struct SampleOptions {
    SamplerConfig sampler;
    std::optional<ReflectionConfig> reflection;  ///< disabled when empty
    bool record_confidence = true;               ///< per-step trace (also without reflection)
};

struct SampleResult {
    Eigen::VectorXd x0;     ///< final state, model space
    Trajectory trajectory;  ///< metric, headings renormalized
    ConfidenceTrace trace;
    std::vector<double> step_ms;
    int triggers = 0;  ///< steps that entered the reflection loop with attempts > 0
    int attempts = 0;
    int exhausted = 0;
    bool budget_exceeded = false;
    bool reflection_aborted = false;
    std::uint64_t evaluations = 0;
    std::vector<std::uint64_t> evaluations_per_step;
};

/// Reverse diffusion over `schedule` (normally the strided schedule) from
/// seeded standard-normal x_T. With reflection enabled, every step t >= 2
/// whose clean-estimate confidence falls below gamma runs the reflection loop.
SampleResult sample(const NoiseModel& model, const ConditionSet& cs, const SampleOptions& options,
                    const NoiseSchedule& schedule, const Normalizer& norm, const ConfidenceFn& confidence);

}  // namespace reflex
