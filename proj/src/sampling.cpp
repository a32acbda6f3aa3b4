#include "reflex/sampling.hpp"

#include <chrono>
#include <random>

namespace reflex {

SampleResult sample(const NoiseModel& model, const ConditionSet& cs, const SampleOptions& options,
                    const NoiseSchedule& schedule, const Normalizer& norm, const ConfidenceFn& confidence) {
    options.sampler.validate();
    if (options.reflection) options.reflection->validate();
    const bool need_confidence = options.record_confidence || options.reflection.has_value();
    if (need_confidence && !confidence) throw InvalidArgument("sample: confidence function required");
    if (norm.agents() * norm.steps() * kChannels != model.state_dim())
        throw InvalidArgument("sample: normalizer does not match the model state");

    std::mt19937_64 rng(options.sampler.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int D = model.state_dim();
    Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(D, [&] { return normal(rng); });

    SampleResult out;
    const std::uint64_t calls_at_start = model.evaluations();
    const double lambda1 = options.sampler.lambda1;
    const std::uint64_t budget = options.reflection ? 2 + 4 * static_cast<std::uint64_t>(options.reflection->r_max) : 2;

    for (int t = schedule.T; t >= 1; --t) {
        const auto start = std::chrono::steady_clock::now();
        const std::uint64_t calls_before = model.evaluations();

        const GuidedNoise eps = cfg_noise(model, x, t, cs, lambda1, schedule);
        Eigen::VectorXd x_prev;
        if (options.sampler.kind == SamplerKind::ddim_cfg) {
            x_prev = ddim_step(x, eps.combined, t, schedule);
        } else {
            Eigen::VectorXd z = Eigen::VectorXd::Zero(D);
            if (t > 1) z = Eigen::VectorXd::NullaryExpr(D, [&] { return normal(rng); });
            x_prev = ddpm_step(x, eps.combined, t, schedule, z);
        }

        if (need_confidence) {
            const Eigen::VectorXd x0_hat = predict_x0(x, eps.combined, t, schedule);
            const ConfidenceReport entry = confidence(x0_hat);
            out.trace.push_back({t, TracePhase::normal, 0, entry});
            if (options.reflection && t >= 2 && entry.c < options.reflection->gamma) {
                const ReflectionResult r = reflection_loop(model, x_prev, x0_hat, entry, t, cs, *options.reflection,
                                                           schedule, lambda1, norm, confidence);
                const std::uint64_t used = model.evaluations() - calls_before;
                if (used > budget) {
                    out.budget_exceeded = true;
                } else {
                    x_prev = r.x_prev;
                    out.trace.insert(out.trace.end(), r.trace.begin(), r.trace.end());
                    out.triggers += r.attempts > 0 ? 1 : 0;
                    out.attempts += r.attempts;
                    out.exhausted += r.exhausted ? 1 : 0;
                    out.reflection_aborted = out.reflection_aborted || r.aborted;
                }
            }
        }
        x = std::move(x_prev);
        out.evaluations_per_step.push_back(model.evaluations() - calls_before);
        out.step_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
    }
    if (!x.allFinite()) throw NumericalError("sample: non-finite final state");
    out.x0 = x;
    out.trajectory = normalize_headings(norm.from_model(x));
    out.evaluations = model.evaluations() - calls_at_start;
    return out;
}

}  // namespace reflex
