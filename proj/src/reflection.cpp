#include "reflex/reflection.hpp"

namespace reflex {

void ReflectionConfig::validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("reflection: gamma must lie in [0, 1]");
    if (r_max < 0) throw InvalidArgument("reflection: r_max must be non-negative");
    if (!std::isfinite(lambda2) || !std::isfinite(b)) throw InvalidArgument("reflection: non-finite scale");
}

double ReflectionConfig::injection_scale(const NoiseSchedule& s, int t) const {
    return b_mode == InjectionScale::match_ddim ? s.ddim_coefficient(t) : b;
}

GuidedNoise condition_gradient(const NoiseModel& model, const Eigen::VectorXd& x_prev, int t, const ConditionSet& cs,
                               double lambda2, const NoiseSchedule& s) {
    if (t < 2) throw InvalidArgument("condition_gradient: needs t >= 2");
    if (lambda2 == 0.0) {
        s.check_index(t);
        GuidedNoise g;
        g.decoupled = model.predict(x_prev, s.model_timestep(t), cs.decouple).col(0);
        g.combined = g.decoupled;
        return g;
    }
    GuidedNoise g = cfg_noise(model, x_prev, t, cs, 0.0, s);
    g.combined = cfg_combine(g.full, g.decoupled, lambda2);
    return g;
}

Vec2 project_step(double d_lat, double d_lon, double v, double kappa) {
    const double norm = 1.0 + v * v + 2.0 * std::abs(kappa * v);
    return {(v * v * d_lat + 2.0 * kappa * v * d_lon) / norm, d_lon};
}

Eigen::VectorXd project_onto_manifold(const Eigen::VectorXd& delta, const Trajectory& x0_hat, ProjectionMode mode) {
    if (mode == ProjectionMode::identity) return delta;
    if (delta.size() != x0_hat.size()) throw InvalidArgument("project_onto_manifold: delta and x0_hat differ in size");
    const int n = x0_hat.steps();
    const KinematicProfile prof = kinematics(x0_hat, 0);
    Eigen::VectorXd out = delta;
    for (int k = 0; k < n; ++k) {
        if (prof.degenerate[static_cast<std::size_t>(k)]) continue;
        const int lo = std::max(0, k - 1), hi = std::min(n - 1, k + 1);
        const Vec2 chord = x0_hat.position(0, hi) - x0_hat.position(0, lo);
        const double len = chord.norm();
        if (len < 1e-6) continue;
        const Vec2 tangent = chord / len;
        const Vec2 normal(-tangent.y(), tangent.x());
        const Vec2 d(delta[k * kChannels], delta[k * kChannels + 1]);
        const Vec2 lat_lon = project_step(d.dot(normal), d.dot(tangent), prof.v[k], prof.kappa[k]);
        const Vec2 back = lat_lon.x() * normal + lat_lon.y() * tangent;
        out[k * kChannels] = back.x();
        out[k * kChannels + 1] = back.y();
    }
    return out;
}

Eigen::VectorXd renoise(const Eigen::VectorXd& x_prev, const Eigen::VectorXd& eps, int t, const NoiseSchedule& s) {
    if (t < 2) throw InvalidArgument("renoise: needs t >= 2");
    return std::sqrt(s.alpha_at(t)) * x_prev + s.ddim_coefficient(t) * eps;
}

Eigen::VectorXd project_model_direction(const Eigen::VectorXd& delta, const Trajectory& x0_hat, ProjectionMode mode,
                                        const Normalizer& norm) {
    if (mode == ProjectionMode::identity) return delta;
    Trajectory metric = norm.direction_from_model(delta);
    metric.flat() = project_onto_manifold(metric.flat(), x0_hat, mode);
    return norm.direction_to_model(metric);
}

ReflectOutcome reflect_once(const NoiseModel& model, const Eigen::VectorXd& x_prev, const Trajectory& x0_hat, int t,
                            const ConditionSet& cs, const ReflectionConfig& cfg, const NoiseSchedule& s, double lambda1,
                            const Normalizer& norm) {
    ReflectOutcome out;
    out.x_prev = x_prev;
    try {
        const GuidedNoise grad = condition_gradient(model, x_prev, t, cs, cfg.lambda2, s);
        out.delta_proj = project_model_direction(grad.combined, x0_hat, cfg.projection, norm);
        out.x_renoised = std::sqrt(s.alpha_at(t)) * x_prev + cfg.injection_scale(s, t) * out.delta_proj;
        out.eps_renoised = cfg_noise(model, out.x_renoised, t, cs, lambda1, s).combined;
        Eigen::VectorXd next = ddim_step(out.x_renoised, out.eps_renoised, t, s);
        if (!next.allFinite()) throw NumericalError("reflect_once: non-finite result");
        out.x_prev = std::move(next);
    } catch (const NumericalError& e) {
        out.ok = false;
        out.failure = e.what();
        out.x_prev = x_prev;
    }
    return out;
}

ReflectionResult reflection_loop(const NoiseModel& model, const Eigen::VectorXd& x_prev, const Eigen::VectorXd& x0_hat,
                                 const ConfidenceReport& entry, int t, const ConditionSet& cs,
                                 const ReflectionConfig& cfg, const NoiseSchedule& s, double lambda1,
                                 const Normalizer& norm, const ConfidenceFn& confidence) {
    ReflectionResult r;
    r.x_prev = x_prev;
    r.x0_hat = x0_hat;
    r.confidence = entry;
    while (r.confidence.c < cfg.gamma && r.attempts < cfg.r_max) {
        const ReflectOutcome o = reflect_once(model, r.x_prev, norm.from_model(r.x0_hat), t, cs, cfg, s, lambda1, norm);
        if (!o.ok) {
            r.aborted = true;
            break;
        }
        ++r.attempts;
        const ConfidenceReport explore = confidence(predict_x0(o.x_renoised, o.delta_proj, t, s));
        r.trace.push_back({t, TracePhase::reflect, r.attempts, explore});
        r.x0_hat = predict_x0(o.x_renoised, o.eps_renoised, t, s);
        r.confidence = confidence(r.x0_hat);
        r.trace.push_back({t, TracePhase::reflect_denoise, r.attempts, r.confidence});
        r.x_prev = o.x_prev;
    }
    r.exhausted = r.confidence.c < cfg.gamma && r.attempts == cfg.r_max;
    return r;
}

}  // namespace reflex
