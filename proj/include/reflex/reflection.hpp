#pragma once

#include "reflex/confidence.hpp"
#include "reflex/diffusion.hpp"

#include <functional>
#include <optional>

namespace reflex {

enum class InjectionScale { match_ddim, constant };
enum class ProjectionMode { physics, identity };

struct ReflectionConfig {
    double gamma = 0.8;
    double lambda2 = 0.0;
    int r_max = 2;
    InjectionScale b_mode = InjectionScale::match_ddim;
    double b = 0.0;  ///< used when b_mode == constant
    ProjectionMode projection = ProjectionMode::physics;

    void validate() const;
    double injection_scale(const NoiseSchedule& s, int t) const;
};

/// Delta_couple = eps_dec + lambda2 (eps_full - eps_dec), both evaluated at
/// (x_{t-1}, t): one batched call, two evaluations. At lambda2 = 0 only the
/// decoupled branch is evaluated and `full` is left empty.
GuidedNoise condition_gradient(const NoiseModel& model, const Eigen::VectorXd& x_prev, int t, const ConditionSet& cs,
                               double lambda2, const NoiseSchedule& s);

/// Applies the centripetal projection to the ego (x, y) entries of a
/// metric direction (flat trajectory layout). `x0_hat` is the current clean estimate in metres;
/// its kinematics define the per-step tangent, v and kappa. Neighbor rows,
/// heading channels and degenerate steps pass through.
Eigen::VectorXd project_onto_manifold(const Eigen::VectorXd& delta, const Trajectory& x0_hat, ProjectionMode mode);

/// Single-step lateral/longitudinal map, exposed for direct checks.
Vec2 project_step(double d_lat, double d_lon, double v, double kappa);

/// x'_t = sqrt(alpha_t) x_{t-1} + c_t eps.
Eigen::VectorXd renoise(const Eigen::VectorXd& x_prev, const Eigen::VectorXd& eps, int t, const NoiseSchedule& s);

struct ReflectOutcome {
    Eigen::VectorXd x_prev;        ///< new x_{t-1}, or the input when !ok
    Eigen::VectorXd x_renoised;    ///< x'_t
    Eigen::VectorXd delta_proj;    ///< projected condition gradient
    Eigen::VectorXd eps_renoised;  ///< guided noise at x'_t
    bool ok = true;
    std::string failure;
};

/// Projection of a model-space direction: mapped to metres by `norm`,
/// projected against `x0_hat`, mapped back.
Eigen::VectorXd project_model_direction(const Eigen::VectorXd& delta, const Trajectory& x0_hat, ProjectionMode mode,
                                        const Normalizer& norm);

/// One reflect attempt: condition gradient at x_{t-1}, projection against
/// x0_hat (metres), injection x'_t = sqrt(alpha_t) x_{t-1} + b Delta_proj,
/// then a guided deterministic step from x'_t.
ReflectOutcome reflect_once(const NoiseModel& model, const Eigen::VectorXd& x_prev, const Trajectory& x0_hat, int t,
                            const ConditionSet& cs, const ReflectionConfig& cfg, const NoiseSchedule& s, double lambda1,
                            const Normalizer& norm);

using ConfidenceFn = std::function<ConfidenceReport(const Eigen::VectorXd& x0_model)>;

struct ReflectionResult {
    Eigen::VectorXd x_prev;
    Eigen::VectorXd x0_hat;  ///< clean estimate consistent with x_prev
    ConfidenceReport confidence;
    int attempts = 0;
    bool exhausted = false;  ///< stopped at r_max below gamma
    bool aborted = false;    ///< an attempt hit a non-finite value
    ConfidenceTrace trace;
};

/// Repeats reflect_once while the confidence of the clean estimate stays
/// below gamma, at most r_max times. `entry` is the confidence of `x0_hat`.
ReflectionResult reflection_loop(const NoiseModel& model, const Eigen::VectorXd& x_prev, const Eigen::VectorXd& x0_hat,
                                 const ConfidenceReport& entry, int t, const ConditionSet& cs,
                                 const ReflectionConfig& cfg, const NoiseSchedule& s, double lambda1,
                                 const Normalizer& norm, const ConfidenceFn& confidence);

}  // namespace reflex
