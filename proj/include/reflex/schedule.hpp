#pragma once

#include "reflex/types.hpp"

#include <vector>

namespace reflex {

/// Variance schedule. Index t runs 1..T; model_t maps an index to the
/// timestep the denoiser was trained on (identity unless strided).
struct NoiseSchedule {
    int T = 0;
    Eigen::VectorXd beta, alpha, alpha_bar;
    std::vector<int> model_t;

    double beta_at(int t) const { return beta[t - 1]; }
    double alpha_at(int t) const { return alpha[t - 1]; }
    double alpha_bar_at(int t) const { return alpha_bar[t - 1]; }
    int model_timestep(int t) const { return model_t[static_cast<std::size_t>(t - 1)]; }

    /// beta_t / (sqrt(alpha_t - alpha_bar_t) + sqrt(1 - alpha_bar_t)), shared by
    /// the deterministic step and re-noising.
    double ddim_coefficient(int t) const;

    /// Evenly strided sub-schedule with n steps, largest timestep last in the
    /// arrays (sampling runs t = n..1). alpha_bar is inherited, alpha/beta are
    /// the per-stride ratios.
    NoiseSchedule strided(int n) const;

    void check_index(int t) const;
    /// Throws InvalidArgument when any invariant fails.
    void validate() const;
};

NoiseSchedule make_schedule(int T, double beta_min, double beta_max);

/// Linear betas from explicit per-step values (used for hand-checked cases).
NoiseSchedule schedule_from_betas(const Eigen::VectorXd& beta);

}  // namespace reflex
