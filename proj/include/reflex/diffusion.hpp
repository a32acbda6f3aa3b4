#pragma once

#include "reflex/denoiser.hpp"
#include "reflex/schedule.hpp"

namespace reflex {

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Eigen::VectorXd forward_noise(const Eigen::VectorXd& x0, int t, const Eigen::VectorXd& eps, const NoiseSchedule& s);

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
Eigen::VectorXd predict_x0(const Eigen::VectorXd& x_t, const Eigen::VectorXd& eps_hat, int t, const NoiseSchedule& s);

/// eps_dec + lambda (eps_full - eps_dec).
Eigen::VectorXd cfg_combine(const Eigen::VectorXd& eps_full, const Eigen::VectorXd& eps_dec, double lambda);

struct GuidedNoise {
    Eigen::VectorXd full, decoupled, combined;
};

/// Conditional and decoupled predictions at x_t (two denoiser evaluations in
/// one batched call) and their guided combination. `t` indexes `s`; the
/// denoiser receives s.model_timestep(t).
GuidedNoise cfg_noise(const NoiseModel& model, const Eigen::VectorXd& x_t, int t, const ConditionSet& cs,
                      double lambda1, const NoiseSchedule& s);

/// (x_t - beta_t / sqrt(1 - abar_t) eps + sigma_t z) / sqrt(alpha_t), sigma_t = sqrt(beta_t).
Eigen::VectorXd ddpm_step(const Eigen::VectorXd& x_t, const Eigen::VectorXd& eps, int t, const NoiseSchedule& s,
                          const Eigen::VectorXd& z);

/// (x_t - c_t eps) / sqrt(alpha_t) with c_t = s.ddim_coefficient(t).
Eigen::VectorXd ddim_step(const Eigen::VectorXd& x_t, const Eigen::VectorXd& eps, int t, const NoiseSchedule& s);

enum class SamplerKind { ddpm_cfg, ddim_cfg };

std::string_view to_string(SamplerKind kind);
SamplerKind parse_sampler(std::string_view name);

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ddim_cfg;
    double lambda1 = 0.9;
    int steps = 20;
    std::uint64_t seed = 0;

    void validate() const;
};

}  // namespace reflex
