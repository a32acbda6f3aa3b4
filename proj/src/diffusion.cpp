#include "reflex/diffusion.hpp"

namespace reflex {

Eigen::VectorXd forward_noise(const Eigen::VectorXd& x0, int t, const Eigen::VectorXd& eps, const NoiseSchedule& s) {
    s.check_index(t);
    if (x0.size() != eps.size()) throw InvalidArgument("forward_noise: x0 and eps differ in size");
    const double ab = s.alpha_bar_at(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

Eigen::VectorXd predict_x0(const Eigen::VectorXd& x_t, const Eigen::VectorXd& eps_hat, int t, const NoiseSchedule& s) {
    s.check_index(t);
    const double ab = s.alpha_bar_at(t);
    return (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

Eigen::VectorXd cfg_combine(const Eigen::VectorXd& eps_full, const Eigen::VectorXd& eps_dec, double lambda) {
    // weighted form: exact at lambda = 0 and 1
    return (1.0 - lambda) * eps_dec + lambda * eps_full;
}

GuidedNoise cfg_noise(const NoiseModel& model, const Eigen::VectorXd& x_t, int t, const ConditionSet& cs,
                      double lambda1, const NoiseSchedule& s) {
    if (!(lambda1 >= 0.0)) throw InvalidArgument("cfg_noise: lambda1 must be non-negative");
    s.check_index(t);
    Eigen::MatrixXd x(x_t.size(), 2), c(cs.full.size(), 2);
    x << x_t, x_t;
    c << cs.full, cs.decouple;
    const Eigen::MatrixXd eps = model.predict(x, s.model_timestep(t), c);
    GuidedNoise out;
    out.full = eps.col(0);
    out.decoupled = eps.col(1);
    out.combined = cfg_combine(out.full, out.decoupled, lambda1);
    return out;
}

Eigen::VectorXd ddpm_step(const Eigen::VectorXd& x_t, const Eigen::VectorXd& eps, int t, const NoiseSchedule& s,
                          const Eigen::VectorXd& z) {
    s.check_index(t);
    const double beta = s.beta_at(t);
    const double coef = beta / std::sqrt(1.0 - s.alpha_bar_at(t));
    const double sigma = std::sqrt(beta);
    return (x_t - coef * eps + sigma * z) / std::sqrt(s.alpha_at(t));
}

Eigen::VectorXd ddim_step(const Eigen::VectorXd& x_t, const Eigen::VectorXd& eps, int t, const NoiseSchedule& s) {
    return (x_t - s.ddim_coefficient(t) * eps) / std::sqrt(s.alpha_at(t));
}

std::string_view to_string(SamplerKind kind) { return kind == SamplerKind::ddpm_cfg ? "ddpm_cfg" : "ddim_cfg"; }

SamplerKind parse_sampler(std::string_view name) {
    if (name == "ddpm_cfg") return SamplerKind::ddpm_cfg;
    if (name == "ddim_cfg") return SamplerKind::ddim_cfg;
    throw InvalidArgument("unknown sampler '" + std::string(name) + "'");
}

void SamplerConfig::validate() const {
    if (!(lambda1 >= 0.0)) throw InvalidArgument("sampler: lambda1 must be non-negative");
    if (steps < 1) throw InvalidArgument("sampler: steps must be positive");
}

}  // namespace reflex
