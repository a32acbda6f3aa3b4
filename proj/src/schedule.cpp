#include "reflex/schedule.hpp"

#include <cmath>
#include <string>

namespace reflex {

double NoiseSchedule::ddim_coefficient(int t) const {
    check_index(t);
    const double a = alpha_at(t);
    const double ab = alpha_bar_at(t);
    // alpha_t >= alpha_bar_t for every valid schedule; rounding may leave a
    // tiny negative radicand at t = 1 where the two coincide.
    const double r1 = std::sqrt(std::max(0.0, a - ab));
    const double r2 = std::sqrt(1.0 - ab);
    return beta_at(t) / (r1 + r2);
}

NoiseSchedule NoiseSchedule::strided(int n) const {
    if (n < 1 || n > T) throw InvalidArgument("strided: step count must lie in [1, T]");
    NoiseSchedule out;
    out.T = n;
    out.beta.resize(n);
    out.alpha.resize(n);
    out.alpha_bar.resize(n);
    out.model_t.resize(static_cast<std::size_t>(n));
    double prev = 1.0;
    for (int i = 1; i <= n; ++i) {
        const int mt = static_cast<int>(std::lround(static_cast<double>(i) * T / n));
        out.model_t[static_cast<std::size_t>(i - 1)] = model_timestep(mt);
        out.alpha_bar[i - 1] = alpha_bar_at(mt);
        out.alpha[i - 1] = out.alpha_bar[i - 1] / prev;
        out.beta[i - 1] = 1.0 - out.alpha[i - 1];
        prev = out.alpha_bar[i - 1];
    }
    out.validate();
    return out;
}

void NoiseSchedule::check_index(int t) const {
    if (t < 1 || t > T) throw InvalidArgument("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
}

void NoiseSchedule::validate() const {
    if (T < 1 || beta.size() != T || alpha.size() != T || alpha_bar.size() != T ||
        model_t.size() != static_cast<std::size_t>(T))
        throw InvalidArgument("schedule: inconsistent array lengths");
    for (int i = 0; i < T; ++i) {
        if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw InvalidArgument("schedule: beta outside (0, 1)");
        if (!(alpha[i] > 0.0 && alpha[i] < 1.0)) throw InvalidArgument("schedule: alpha outside (0, 1)");
        if (i > 0 && !(alpha_bar[i] < alpha_bar[i - 1]))
            throw InvalidArgument("schedule: alpha_bar not strictly decreasing");
    }
}

NoiseSchedule schedule_from_betas(const Eigen::VectorXd& beta) {
    NoiseSchedule s;
    s.T = static_cast<int>(beta.size());
    if (s.T < 1) throw InvalidArgument("schedule: empty beta");
    s.beta = beta;
    s.alpha = 1.0 - beta.array();
    s.alpha_bar.resize(s.T);
    double acc = 1.0;
    for (int i = 0; i < s.T; ++i) {
        acc *= s.alpha[i];
        s.alpha_bar[i] = acc;
    }
    s.model_t.resize(static_cast<std::size_t>(s.T));
    for (int i = 0; i < s.T; ++i) s.model_t[static_cast<std::size_t>(i)] = i + 1;
    s.validate();
    return s;
}

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
    if (T < 2) throw InvalidArgument("make_schedule: T must be at least 2");
    if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0))
        throw InvalidArgument("make_schedule: need 0 < beta_min < beta_max < 1");
    return schedule_from_betas(Eigen::VectorXd::LinSpaced(T, beta_min, beta_max));
}

}  // namespace reflex
