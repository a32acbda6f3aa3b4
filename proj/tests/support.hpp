#pragma once

#include "reflex/denoiser.hpp"
#include "reflex/diffusion.hpp"
#include "reflex/trajectory.hpp"

#include <random>
#include <vector>

namespace reflex::test {

/// Returns the same noise for every input and condition.
class ConstantNoise final : public NoiseModel {
public:
    ConstantNoise(Eigen::VectorXd eps, int cond_dim) : eps_(std::move(eps)), cond_dim_(cond_dim) {}
    int state_dim() const override { return static_cast<int>(eps_.size()); }
    int cond_dim() const override { return cond_dim_; }

protected:
    Eigen::MatrixXd do_predict(const Eigen::MatrixXd& x, int, const Eigen::MatrixXd&) const override {
        return eps_.replicate(1, x.cols());
    }

private:
    Eigen::VectorXd eps_;
    int cond_dim_;
};

/// eps = A x + B c + t u: cheap, deterministic and condition dependent.
class LinearNoise final : public NoiseModel {
public:
    LinearNoise(int state_dim, int cond_dim, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n(0.0, 0.1);
        A_ = Eigen::MatrixXd::NullaryExpr(state_dim, state_dim, [&] { return n(rng); });
        B_ = Eigen::MatrixXd::NullaryExpr(state_dim, cond_dim, [&] { return n(rng); });
        u_ = Eigen::VectorXd::NullaryExpr(state_dim, [&] { return n(rng); });
    }
    int state_dim() const override { return static_cast<int>(A_.rows()); }
    int cond_dim() const override { return static_cast<int>(B_.cols()); }

protected:
    Eigen::MatrixXd do_predict(const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& c) const override {
        Eigen::MatrixXd out = A_ * x + B_ * c;
        out.colwise() += 0.01 * t * u_;
        return out;
    }

private:
    Eigen::MatrixXd A_, B_;
    Eigen::VectorXd u_;
};

inline Eigen::VectorXd random_vector(int n, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, sd);
    return Eigen::VectorXd::NullaryExpr(n, [&] { return normal(rng); });
}

/// Single-row trajectory on a circle of radius R (left turn) at constant speed.
inline Trajectory arc_trajectory(double R, double v, int steps, double dt = kStepDt, double phase = 0.0) {
    std::vector<Vec2> pts;
    for (int k = 0; k < steps; ++k) {
        const double a = phase + v * dt * k / R;
        pts.emplace_back(R * std::sin(a), R * (1.0 - std::cos(a)));
    }
    return from_positions(pts, dt);
}

inline Trajectory line_trajectory(double v, int steps, double dt = kStepDt) {
    std::vector<Vec2> pts;
    for (int k = 0; k < steps; ++k) pts.emplace_back(v * dt * k, 0.0);
    return from_positions(pts, dt);
}

/// Small network shape for fast checks.
inline DenoiserSpec tiny_spec(int d_model = 8, Parameterization p = Parameterization::epsilon) {
    DenoiserSpec s;
    s.shape.agents = 1;
    s.shape.steps = 6;
    s.shape.cond_dim = 5;
    s.shape.d_model = d_model;
    s.shape.time_features = 4;
    s.parameterization = p;
    s.T = 10;
    s.beta_min = 0.01;
    s.beta_max = 0.3;
    return s;
}

}  // namespace reflex::test
