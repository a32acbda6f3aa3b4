#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace reflex {

template <class T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <class T>
using RowMatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using VectorX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

inline constexpr double kPi = std::numbers::pi;

/// Planar rigid pose.
struct Pose2 {
    double x = 0.0;
    double y = 0.0;
    double theta = 0.0;

    Vec2 position() const { return {x, y}; }
    Vec2 tangent() const { return {std::cos(theta), std::sin(theta)}; }
    Vec2 normal() const { return {-std::sin(theta), std::cos(theta)}; }
};

/// Rigid transform p -> R p + t, with R a planar rotation.
struct Rigid2 {
    Mat2 rotation = Mat2::Identity();
    Vec2 translation = Vec2::Zero();

    static Rigid2 from_pose(const Pose2& pose) {
        Rigid2 out;
        out.rotation = Eigen::Rotation2Dd(pose.theta).toRotationMatrix();
        out.translation = pose.position();
        return out;
    }

    double angle() const { return std::atan2(rotation(1, 0), rotation(0, 0)); }

    Vec2 apply(const Vec2& p) const { return rotation * p + translation; }
    Vec2 apply_direction(const Vec2& d) const { return rotation * d; }

    Rigid2 inverse() const {
        Rigid2 out;
        out.rotation = rotation.transpose();
        out.translation = -(out.rotation * translation);
        return out;
    }

    Rigid2 operator*(const Rigid2& rhs) const {
        Rigid2 out;
        out.rotation = rotation * rhs.rotation;
        out.translation = rotation * rhs.translation + translation;
        return out;
    }
};

inline double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0.0) a += 2.0 * kPi;
    return a - kPi;
}

inline double sigmoid(double u) {
    if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
    const double e = std::exp(u);
    return e / (1.0 + e);
}

/// Thrown when an input violates a documented invariant.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a numerical routine produces a non-finite value.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// SplitMix64 finalizer; derives independent child seeds from a parent seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline constexpr std::uint32_t byteswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

}  // namespace reflex
