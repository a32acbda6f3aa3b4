#pragma once

#include "reflex/types.hpp"

#include <vector>

namespace reflex {

inline constexpr int kChannels = 4;
inline constexpr int kHorizonSteps = 80;
inline constexpr double kStepDt = 0.1;

/// Joint agent trajectory: rows are agents (ego first), columns interleave
/// (x, y, cos(theta), sin(theta)) per step. Row-major so one agent's states
/// are contiguous and the whole matrix flattens to the denoiser input.
template <class T>
class BasicTrajectory {
public:
    using Scalar = T;
    using Storage = RowMatrixX<T>;

    BasicTrajectory() = default;
    BasicTrajectory(int agents, int steps, double dt = kStepDt)
        : data_(Storage::Zero(agents, steps * kChannels)), dt_(dt) {}
    BasicTrajectory(Storage data, double dt) : data_(std::move(data)), dt_(dt) {
        if (data_.cols() % kChannels != 0) throw InvalidArgument("trajectory columns must be a multiple of 4");
    }

    int agents() const { return static_cast<int>(data_.rows()); }
    int steps() const { return static_cast<int>(data_.cols() / kChannels); }
    double dt() const { return dt_; }
    Eigen::Index size() const { return data_.size(); }

    T& at(int row, int k, int channel) { return data_(row, k * kChannels + channel); }
    T at(int row, int k, int channel) const { return data_(row, k * kChannels + channel); }

    Vec2 position(int row, int k) const {
        return {static_cast<double>(at(row, k, 0)), static_cast<double>(at(row, k, 1))};
    }
    Vec2 heading(int row, int k) const {
        return {static_cast<double>(at(row, k, 2)), static_cast<double>(at(row, k, 3))};
    }
    void set_state(int row, int k, const Vec2& p, const Vec2& h) {
        at(row, k, 0) = static_cast<T>(p.x());
        at(row, k, 1) = static_cast<T>(p.y());
        at(row, k, 2) = static_cast<T>(h.x());
        at(row, k, 3) = static_cast<T>(h.y());
    }

    Storage& data() { return data_; }
    const Storage& data() const { return data_; }

    /// Flat view in row-major order.
    Eigen::Map<VectorX<T>> flat() { return {data_.data(), data_.size()}; }
    Eigen::Map<const VectorX<T>> flat() const { return {data_.data(), data_.size()}; }

    template <class U>
    BasicTrajectory<U> cast() const {
        return BasicTrajectory<U>(data_.template cast<U>(), dt_);
    }

    bool operator==(const BasicTrajectory& rhs) const {
        return dt_ == rhs.dt_ && data_.rows() == rhs.data_.rows() && data_.cols() == rhs.data_.cols() &&
               data_ == rhs.data_;
    }

private:
    Storage data_;
    double dt_ = kStepDt;
};

using Trajectory = BasicTrajectory<double>;

struct KinematicProfile {
    Eigen::VectorXd v;
    Eigen::VectorXd kappa;
    Eigen::VectorXd a_y;
    Eigen::VectorXd j_lat;
    std::vector<bool> degenerate;
    bool any_degenerate = false;
};

struct KinematicsOptions {
    double kappa_clamp = 1.0;
    double min_step = 1e-6;
};

/// Point kinematics of one agent row, all derived from positions.
/// v is the forward-difference speed, kappa the turning angle between adjacent
/// chords over the mean chord length, a_y = kappa v^2 and j_lat its time
/// derivative.
KinematicProfile kinematics(const Trajectory& traj, int row, const KinematicsOptions& opt = {});

struct CouplingReport {
    std::vector<bool> mask;
    std::vector<bool> degenerate;
    double rate = 0.0;
    int violations = 0;
};

struct CouplingOptions {
    double threshold = 4.0;
    KinematicsOptions kinematics;
};

/// Flags interior steps where the curvature-implied lateral acceleration
/// kappa v^2 disagrees with the executed one (lateral part of the position
/// second difference) by more than the threshold. rate is taken over the
/// interior steps.
CouplingReport coupling_violations(const Trajectory& traj, int row, const CouplingOptions& opt = {});

/// Rescales every (cos, sin) pair to unit norm; near-zero pairs take the
/// local path tangent.
Trajectory normalize_headings(const Trajectory& traj);

Trajectory transform(const Trajectory& traj, const Rigid2& g);

/// One agent row as a standalone trajectory.
Trajectory agent_row(const Trajectory& traj, int row);

/// Builds a single-row trajectory from positions, headings from the path tangent.
Trajectory from_positions(const std::vector<Vec2>& points, double dt = kStepDt);

}  // namespace reflex
