#include "reflex/trajectory.hpp"

#include <algorithm>

namespace reflex {
namespace {

double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

}  // namespace

KinematicProfile kinematics(const Trajectory& traj, int row, const KinematicsOptions& opt) {
    const int n = traj.steps();
    if (row < 0 || row >= traj.agents()) throw InvalidArgument("kinematics: agent row out of range");
    if (n < 3) throw InvalidArgument("kinematics: need at least three steps");
    const double dt = traj.dt();

    KinematicProfile out;
    out.v.resize(n);
    out.kappa.setZero(n);
    out.a_y.resize(n);
    out.j_lat.resize(n);
    out.degenerate.assign(n, false);

    std::vector<Vec2> p(n);
    for (int k = 0; k < n; ++k) p[k] = traj.position(row, k);

    for (int k = 0; k + 1 < n; ++k) out.v[k] = (p[k + 1] - p[k]).norm() / dt;
    out.v[n - 1] = out.v[n - 2];

    for (int k = 1; k + 1 < n; ++k) {
        const Vec2 c1 = p[k] - p[k - 1];
        const Vec2 c2 = p[k + 1] - p[k];
        const double ds = 0.5 * (c1.norm() + c2.norm());
        if (c1.norm() < opt.min_step || c2.norm() < opt.min_step || (p[k + 1] - p[k - 1]).norm() < opt.min_step) {
            out.degenerate[k] = true;
            out.any_degenerate = true;
            continue;
        }
        const double turn = std::atan2(cross2(c1, c2), c1.dot(c2));
        out.kappa[k] = std::clamp(turn / ds, -opt.kappa_clamp, opt.kappa_clamp);
    }
    // one-sided: endpoints reuse the nearest three-point estimate
    out.kappa[0] = out.kappa[1];
    out.kappa[n - 1] = out.kappa[n - 2];
    out.degenerate[0] = out.degenerate[1];
    out.degenerate[n - 1] = out.degenerate[n - 2];

    out.a_y = out.kappa.cwiseProduct(out.v.cwiseAbs2());

    for (int k = 1; k + 1 < n; ++k) out.j_lat[k] = (out.a_y[k + 1] - out.a_y[k - 1]) / (2.0 * dt);
    out.j_lat[0] = (out.a_y[1] - out.a_y[0]) / dt;
    out.j_lat[n - 1] = (out.a_y[n - 1] - out.a_y[n - 2]) / dt;
    return out;
}

CouplingReport coupling_violations(const Trajectory& traj, int row, const CouplingOptions& opt) {
    const int n = traj.steps();
    if (n < 5) throw InvalidArgument("coupling_violations: need at least five steps");
    const KinematicProfile prof = kinematics(traj, row, opt.kinematics);
    const double dt2 = traj.dt() * traj.dt();

    CouplingReport out;
    out.mask.assign(n, false);
    out.degenerate = prof.degenerate;
    for (int k = 1; k + 1 < n; ++k) {
        if (prof.degenerate[k]) continue;
        const Vec2 pm = traj.position(row, k - 1);
        const Vec2 p0 = traj.position(row, k);
        const Vec2 pp = traj.position(row, k + 1);
        const Vec2 tangent = (pp - pm).normalized();
        const Vec2 normal(-tangent.y(), tangent.x());
        const double a_exec = normal.dot(pp - 2.0 * p0 + pm) / dt2;
        const double a_implied = prof.kappa[k] * prof.v[k] * prof.v[k];
        if (std::abs(a_implied - a_exec) > opt.threshold) {
            out.mask[k] = true;
            ++out.violations;
        }
    }
    out.rate = static_cast<double>(out.violations) / static_cast<double>(n - 2);
    return out;
}

Trajectory normalize_headings(const Trajectory& traj) {
    Trajectory out = traj;
    const int n = traj.steps();
    for (int r = 0; r < traj.agents(); ++r) {
        for (int k = 0; k < n; ++k) {
            const Vec2 h = traj.heading(r, k);
            const double norm = h.norm();
            Vec2 unit;
            if (norm >= 1e-6) {
                unit = h / norm;
            } else {
                Vec2 chord = Vec2::Zero();
                if (k + 1 < n) chord = traj.position(r, k + 1) - traj.position(r, k);
                if (chord.norm() < 1e-9 && k > 0) chord = traj.position(r, k) - traj.position(r, k - 1);
                unit = chord.norm() < 1e-9 ? Vec2(1.0, 0.0) : Vec2(chord.normalized());
            }
            out.at(r, k, 2) = unit.x();
            out.at(r, k, 3) = unit.y();
        }
    }
    return out;
}

Trajectory transform(const Trajectory& traj, const Rigid2& g) {
    Trajectory out = traj;
    for (int r = 0; r < traj.agents(); ++r) {
        for (int k = 0; k < traj.steps(); ++k) {
            out.set_state(r, k, g.apply(traj.position(r, k)), g.apply_direction(traj.heading(r, k)));
        }
    }
    return out;
}

Trajectory agent_row(const Trajectory& traj, int row) {
    return Trajectory(traj.data().row(row), traj.dt());
}

Trajectory from_positions(const std::vector<Vec2>& points, double dt) {
    const int n = static_cast<int>(points.size());
    Trajectory out(1, n, dt);
    for (int k = 0; k < n; ++k) out.set_state(0, k, points[k], Vec2::Zero());
    return normalize_headings(out);
}

}  // namespace reflex
