#include "reflex/confidence.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace reflex {

void ConfidenceConstants::validate() const {
    if (!(m1 > 0 && m2 > 0 && j_max > 0 && d_safe > 0 && d_max > 0 && ttc_cap > 0 && ttc_width > 0 && kappa_floor > 0))
        throw InvalidArgument("confidence constants must be positive");
    if (!(d_safe < d_max)) throw InvalidArgument("confidence constants: d_safe must be below d_max");
}

ConfidenceContext make_confidence_context(const SceneContext& scene, const Rigid2& g,
                                          const ConfidenceConstants& constants, int steps) {
    constants.validate();
    ConfidenceContext ctx;
    ctx.road = Road(scene.road).transformed(g);
    ctx.corridor_half_width = scene.road.lane_half_width;
    ctx.constants = constants;
    for (const auto& ob : scene.static_obstacles) ctx.obstacles.push_back({{g.apply(Vec2(ob.x, ob.y))}, ob.radius});
    // constant speed along the neighbor's own lane
    const Road road(scene.road);
    for (const auto& nb : scene.neighbors) {
        ObstacleTrack track;
        track.radius = nb.radius();
        track.positions.reserve(static_cast<std::size_t>(steps));
        for (int k = 0; k < steps; ++k)
            track.positions.push_back(g.apply(nb.state_at(road, scene.time + (k + 1) * kStepDt).position()));
        ctx.obstacles.push_back(std::move(track));
    }
    return ctx;
}

ConfidenceInputs make_inputs(const Trajectory& traj, const ConfidenceContext& ctx) {
    if (ctx.road.spec().segments.empty()) throw InvalidArgument("confidence: empty road");
    const Trajectory ego = normalize_headings(agent_row(traj, 0));
    const int n = ego.steps();
    ConfidenceInputs in;
    in.profile = kinematics(ego, 0);
    in.dt = ego.dt();
    in.corridor_half_width = ctx.corridor_half_width;
    in.obstacles = &ctx.obstacles;
    in.constants = ctx.constants;
    in.kappa_road.resize(n);
    in.a_y_ref.resize(n);
    in.lateral.resize(n);
    in.center_distance.resize(n);
    in.positions.resize(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        const Vec2 p = ego.position(0, k);
        const RoadProjection proj = ctx.road.project(p);
        in.positions[static_cast<std::size_t>(k)] = p;
        in.kappa_road[k] = proj.kappa;
        in.a_y_ref[k] = proj.kappa * in.profile.v[k] * in.profile.v[k];
        in.lateral[k] = proj.lateral;
        in.center_distance[k] = (p - proj.center).norm();
        if (k == n - 1) in.final_road_heading = proj.theta;
    }
    in.final_heading = ego.heading(0, n - 1);
    return in;
}

double kinematic_factor(double mean_ay_error, double max_jerk, const ConfidenceConstants& k) {
    return std::exp(-k.m1 * mean_ay_error) * sigmoid(k.j_max - max_jerk);
}

double curvature_factor(double mean_curv_term, const ConfidenceConstants& k) { return std::exp(-k.m2 * mean_curv_term); }

double deviation_factor(double d_dev, const ConfidenceConstants& k) {
    return std::clamp(1.0 - std::max(0.0, d_dev - k.d_safe) / k.d_max, 0.0, 1.0);
}

double margin_factor(double ttc, double p_oda, double dpsi, const ConfidenceConstants& k) {
    return sigmoid((ttc - k.ttc_mid) / k.ttc_width) * (1.0 - p_oda) * std::max(0.0, std::cos(dpsi));
}

double kinematic_consistency(const ConfidenceInputs& in, ConfidenceDiagnostics* diag) {
    const double err = (in.profile.a_y - in.a_y_ref).cwiseAbs().mean();
    const double jerk = in.profile.j_lat.cwiseAbs().maxCoeff();
    if (diag) {
        diag->mean_ay_error = err;
        diag->max_jerk = jerk;
    }
    return kinematic_factor(err, jerk, in.constants);
}

double geometric_alignment(const ConfidenceInputs& in, ConfidenceDiagnostics* diag) {
    const auto& k = in.constants;
    const Eigen::ArrayXd r_curve = 1.0 / in.kappa_road.cwiseAbs().array().max(k.kappa_floor);
    const double term = ((in.profile.kappa - in.kappa_road).cwiseAbs().array() * r_curve).mean();
    const double d_dev = in.center_distance.maxCoeff();
    if (diag) {
        diag->mean_curv_term = term;
        diag->d_dev = d_dev;
    }
    return curvature_factor(term, k) * deviation_factor(d_dev, k);
}

double safety_margin(const ConfidenceInputs& in, ConfidenceDiagnostics* diag) {
    const auto& k = in.constants;
    double ttc = k.ttc_cap;
    if (in.obstacles) {
        for (std::size_t s = 0; s < in.positions.size() && ttc == k.ttc_cap; ++s) {
            for (const auto& ob : *in.obstacles) {
                if ((in.positions[s] - ob.at(static_cast<int>(s))).norm() < ob.radius + k.ttc_buffer) {
                    ttc = std::min(k.ttc_cap, static_cast<double>(s + 1) * in.dt);
                    break;
                }
            }
        }
    }
    const auto outside = (in.lateral.cwiseAbs().array() > in.corridor_half_width).count();
    const double p_oda = static_cast<double>(outside) / static_cast<double>(in.lateral.size());
    const double dpsi = wrap_angle(std::atan2(in.final_heading.y(), in.final_heading.x()) - in.final_road_heading);
    if (diag) {
        diag->ttc = ttc;
        diag->p_oda = p_oda;
        diag->dpsi = dpsi;
    }
    return margin_factor(ttc, p_oda, dpsi, k);
}

double aggregate(double d_kin, double g_align, double s_margin) {
    for (double v : {d_kin, g_align, s_margin})
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("aggregate: factors must lie in [0, 1]");
    return std::cbrt(d_kin * g_align * s_margin);
}

ConfidenceReport evaluate_confidence(const Trajectory& traj, const ConfidenceContext& ctx) {
    const ConfidenceInputs in = make_inputs(traj, ctx);
    ConfidenceReport r;
    r.d_kin = kinematic_consistency(in, &r.diagnostics);
    r.g_align = geometric_alignment(in, &r.diagnostics);
    r.s_margin = safety_margin(in, &r.diagnostics);
    r.c = aggregate(r.d_kin, r.g_align, r.s_margin);
    return r;
}

std::string_view to_string(TracePhase phase) {
    switch (phase) {
        case TracePhase::normal: return "normal";
        case TracePhase::reflect: return "reflect";
        case TracePhase::reflect_denoise: return "reflect-denoise";
    }
    return "?";
}

std::string trace_csv(const ConfidenceTrace& trace) {
    std::ostringstream os;
    os << "step,phase,attempt,d_kin,g_align,s_margin,c\n";
    char buf[160];
    for (const auto& row : trace) {
        std::snprintf(buf, sizeof buf, "%d,%s,%d,%.6f,%.6f,%.6f,%.6f\n", row.step, to_string(row.phase).data(), row.attempt,
                      row.report.d_kin, row.report.g_align, row.report.s_margin, row.report.c);
        os << buf;
    }
    return os.str();
}

}  // namespace reflex
