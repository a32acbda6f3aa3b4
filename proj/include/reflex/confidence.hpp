#pragma once

#include "reflex/scenario.hpp"
#include "reflex/trajectory.hpp"

#include <string>
#include <vector>

namespace reflex {

struct ConfidenceConstants {
    double m1 = 0.5;        ///< s^2/m
    double m2 = 0.03;
    double j_max = 5.0;     ///< m/s^3
    double d_safe = 0.5;    ///< m
    double d_max = 3.5;     ///< m
    double ttc_cap = 10.0;  ///< s
    double ttc_buffer = 1.0;
    double ttc_mid = 2.5;
    double ttc_width = 0.5;
    double kappa_floor = 1e-3;

    void validate() const;
};

/// Obstacle footprint over the horizon: one position per future step, or a
/// single position for static obstacles.
struct ObstacleTrack {
    std::vector<Vec2> positions;
    double radius = 0.5;
    Vec2 at(int k) const { return positions.size() == 1 ? positions.front() : positions[static_cast<std::size_t>(k)]; }
};

/// Scene facts the confidence score is measured against, in the planning frame.
struct ConfidenceContext {
    Road road;
    double corridor_half_width = 1.8;
    std::vector<ObstacleTrack> obstacles;
    ConfidenceConstants constants;
};

/// Planning-frame context: road and obstacles mapped by `world_to_frame`;
/// neighbors extrapolated at constant speed along their lane from the scene time.
ConfidenceContext make_confidence_context(const SceneContext& scene, const Rigid2& world_to_frame,
                                          const ConfidenceConstants& constants = {}, int steps = kHorizonSteps);

struct ConfidenceInputs {
    KinematicProfile profile;
    std::vector<Vec2> positions;
    Vec2 final_heading = Vec2::UnitX();
    Eigen::VectorXd kappa_road, a_y_ref, lateral;
    Eigen::VectorXd center_distance;  ///< |p[k] - p_center[k]|
    double final_road_heading = 0.0;
    double dt = kStepDt;
    double corridor_half_width = 1.8;
    const std::vector<ObstacleTrack>* obstacles = nullptr;
    ConfidenceConstants constants;
};

/// Projects the ego row onto the road and gathers the per-step inputs.
ConfidenceInputs make_inputs(const Trajectory& traj, const ConfidenceContext& ctx);

struct ConfidenceDiagnostics {
    double ttc = 0.0;
    double p_oda = 0.0;
    double dpsi = 0.0;
    double d_dev = 0.0;
    double mean_ay_error = 0.0;
    double max_jerk = 0.0;
    double mean_curv_term = 0.0;
};

struct ConfidenceReport {
    double d_kin = 0.0, g_align = 0.0, s_margin = 0.0, c = 0.0;
    ConfidenceDiagnostics diagnostics;
};

double kinematic_consistency(const ConfidenceInputs& in, ConfidenceDiagnostics* diag = nullptr);
double geometric_alignment(const ConfidenceInputs& in, ConfidenceDiagnostics* diag = nullptr);
double safety_margin(const ConfidenceInputs& in, ConfidenceDiagnostics* diag = nullptr);

/// Closed-form factors, exposed for direct checks.
double kinematic_factor(double mean_ay_error, double max_jerk, const ConfidenceConstants& k);
double curvature_factor(double mean_curv_term, const ConfidenceConstants& k);
double deviation_factor(double d_dev, const ConfidenceConstants& k);
double margin_factor(double ttc, double p_oda, double dpsi, const ConfidenceConstants& k);

/// Geometric mean of the three factors.
double aggregate(double d_kin, double g_align, double s_margin);

/// Confidence of the ego row of `traj` (heading channels are renormalized first).
ConfidenceReport evaluate_confidence(const Trajectory& traj, const ConfidenceContext& ctx);

enum class TracePhase { normal, reflect, reflect_denoise };
std::string_view to_string(TracePhase phase);

struct TraceRow {
    int step = 0;  ///< strided timestep index t the row belongs to
    TracePhase phase = TracePhase::normal;
    int attempt = 0;
    ConfidenceReport report;
};

using ConfidenceTrace = std::vector<TraceRow>;

/// CSV with header "step,phase,attempt,d_kin,g_align,s_margin,c".
std::string trace_csv(const ConfidenceTrace& trace);

}  // namespace reflex
