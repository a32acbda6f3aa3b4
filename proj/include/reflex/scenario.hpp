#pragma once

#include "reflex/trajectory.hpp"
#include "reflex/types.hpp"

#include <array>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace reflex {

// ---------------------------------------------------------------- roads

struct Straight {
    double length = 0.0;
};

/// Circular arc; positive radius turns left.
struct Arc {
    double radius = 0.0;
    double sweep = 0.0;
};

using Segment = std::variant<Straight, Arc>;

inline constexpr double kVehicleHalfWidth = 0.9;
inline constexpr double kMinArcRadius = 5.0;

struct RoadSpec {
    std::vector<Segment> segments;
    double lane_half_width = 1.8;
    double speed_limit = 13.0;
    Pose2 origin;

    /// Throws InvalidArgument when an invariant is violated.
    void validate() const;
    double length() const;
};

struct CenterlinePoint {
    double s = 0.0;
    Vec2 position = Vec2::Zero();
    double theta = 0.0;
    double kappa = 0.0;
};

/// Sampled centerline, one entry per arc-length station.
struct Centerline {
    Eigen::VectorXd s, x, y, theta, kappa;
    Eigen::Index size() const { return s.size(); }
};

struct RoadProjection {
    double s = 0.0;        ///< arc length of the closest centerline point (may leave [0, L])
    double lateral = 0.0;  ///< signed offset, left positive
    Vec2 center = Vec2::Zero();
    double theta = 0.0;
    double kappa = 0.0;
};

/// Analytic road geometry: exact poses along the chain of segments and
/// nearest-point projection. Beyond either end the road continues straight.
class Road {
public:
    Road() = default;
    explicit Road(RoadSpec spec);

    const RoadSpec& spec() const { return spec_; }
    double length() const { return length_; }
    CenterlinePoint at(double s) const;
    RoadProjection project(const Vec2& p) const;
    /// Largest |kappa| over [s0, s1].
    double max_abs_kappa(double s0, double s1) const;

    /// Heading just before and just after joint i (between segment i and i+1).
    std::pair<double, double> joint_headings(std::size_t i) const;
    std::span<const double> segment_starts() const { return starts_; }

    Road transformed(const Rigid2& g) const;

private:
    struct Piece {
        Pose2 start;
        double s0 = 0.0;
        double length = 0.0;
        double kappa = 0.0;
        Vec2 center = Vec2::Zero();  // arcs only
    };
    CenterlinePoint eval(const Piece& piece, double u) const;
    RoadProjection project_piece(const Piece& piece, const Vec2& p, bool open_start, bool open_end) const;

    RoadSpec spec_;
    std::vector<Piece> pieces_;
    std::vector<double> starts_;
    double length_ = 0.0;
};

/// Samples the centerline at arc-length step ds; the end point is always included.
Centerline build_road(const RoadSpec& spec, double ds);

// ---------------------------------------------------------------- scenes

enum class ScenarioKind { u_turn, sharp_curve, gentle_curve, straight };

std::string_view to_string(ScenarioKind kind);
ScenarioKind parse_kind(std::string_view name);
inline constexpr std::array kAllKinds = {ScenarioKind::u_turn, ScenarioKind::sharp_curve,
                                         ScenarioKind::gentle_curve, ScenarioKind::straight};

enum class AgentType { car, bicycle, pedestrian };

inline constexpr int kHistorySteps = 21;
inline constexpr int kMaxNeighbors = 8;
inline constexpr double kSceneRadius = 200.0;

/// Agent state (x, y, cos, sin, v).
struct AgentState {
    double x = 0.0, y = 0.0, cos_theta = 1.0, sin_theta = 0.0, v = 0.0;
    Vec2 position() const { return {x, y}; }
    Pose2 pose() const { return {x, y, std::atan2(sin_theta, cos_theta)}; }
};

struct NeighborAttrs {
    AgentType type = AgentType::car;
    double length = 4.5;
    double width = 1.9;
};

/// Constant-speed lane keeping: the agent stays at a fixed lateral offset
/// from the centerline and advances its arc length at a constant rate.
struct LaneMotion {
    double s0 = 0.0;
    double lateral = 0.0;
    double s_rate = 0.0;  ///< signed, m/s along the centerline
};

struct Neighbor {
    std::vector<AgentState> history;  ///< kHistorySteps samples, oldest first, last = now
    NeighborAttrs attrs;
    LaneMotion motion;

    AgentState state_at(const Road& road, double t) const;
    double radius() const { return 0.5 * attrs.width; }
};

struct StaticObstacle {
    double x = 0.0, y = 0.0, radius = 0.5;
};

struct SceneContext {
    AgentState ego_init;
    std::vector<Neighbor> neighbors;
    std::vector<StaticObstacle> static_obstacles;
    std::vector<int> route{0};
    RoadSpec road;
    double time = 0.0;  ///< scene clock; neighbor motion is referenced to t = 0

    void validate() const;
};

/// Smooth ego reference along the road: curvature is the road curvature
/// averaged over a transition window, speed follows the comfort profile with
/// acceleration limits. Parameterised by road arc length.
class EgoReference {
public:
    struct Options {
        double a_lat_comfort = 4.05;  // just above the 4.0 classifier threshold
        double a_long = 1.5;
        double jerk_target = 2.5;
        double min_window = 4.0;
        double max_window = 20.0;
        double ds = 0.01;
    };

    explicit EgoReference(const RoadSpec& spec);
    EgoReference(const RoadSpec& spec, const Options& opt);

    double window() const { return window_; }
    double time_at(double s) const;
    double s_at_time(double t) const;
    AgentState state_at(double s) const;
    /// Future positions at t(s0) + k dt for k = 1..steps.
    std::vector<AgentState> rollout(double s0, int steps, double dt = kStepDt) const;
    double length() const { return s_.empty() ? 0.0 : s_.back(); }

private:
    double cell_time(std::size_t i, double u) const;

    std::vector<double> s_, x_, y_, theta_, v_, t_;
    double window_ = 0.0;
};

struct Scenario {
    ScenarioKind kind = ScenarioKind::straight;
    std::uint64_t seed = 0;
    SceneContext scene;
    Trajectory ground_truth;  ///< world frame, (M+1) x 80 x 4
    double ego_s0 = 0.0;
};

Scenario generate_scenario(ScenarioKind kind, std::uint64_t seed);

/// Ground-truth ego replay from an arbitrary road arc length.
Trajectory ground_truth_from(const RoadSpec& road, double s0, int steps = kHorizonSteps);

/// Advances neighbor histories to scene time t and resets the ego state.
SceneContext advance_scene(const SceneContext& scene, double t, const AgentState& ego);

/// Neighbor future positions (M x steps x 4) for the 8 s after scene.time.
Trajectory neighbor_futures(const SceneContext& scene, int steps = kHorizonSteps);

SceneContext transform(const SceneContext& scene, const Rigid2& g);

// ---------------------------------------------------------------- classification

struct HighLatResult {
    bool high_lat = false;
    bool too_short = false;
    double longest_window_s = 0.0;
};

HighLatResult classify_high_lat(std::span<const double> a_y, double dt, double a_th = 4.0, double t_min = 0.5);
HighLatResult classify_high_lat(const Trajectory& traj, double a_th = 4.0, double t_min = 0.5);

// ---------------------------------------------------------------- conditions

/// Fixed-length condition vector. Each group is followed by a presence bit.
struct ConditionLayout {
    static constexpr int kStations = 25;
    static constexpr double kStationStep = 5.0;
    static constexpr int kNeighborFeatures = 19;
    static constexpr int kStaticSlots = 4;

    enum Group { ego = 0, neighbors, lanes, nav, static_obj, group_count };

    static constexpr std::array<int, group_count> kWidths = {
        1, kMaxNeighbors * kNeighborFeatures, kStations + 2, 2 * kStations, 4 * kStaticSlots};

    static constexpr int offset(int group) {
        int o = 0;
        for (int g = 0; g < group; ++g) o += kWidths[g] + 1;
        return o;
    }
    static constexpr int width(int group) { return kWidths[group]; }
    static constexpr int mask_index(int group) { return offset(group) + kWidths[group]; }
    static constexpr int size() { return offset(group_count); }
};

struct ConditionSet {
    Eigen::VectorXd full;
    Eigen::VectorXd decouple;
};

/// Encodes the scene in the ego frame; c_decouple keeps the nav group only.
ConditionSet assemble_conditions(const SceneContext& scene);

/// Zeroes every group except nav and clears their presence bits.
Eigen::VectorXd decouple(const Eigen::VectorXd& full);

struct MaskedCondition {
    Eigen::VectorXd c;
    bool decoupled = false;
};

MaskedCondition mask_conditions(const ConditionSet& cs, double p_drop, std::mt19937_64& rng);

/// Pose of the ego frame in world coordinates; the inverse maps world points
/// into the frame with the ego at the origin heading +x.
Rigid2 ego_frame(const SceneContext& scene);

}  // namespace reflex
