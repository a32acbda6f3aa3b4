#include "reflex/scenario.hpp"

#include <algorithm>
#include <numeric>

namespace reflex {
namespace {

Vec2 left_normal(double theta) { return {-std::sin(theta), std::cos(theta)}; }

double segment_length(const Segment& seg) {
    return std::visit(
        [](const auto& s) -> double {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, Straight>) {
                return s.length;
            } else {
                return std::abs(s.radius) * s.sweep;
            }
        },
        seg);
}

}  // namespace

// ---------------------------------------------------------------- RoadSpec

void RoadSpec::validate() const {
    if (segments.empty()) throw InvalidArgument("road: no segments");
    for (const auto& seg : segments) {
        if (const auto* st = std::get_if<Straight>(&seg)) {
            if (!(st->length > 0.0)) throw InvalidArgument("road: straight length must be positive");
        } else {
            const auto& arc = std::get<Arc>(seg);
            if (!(std::abs(arc.radius) >= kMinArcRadius))
                throw InvalidArgument("road: arc radius " + std::to_string(arc.radius) + " below 5 m");
            if (!(arc.sweep > 0.0)) throw InvalidArgument("road: arc sweep must be positive");
        }
    }
    if (!(lane_half_width > kVehicleHalfWidth))
        throw InvalidArgument("road: lane half-width must exceed the vehicle half-width");
    if (!(speed_limit > 0.0)) throw InvalidArgument("road: speed limit must be positive");
}

double RoadSpec::length() const {
    double total = 0.0;
    for (const auto& seg : segments) total += segment_length(seg);
    return total;
}

// ---------------------------------------------------------------- Road

Road::Road(RoadSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    Pose2 pose = spec_.origin;
    double s = 0.0;
    for (const auto& seg : spec_.segments) {
        Piece piece;
        piece.start = pose;
        piece.s0 = s;
        piece.length = segment_length(seg);
        if (const auto* arc = std::get_if<Arc>(&seg)) {
            piece.kappa = 1.0 / arc->radius;
            piece.center = pose.position() + arc->radius * left_normal(pose.theta);
        }
        pieces_.push_back(piece);
        starts_.push_back(s);
        const CenterlinePoint end = eval(piece, piece.length);
        pose = {end.position.x(), end.position.y(), end.theta};
        s += piece.length;
    }
    length_ = s;
}

CenterlinePoint Road::eval(const Piece& piece, double u) const {
    CenterlinePoint out;
    out.s = piece.s0 + u;
    if (piece.kappa == 0.0) {
        out.theta = piece.start.theta;
        out.position = piece.start.position() + u * piece.start.tangent();
        return out;
    }
    const double radius = 1.0 / piece.kappa;
    out.theta = piece.start.theta + piece.kappa * u;
    out.kappa = piece.kappa;
    out.position = piece.center + radius * Vec2(std::sin(out.theta), -std::cos(out.theta));
    return out;
}

CenterlinePoint Road::at(double s) const {
    if (s < 0.0) {
        CenterlinePoint out;
        out.s = s;
        out.theta = spec_.origin.theta;
        out.position = spec_.origin.position() + s * spec_.origin.tangent();
        return out;
    }
    if (s >= length_) {
        const CenterlinePoint end = eval(pieces_.back(), pieces_.back().length);
        CenterlinePoint out = end;
        out.s = s;
        out.kappa = (s == length_) ? end.kappa : 0.0;
        out.position = end.position + (s - length_) * Vec2(std::cos(end.theta), std::sin(end.theta));
        return out;
    }
    auto it = std::upper_bound(starts_.begin(), starts_.end(), s);
    const std::size_t idx = static_cast<std::size_t>(std::distance(starts_.begin(), it)) - 1;
    return eval(pieces_[idx], s - pieces_[idx].s0);
}

RoadProjection Road::project_piece(const Piece& piece, const Vec2& p, bool open_start, bool open_end) const {
    double u = 0.0;
    if (piece.kappa == 0.0) {
        u = (p - piece.start.position()).dot(piece.start.tangent());
    } else {
        const Vec2 d = p - piece.center;
        if (d.norm() > 1e-12) {
            const double psi = std::atan2(d.y(), d.x());
            const double theta = piece.kappa > 0.0 ? psi + kPi / 2 : psi - kPi / 2;
            const double sign = piece.kappa > 0.0 ? 1.0 : -1.0;
            const double sweep = piece.length * std::abs(piece.kappa);
            const double turn = wrap_angle(sign * (theta - piece.start.theta) - 0.5 * sweep) + 0.5 * sweep;
            u = turn / std::abs(piece.kappa);
        }
    }
    if (!open_start) u = std::max(u, 0.0);
    if (!open_end) u = std::min(u, piece.length);

    CenterlinePoint c;
    if (u < 0.0 || u > piece.length) {
        const CenterlinePoint edge = eval(piece, u < 0.0 ? 0.0 : piece.length);
        const double extra = u < 0.0 ? u : u - piece.length;
        c = edge;
        c.s = piece.s0 + u;
        c.kappa = 0.0;
        c.position = edge.position + extra * Vec2(std::cos(edge.theta), std::sin(edge.theta));
    } else {
        c = eval(piece, u);
    }
    RoadProjection out;
    out.s = c.s;
    out.center = c.position;
    out.theta = c.theta;
    out.kappa = c.kappa;
    out.lateral = (p - c.position).dot(left_normal(c.theta));
    return out;
}

RoadProjection Road::project(const Vec2& p) const {
    RoadProjection best;
    double best_dist = std::numeric_limits<double>::infinity();
    const std::size_t n = pieces_.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Piece& piece = pieces_[i];
        // arcs at the chain ends are extended by a straight continuation below
        const bool open_start = i == 0 && piece.kappa == 0.0;
        const bool open_end = i + 1 == n && piece.kappa == 0.0;
        RoadProjection cand = project_piece(piece, p, open_start, open_end);
        const double dist = (p - cand.center).norm();
        if (dist < best_dist - 1e-12) {
            best_dist = dist;
            best = cand;
        }
    }
    const auto extend = [&](const CenterlinePoint& edge, double direction) {
        const Vec2 t(std::cos(edge.theta), std::sin(edge.theta));
        const double u = (p - edge.position).dot(t) * direction;
        if (u <= 0.0) return;
        RoadProjection cand;
        cand.s = edge.s + direction * u;
        cand.center = edge.position + direction * u * t;
        cand.theta = edge.theta;
        cand.lateral = (p - cand.center).dot(left_normal(edge.theta));
        const double dist = (p - cand.center).norm();
        if (dist < best_dist - 1e-12) {
            best_dist = dist;
            best = cand;
        }
    };
    if (pieces_.front().kappa != 0.0) extend(eval(pieces_.front(), 0.0), -1.0);
    if (pieces_.back().kappa != 0.0) extend(eval(pieces_.back(), pieces_.back().length), 1.0);
    return best;
}

double Road::max_abs_kappa(double s0, double s1) const {
    double out = 0.0;
    for (const auto& piece : pieces_) {
        if (piece.s0 + piece.length < s0 || piece.s0 > s1) continue;
        out = std::max(out, std::abs(piece.kappa));
    }
    return out;
}

std::pair<double, double> Road::joint_headings(std::size_t i) const {
    if (i + 1 >= pieces_.size()) throw InvalidArgument("joint index out of range");
    return {eval(pieces_[i], pieces_[i].length).theta, eval(pieces_[i + 1], 0.0).theta};
}

Road Road::transformed(const Rigid2& g) const {
    RoadSpec spec = spec_;
    const Vec2 p = g.apply(spec_.origin.position());
    spec.origin = {p.x(), p.y(), spec_.origin.theta + g.angle()};
    return Road(std::move(spec));
}

Centerline build_road(const RoadSpec& spec, double ds) {
    if (!(ds > 0.05 && ds <= 2.0)) throw InvalidArgument("build_road: ds must lie in (0.05, 2.0]");
    const Road road(spec);
    const double total = road.length();
    const auto n_regular = static_cast<Eigen::Index>(std::floor(total / ds + 1e-9)) + 1;
    const bool add_end = total - static_cast<double>(n_regular - 1) * ds > 1e-9 * std::max(1.0, total);
    const Eigen::Index n = n_regular + (add_end ? 1 : 0);

    Centerline out;
    out.s.resize(n);
    out.x.resize(n);
    out.y.resize(n);
    out.theta.resize(n);
    out.kappa.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double s = (i < n_regular) ? std::min(static_cast<double>(i) * ds, total) : total;
        // the final station belongs to the last segment
        const CenterlinePoint c = (s >= total) ? road.at(total) : road.at(s);
        out.s[i] = s;
        out.x[i] = c.position.x();
        out.y[i] = c.position.y();
        out.theta[i] = c.theta;
        out.kappa[i] = c.kappa;
    }
    return out;
}

// ---------------------------------------------------------------- kinds

std::string_view to_string(ScenarioKind kind) {
    switch (kind) {
        case ScenarioKind::u_turn: return "u_turn";
        case ScenarioKind::sharp_curve: return "sharp_curve";
        case ScenarioKind::gentle_curve: return "gentle_curve";
        case ScenarioKind::straight: return "straight";
    }
    return "unknown";
}

ScenarioKind parse_kind(std::string_view name) {
    for (const auto kind : kAllKinds) {
        if (to_string(kind) == name) return kind;
    }
    throw InvalidArgument("unknown scenario kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- ego reference

EgoReference::EgoReference(const RoadSpec& spec) : EgoReference(spec, Options{}) {}

EgoReference::EgoReference(const RoadSpec& spec, const Options& opt) {
    const Road road(spec);
    const double total = road.length();
    const auto n = static_cast<std::size_t>(std::ceil(total / opt.ds)) + 1;
    const double ds = total / static_cast<double>(n - 1);

    double kappa_max = 0.0;
    for (const auto& seg : spec.segments) {
        if (const auto* arc = std::get_if<Arc>(&seg)) kappa_max = std::max(kappa_max, 1.0 / std::abs(arc->radius));
    }
    window_ = opt.min_window;
    if (kappa_max > 0.0) {
        const double v_curve = std::min(spec.speed_limit, std::sqrt(opt.a_lat_comfort / kappa_max));
        window_ = std::clamp(v_curve * v_curve * v_curve * kappa_max / opt.jerk_target, opt.min_window,
                             opt.max_window);
    }

    s_.resize(n);
    std::vector<double> kappa_road(n), prefix(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        s_[i] = static_cast<double>(i) * ds;
        kappa_road[i] = road.at(std::min(s_[i], total - 1e-12)).kappa;
        prefix[i + 1] = prefix[i] + kappa_road[i];
    }
    // boxcar average of road curvature over the transition window
    const auto half = static_cast<std::ptrdiff_t>(std::round(0.5 * window_ / ds));
    std::vector<double> kappa(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<std::ptrdiff_t>(i);
        const auto lo = std::max<std::ptrdiff_t>(0, ii - half);
        const auto hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n) - 1, ii + half);
        kappa[i] = (prefix[hi + 1] - prefix[lo]) / static_cast<double>(2 * half + 1);
    }

    theta_.resize(n);
    x_.resize(n);
    y_.resize(n);
    theta_[0] = spec.origin.theta;
    x_[0] = spec.origin.x;
    y_[0] = spec.origin.y;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        theta_[i + 1] = theta_[i] + 0.5 * (kappa[i] + kappa[i + 1]) * ds;
        const double mid = 0.5 * (theta_[i] + theta_[i + 1]);
        x_[i + 1] = x_[i] + ds * std::cos(mid);
        y_[i + 1] = y_[i] + ds * std::sin(mid);
    }

    v_.resize(n);
    const double reach = 0.5 * window_ + 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double k_env = road.max_abs_kappa(s_[i] - reach, s_[i] + reach);
        v_[i] = std::min(spec.speed_limit, std::sqrt(opt.a_lat_comfort / std::max(k_env, 1e-6)));
    }
    for (std::size_t i = n - 1; i-- > 0;) v_[i] = std::min(v_[i], std::sqrt(v_[i + 1] * v_[i + 1] + 2 * opt.a_long * ds));
    for (std::size_t i = 1; i < n; ++i) v_[i] = std::min(v_[i], std::sqrt(v_[i - 1] * v_[i - 1] + 2 * opt.a_long * ds));

    t_.resize(n);
    t_[0] = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) t_[i + 1] = t_[i] + cell_time(i, ds);
}

// speed is linear in s inside a cell: dt = du / (v0 + g u)
double EgoReference::cell_time(std::size_t i, double u) const {
    const double ds = s_[1] - s_[0];
    const double g = (v_[i + 1] - v_[i]) / ds;
    if (std::abs(g) * u < 1e-9 * v_[i]) return u / v_[i];
    return std::log1p(g * u / v_[i]) / g;
}

double EgoReference::time_at(double s) const {
    if (s <= 0.0) return s / v_.front();
    if (s >= s_.back()) return t_.back() + (s - s_.back()) / v_.back();
    const double ds = s_[1] - s_[0];
    const auto i = std::min(static_cast<std::size_t>(s / ds), s_.size() - 2);
    return t_[i] + cell_time(i, s - s_[i]);
}

double EgoReference::s_at_time(double t) const {
    if (t <= 0.0) return t * v_.front();
    if (t >= t_.back()) return s_.back() + (t - t_.back()) * v_.back();
    auto it = std::upper_bound(t_.begin(), t_.end(), t);
    const auto i = static_cast<std::size_t>(std::distance(t_.begin(), it)) - 1;
    // speed is linear in s across the cell, so invert the exact travel time
    const double ds = s_[i + 1] - s_[i];
    const double v0 = v_[i];
    const double dv = (v_[i + 1] - v_[i]) / ds;
    const double tau = t - t_[i];
    double u;
    if (std::abs(dv) * tau < 1e-9) {
        u = v0 * tau;
    } else {
        u = v0 * std::expm1(dv * tau) / dv;
    }
    return s_[i] + std::clamp(u, 0.0, ds);
}

AgentState EgoReference::state_at(double s) const {
    AgentState out;
    double theta;
    if (s <= 0.0 || s >= s_.back()) {
        const bool front = s <= 0.0;
        const std::size_t i = front ? 0 : s_.size() - 1;
        const double extra = front ? s : s - s_.back();
        theta = theta_[i];
        out.x = x_[i] + extra * std::cos(theta);
        out.y = y_[i] + extra * std::sin(theta);
        out.v = v_[i];
    } else {
        const double ds = s_[1] - s_[0];
        const auto i = std::min(static_cast<std::size_t>(s / ds), s_.size() - 2);
        const double f = (s - s_[i]) / ds;
        theta = theta_[i] + f * (theta_[i + 1] - theta_[i]);
        // chord interpolation with the exact heading-midpoint direction
        const double u = f * ds;
        const double mid = 0.5 * (theta_[i] + theta);
        out.x = x_[i] + u * std::cos(mid);
        out.y = y_[i] + u * std::sin(mid);
        out.v = v_[i] + f * (v_[i + 1] - v_[i]);
    }
    out.cos_theta = std::cos(theta);
    out.sin_theta = std::sin(theta);
    return out;
}

std::vector<AgentState> EgoReference::rollout(double s0, int steps, double dt) const {
    std::vector<AgentState> out;
    out.reserve(static_cast<std::size_t>(steps));
    const double t0 = time_at(s0);
    for (int k = 1; k <= steps; ++k) out.push_back(state_at(s_at_time(t0 + k * dt)));
    return out;
}

// ---------------------------------------------------------------- neighbors

AgentState Neighbor::state_at(const Road& road, double t) const {
    const double s = motion.s0 + motion.s_rate * t;
    const CenterlinePoint c = road.at(s);
    AgentState out;
    const Vec2 p = c.position + motion.lateral * left_normal(c.theta);
    const double heading = motion.s_rate >= 0.0 ? c.theta : c.theta + kPi;
    out.x = p.x();
    out.y = p.y();
    out.cos_theta = std::cos(heading);
    out.sin_theta = std::sin(heading);
    out.v = std::abs(motion.s_rate);
    return out;
}

namespace {

std::vector<AgentState> history_at(const Neighbor& nb, const Road& road, double t) {
    std::vector<AgentState> out;
    out.reserve(kHistorySteps);
    for (int j = 0; j < kHistorySteps; ++j) {
        out.push_back(nb.state_at(road, t - (kHistorySteps - 1 - j) * kStepDt));
    }
    return out;
}

Neighbor make_neighbor(std::mt19937_64& rng, const RoadSpec& road, double ego_s) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    Neighbor nb;
    const double kind_draw = unit(rng);
    const double side = unit(rng) < 0.5 ? -1.0 : 1.0;
    const double hw = road.lane_half_width;
    double speed;
    double direction = 1.0;
    if (kind_draw < 0.7) {
        nb.attrs = {AgentType::car, uniform(4.2, 5.0), uniform(1.7, 2.0)};
        nb.motion.lateral = side * uniform(2.0 * hw + 0.2, 2.0 * hw + 0.8);
        speed = uniform(6.0, 13.0);
        direction = unit(rng) < 0.5 ? -1.0 : 1.0;
    } else if (kind_draw < 0.85) {
        nb.attrs = {AgentType::bicycle, uniform(1.6, 1.9), uniform(0.5, 0.7)};
        nb.motion.lateral = side * uniform(hw + 1.2, hw + 1.8);
        speed = uniform(3.0, 6.0);
    } else {
        nb.attrs = {AgentType::pedestrian, uniform(0.4, 0.7), uniform(0.4, 0.7)};
        nb.motion.lateral = side * uniform(hw + 2.5, hw + 3.5);
        speed = uniform(0.8, 1.6);
        direction = unit(rng) < 0.5 ? -1.0 : 1.0;
    }
    nb.motion.s0 = ego_s + uniform(-50.0, 110.0);
    nb.motion.s_rate = direction * speed;
    return nb;
}

}  // namespace

SceneContext advance_scene(const SceneContext& scene, double t, const AgentState& ego) {
    SceneContext out = scene;
    out.time = t;
    out.ego_init = ego;
    const Road road(scene.road);
    for (auto& nb : out.neighbors) nb.history = history_at(nb, road, t);
    return out;
}

Trajectory neighbor_futures(const SceneContext& scene, int steps) {
    const Road road(scene.road);
    Trajectory out(static_cast<int>(scene.neighbors.size()), steps);
    for (int r = 0; r < static_cast<int>(scene.neighbors.size()); ++r) {
        for (int k = 0; k < steps; ++k) {
            const AgentState st = scene.neighbors[r].state_at(road, scene.time + (k + 1) * kStepDt);
            out.set_state(r, k, st.position(), {st.cos_theta, st.sin_theta});
        }
    }
    return out;
}

void SceneContext::validate() const {
    road.validate();
    if (neighbors.size() > static_cast<std::size_t>(kMaxNeighbors)) throw InvalidArgument("scene: more than 8 neighbors");
    const Vec2 ego = ego_init.position();
    for (const auto& nb : neighbors) {
        if (nb.history.size() != static_cast<std::size_t>(kHistorySteps))
            throw InvalidArgument("scene: neighbor history must have 21 samples");
        for (const auto& st : nb.history) {
            if ((st.position() - ego).norm() > kSceneRadius) throw InvalidArgument("scene: neighbor beyond 200 m");
        }
    }
    for (const auto& ob : static_obstacles) {
        if ((Vec2(ob.x, ob.y) - ego).norm() > kSceneRadius) throw InvalidArgument("scene: obstacle beyond 200 m");
    }
}

namespace {

AgentState transform_state(const AgentState& st, const Rigid2& g) {
    const Vec2 p = g.apply(st.position());
    const Vec2 h = g.apply_direction(Vec2(st.cos_theta, st.sin_theta));
    return {p.x(), p.y(), h.x(), h.y(), st.v};
}

}  // namespace

SceneContext transform(const SceneContext& scene, const Rigid2& g) {
    SceneContext out = scene;
    const Vec2 o = g.apply(scene.road.origin.position());
    out.road.origin = {o.x(), o.y(), scene.road.origin.theta + g.angle()};
    out.ego_init = transform_state(scene.ego_init, g);
    for (auto& nb : out.neighbors) {
        for (auto& st : nb.history) st = transform_state(st, g);
    }
    for (auto& ob : out.static_obstacles) {
        const Vec2 p = g.apply(Vec2(ob.x, ob.y));
        ob.x = p.x();
        ob.y = p.y();
    }
    return out;
}

Rigid2 ego_frame(const SceneContext& scene) { return Rigid2::from_pose(scene.ego_init.pose()); }

// ---------------------------------------------------------------- generation

Trajectory ground_truth_from(const RoadSpec& road, double s0, int steps) {
    const EgoReference ref(road);
    const auto states = ref.rollout(s0, steps);
    Trajectory out(1, steps);
    for (int k = 0; k < steps; ++k) out.set_state(0, k, states[k].position(), {states[k].cos_theta, states[k].sin_theta});
    return out;
}

Scenario generate_scenario(ScenarioKind kind, std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(kind)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    Scenario sc;
    sc.kind = kind;
    sc.seed = seed;
    RoadSpec& road = sc.scene.road;
    road.lane_half_width = uniform(1.6, 2.0);
    road.speed_limit = uniform(10.0, 15.0);
    road.origin = {uniform(-50.0, 50.0), uniform(-50.0, 50.0), uniform(-kPi, kPi)};

    const double lead_in = uniform(10.0, 40.0);
    constexpr double kLeadOut = 380.0;
    const double turn = unit(rng) < 0.5 ? -1.0 : 1.0;
    double arc_length = 0.0;
    switch (kind) {
        case ScenarioKind::straight:
            road.segments = {Straight{lead_in + kLeadOut}};
            break;
        case ScenarioKind::gentle_curve: {
            const double r = uniform(60.0, 150.0);
            const double sweep = uniform(kPi / 6, kPi / 3);
            road.segments = {Straight{lead_in}, Arc{turn * r, sweep}, Straight{kLeadOut}};
            arc_length = r * sweep;
            break;
        }
        case ScenarioKind::sharp_curve: {
            const double r = uniform(15.0, 30.0);
            const double sweep = uniform(kPi / 3, kPi / 2);
            road.segments = {Straight{lead_in}, Arc{turn * r, sweep}, Straight{kLeadOut}};
            arc_length = r * sweep;
            break;
        }
        case ScenarioKind::u_turn: {
            const double r = uniform(8.0, 15.0);
            road.segments = {Straight{lead_in}, Arc{turn * r, kPi}, Straight{kLeadOut}};
            arc_length = r * kPi;
            break;
        }
    }
    road.validate();

    sc.ego_s0 = kind == ScenarioKind::straight ? uniform(0.0, 20.0) : uniform(0.0, lead_in + 0.5 * arc_length);
    const EgoReference ref(road);
    const Road geometry(road);
    sc.scene.ego_init = ref.state_at(sc.ego_s0);

    const int m = std::uniform_int_distribution<int>(0, kMaxNeighbors)(rng);
    for (int j = 0; j < m; ++j) {
        Neighbor nb = make_neighbor(rng, road, sc.ego_s0);
        nb.history = history_at(nb, geometry, 0.0);
        sc.scene.neighbors.push_back(std::move(nb));
    }
    const Vec2 ego = sc.scene.ego_init.position();
    std::stable_sort(sc.scene.neighbors.begin(), sc.scene.neighbors.end(), [&](const Neighbor& a, const Neighbor& b) {
        return (a.history.back().position() - ego).norm() < (b.history.back().position() - ego).norm();
    });

    const int n_static = std::uniform_int_distribution<int>(0, 3)(rng);
    for (int j = 0; j < n_static; ++j) {
        const double radius = uniform(0.3, 1.0);
        const double s = sc.ego_s0 + uniform(-20.0, 150.0);
        const double side = unit(rng) < 0.5 ? -1.0 : 1.0;
        const double lateral = side * (road.lane_half_width + radius + uniform(0.8, 2.5));
        const CenterlinePoint c = geometry.at(s);
        const Vec2 p = c.position + lateral * left_normal(c.theta);
        sc.scene.static_obstacles.push_back({p.x(), p.y(), radius});
    }
    sc.scene.validate();

    const int rows = 1 + m;
    sc.ground_truth = Trajectory(rows, kHorizonSteps);
    const auto ego_future = ref.rollout(sc.ego_s0, kHorizonSteps);
    for (int k = 0; k < kHorizonSteps; ++k) {
        sc.ground_truth.set_state(0, k, ego_future[k].position(), {ego_future[k].cos_theta, ego_future[k].sin_theta});
    }
    const Trajectory futures = neighbor_futures(sc.scene);
    if (m > 0) sc.ground_truth.data().bottomRows(m) = futures.data();
    return sc;
}

// ---------------------------------------------------------------- classification

HighLatResult classify_high_lat(std::span<const double> a_y, double dt, double a_th, double t_min) {
    if (!(a_th > 0.0) || !(t_min > 0.0) || !(dt > 0.0)) throw InvalidArgument("classify_high_lat: thresholds must be positive");
    HighLatResult out;
    const auto needed = static_cast<std::size_t>(std::ceil(t_min / dt - 1e-9));
    if (a_y.size() < needed) {
        out.too_short = true;
        return out;
    }
    std::size_t run = 0, best = 0;
    for (const double a : a_y) {
        run = std::abs(a) >= a_th ? run + 1 : 0;
        best = std::max(best, run);
    }
    out.longest_window_s = static_cast<double>(best) * dt;
    out.high_lat = out.longest_window_s >= t_min - 1e-9;
    return out;
}

HighLatResult classify_high_lat(const Trajectory& traj, double a_th, double t_min) {
    if (traj.steps() < 3) {
        HighLatResult out;
        out.too_short = true;
        return out;
    }
    const KinematicProfile prof = kinematics(traj, 0);
    return classify_high_lat(std::span<const double>(prof.a_y.data(), static_cast<std::size_t>(prof.a_y.size())),
                             traj.dt(), a_th, t_min);
}

// ---------------------------------------------------------------- conditions

Eigen::VectorXd decouple(const Eigen::VectorXd& full) {
    using L = ConditionLayout;
    if (full.size() != L::size()) throw InvalidArgument("decouple: condition vector has the wrong length");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(full.size());
    out.segment(L::offset(L::nav), L::width(L::nav) + 1) = full.segment(L::offset(L::nav), L::width(L::nav) + 1);
    return out;
}

ConditionSet assemble_conditions(const SceneContext& scene) {
    using L = ConditionLayout;
    constexpr double kPosScale = 1.0 / 50.0;
    constexpr double kSpeedScale = 1.0 / 10.0;

    const Rigid2 to_ego = ego_frame(scene).inverse();
    const Road road(scene.road);
    const double s_ego = road.project(scene.ego_init.position()).s;

    Eigen::VectorXd c = Eigen::VectorXd::Zero(L::size());

    c[L::offset(L::ego)] = scene.ego_init.v * kSpeedScale;
    c[L::mask_index(L::ego)] = 1.0;

    const int m = std::min<int>(static_cast<int>(scene.neighbors.size()), kMaxNeighbors);
    for (int j = 0; j < m; ++j) {
        const Neighbor& nb = scene.neighbors[j];
        auto f = c.segment(L::offset(L::neighbors) + j * L::kNeighborFeatures, L::kNeighborFeatures);
        const AgentState& now = nb.history.back();
        const Vec2 p = to_ego.apply(now.position());
        const Vec2 h = to_ego.apply_direction(Vec2(now.cos_theta, now.sin_theta));
        f[0] = 1.0;
        f[1] = p.x() * kPosScale;
        f[2] = p.y() * kPosScale;
        f[3] = h.x();
        f[4] = h.y();
        f[5] = now.v * kSpeedScale;
        for (int q = 0; q < 4; ++q) {
            const Vec2 hp = to_ego.apply(nb.history[static_cast<std::size_t>(5 * q)].position());
            f[6 + 2 * q] = hp.x() * kPosScale;
            f[7 + 2 * q] = hp.y() * kPosScale;
        }
        f[14 + static_cast<int>(nb.attrs.type)] = 1.0;
        f[17] = nb.attrs.length / 5.0;
        f[18] = nb.attrs.width / 2.0;
    }
    c[L::mask_index(L::neighbors)] = m > 0 ? 1.0 : 0.0;

    for (int j = 0; j < L::kStations; ++j) {
        const CenterlinePoint cp = road.at(s_ego + j * L::kStationStep);
        c[L::offset(L::lanes) + j] = cp.kappa * 10.0;
        const Vec2 p = to_ego.apply(cp.position);
        c[L::offset(L::nav) + 2 * j] = p.x() * kPosScale;
        c[L::offset(L::nav) + 2 * j + 1] = p.y() * kPosScale;
    }
    c[L::offset(L::lanes) + L::kStations] = scene.road.lane_half_width / 2.0;
    c[L::offset(L::lanes) + L::kStations + 1] = scene.road.speed_limit / 15.0;
    c[L::mask_index(L::lanes)] = 1.0;
    c[L::mask_index(L::nav)] = 1.0;

    std::vector<std::size_t> order(scene.static_obstacles.size());
    std::iota(order.begin(), order.end(), 0);
    const Vec2 ego = scene.ego_init.position();
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& oa = scene.static_obstacles[a];
        const auto& ob = scene.static_obstacles[b];
        return (Vec2(oa.x, oa.y) - ego).norm() < (Vec2(ob.x, ob.y) - ego).norm();
    });
    const int n_static = std::min<int>(static_cast<int>(order.size()), L::kStaticSlots);
    for (int j = 0; j < n_static; ++j) {
        const auto& ob = scene.static_obstacles[order[static_cast<std::size_t>(j)]];
        const Vec2 p = to_ego.apply(Vec2(ob.x, ob.y));
        auto f = c.segment(L::offset(L::static_obj) + 4 * j, 4);
        f << 1.0, p.x() * kPosScale, p.y() * kPosScale, ob.radius;
    }
    c[L::mask_index(L::static_obj)] = n_static > 0 ? 1.0 : 0.0;

    ConditionSet out;
    out.full = std::move(c);
    out.decouple = decouple(out.full);
    return out;
}

MaskedCondition mask_conditions(const ConditionSet& cs, double p_drop, std::mt19937_64& rng) {
    if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw InvalidArgument("mask_conditions: p_drop must lie in [0, 1]");
    const bool drop = std::bernoulli_distribution(p_drop)(rng);
    return {drop ? cs.decouple : cs.full, drop};
}

}  // namespace reflex
