#include "doctest.h"

#include "support.hpp"

#include "reflex/scenario.hpp"

using namespace reflex;
using reflex::test::arc_trajectory;
using reflex::test::line_trajectory;

namespace {

// Radius of the circle through three points.
double circumradius(const Vec2& a, const Vec2& b, const Vec2& c) {
    const double ab = (b - a).norm(), bc = (c - b).norm(), ca = (a - c).norm();
    const Vec2 u = b - a, w = c - a;
    const double cross = std::abs(u.x() * w.y() - u.y() * w.x());
    return ab * bc * ca / (2.0 * cross);
}

// Positions along a left circle of radius R at the given cumulative arc lengths.
Trajectory arc_at(double R, const std::vector<double>& s) {
    std::vector<Vec2> pts;
    for (double si : s) pts.emplace_back(R * std::sin(si / R), R * (1.0 - std::cos(si / R)));
    return from_positions(pts);
}

}  // namespace

TEST_SUITE("trajectory") {

TEST_CASE("arc kinematics") {
    const Trajectory tr = arc_trajectory(20.0, 10.0, 40);
    const KinematicProfile p = kinematics(tr, 0);
    for (int k = 2; k < 37; ++k) {
        CHECK(p.kappa[k] == doctest::Approx(0.05).epsilon(1e-3));
        CHECK(p.a_y[k] == doctest::Approx(5.0).epsilon(1e-3));
        CHECK(std::abs(p.j_lat[k]) < 5e-3);
        CHECK(p.a_y[k] == p.kappa[k] * (p.v[k] * p.v[k]));
    }
    CHECK_FALSE(p.any_degenerate);
}

TEST_CASE("straight kinematics") {
    const KinematicProfile p = kinematics(line_trajectory(7.0, 20), 0);
    CHECK(p.kappa.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(p.a_y.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(p.v[5] == doctest::Approx(7.0));
}

TEST_CASE("curvature agrees with the circumscribed-circle oracle") {
    for (double R : {8.0, 20.0, 50.0, 100.0}) {
        const Trajectory tr = arc_trajectory(R, 10.0, 60);
        const KinematicProfile p = kinematics(tr, 0);
        for (int k = 1; k + 1 < tr.steps(); ++k) {
            const double r = circumradius(tr.position(0, k - 1), tr.position(0, k), tr.position(0, k + 1));
            CHECK(std::abs(1.0 / p.kappa[k] - r) / r < 1e-3);
        }
    }
}

TEST_CASE("curvature clamp and degeneracy") {
    std::vector<Vec2> pts = {{0, 0}, {0.1, 0}, {0.1, 0.1}, {0.1, 0.1}, {0.2, 0.1}, {0.3, 0.1}};
    const KinematicProfile p = kinematics(from_positions(pts), 0);
    CHECK(p.kappa.cwiseAbs().maxCoeff() <= 1.0);
    CHECK(p.any_degenerate);
    CHECK_THROWS_AS(kinematics(line_trajectory(1.0, 2), 0), InvalidArgument);
}

TEST_CASE("constant-speed arc has no coupling violations") {
    const CouplingReport r = coupling_violations(arc_trajectory(12.0, 9.0, 80), 0);
    CHECK(r.rate == 0.0);
    CHECK(r.violations == 0);
}

TEST_CASE("a speed step on an arc is a violation") {
    // chord 0.2 m then 1.0 m per step on R = 10: the executed lateral
    // acceleration at the step differs from kappa v^2 by (1 - 0.04) / (2 R dt^2) = 4.8
    std::vector<double> s;
    for (int k = 0; k < 10; ++k) s.push_back(0.2 * k);
    for (int k = 1; k <= 10; ++k) s.push_back(1.8 + 1.0 * k);
    const CouplingReport r = coupling_violations(arc_at(10.0, s), 0);
    CHECK(r.violations >= 1);
    CHECK(r.mask[9]);
    CHECK(r.rate > 0.0);
}

TEST_CASE("heading channels do not enter the violation metric") {
    // curvature and speed come from positions; tighter-arc headings change nothing
    Trajectory tr = arc_trajectory(20.0, 8.0, 40);
    const Trajectory tight = arc_trajectory(1.0 / 0.15, 8.0, 40);
    const CouplingReport before = coupling_violations(tr, 0);
    for (int k = 0; k < tr.steps(); ++k) tr.set_state(0, k, tr.position(0, k), tight.heading(0, k));
    const CouplingReport after = coupling_violations(tr, 0);
    CHECK(after.rate == before.rate);
    CHECK(after.mask == before.mask);
}

TEST_CASE("zero-speed trajectory is fully degenerate") {
    const CouplingReport r = coupling_violations(line_trajectory(0.0, 20), 0);
    CHECK(r.rate == 0.0);
    for (std::size_t k = 0; k < r.degenerate.size(); ++k) CHECK(r.degenerate[k]);
}

TEST_CASE("violation rate is invariant under rigid motion") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 0.15);
    std::vector<Vec2> pts;
    for (int k = 0; k < 60; ++k) pts.emplace_back(8.0 * std::sin(0.1 * k) + n(rng), 8.0 * (1 - std::cos(0.1 * k)) + n(rng));
    const Trajectory tr = from_positions(pts);
    const CouplingReport base = coupling_violations(tr, 0);
    REQUIRE(base.rate > 0.0);
    for (double angle : {0.3, 2.0, -1.2}) {
        const Rigid2 g = Rigid2::from_pose({120.0, -45.0, angle});
        const CouplingReport moved = coupling_violations(transform(tr, g), 0);
        CHECK(moved.mask == base.mask);
        CHECK(moved.rate == base.rate);
    }
}

TEST_CASE("normalize_headings examples") {
    Trajectory tr = line_trajectory(2.0, 6);
    tr.set_state(0, 1, tr.position(0, 1), {0.6, 0.8});
    tr.set_state(0, 2, tr.position(0, 2), {3.0, 4.0});
    tr.set_state(0, 3, tr.position(0, 3), {0.0, 0.0});
    const Trajectory n = normalize_headings(tr);
    CHECK(n.heading(0, 1).x() == doctest::Approx(0.6));
    CHECK(n.heading(0, 1).y() == doctest::Approx(0.8));
    CHECK(n.heading(0, 2).x() == doctest::Approx(0.6));
    CHECK(n.heading(0, 2).y() == doctest::Approx(0.8));
    CHECK(n.heading(0, 3).x() == doctest::Approx(1.0));
    CHECK(n.heading(0, 3).y() == doctest::Approx(0.0));
}

TEST_CASE("normalize_headings is idempotent and unit") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 2.0);
    Trajectory tr(3, 12);
    for (Eigen::Index i = 0; i < tr.size(); ++i) tr.data().data()[i] = n(rng);
    const Trajectory once = normalize_headings(tr);
    const Trajectory twice = normalize_headings(once);
    for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 12; ++k) {
            CHECK(std::abs(once.heading(r, k).squaredNorm() - 1.0) < 1e-9);
            CHECK((twice.heading(r, k) - once.heading(r, k)).cwiseAbs().maxCoeff() < 1e-15);
        }
    CHECK(twice.data().leftCols(2) == tr.data().leftCols(2));
}

TEST_CASE("ground truth on a long arc reports the road curvature") {
    RoadSpec road;
    road.segments = {Arc{50.0, 4.0}};
    const Trajectory gt = ground_truth_from(road, 60.0);
    const KinematicProfile p = kinematics(gt, 0);
    for (int k = 1; k + 1 < gt.steps(); ++k) CHECK(std::abs(p.kappa[k] - 0.02) < 1e-3 * 0.02);
}

}  // TEST_SUITE
