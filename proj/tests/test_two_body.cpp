#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include <bgl/orbit_oracle.hpp>
#include <bgl/rng.hpp>
#include <bgl/two_body.hpp>

using namespace bgl;
using std::numbers::pi;

namespace {

Vec3 incoming_nu(double rho) { return {-std::sqrt(1 - rho * rho), rho, 0}; }

std::vector<RadialPotential> repulsive()
{
    return {RadialPotential::inverse_power(1), RadialPotential::inverse_power(4),
            RadialPotential::smooth_junction(0.1, 20)};
}

} // namespace

TEST(TurningPoint, FreeMotion)
{
    for (double V : {0.3, 1.0, 7.0})
        EXPECT_NEAR(turning_point(RadialPotential::zero(), 0.5 * V, V).r_star, 0.5, 1e-12);
}

TEST(TurningPoint, CentralInversePower)
{
    // V²/2 = 2 = 2(1/r − 1)
    EXPECT_NEAR(turning_point(RadialPotential::inverse_power(1), 0.0, 2.0).r_star, 0.5, 1e-12);
}

TEST(TurningPoint, MatchesOracleClosestApproach)
{
    auto p = RadialPotential::smooth_junction(0.1, 20);
    double V = speed_from_e0(9), rho = 0.3;
    double r = turning_point(p, rho * V, V).r_star;
    auto o = oracle_integrate_central(p, incoming_nu(rho), {V, 0, 0});
    EXPECT_NEAR(r, o.r_star, 1e-8);
    // energy identity at r*
    EXPECT_NEAR(0.5 * V * V, 0.5 * rho * rho * V * V / (r * r) + 2 * p.phi(r), 1e-10);
}

TEST(TurningPoint, NoInteraction)
{
    try {
        turning_point(RadialPotential::inverse_power(1), 1.5, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::no_interaction);
    }
}

TEST(Theta, ZeroPotentialIsRightAngle)
{
    for (double rho : {0.01, 0.3, 0.7, 0.99})
        for (double V : {0.1, 1.0, 10.0})
            EXPECT_NEAR(theta_of_rho(RadialPotential::zero(), rho, V), pi / 2, 1e-12);
}

TEST(Theta, SmoothJunctionMonotoneToRightAngle)
{
    auto p = RadialPotential::smooth_junction(0.1, 20);
    double V = speed_from_e0(9), prev = -1;
    for (int i = 1; i < 100; ++i) {
        double th = theta_of_rho(p, i / 100.0, V);
        EXPECT_GE(th, prev);
        prev = th;
    }
    EXPECT_NEAR(theta_of_rho(p, 1 - 1e-3, V), pi / 2, 0.05);
}

TEST(Theta, MatchesOracle)
{
    auto p = RadialPotential::inverse_power(4);
    double V = speed_from_e0(1);
    auto o = oracle_integrate_central(p, incoming_nu(0.5), {V, 0, 0});
    EXPECT_NEAR(theta_of_rho(p, 0.5, V), o.theta, 1e-6);
}

TEST(Theta, RandomRepulsiveCasesMatchOracle)
{
    StreamRng g(11, 1, 0);
    for (int i = 0; i < 50; ++i) {
        auto p = repulsive()[i % 3];
        double rho = 0.02 + 0.96 * g.uniform(), V = 0.5 + 5 * g.uniform();
        auto o = oracle_integrate_central(p, incoming_nu(rho), {V, 0, 0});
        EXPECT_NEAR(theta_of_rho(p, rho, V), o.theta, 1e-6) << i;
        EXPECT_NEAR(scattering_time(p, rho, V), o.tau_star, 1e-6) << i;
        EXPECT_LT(o.energy_drift, 1e-10);
    }
}

TEST(Theta, DivergingLimits)
{
    auto p = RadialPotential::inverse_power(1);
    EXPECT_NEAR(theta_of_rho(p, 1e-3, 2.0), 0.0, 5e-2);
    EXPECT_NEAR(theta_of_rho(p, 1 - 1e-3, 2.0), pi / 2, 5e-2);
}

TEST(DThetaDRho, ZeroPotential)
{
    EXPECT_NEAR(dtheta_drho(RadialPotential::zero(), 0.5, 1.0), 0.0, 1e-12);
}

TEST(DThetaDRho, MatchesFiniteDifferences)
{
    auto p = RadialPotential::smooth_junction(0.1, 20);
    double V = speed_from_e0(9), h = 1e-5;
    double fd = (theta_of_rho(p, 0.5 + h, V) - theta_of_rho(p, 0.5 - h, V)) / (2 * h);
    double d = dtheta_drho(p, 0.5, V);
    EXPECT_GT(d, 0);
    EXPECT_NEAR(d, fd, 1e-4 * std::abs(fd));
}

TEST(DThetaDRho, VanishesAtGrazingForSmoothEdge)
{
    auto p = RadialPotential::smooth_junction(0.1, 20);
    EXPECT_LT(std::abs(dtheta_drho(p, 1 - 1e-4, speed_from_e0(9))), 1e-3);
}

TEST(DThetaDRho, PositiveWhenMonotonicityHolds)
{
    StreamRng g(5, 2, 0);
    for (const auto& p : repulsive())
        for (int i = 0; i < 20; ++i) {
            double rho = 0.05 + 0.9 * g.uniform(), V = 0.5 + 4 * g.uniform();
            EXPECT_GT(dtheta_drho(p, rho, V), 0) << to_string(p.family());
        }
}

TEST(ScatteringTime, FreeChord)
{
    for (double rho : {0.0, 0.4, 0.9})
        EXPECT_NEAR(scattering_time(RadialPotential::zero(), rho, 3.0), 2.0 / 3.0 * std::sqrt(1 - rho * rho),
                    1e-10);
}

TEST(ScatteringTime, MatchesOracleResidence)
{
    auto p = RadialPotential::inverse_power(1);
    auto o = oracle_integrate_central(p, incoming_nu(0.5), {2, 0, 0});
    EXPECT_NEAR(scattering_time(p, 0.5, 2.0), o.tau_star, 1e-6);
}

TEST(ScatteringTime, ImpactWeightedBoundIsFinite)
{
    for (const auto& p : repulsive()) {
        double sup = 0;
        for (int a = 1; a <= 20; ++a)
            for (int b = 1; b <= 10; ++b) {
                double rho = a / 21.0, V = 0.2 * b;
                sup = std::max(sup, scattering_time(p, rho, V) * rho * V);
            }
        EXPECT_LT(sup, 1e3) << to_string(p.family());
    }
}

TEST(ScatteringVector, ZeroPotentialIsOrthogonal)
{
    Vec3 V{1, 0.2, -0.3}, nu = normalized(Vec3{-1, 1, 0.5});
    Vec3 w = scattering_vector(RadialPotential::zero(), nu, V);
    EXPECT_NEAR(norm(w), 1, 1e-14);
    EXPECT_NEAR(dot(w, V), 0, 1e-12);
    EXPECT_NEAR(dot(w, cross(nu, V)), 0, 1e-12);
}

TEST(ScatteringVector, CentralBackscatter)
{
    Vec3 nu{-1, 0, 0}, V{2, 0, 0};
    Vec3 w = scattering_vector(RadialPotential::inverse_power(2), nu, V);
    EXPECT_NEAR(std::abs(dot(w, nu)), 1, 1e-9);
    auto s = scatter(RadialPotential::inverse_power(2), nu, V);
    EXPECT_NEAR(std::abs(s.chi), pi, 1e-6);
}

TEST(ScatteringVector, MatchesOracleBisector)
{
    auto p = RadialPotential::smooth_junction(0.1, 20);
    double V = speed_from_e0(9);
    Vec3 Vv{V, 0, 0};
    Vec3 nu = incoming_nu(std::sin(pi / 4));
    auto o = oracle_integrate_central(p, nu, Vv);
    Vec3 w = scattering_vector(p, nu, Vv);
    EXPECT_LT(std::min(norm(w - o.omega), norm(w + o.omega)), 1e-6);
}

TEST(CollisionRule, GrazingLeavesVelocities)
{
    Vec3 v{1, 0, 0}, v1{0, 0, 0}, w{0, 1, 0};
    auto [a, b] = apply_collision_rule(v, v1, w);
    EXPECT_EQ(norm(a - v), 0);
    EXPECT_EQ(norm(b - v1), 0);
}

TEST(CollisionRule, HeadOnExchange)
{
    auto [a, b] = apply_collision_rule({1, 0, 0}, {-1, 0, 0}, {1, 0, 0});
    EXPECT_EQ(norm(a - Vec3{-1, 0, 0}), 0);
    EXPECT_EQ(norm(b - Vec3{1, 0, 0}), 0);
}

TEST(CollisionRule, ConservesAndIsInvolution)
{
    StreamRng g(3, 3, 0);
    for (int i = 0; i < 100; ++i) {
        Vec3 v{g.normal(), g.normal(), g.normal()}, v1{g.normal(), g.normal(), g.normal()};
        Vec3 w = g.unit_vector();
        auto [a, b] = apply_collision_rule(v, v1, w);
        EXPECT_NEAR(norm(a + b - v - v1), 0, 1e-14);
        EXPECT_NEAR(norm2(a) + norm2(b), norm2(v) + norm2(v1), 1e-13);
        auto [c, d] = apply_collision_rule(a, b, w);
        EXPECT_NEAR(norm(c - v) + norm(d - v1), 0, 1e-13);
    }
}

TEST(ScatteringOperator, Invariants)
{
    StreamRng g(4, 4, 0);
    for (auto p : {RadialPotential::zero(), RadialPotential::smooth_junction(0.1, 20)})
        for (int i = 0; i < 20; ++i) {
            Vec3 V{g.normal(), g.normal(), g.normal()}, nu = g.unit_vector();
            if (dot(nu, V) > 0)
                nu = -nu;
            auto out = scattering_operator(p, nu, V);
            EXPECT_NEAR(norm(out.V), norm(V), 1e-12);
            EXPECT_NEAR(dot(V, nu), -dot(out.V, out.nu), 1e-12);
            auto back = inverse_scattering_operator(p, out.nu, out.V);
            EXPECT_LT(norm(back.nu - nu) + norm(back.V - V), 1e-8);
        }
}

TEST(ScatteringOperator, CentralBackscatter)
{
    auto out = scattering_operator(RadialPotential::inverse_power(1), {-1, 0, 0}, {2, 0, 0});
    EXPECT_LT(norm(out.V - Vec3{-2, 0, 0}), 1e-9);
    EXPECT_LT(norm(out.nu - Vec3{-1, 0, 0}), 1e-9);
}

TEST(ScatteringOperator, OutgoingPairIsRejected)
{
    EXPECT_THROW(scattering_operator(RadialPotential::zero(), {1, 0, 0}, {1, 0, 0}), Error);
}

TEST(ScatteringOperator, PreservesMeasure)
{
    StreamRng g(6, 6, 0);
    auto p = RadialPotential::smooth_junction(0.1, 20);
    auto f = [&](const Vec3& n, const Vec3& V) { return scattering_operator(p, n, V); };
    for (int i = 0; i < 10; ++i) {
        Vec3 V{g.normal(), g.normal(), g.normal()}, nu = g.unit_vector();
        if (dot(nu, V) > -0.1 * norm(V))
            continue;
        EXPECT_NEAR(std::abs(pair_map_jacobian(f, nu, V)), 1.0, 1e-6);
    }
}

TEST(TrapCurve, RepulsiveHasNoPhysicalPart)
{
    for (const auto& pt : trap_curve(RadialPotential::inverse_power(1), trap_grid(200))) {
        EXPECT_NEAR(pt.X, -2 * pt.y, 1e-12);
        EXPECT_FALSE(pt.physical);
    }
}

TEST(TrapCurve, ZeroIsOrigin)
{
    for (const auto& pt : trap_curve(RadialPotential::zero(), trap_grid(50))) {
        EXPECT_EQ(pt.X, 0.0);
        EXPECT_EQ(pt.Y, 0.0);
    }
}

TEST(TrapCurve, LennardJonesHasFinitePhysicalPart)
{
    auto p = RadialPotential::cutoff_lennard_jones();
    auto pts = trap_curve(p, trap_grid(200));
    bool any = false;
    for (const auto& pt : pts) {
        any = any || pt.physical;
        auto v = p.evaluate(pt.y);
        EXPECT_DOUBLE_EQ(pt.X, 2 * v.dphi * pt.y * pt.y * pt.y);
        EXPECT_DOUBLE_EQ(pt.Y, 4 * v.phi + 2 * v.dphi * pt.y);
    }
    EXPECT_TRUE(any);
    double len = physical_arc_length(pts);
    EXPECT_GT(len, 0);
    EXPECT_TRUE(std::isfinite(len));
}

TEST(BadSet, SpeedCutoffAndOriginDisk)
{
    auto curve = trap_curve(RadialPotential::cutoff_lennard_jones(), trap_grid(200));
    EXPECT_TRUE(bad_set_membership(curve, {0, 1, 0}, {20, 0, 0}, 1e-3, 10));
    double s = std::sqrt(0.5e-3 / std::sqrt(2.0));
    EXPECT_TRUE(bad_set_membership(curve, {0, 1, 0}, {s, 0, 0}, 1e-3, 10));
}

TEST(BadSet, RepulsiveInteriorPointIsGood)
{
    auto p = RadialPotential::inverse_power(2);
    auto curve = trap_curve(p, trap_grid(200));
    Vec3 nu = incoming_nu(0.4), V{1.5, 0, 0};
    EXPECT_FALSE(bad_set_membership(curve, nu, V, 1e-3, 10));
    EXPECT_TRUE(std::isfinite(scattering_time(p, 0.4, 1.5)));
}

TEST(Oracle, FreeLine)
{
    auto o = oracle_integrate_central(RadialPotential::zero(), incoming_nu(0.6), {2, 0, 0});
    EXPECT_NEAR(o.theta, pi / 2, 1e-9);
    EXPECT_NEAR(o.tau_star, 0.8, 1e-9);
}
