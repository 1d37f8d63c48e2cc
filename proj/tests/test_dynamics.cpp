#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include <bgl/dynamics.hpp>
#include <bgl/rng.hpp>
#include <bgl/two_body.hpp>

using namespace bgl;

namespace {

/// Two particles at contact distance ε, about to collide with impact ρ.
SystemState incoming_pair(double eps, double rho, double speed)
{
    Vec3 nu{-std::sqrt(1 - rho * rho), rho, 0};
    Vec3 v{0.1, -0.2, 0.05};
    return SystemState({{{0.3, 0.1, -0.2}, v}, {Vec3{0.3, 0.1, -0.2} + eps * nu, v + Vec3{speed, 0, 0}}},
                       eps);
}

double max_diff(const SystemState& a, const SystemState& b)
{
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        d = std::max({d, norm(a.particles[i].x - b.particles[i].x), norm(a.particles[i].v - b.particles[i].v)});
    return d;
}

SystemState random_gas(std::size_t n, double eps, std::uint64_t seed)
{
    StreamRng g(seed, 0, 0);
    std::vector<PhasePoint> p;
    while (p.size() < n) {
        Vec3 x{0.2 * g.uniform(), 0.2 * g.uniform(), 0.2 * g.uniform()};
        bool ok = true;
        for (const auto& q : p)
            ok = ok && norm(q.x - x) > 1.2 * eps;
        if (ok)
            p.push_back({x, {g.normal(), g.normal(), g.normal()}});
    }
    return SystemState(p, eps);
}

} // namespace

TEST(NewtonFlow, ZeroPotentialStreamsFreely)
{
    auto s = random_gas(12, 0.02, 1);
    auto out = newton_flow(s, RadialPotential::zero(), 0.7);
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_NEAR(norm(out.particles[i].x - s.particles[i].x - 0.7 * s.particles[i].v), 0, 1e-14);
        EXPECT_EQ(norm(out.particles[i].v - s.particles[i].v), 0);
    }
    EXPECT_DOUBLE_EQ(out.time, 0.7);
}

TEST(NewtonFlow, ElasticPairCollision)
{
    auto s = incoming_pair(1e-2, 0.4, 2.0);
    FlowReport rep;
    auto out = newton_flow(s, RadialPotential::smooth_junction(0.1, 20), 0.05, 1e-12, &rep);
    EXPECT_NEAR(norm(out.particles[1].v - out.particles[0].v), 2.0, 1e-8);
    EXPECT_LE(rep.energy_drift, 1e-8);
    EXPECT_EQ(rep.contacts.size(), 1u);
}

TEST(NewtonFlow, MatchesTwoBodyCollisionRule)
{
    StreamRng g(7, 0, 0);
    for (auto pot : {RadialPotential::smooth_junction(0.1, 20), RadialPotential::inverse_power(2)}) {
        for (int trial = 0; trial < 5; ++trial) {
            double rho = 0.05 + 0.9 * g.uniform(), speed = 0.5 + 2 * g.uniform();
            auto s = incoming_pair(1e-2, rho, speed);
            Vec3 nu = (s.particles[1].x - s.particles[0].x) / s.epsilon;
            Vec3 V = s.particles[1].v - s.particles[0].v;
            Vec3 w = scattering_vector(pot, nu, V);
            auto [a, b] = apply_collision_rule(s.particles[0].v, s.particles[1].v, w);
            double T = 1e-2 * (scattering_time(pot, rho, speed) + 0.1);
            auto out = newton_flow(s, pot, T);
            EXPECT_LT(norm(out.particles[0].v - a), 1e-6) << to_string(pot.family());
            EXPECT_LT(norm(out.particles[1].v - b), 1e-6);
        }
    }
}

TEST(NewtonFlow, InteractionTimeIsScaled)
{
    auto pot = RadialPotential::inverse_power(1);
    double eps = 1e-2, rho = 0.3, speed = 1.5;
    auto s = incoming_pair(eps, rho, speed);
    FlowReport rep;
    newton_flow(s, pot, 0.05, 1e-12, &rep);
    ASSERT_EQ(rep.contacts.size(), 1u);
    double t_star = convert_time(scattering_time(pot, rho, speed), eps, UnitDirection::micro_to_macro);
    EXPECT_NEAR(rep.contacts[0].t_end - rep.contacts[0].t_begin, t_star, 1e-8);
}

TEST(NewtonFlow, TimeReversible)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    auto s = random_gas(20, 0.02, 3);
    auto fwd = newton_flow(s, pot, 0.3);
    auto back = newton_flow(fwd, pot, -0.3);
    EXPECT_LT(max_diff(back, s), 1e-6);
}

TEST(NewtonFlow, ConservesMomentumAndEnergy)
{
    auto pot = RadialPotential::cutoff_lennard_jones();
    auto s = random_gas(30, 0.03, 4);
    FlowReport rep;
    auto out = newton_flow(s, pot, 0.2, 1e-12, &rep);
    EXPECT_LT(norm(total_momentum(out) - total_momentum(s)), 1e-12);
    EXPECT_LT(std::abs(hamiltonian(out, pot) - hamiltonian(s, pot)) / hamiltonian(s, pot), 1e-8);
    EXPECT_GT(rep.contacts.size(), 0u);
}

TEST(NewtonFlow, OverlappingStartRejected)
{
    SystemState s({{{0, 0, 0}, {1, 0, 0}}, {{0, 0, 0}, {0, 1, 0}}}, 0.1);
    try {
        newton_flow(s, RadialPotential::zero(), 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::precondition);
    }
}

TEST(Hamiltonian, KineticWhenSeparated)
{
    SystemState s({{{0, 0, 0}, {1, 0, 0}}, {{1, 0, 0}, {0, 2, 0}}}, 0.1);
    EXPECT_DOUBLE_EQ(hamiltonian(s, RadialPotential::inverse_power(1)), 2.5);
    EXPECT_DOUBLE_EQ(hamiltonian(s, RadialPotential::zero()), 2.5);
}

TEST(Hamiltonian, PairCountedOnce)
{
    SystemState s({{{0, 0, 0}, {0, 0, 0}}, {{0.05, 0, 0}, {0, 0, 0}}}, 0.1);
    EXPECT_DOUBLE_EQ(hamiltonian(s, RadialPotential::inverse_power(1)), 1.0);
}

TEST(Units, RoundTripAndScale)
{
    PhasePoint q{{1, 2, -3}, {0.5, 0, 1}};
    auto x = convert_units(q, 0.01, UnitDirection::micro_to_macro);
    EXPECT_DOUBLE_EQ(x.x.x, 0.01);
    EXPECT_EQ(norm(x.v - q.v), 0);
    auto back = convert_units(x, 0.01, UnitDirection::macro_to_micro);
    EXPECT_NEAR(norm(back.x - q.x), 0, 1e-14);
    EXPECT_DOUBLE_EQ(convert_time(convert_time(3.0, 0.01, UnitDirection::micro_to_macro), 0.01,
                                  UnitDirection::macro_to_micro),
                     3.0);
    EXPECT_THROW(convert_units(q, 0, UnitDirection::micro_to_macro), Error);
}

TEST(Scaling, BoltzmannGrad)
{
    EXPECT_NO_THROW(BoltzmannGradScaling(10000, 0.01));
    EXPECT_THROW(BoltzmannGradScaling(10000, 0.02), Error);
    auto s = BoltzmannGradScaling::from_epsilon(1.0 / 16);
    EXPECT_EQ(s.N, 256u);
    EXPECT_LT(std::abs(s.N * s.epsilon * s.epsilon - 1), 1e-12);
}

TEST(Trajectory, CsvRow)
{
    SystemState s({{{1, 2, 3}, {4, 5, 6}}}, 0.1, 0.5);
    std::ostringstream os;
    write_trajectory_row(os, s);
    EXPECT_EQ(os.str(), "0.5,0,1,2,3,4,5,6\n");
}
