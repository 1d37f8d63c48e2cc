#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include <bgl/orbit_oracle.hpp>
#include <bgl/trees_flows.hpp>

using namespace bgl;

namespace {

std::vector<PhasePoint> two_roots()
{
    return {{{0, 0, 0}, {0.5, -0.2, 0.1}}, {{1, 0.5, -0.3}, {-0.3, 0.4, 0.2}}};
}

/// Brute-force minimum of |ξⁱ − ξʰ| on [0, t¹]: scan, then golden-section polish.
double scan_min(const BackwardTrajectory& tr, int i, int h, double t1)
{
    auto a = virtual_trajectory(tr, i), b = virtual_trajectory(tr, h);
    auto d = [&](double s) { return norm(virtual_position(tr, a, s) - virtual_position(tr, b, s)); };
    if (t1 == 0)
        return d(0);
    const double step = 1e-4 * tr.t;
    double best = d(0), arg = 0;
    for (double s = 0; s <= t1; s += step)
        if (d(s) < best)
            best = d(s), arg = s;
    if (d(t1) < best)
        best = d(t1), arg = t1;
    double lo = std::max(0.0, arg - step), hi = std::min(t1, arg + step);
    const double g = 0.5 * (std::sqrt(5.0) - 1);
    for (int it = 0; it < 200; ++it) {
        double m1 = hi - g * (hi - lo), m2 = lo + g * (hi - lo);
        (d(m1) < d(m2) ? hi : lo) = (d(m1) < d(m2) ? m2 : m1);
    }
    return std::min(best, d(0.5 * (lo + hi)));
}

} // namespace

TEST(Trees, Counts)
{
    EXPECT_EQ(tree_count(2, 1), 2u);
    EXPECT_EQ(tree_count(2, 5), 720u);
    EXPECT_EQ(tree_count(1, 0), 1u);
    for (int j = 1; j <= 4; ++j)
        for (int n = 0; n <= 6; ++n)
            EXPECT_EQ(enumerate_trees(j, n).size(), tree_count(j, n)) << j << "," << n;
}

TEST(Trees, LexicographicAndValid)
{
    auto trees = enumerate_trees(2, 3);
    std::set<std::vector<int>> seen;
    for (std::size_t i = 0; i < trees.size(); ++i) {
        EXPECT_TRUE(trees[i].valid());
        EXPECT_TRUE(seen.insert(trees[i].k).second);
        if (i == 0)
            continue;
        EXPECT_LT(trees[i - 1].k, trees[i].k);
    }
    EXPECT_EQ(trees.front().str(), "1 1 1");
    EXPECT_EQ(trees.back().str(), "2 3 4");
    auto empty = enumerate_trees(1, 0);
    ASSERT_EQ(empty.size(), 1u);
    EXPECT_EQ(empty[0].n(), 0);
}

TEST(Trees, Overflow)
{
    try {
        tree_count(20, 40);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::overflow);
    }
}

TEST(Signs, ParseAndSign)
{
    auto s = SignSequence::parse("+-+-");
    EXPECT_EQ(s.minus_count(), 2);
    EXPECT_EQ(s.sign(), 1.0);
    EXPECT_EQ(SignSequence::parse("-++").sign(), -1.0);
    EXPECT_EQ(s.str(), "+-+-");
    EXPECT_THROW(SignSequence::parse("+x"), Error);
    EXPECT_EQ(SignSequence::all(3).size(), 8u);
}

TEST(Bbf, NoCreationsIsFreeStreaming)
{
    auto z = two_roots();
    auto tr = build_bbf(RadialPotential::zero(), {2, {}}, {}, z, {}, 1.5);
    const auto& z0 = tr.state_at_zero();
    for (int i = 0; i < 2; ++i) {
        EXPECT_NEAR(norm(z0[i].x - (z[i].x - 1.5 * z[i].v)), 0, 1e-15);
        EXPECT_EQ(norm(z0[i].v - z[i].v), 0);
    }
}

TEST(Bbf, IncomingCreation)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {1, 0, 0}}};
    CollisionParams p{{0.4}, {{1, 0, 0}}, {{-1, 0.5, 0}}, {}};
    auto tr = build_bbf(RadialPotential::smooth_junction(0.1, 20), {1, {1}}, SignSequence::parse("-"), z, p, 1.0);
    ASSERT_EQ(tr.particle_count(), 2);
    EXPECT_NEAR(norm(tr.at(1, 0.4).x - tr.at(0, 0.4).x), 0, 1e-15);
    EXPECT_EQ(norm(tr.at(0, 0.1).v - Vec3{1, 0, 0}), 0);
    EXPECT_EQ(norm(tr.at(1, 0.1).v - Vec3{-1, 0.5, 0}), 0);
}

TEST(Bbf, OutgoingCreationMatchesOracle)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    std::vector<PhasePoint> z{{{0, 0, 0}, {0.2, 0.1, 0}}};
    Vec3 v{2.2, 0.6, -0.3}, nu = normalized(Vec3{1, 0.7, 0.2});
    Vec3 V = v - z[0].v;
    ASSERT_GT(dot(nu, V), 0);
    CollisionParams p{{0.5}, {nu}, {v}, {}};
    auto tr = build_bbf(pot, {1, {1}}, SignSequence::parse("+"), z, p, 1.0);
    const auto& rec = tr.records.at(0);
    EXPECT_NEAR(norm(rec.parent_before + rec.child_before - rec.parent_after - rec.child_after), 0, 1e-14);
    EXPECT_NEAR(norm2(rec.parent_before) + norm2(rec.child_before),
                norm2(rec.parent_after) + norm2(rec.child_after), 1e-13);
    // reversed outgoing pair is an incoming one
    auto o = oracle_integrate_central(pot, nu, -V);
    Vec3 V_pre = -o.V_out, S = rec.parent_after + rec.child_after;
    EXPECT_LT(norm(rec.parent_before - 0.5 * (S - V_pre)), 1e-6);
    EXPECT_LT(norm(rec.child_before - 0.5 * (S + V_pre)), 1e-6);
}

TEST(Bbf, HalfSpaceViolationRejected)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {0, 0, 0}}};
    CollisionParams p{{0.5}, {{1, 0, 0}}, {{1, 0, 0}}, {}};
    try {
        build_bbf(RadialPotential::zero(), {1, {1}}, SignSequence::parse("-"), z, p, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::rejected);
    }
}

TEST(Bbf, BadTimesRejected)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {0, 0, 0}}};
    CollisionParams p{{0.3, 0.5}, {{1, 0, 0}, {1, 0, 0}}, {{-1, 0, 0}, {-1, 0, 0}}, {}};
    EXPECT_THROW(build_bbf(RadialPotential::zero(), {1, {1, 1}}, SignSequence::parse("--"), z, p, 1.0), Error);
}

TEST(Bbf, VelocitiesIndependentOfTimes)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    TreeGraph tree{2, {1, 3, 2}};
    auto signs = SignSequence::parse("+-+");
    StreamRng g(21, 0, 0);
    auto pp = random_parameter_point(pot, tree, signs, 1.0, g);
    auto a = build_bbf(pot, tree, signs, pp.z_j, pp.params, 1.0);
    auto q = pp.params;
    for (auto& s : q.times)
        s *= 0.9;
    auto b = build_bbf(pot, tree, signs, pp.z_j, q, 1.0);
    ASSERT_EQ(a.snapshots.size(), b.snapshots.size());
    for (std::size_t i = 0; i < a.snapshots.size(); ++i)
        for (std::size_t k = 0; k < a.snapshots[i].state.size(); ++k)
            EXPECT_EQ(norm(a.snapshots[i].state[k].v - b.snapshots[i].state[k].v), 0);
}

TEST(Bbf, EnergyBookkeepingAtOutgoingNodes)
{
    auto pot = RadialPotential::inverse_power(2);
    StreamRng g(22, 0, 0);
    for (int trial = 0; trial < 20; ++trial) {
        TreeGraph tree{1, {1, 2}};
        auto signs = SignSequence::parse("++");
        auto pp = random_parameter_point(pot, tree, signs, 1.0, g);
        auto tr = build_bbf(pot, tree, signs, pp.z_j, pp.params, 1.0);
        for (const auto& r : tr.records)
            EXPECT_NEAR(norm2(r.parent_before) + norm2(r.child_before),
                        norm2(r.parent_after) + norm2(r.child_after), 1e-12);
    }
}

TEST(Virtual, RootWithoutCreations)
{
    std::vector<PhasePoint> z = two_roots();
    CollisionParams p{{0.5}, {{1, 0, 0}}, {{-1, 0, 0}}, {}};
    auto tr = build_bbf(RadialPotential::zero(), {2, {1}}, SignSequence::parse("-"), z, p, 1.0);
    auto vt = virtual_trajectory(tr, 2);
    ASSERT_EQ(vt.pieces.size(), 1u);
    EXPECT_EQ(vt.pieces[0].label, 2);
}

TEST(Virtual, SplicesAtCreation)
{
    std::vector<PhasePoint> z = two_roots();
    CollisionParams p{{0.5}, {{1, 0, 0}}, {{-1, 0, 0}}, {}};
    auto tr = build_bbf(RadialPotential::zero(), {2, {1}}, SignSequence::parse("-"), z, p, 1.0);
    auto vt = virtual_trajectory(tr, 3);
    ASSERT_EQ(vt.pieces.size(), 2u);
    EXPECT_EQ(vt.pieces[0].label, 3);
    EXPECT_EQ(vt.pieces[1].label, 1);
    EXPECT_DOUBLE_EQ(vt.pieces[0].s_hi, 0.5);
    EXPECT_THROW(virtual_trajectory(tr, 4), Error);
}

TEST(Virtual, ContinuousAtSplices)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    TreeGraph tree{2, {2, 1, 3}};
    auto signs = SignSequence::parse("-+-");
    StreamRng g(23, 0, 0);
    auto pp = random_parameter_point(pot, tree, signs, 1.0, g);
    auto tr = build_bbf(pot, tree, signs, pp.z_j, pp.params, 1.0);
    for (int i = 1; i <= tr.particle_count(); ++i) {
        auto vt = virtual_trajectory(tr, i);
        for (double s : vt.switch_times()) {
            Vec3 below = virtual_position(tr, vt, s - 1e-12), above = virtual_position(tr, vt, s + 1e-12);
            EXPECT_LT(norm(below - above), 1e-9);
        }
    }
}

TEST(Overlap, SeparatingRootsAreClear)
{
    // relative velocity points away from the relative position: backward they approach only at t
    std::vector<PhasePoint> z{{{0, 0, 0}, {0, 0, 0}}, {{1, 0, 0}, {1, 0.1, 0}}};
    auto tr = build_bbf(RadialPotential::zero(), {2, {}}, {}, z, {}, 0.5);
    auto rep = overlap_detect(tr, 0.5);
    EXPECT_FALSE(rep.in_N_delta);
}

TEST(Overlap, PointwiseCollisionDetected)
{
    // particle 3 (created at s = 0.5 by particle 1) meets root 2 at s = 0.25
    std::vector<PhasePoint> z{{{0, 0, 0}, {0, 0, 0}}, {{-0.25, 0.75, 0}, {0, 1, 0}}};
    CollisionParams p{{0.5}, {{-1, 0, 0}}, {{1, 0, 0}}, {}};
    auto tr = build_bbf(RadialPotential::zero(), {2, {1}}, SignSequence::parse("-"), z, p, 1.0);
    for (double d : {1e-1, 1e-6, 1e-12}) {
        auto rep = overlap_detect(tr, d);
        EXPECT_TRUE(rep.in_N_delta);
        ASSERT_FALSE(rep.witnesses.empty());
        EXPECT_NEAR(rep.witnesses[0].s_min, 0.25, 1e-12);
    }
    EXPECT_THROW(overlap_detect(tr, 0), Error);
}

TEST(Overlap, MatchesBruteForceScan)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    StreamRng g(24, 0, 0);
    for (int trial = 0; trial < 30; ++trial) {
        int j = 1 + trial % 3, n = 1 + (trial / 3) % 3;
        auto trees = enumerate_trees(j, n);
        TreeGraph tree = trees[g() % trees.size()];
        SignSequence signs;
        for (int i = 0; i < n; ++i)
            signs.sigma.push_back(g.uniform() < 0.5 ? 1 : -1);
        auto pp = random_parameter_point(pot, tree, signs, 1.0, g, 0.3);
        auto tr = build_bbf(pot, tree, signs, pp.z_j, pp.params, 1.0);
        auto rep = overlap_detect(tr, 1e-3);
        for (const auto& pr : rep.pairs)
            EXPECT_NEAR(pr.distance, scan_min(tr, pr.i, pr.h, pr.t1), 1e-8)
                << "trial " << trial << " pair " << pr.i << "," << pr.h;
    }
}

TEST(OmegaJ, Membership)
{
    EXPECT_FALSE(omega_j_membership({{{0, 0, 0}, {0, 0, 0}}, {{1, 0, 0}, {2, 0, 0}}}));
    EXPECT_TRUE(omega_j_membership({{{1, 0, 0}, {0, 1, 0}}, {{0, 0, 0}, {0, 0, 0}}}));
    StreamRng g(25, 0, 0);
    std::vector<PhasePoint> z;
    for (int i = 0; i < 5; ++i)
        z.push_back({{g.normal(), g.normal(), g.normal()}, {g.normal(), g.normal(), g.normal()}});
    EXPECT_TRUE(omega_j_membership(z));
}

TEST(Cutoffs, EnergyArithmetic)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {0.1, 0, 0}}};
    auto tr = build_bbf(RadialPotential::zero(), {1, {}}, {}, z, {}, 1.0);
    auto c = cutoff_indicators(tr, 0.01);
    EXPECT_NEAR(c.energy, 0.005, 1e-15);
    EXPECT_TRUE(c.energy_ok);
    z[0].v = {4, 0, 0};
    EXPECT_FALSE(cutoff_indicators(build_bbf(RadialPotential::zero(), {1, {}}, {}, z, {}, 1.0), 0.01).energy_ok);
}

TEST(Cutoffs, GrazingCreationFailsImpact)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {0, 0, 0}}};
    CollisionParams p{{0.5}, {{-1, 0, 0}}, {{1, 0, 0}}, {}};
    auto tr = build_bbf(RadialPotential::zero(), {1, {1}}, SignSequence::parse("-"), z, p, 1.0);
    auto c = cutoff_indicators(tr, 0.01);
    EXPECT_FALSE(c.impact_ok);
    EXPECT_EQ(c.min_wedge, 0.0);
}

TEST(Cutoffs, ThresholdsMonotoneInEpsilon)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {1.2, 0, 0}}};
    CollisionParams p{{0.5}, {normalized(Vec3{-1, 0.2, 0})}, {{1.2 + 1, 0, 0}}, {}};
    auto tr = build_bbf(RadialPotential::zero(), {1, {1}}, SignSequence::parse("-"), z, p, 1.0);
    bool energy_prev = false, impact_prev = true;
    for (double eps : {0.4, 0.2, 0.1, 0.05, 0.025}) {
        auto c = cutoff_indicators(tr, eps);
        EXPECT_TRUE(c.energy_ok || !energy_prev);
        EXPECT_TRUE(!c.impact_ok || impact_prev);
        energy_prev = c.energy_ok;
        impact_prev = c.impact_ok;
    }
}

TEST(Cutoffs, StableModeUsesBadSet)
{
    auto pot = RadialPotential::cutoff_lennard_jones();
    auto curve = trap_curve(pot, trap_grid(500));
    std::vector<PhasePoint> z{{{0, 0, 0}, {0, 0, 0}}};
    CollisionParams p{{0.5}, {{-1, 0, 0}}, {{20, 0, 0}}, {}};
    auto tr = build_bbf(pot, {1, {1}}, SignSequence::parse("-"), z, p, 1.0);
    CutoffOptions o;
    o.stable_mode = true;
    o.trap = &curve;
    EXPECT_FALSE(cutoff_indicators(tr, 0.01, o).impact_ok);
    o.trap = nullptr;
    EXPECT_THROW(cutoff_indicators(tr, 0.01, o), Error);
}

TEST(IncomingMap, IncomingNodeTranslates)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {0.3, 0, 0}}};
    Vec3 nu = normalized(Vec3{-1, 0.4, 0}), v{1.5, 0.2, 0};
    CollisionParams p{{0.5}, {nu}, {v}, {}};
    auto tr = build_bbf(RadialPotential::smooth_junction(0.1, 20), {1, {1}}, SignSequence::parse("-"), z, p, 1.0);
    auto q = incoming_map(tr, 1, p);
    EXPECT_EQ(norm(q.nus[0] - nu), 0);
    EXPECT_EQ(norm(q.velocities[0] - (v - z[0].v)), 0);
    EXPECT_EQ(q.form(0), NodeForm::incoming_relative);
}

TEST(IncomingMap, RebuildReproducesTrajectory)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    StreamRng g(26, 0, 0);
    TreeGraph tree{2, {1, 2, 3}};
    auto signs = SignSequence::parse("+-+");
    auto pp = random_parameter_point(pot, tree, signs, 1.0, g);
    auto tr = build_bbf(pot, tree, signs, pp.z_j, pp.params, 1.0);
    auto q = pp.params;
    for (int r = 1; r <= 3; ++r)
        q = incoming_map(tr, r, q);
    auto tr2 = build_bbf(pot, tree, signs, pp.z_j, q, 1.0);
    const auto &a = tr.state_at_zero(), &b = tr2.state_at_zero();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_LT(norm(a[i].x - b[i].x), 1e-9);
        EXPECT_LT(norm(a[i].v - b[i].v), 1e-9);
    }
    EXPECT_THROW(incoming_map(tr, 1, q), Error);
}

TEST(IncomingMap, MeasurePreserving)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    StreamRng g(27, 0, 0);
    std::vector<PhasePoint> z{{{0, 0, 0}, {0.2, -0.1, 0.3}}};
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        int sigma = trial % 2 ? 1 : -1;
        Vec3 v{g.normal(), g.normal(), g.normal()}, nu = g.unit_vector();
        Vec3 V = v - z[0].v;
        // stay away from grazing so finite differences do not cross the half-space edge
        if (sigma * dot(nu, V) < 0.2 * norm(V))
            nu = -nu;
        if (sigma * dot(nu, V) < 0.2 * norm(V))
            continue;
        auto f = [&](const Vec3& n, const Vec3& w) {
            CollisionParams p{{0.5}, {n}, {w}, {}};
            auto tr = build_bbf(pot, {1, {1}}, SignSequence{{sigma}}, z, p, 1.0);
            auto q = incoming_map(tr, 1, p);
            return PairState{q.nus[0], q.velocities[0]};
        };
        EXPECT_NEAR(std::abs(pair_map_jacobian(f, nu, v, 1e-4)), 1.0, 1e-6) << trial;
        ++checked;
    }
    EXPECT_GT(checked, 50);
}

TEST(Ibf, ZeroPotentialOffsetsOnly)
{
    auto pot = RadialPotential::zero();
    StreamRng g(28, 0, 0);
    TreeGraph tree{2, {1, 3, 2}};
    auto signs = SignSequence::parse("-+-");
    for (int trial = 0; trial < 10; ++trial) {
        auto pp = random_parameter_point(pot, tree, signs, 1.0, g);
        double eps = 1e-3;
        try {
            auto cmp = compare_flows(pot, tree, signs, pp.z_j, pp.params, 1.0, eps);
            EXPECT_LE(cmp.max_position_gap, 3 * eps * (1 + 1e-9));
            EXPECT_EQ(cmp.velocity_gap_at_zero, 0.0);
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::rejected);
        }
    }
}

TEST(Ibf, CreatedAtOffsetPosition)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {0, 0, 0}}};
    Vec3 nu{-1, 0, 0};
    CollisionParams p{{0.5}, {nu}, {{1, 0, 0}}, {}};
    auto tr = build_ibf(RadialPotential::zero(), {1, {1}}, SignSequence::parse("-"), z, p, 1.0, 1e-2);
    EXPECT_NEAR(norm(tr.at(1, 0.5).x - Vec3{-1e-2, 0, 0}), 0, 1e-15);
}

TEST(Ibf, ThirdParticleTooCloseRejected)
{
    std::vector<PhasePoint> z{{{0, 0, 0}, {0, 0, 0}}, {{-0.015, 0, 0}, {0, 0, 0}}};
    CollisionParams p{{0.5}, {{-1, 0, 0}}, {{1, 0, 0}}, {}};
    try {
        build_ibf(RadialPotential::zero(), {2, {1}}, SignSequence::parse("-"), z, p, 1.0, 1e-2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::rejected);
    }
}

TEST(Ibf, OutgoingNodeRecoversBbfVelocities)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    std::vector<PhasePoint> z{{{0, 0, 0}, {0.2, 0.1, 0}}};
    Vec3 v{2.2, 0.6, -0.3}, nu = normalized(Vec3{1, 0.7, 0.2});
    CollisionParams p{{0.5}, {nu}, {v}, {}};
    for (auto mode : {IbfMode::exact_pair, IbfMode::full_dynamics}) {
        IbfOptions o;
        o.mode = mode;
        auto cmp = compare_flows(pot, {1, {1}}, SignSequence::parse("+"), z, p, 1.0, 1e-3, o);
        EXPECT_FALSE(cmp.ibf_recollided);
        EXPECT_LE(cmp.ibf_energy_drift, 1e-8);
        if (mode == IbfMode::exact_pair)
            EXPECT_EQ(cmp.velocity_gap_at_zero, 0.0);
        else
            EXPECT_LT(cmp.velocity_gap_at_zero, 1e-6);
        EXPECT_LT(cmp.max_position_gap, 1e-2);
    }
}

TEST(Ibf, EnergyConservedAlongFlow)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    StreamRng g(29, 0, 0);
    TreeGraph tree{2, {1, 2}};
    auto signs = SignSequence::parse("++");
    IbfOptions o;
    o.mode = IbfMode::full_dynamics;
    int built = 0;
    for (int trial = 0; trial < 10; ++trial) {
        auto pp = random_parameter_point(pot, tree, signs, 0.5, g, 0.5);
        try {
            auto tr = build_ibf(pot, tree, signs, pp.z_j, pp.params, 0.5, 1e-2, o);
            EXPECT_LE(tr.energy_drift, 1e-8);
            ++built;
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::rejected);
        }
    }
    EXPECT_GT(built, 5);
}

TEST(Ibf, AdmissibleParametersMatchBbfAcrossEpsilon)
{
    auto pot = RadialPotential::smooth_junction(0.1, 20);
    StreamRng g(30, 0, 0);
    TreeGraph tree{2, {1, 3}};
    auto signs = SignSequence::parse("+-");
    int used = 0;
    for (int trial = 0; trial < 200 && used < 5; ++trial) {
        auto pp = random_parameter_point(pot, tree, signs, 1.0, g);
        auto bbf = build_bbf(pot, tree, signs, pp.z_j, pp.params, 1.0);
        if (!flow_comparison_admissible(bbf, 1e-4))
            continue;
        ++used;
        for (double eps : {1e-2, 1e-3, 1e-4}) {
            if (!flow_comparison_admissible(bbf, eps))
                continue;
            auto cmp = compare_flows(pot, tree, signs, pp.z_j, pp.params, 1.0, eps);
            EXPECT_EQ(cmp.velocity_gap_at_zero, 0.0) << eps;
            EXPECT_FALSE(cmp.ibf_recollided);
        }
    }
    EXPECT_GT(used, 0);
}
