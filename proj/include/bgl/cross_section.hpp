#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <functional>
#include <numbers>
#include <optional>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/toms748_solve.hpp>

#include "errors.hpp"
#include "potentials.hpp"
#include "two_body.hpp"
#include "vec3.hpp"

namespace bgl {

enum class BranchDirection { increasing, decreasing, constant };

inline const char* to_string(BranchDirection d)
{
    switch (d) {
    case BranchDirection::increasing: return "increasing";
    case BranchDirection::decreasing: return "decreasing";
    case BranchDirection::constant: return "constant";
    }
    return "unknown";
}

/// Open ρ-interval on which Θ is strictly monotone (or identically constant).
struct MonotonicityBranch {
    double rho_lo = 0, rho_hi = 1;
    double theta_at_lo = 0, theta_at_hi = 0;
    BranchDirection direction = BranchDirection::increasing;

    double theta_min() const { return std::min(theta_at_lo, theta_at_hi); }
    double theta_max() const { return std::max(theta_at_lo, theta_at_hi); }
};

struct ExclusionInterval {
    double rho_lo, rho_hi;
};

struct BranchDecomposition {
    double speed = 0;
    std::vector<MonotonicityBranch> branches;
    std::vector<ExclusionInterval> exclusions;
};

namespace detail {

inline double theta_endpoint(const RadialPotential& pot, double rho, double speed)
{
    if (rho >= 1.0)
        return std::numbers::pi / 2;
    return theta_of_rho(pot, rho, speed);
}

inline int sign_of(double x) { return (x > 0) - (x < 0); }

} // namespace detail

/**
 * Splits (0,1) into monotonicity branches of ρ ↦ Θ. Folds are sign changes of
 * the analytic dΘ/dρ on a uniform grid, refined by bisection to 1e-10 in ρ.
 * Grid points where the quadrature path reports trapping become exclusions.
 */
inline BranchDecomposition branch_decompose(const RadialPotential& pot, double speed,
                                            std::size_t grid_size = 256)
{
    if (grid_size < 64)
        throw Error(ErrorKind::precondition, "branch_decompose needs grid_size >= 64");
    BranchDecomposition out;
    out.speed = speed;
    const auto n = grid_size;
    std::vector<double> rho(n), d(n);
    std::vector<bool> bad(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        rho[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        try {
            d[i] = dtheta_drho(pot, rho[i], speed);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::trapped_or_singular)
                throw;
            bad[i] = true;
        }
    }
    bool all_flat = true;
    for (std::size_t i = 0; i < n; ++i)
        if (!bad[i] && std::abs(d[i]) > 1e-13)
            all_flat = false;
    if (all_flat && std::none_of(bad.begin(), bad.end(), [](bool b) { return b; })) {
        double th = theta_of_rho(pot, 0.5, speed);
        out.branches.push_back({0.0, 1.0, th, th, BranchDirection::constant});
        return out;
    }

    auto refine = [&](double a, double b, int sa) {
        for (int it = 0; it < 200 && b - a > 1e-10; ++it) {
            double m = 0.5 * (a + b);
            (detail::sign_of(dtheta_drho(pot, m, speed)) == sa ? a : b) = m;
        }
        return 0.5 * (a + b);
    };

    // walk the grid collecting boundaries
    double start = 0.0;
    int cur_sign = 0;
    bool in_bad = false;
    auto close_branch = [&](double end) {
        if (end > start && cur_sign != 0) {
            MonotonicityBranch br;
            br.rho_lo = start;
            br.rho_hi = end;
            br.direction = cur_sign > 0 ? BranchDirection::increasing : BranchDirection::decreasing;
            br.theta_at_lo = detail::theta_endpoint(pot, start, speed);
            br.theta_at_hi = detail::theta_endpoint(pot, end, speed);
            out.branches.push_back(br);
        }
    };
    for (std::size_t i = 0; i < n; ++i) {
        if (bad[i]) {
            if (!in_bad) {
                double lo = i > 0 ? rho[i - 1] : 0.0;
                close_branch(lo);
                out.exclusions.push_back({lo, 1.0});
                in_bad = true;
                cur_sign = 0;
            }
            continue;
        }
        if (in_bad) {
            out.exclusions.back().rho_hi = rho[i];
            start = rho[i];
            in_bad = false;
        }
        int s = detail::sign_of(d[i]);
        if (s == 0)
            continue; // underflowed derivative, keep the running direction
        if (cur_sign == 0) {
            cur_sign = s;
        } else if (s != cur_sign) {
            double fold = refine(rho[i - 1], rho[i], cur_sign);
            close_branch(fold);
            start = fold;
            cur_sign = s;
        }
    }
    if (!in_bad)
        close_branch(1.0);
    return out;
}

/// ρ on the branch with Θ(ρ) = θ, by a bracketed TOMS 748 solve.
inline double invert_branch(const RadialPotential& pot, double speed, const MonotonicityBranch& br,
                            double theta)
{
    if (br.direction == BranchDirection::constant)
        throw Error(ErrorKind::no_preimage, "constant branch has no inverse");
    if (theta < br.theta_min() || theta > br.theta_max())
        throw Error(ErrorKind::no_preimage, "theta outside branch image");
    auto f = [&](double r) {
        return (r >= 1.0 ? std::numbers::pi / 2 : theta_of_rho(pot, r, speed)) - theta;
    };
    double a = br.rho_lo, b = br.rho_hi;
    double fa = br.theta_at_lo - theta, fb = br.theta_at_hi - theta;
    if (fa == 0)
        return a;
    if (fb == 0)
        return b;
    boost::uintmax_t iters = 200;
    auto r = boost::math::tools::toms748_solve(f, a, b, fa, fb,
                                               boost::math::tools::eps_tolerance<double>(46), iters);
    return 0.5 * (r.first + r.second);
}

struct BranchContribution {
    std::size_t branch = 0;
    double rho = 0;
    double dtheta_drho = 0;
    double sigma = 0;
    bool branch_edge = false;
};

struct CrossSectionSample {
    double theta = 0;
    double sigma = 0; ///< sum over branches
    std::vector<BranchContribution> contributions;
    std::size_t branch_count = 0;
    bool branch_edge = false;
};

/// σ_Φ(Θ) = Σ_branches ρ/(2|sin 2Θ|) |dρ/dΘ|.
inline CrossSectionSample sigma_at(const RadialPotential& pot, double speed, double theta,
                                   const BranchDecomposition& dec)
{
    CrossSectionSample s;
    s.theta = theta;
    double s2 = std::abs(std::sin(2.0 * theta));
    for (std::size_t b = 0; b < dec.branches.size(); ++b) {
        const auto& br = dec.branches[b];
        if (br.direction == BranchDirection::constant)
            continue;
        if (theta < br.theta_min() || theta > br.theta_max())
            continue;
        BranchContribution c;
        c.branch = b;
        c.rho = invert_branch(pot, speed, br, theta);
        c.dtheta_drho = (c.rho > 0 && c.rho < 1) ? dtheta_drho(pot, c.rho, speed) : 0.0;
        // folds are only located to ~1e-10 in ρ, so an interior endpoint counts as an edge
        bool at_fold = (c.rho == br.rho_lo && br.rho_lo > 0) || (c.rho == br.rho_hi && br.rho_hi < 1);
        if (at_fold || std::abs(c.dtheta_drho) < 1e-12) {
            c.branch_edge = true;
            s.branch_edge = true;
            c.sigma = std::numeric_limits<double>::infinity();
        } else {
            c.sigma = c.rho / (2.0 * s2) / std::abs(c.dtheta_drho);
        }
        s.sigma += c.sigma;
        s.contributions.push_back(c);
    }
    s.branch_count = s.contributions.size();
    if (s.contributions.empty())
        throw Error(ErrorKind::no_preimage, "theta outside every branch image");
    return s;
}

/// Convenience overload that decomposes first.
inline CrossSectionSample sigma_at(const RadialPotential& pot, double speed, double theta)
{
    return sigma_at(pot, speed, theta, branch_decompose(pot, speed));
}

/// Kernel per branch: B = |V| ρ |dρ/dΘ| / sin Θ (so that B dω = |V·ν| dν).
inline double kernel_from_sample(const CrossSectionSample& s, double speed)
{
    return 4.0 * speed * std::abs(std::cos(s.theta)) * s.sigma;
}

struct KernelMass {
    double integrated = 0; ///< ∫ B dω over the non-excluded angles
    double excluded = 0;   ///< exact ν-measure of the excluded neighbourhoods
    double total() const { return integrated + excluded; }
};

namespace detail {

/// Non-excluded Θ window of a branch and the matching ρ endpoints.
struct BranchWindow {
    double theta_a, theta_b, rho_a, rho_b;
    bool empty;
};

inline BranchWindow branch_window(const RadialPotential& pot, double speed,
                                  const MonotonicityBranch& br, double cutoff)
{
    BranchWindow w{br.theta_min() + cutoff, br.theta_max() - cutoff, 0, 0, false};
    if (!(w.theta_b > w.theta_a))
        return {0, 0, 0, 0, true};
    w.rho_a = invert_branch(pot, speed, br, w.theta_a);
    w.rho_b = invert_branch(pot, speed, br, w.theta_b);
    if (w.rho_a > w.rho_b)
        std::swap(w.rho_a, w.rho_b);
    return w;
}

} // namespace detail

/**
 * ∫_{S²} B(ω,V) dω computed in the Θ variable on every branch, with Θ-windows
 * of width `cutoff` removed at branch ends. The removed part is reported as
 * its exact ν-measure π|V|(ρ_b² − ρ_a²).
 */
inline KernelMass kernel_mass(const RadialPotential& pot, double speed,
                              const BranchDecomposition& dec, double cutoff = 1e-4,
                              double tol = 1e-10)
{
    KernelMass m;
    const double pi = std::numbers::pi;
    for (const auto& ex : dec.exclusions)
        m.excluded += pi * speed * (ex.rho_hi * ex.rho_hi - ex.rho_lo * ex.rho_lo);
    for (const auto& br : dec.branches) {
        if (br.direction == BranchDirection::constant) {
            // a point mass in Θ: the whole ν-measure lands on one angle
            m.integrated += pi * speed * (br.rho_hi * br.rho_hi - br.rho_lo * br.rho_lo);
            continue;
        }
        auto w = detail::branch_window(pot, speed, br, cutoff);
        if (w.empty) {
            m.excluded += pi * speed * (br.rho_hi * br.rho_hi - br.rho_lo * br.rho_lo);
            continue;
        }
        m.excluded += pi * speed
                    * (w.rho_a * w.rho_a - br.rho_lo * br.rho_lo + br.rho_hi * br.rho_hi
                       - w.rho_b * w.rho_b);
        auto f = [&](double th) {
            double r = invert_branch(pot, speed, br, th);
            return r / std::abs(dtheta_drho(pot, r, speed));
        };
        double err = 0;
        double I = boost::math::quadrature::gauss_kronrod<double, 15>::integrate(
            f, w.theta_a, w.theta_b, 12, tol, &err);
        // B sinΘ dΘ dψ = |V| ρ |dρ/dΘ| dΘ dψ
        m.integrated += 2.0 * pi * speed * I;
    }
    return m;
}

struct ConsistencyResult {
    double lhs = 0, rhs = 0, abs_diff = 0;
    double excluded_measure = 0;
};

struct ConsistencyOptions {
    double angular_cutoff = 1e-4;
    std::size_t psi_points = 64;
    double tol = 1e-10;
};

using PairTestFunction = std::function<double(const Vec3& v_prime, const Vec3& v1_prime)>;

/**
 * Compares ∫_{S²₊} dν (v−v₁)·ν g(v′,v₁′) (ν-form) with ∫ dω B(ω,V) g(v′,v₁′)
 * (ω-form). Both sides are restricted to the same non-excluded set: on the
 * ν side this is the preimage in ρ of the retained Θ-windows.
 */
inline ConsistencyResult nu_omega_consistency(const RadialPotential& pot, const Vec3& v,
                                              const Vec3& v1, const PairTestFunction& g,
                                              const ConsistencyOptions& opt = {})
{
    const Vec3 V = v1 - v;
    const double speed = norm(V);
    if (!(speed > 0))
        throw Error(ErrorKind::domain, "equal velocities");
    const Vec3 u = V / speed;
    const Vec3 e1 = any_orthogonal(u), e2 = cross(u, e1);
    const double pi = std::numbers::pi;
    const std::size_t M = opt.psi_points;

    auto psi_average = [&](double theta) {
        double acc = 0;
        for (std::size_t k = 0; k < M; ++k) {
            double psi = 2.0 * pi * static_cast<double>(k) / static_cast<double>(M);
            Vec3 e = std::cos(psi) * e1 + std::sin(psi) * e2;
            Vec3 w = -std::cos(theta) * u + std::sin(theta) * e;
            auto [vp, v1p] = apply_collision_rule(v, v1, w);
            acc += g(vp, v1p);
        }
        return 2.0 * pi * acc / static_cast<double>(M);
    };

    ConsistencyResult res;
    BranchDecomposition dec = branch_decompose(pot, speed);
    for (const auto& ex : dec.exclusions)
        res.excluded_measure += pi * speed * (ex.rho_hi * ex.rho_hi - ex.rho_lo * ex.rho_lo);

    using GK = boost::math::quadrature::gauss_kronrod<double, 15>;
    for (const auto& br : dec.branches) {
        if (br.direction == BranchDirection::constant) {
            double th = br.theta_at_lo;
            auto f = [&](double r) { return speed * r * psi_average(th); };
            double I = GK::integrate(f, br.rho_lo, br.rho_hi, 8, opt.tol);
            res.lhs += I;
            res.rhs += I;
            continue;
        }
        auto w = detail::branch_window(pot, speed, br, opt.angular_cutoff);
        if (w.empty) {
            res.excluded_measure += pi * speed * (br.rho_hi * br.rho_hi - br.rho_lo * br.rho_lo);
            continue;
        }
        res.excluded_measure += pi * speed
                              * (w.rho_a * w.rho_a - br.rho_lo * br.rho_lo
                                 + br.rho_hi * br.rho_hi - w.rho_b * w.rho_b);
        // ν-form: |V·ν| dν = |V| ρ dρ dψ
        auto fl = [&](double r) { return speed * r * psi_average(theta_of_rho(pot, r, speed)); };
        res.lhs += GK::integrate(fl, w.rho_a, w.rho_b, 12, opt.tol);
        // ω-form: B dω = |V| ρ |dρ/dΘ| dΘ dψ
        auto fr = [&](double th) {
            double r = invert_branch(pot, speed, br, th);
            return speed * r / std::abs(dtheta_drho(pot, r, speed)) * psi_average(th);
        };
        res.rhs += GK::integrate(fr, w.theta_a, w.theta_b, 12, opt.tol);
    }
    res.abs_diff = std::abs(res.lhs - res.rhs);
    return res;
}

} // namespace bgl
