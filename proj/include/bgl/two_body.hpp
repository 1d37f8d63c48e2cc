#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>
#include <boost/math/tools/toms748_solve.hpp>

#include "errors.hpp"
#include "potentials.hpp"
#include "vec3.hpp"

/**
 * Reduced two-body problem in microscopic units.
 *
 * The relative coordinate q = q₁ − q₂ obeys q̈ = −2∇Φ(q), so with U = 2Φ
 *
 *     V²/2 = ṙ²/2 + L²/(2r²) + U(r),   L = ρ|V|.
 *
 * The deflection Θ and the quadrature formulas below are the classical
 * unit-mass ones with Φ replaced by U. A unit-mass particle with energy
 * E₀ = v²/2 in the field Φ has the same orbit as relative speed |V| = 2√E₀;
 * see speed_from_e0().
 */
namespace bgl {

struct QuadratureOptions {
    double rel_tol = 1e-12;
    unsigned max_depth = 10;
    double abs_floor = 1e-16; ///< panels with ∫|f| below this are not refined
};

/// Relative speed with the same orbit as a unit-mass particle of energy E₀.
inline double speed_from_e0(double e0) { return 2.0 * std::sqrt(e0); }
inline double e0_from_speed(double speed) { return 0.25 * speed * speed; }

namespace detail {

template <class F>
double gk_integrate(F&& f, double a, double b, const QuadratureOptions& q)
{
    if (!(b > a))
        return 0.0;
    using GK = boost::math::quadrature::gauss_kronrod<double, 31>;
    double err = 0, l1 = 0;
    double coarse = GK::integrate(f, a, b, 0, q.rel_tol, &err, &l1);
    // relative refinement would only chase roundoff on a negligible integrand
    if (l1 <= q.abs_floor || q.max_depth == 0)
        return coarse;
    return GK::integrate(f, a, b, q.max_depth, q.rel_tol, &err);
}

/// Sum of GK integrals over [a,b] split at the given interior points.
template <class F>
double gk_integrate_split(F&& f, double a, double b, std::vector<double> cuts,
                          const QuadratureOptions& q)
{
    std::sort(cuts.begin(), cuts.end());
    double sum = 0, lo = a;
    for (double c : cuts) {
        if (c > lo && c < b) {
            sum += gk_integrate(f, lo, c, q);
            lo = c;
        }
    }
    return sum + gk_integrate(f, lo, b, q);
}

inline double radial_energy(const RadialPotential& pot, double L2, double V2, double x)
{
    return 0.5 * V2 - 0.5 * L2 / (x * x) - 2.0 * pot.branch(x).phi;
}

inline double radial_energy_slope(const RadialPotential& pot, double L2, double x)
{
    return L2 / (x * x * x) - 2.0 * pot.branch(x).dphi;
}

} // namespace detail

struct TurningPoint {
    double r_star = 1.0;
    bool tangency = false;
};

/**
 * Largest root of V²/2 − L²/(2x²) − U(x) on (0,1]. For a monotone repulsive
 * potential the radial energy is increasing and the root is bracketed by
 * halving; otherwise a downward scan from x = 1 finds the first sign change.
 * r* = 0 is returned when L = 0 and the potential never stops the motion.
 */
inline TurningPoint turning_point(const RadialPotential& pot, double L, double speed)
{
    if (!(speed > 0) || !(L >= 0))
        throw Error(ErrorKind::domain, "turning point needs speed > 0 and L >= 0");
    double rho = L / speed;
    if (rho > 1.0 + 1e-14)
        throw Error(ErrorKind::no_interaction, "impact parameter >= 1");
    if (rho >= 1.0)
        return {1.0, false};
    double L2 = L * L, V2 = speed * speed;
    auto E = [&](double x) { return detail::radial_energy(pot, L2, V2, x); };

    double lo = 0, hi = 1.0;
    bool found = false;
    if (pot.flags().repulsive_monotone) {
        double x = 0.5;
        while (x > 1e-300) {
            if (E(x) <= 0) {
                lo = x;
                found = true;
                break;
            }
            hi = x;
            x *= 0.5;
        }
    } else {
        constexpr int n = 4096;
        double prev = 1.0;
        for (int i = 1; i <= n && !found; ++i) {
            double x = 1.0 - static_cast<double>(i) / n;
            if (i == n)
                x = 0.5 / n;
            if (E(x) <= 0) {
                lo = x;
                hi = prev;
                found = true;
            }
            prev = x;
        }
        for (double x = prev * 0.5; !found && x > 1e-300; x *= 0.5) {
            if (E(x) <= 0) {
                lo = x;
                hi = 2.0 * x;
                found = true;
            }
        }
    }
    if (!found) {
        if (L == 0)
            return {0.0, false};
        throw Error(ErrorKind::trapped_or_singular, "no turning point located");
    }
    double r;
    double flo = E(lo), fhi = E(hi);
    if (flo == 0) {
        r = lo;
    } else {
        boost::uintmax_t iters = 200;
        auto res = boost::math::tools::toms748_solve(E, lo, hi, flo, fhi,
                                                     boost::math::tools::eps_tolerance<double>(52),
                                                     iters);
        // the positive side is the physical one
        r = E(res.second) >= 0 ? res.second : res.first;
    }
    double slope = detail::radial_energy_slope(pot, L2, r);
    bool tangency = std::abs(slope) * r <= 1e-9 * V2;
    return {r, tangency};
}

namespace detail {

/**
 * Workspace for the regularized deflection integral. Variables follow the
 * substitution 2U(ρ/y)/V² + y² = sin²φ with y ∈ [ρ, ρ/r*].
 */
struct DeflectionIntegrand {
    const RadialPotential& pot;
    double rho, V2, r_star, ylo, yhi;

    DeflectionIntegrand(const RadialPotential& p, double rho_, double speed, double rs)
      : pot(p), rho(rho_), V2(speed * speed), r_star(rs), ylo(rho_), yhi(rho_ / rs) {}

    double g(double y) const { return 4.0 * pot.branch(rho / y).phi / V2 + y * y; }

    /// D = y − ρU′(ρ/y)/(V²y²) = g′(y)/2.
    double D(double y) const
    {
        return y - 2.0 * rho * pot.branch(rho / y).dphi / (V2 * y * y);
    }

    /// y(φ) by bracketed Newton; g is increasing on the bracket.
    double y_of(double s2) const
    {
        if (s2 <= ylo * ylo)
            return ylo;
        if (s2 >= 1.0)
            return yhi;
        auto f = [&](double y) {
            auto pv = pot.branch(rho / y);
            return std::make_pair(4.0 * pv.phi / V2 + y * y - s2,
                                  2.0 * y - 4.0 * rho * pv.dphi / (V2 * y * y));
        };
        double guess = std::clamp(std::sqrt(s2), ylo, yhi);
        boost::uintmax_t iters = 100;
        return boost::math::tools::newton_raphson_iterate(f, guess, ylo, yhi, 50, iters);
    }

    void require_monotone() const
    {
        constexpr int n = 64;
        for (int i = 0; i <= n; ++i) {
            double y = ylo + (yhi - ylo) * i / n;
            if (y <= 0)
                continue;
            if (!(D(y) > 0))
                throw Error(ErrorKind::trapped_or_singular,
                            "non-monotone substitution; use the orbit oracle");
        }
    }

    /// φ values where the integrand has kinks from derivative jumps.
    std::vector<double> phi_cuts() const
    {
        std::vector<double> cuts;
        for (double rj : pot.jump_radii()) {
            if (rj > r_star && rj < 1.0) {
                double s2 = g(rho / rj);
                if (s2 > 0 && s2 < 1)
                    cuts.push_back(std::asin(std::sqrt(s2)));
            }
        }
        return cuts;
    }
};

} // namespace detail

/**
 * Θ − π/2. The integrand is written as (sin φ − D)/D with the difference
 * expanded, so the deviation keeps relative accuracy when the potential is
 * tiny near the range.
 */
inline double theta_deviation(const RadialPotential& pot, double rho, double speed,
                              const QuadratureOptions& q = {})
{
    if (!(speed > 0) || !(rho >= 0) || rho > 1.0)
        throw Error(ErrorKind::domain, "theta needs speed > 0 and rho in [0,1]");
    if (rho == 1.0)
        return 0.0;
    if (rho == 0.0) {
        TurningPoint tp = turning_point(pot, 0.0, speed);
        return tp.r_star > 0 ? -std::numbers::pi / 2 : 0.0;
    }
    TurningPoint tp = turning_point(pot, rho * speed, speed);
    if (tp.tangency)
        throw Error(ErrorKind::trapped_or_singular, "tangent turning point");
    detail::DeflectionIntegrand w(pot, rho, speed, tp.r_star);
    w.require_monotone();
    double phi0 = std::asin(rho);
    auto f = [&](double phi) {
        double s = std::sin(phi);
        double y = w.y_of(s * s);
        auto pv = pot.branch(rho / y);
        double a = 4.0 * pv.phi / w.V2;
        double D = y - 2.0 * rho * pv.dphi / (w.V2 * y * y);
        if (!(D > 0))
            throw Error(ErrorKind::trapped_or_singular, "vanishing denominator");
        return (a / (s + y) + 2.0 * rho * pv.dphi / (w.V2 * y * y)) / D;
    };
    return detail::gk_integrate_split(f, phi0, std::numbers::pi / 2, w.phi_cuts(), q);
}

/// Deflection Θ(ρ, |V|) for a single-turn orbit.
inline double theta_of_rho(const RadialPotential& pot, double rho, double speed,
                           const QuadratureOptions& q = {})
{
    return std::numbers::pi / 2 + theta_deviation(pot, rho, speed, q);
}

/// dΘ/dρ, including the boundary term present when Φ′(1⁻) ≠ 0.
inline double dtheta_drho(const RadialPotential& pot, double rho, double speed,
                          const QuadratureOptions& q = {})
{
    if (!(speed > 0) || !(rho > 0 && rho < 1))
        throw Error(ErrorKind::domain, "dtheta_drho needs speed > 0 and 0 < rho < 1");
    TurningPoint tp = turning_point(pot, rho * speed, speed);
    if (tp.tangency)
        throw Error(ErrorKind::trapped_or_singular, "tangent turning point");
    detail::DeflectionIntegrand w(pot, rho, speed, tp.r_star);
    w.require_monotone();
    double V2 = w.V2;
    double U1 = 2.0 * pot.dphi_edge();
    double boundary = 0.0;
    if (U1 != 0.0)
        boundary = (1.0 - 1.0 / (1.0 - U1 / (V2 * rho * rho))) / std::sqrt(1.0 - rho * rho);
    auto f = [&](double phi) {
        double s = std::sin(phi);
        double y = w.y_of(s * s);
        auto pv = pot.branch(rho / y);
        double U_1 = 2.0 * pv.dphi, U_2 = 2.0 * pv.d2phi;
        double y2 = y * y;
        double D = y - rho * U_1 / (V2 * y2);
        if (!(D > 0))
            throw Error(ErrorKind::trapped_or_singular, "vanishing denominator");
        double bracket = rho * U_2 / (V2 * y2) + 2.0 * U_1 / (V2 * y)
                       + rho * U_1 * U_1 / (V2 * V2 * y2 * y2);
        return s * bracket / (D * D * D);
    };
    return boundary
         + detail::gk_integrate_split(f, std::asin(rho), std::numbers::pi / 2, w.phi_cuts(), q);
}

/**
 * Time spent with r < 1: τ* = √2 ∫_{r*}^1 dr E(r)^{-1/2}, with r = r* + u²
 * removing the inverse square root at the turning point.
 */
inline double scattering_time(const RadialPotential& pot, double rho, double speed,
                              const QuadratureOptions& q = {})
{
    if (!(speed > 0) || !(rho >= 0) || rho > 1.0)
        throw Error(ErrorKind::domain, "scattering_time needs speed > 0 and rho in [0,1]");
    if (rho == 1.0)
        return 0.0;
    double L = rho * speed, L2 = L * L, V2 = speed * speed;
    TurningPoint tp = turning_point(pot, L, speed);
    if (tp.tangency)
        throw Error(ErrorKind::trapped_or_singular, "tangent turning point");
    double rs = tp.r_star;
    double E0 = rs > 0 ? detail::radial_energy(pot, L2, V2, rs) : 0.5 * V2;
    double slope = rs > 0 ? detail::radial_energy_slope(pot, L2, rs) : 0.0;
    auto f = [&](double u) {
        double u2 = u * u;
        double r = rs + u2;
        if (rs == 0) {
            // central pass through the origin of a bounded potential
            double e = detail::radial_energy(pot, 0.0, V2, std::max(r, 1e-300));
            if (!(e > 0))
                throw Error(ErrorKind::trapped_or_singular, "radial energy vanishes");
            return 2.0 * u / std::sqrt(e);
        }
        double ratio = u2 < 1e-10 * rs ? slope
                                       : (detail::radial_energy(pot, L2, V2, r) - E0) / u2;
        if (!(ratio > 0))
            throw Error(ErrorKind::trapped_or_singular, "radial energy vanishes");
        return 2.0 / std::sqrt(ratio);
    };
    std::vector<double> cuts;
    for (double rj : pot.jump_radii())
        if (rj > rs && rj < 1.0)
            cuts.push_back(std::sqrt(rj - rs));
    return std::sqrt(2.0) * detail::gk_integrate_split(f, 0.0, std::sqrt(1.0 - rs), cuts, q);
}

/// Impact parameter ρ = |ν ∧ V|/|V| for a unit vector ν.
inline double impact_parameter(const Vec3& nu, const Vec3& V)
{
    return std::min(1.0, norm(cross(nu, V)) / norm(V));
}

struct ScatteringResult {
    double rho = 0, speed = 0;
    double r_star = 1;
    double theta = std::numbers::pi / 2;
    double chi = 0;
    Vec3 omega;
    double tau_star = 0;
    int turns = 0;
};

inline double wrap_angle(double a)
{
    a = std::remainder(a, 2.0 * std::numbers::pi);
    return a <= -std::numbers::pi ? a + 2.0 * std::numbers::pi : a;
}

/**
 * ω = −cos Θ û + sin Θ ν̂⊥, where û is the incoming direction of the relative
 * velocity and ν̂⊥ the unit component of ν orthogonal to it. Outgoing pairs
 * (V·ν > 0) are handled through time reversal, i.e. with −V.
 */
inline Vec3 omega_from_theta(const Vec3& nu, const Vec3& V, double theta)
{
    Vec3 u = normalized(dot(V, nu) > 0 ? -V : V);
    Vec3 perp = nu - dot(nu, u) * u;
    double pn = norm(perp);
    Vec3 e = pn > 1e-14 ? perp / pn : (std::abs(std::cos(theta)) < 1 ? any_orthogonal(u) : -u);
    return normalized(-std::cos(theta) * u + std::sin(theta) * e);
}

/// Full solve for one incoming or outgoing pair (ν, V).
inline ScatteringResult scatter(const RadialPotential& pot, const Vec3& nu, const Vec3& V,
                                bool with_time = true, const QuadratureOptions& q = {})
{
    double speed = norm(V);
    if (!(speed > 0))
        throw Error(ErrorKind::domain, "zero relative velocity");
    ScatteringResult res;
    res.speed = speed;
    res.rho = impact_parameter(nu, V);
    res.r_star = res.rho >= 1.0 ? 1.0 : turning_point(pot, res.rho * speed, speed).r_star;
    res.theta = theta_of_rho(pot, res.rho, speed, q);
    res.chi = wrap_angle(std::numbers::pi - 2.0 * res.theta);
    res.omega = omega_from_theta(nu, V, res.theta);
    res.turns = static_cast<int>(std::floor(res.theta / std::numbers::pi));
    if (with_time)
        res.tau_star = scattering_time(pot, res.rho, speed, q);
    return res;
}

inline Vec3 scattering_vector(const RadialPotential& pot, const Vec3& nu, const Vec3& V,
                              const QuadratureOptions& q = {})
{
    double speed = norm(V);
    if (!(speed > 0))
        throw Error(ErrorKind::domain, "zero relative velocity");
    return omega_from_theta(nu, V, theta_of_rho(pot, impact_parameter(nu, V), speed, q));
}

/// v′ = v − ω[ω·(v−v₁)], v₁′ = v₁ + ω[ω·(v−v₁)].
inline std::pair<Vec3, Vec3> apply_collision_rule(const Vec3& v, const Vec3& v1,
                                                  const Vec3& omega)
{
    Vec3 dv = omega * dot(omega, v - v1);
    return {v - dv, v1 + dv};
}

struct PairState {
    Vec3 nu, V;
};

/// ℐ(ν, V) = (−ν + 2ω(ω·ν), V − 2ω(ω·V)) for an incoming pair.
inline PairState scattering_operator(const RadialPotential& pot, const Vec3& nu, const Vec3& V,
                                     const QuadratureOptions& q = {})
{
    if (dot(V, nu) > 0)
        throw Error(ErrorKind::precondition, "scattering operator needs V.nu <= 0");
    Vec3 w = scattering_vector(pot, nu, V, q);
    return {-nu + 2.0 * w * dot(w, nu), V - 2.0 * w * dot(w, V)};
}

/// Inverse of ℐ by time reversal: ℐ(ν′, −V′) = (ν, −V).
inline PairState inverse_scattering_operator(const RadialPotential& pot, const Vec3& nu_out,
                                             const Vec3& V_out, const QuadratureOptions& q = {})
{
    if (dot(V_out, nu_out) < 0)
        throw Error(ErrorKind::precondition, "inverse operator needs V'.nu' >= 0");
    PairState s = scattering_operator(pot, nu_out, -V_out, q);
    return {s.nu, -s.V};
}

namespace detail {

/// Determinant of a small dense matrix by partial pivoting.
template <std::size_t N>
double determinant(std::array<std::array<double, N>, N> a)
{
    double det = 1.0;
    for (std::size_t c = 0; c < N; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < N; ++r)
            if (std::abs(a[r][c]) > std::abs(a[piv][c]))
                piv = r;
        if (a[piv][c] == 0.0)
            return 0.0;
        if (piv != c) {
            std::swap(a[piv], a[c]);
            det = -det;
        }
        det *= a[c][c];
        for (std::size_t r = c + 1; r < N; ++r) {
            double f = a[r][c] / a[c][c];
            for (std::size_t k = c; k < N; ++k)
                a[r][k] -= f * a[c][k];
        }
    }
    return det;
}

} // namespace detail

/**
 * Jacobian determinant of a map (ν, V) ↦ (ν′, V′) on S² × ℝ³ with respect to
 * surface measure × Lebesgue, by fourth-order central differences.
 * The sphere is charted by ν(a, b) = normalize(ν₀ + a e₁ + b e₂) on input and
 * by tangent projection on output; both have unit area factor at the base point.
 */
template <class Map>
double pair_map_jacobian(Map&& f, const Vec3& nu, const Vec3& V, double h = 1e-3)
{
    const Vec3 e1 = any_orthogonal(nu), e2 = cross(nu, e1);
    const PairState base = f(nu, V);
    const Vec3 f1 = any_orthogonal(base.nu), f2 = cross(base.nu, f1);
    auto coords = [&](const PairState& s) {
        return std::array<double, 5>{dot(s.nu, f1), dot(s.nu, f2), s.V.x, s.V.y, s.V.z};
    };
    auto eval = [&](int dim, double d) {
        Vec3 n = nu, v = V;
        if (dim == 0)
            n = normalized(nu + d * e1);
        else if (dim == 1)
            n = normalized(nu + d * e2);
        else
            v[dim - 2] += d;
        return coords(f(n, v));
    };
    std::array<std::array<double, 5>, 5> J{};
    for (int c = 0; c < 5; ++c) {
        auto p2 = eval(c, 2 * h), p1 = eval(c, h), m1 = eval(c, -h), m2 = eval(c, -2 * h);
        for (int r = 0; r < 5; ++r)
            J[r][c] = (-p2[r] + 8 * p1[r] - 8 * m1[r] + m2[r]) / (12 * h);
    }
    return detail::determinant<5>(J);
}

// ---------------------------------------------------------------------------
// Trapping analysis

struct TrapPoint {
    double y, X, Y;
    bool physical;
};

struct TrapDiagnostics {
    std::vector<TrapPoint> curve_points;
    bool in_bad_set = false;
    double eta = 0, K = 0;
    double distance = std::numeric_limits<double>::infinity();
};

/// X = 2Φ′(y)y³, Y = 4Φ(y) + 2Φ′(y)y; physical when Y > 0 and 0 ≤ X ≤ Y.
inline std::vector<TrapPoint> trap_curve(const RadialPotential& pot, const std::vector<double>& ys)
{
    std::vector<TrapPoint> pts;
    pts.reserve(ys.size());
    for (double y : ys) {
        auto pv = pot.evaluate(y);
        double X = 2.0 * pv.dphi * y * y * y;
        double Y = 4.0 * pv.phi + 2.0 * pv.dphi * y;
        pts.push_back({y, X, Y, Y > 0 && X >= 0 && X <= Y});
    }
    return pts;
}

/// Total length of the physical polyline pieces.
inline double physical_arc_length(const std::vector<TrapPoint>& pts)
{
    double len = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        if (pts[i].physical && pts[i - 1].physical)
            len += std::hypot(pts[i].X - pts[i - 1].X, pts[i].Y - pts[i - 1].Y);
    return len;
}

/// Distance from (a, b) to the physical pieces of the polyline.
inline double distance_to_physical_curve(const std::vector<TrapPoint>& pts, double a, double b)
{
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (!pts[i].physical)
            continue;
        best = std::min(best, std::hypot(a - pts[i].X, b - pts[i].Y));
        if (i + 1 < pts.size() && pts[i + 1].physical) {
            double dx = pts[i + 1].X - pts[i].X, dy = pts[i + 1].Y - pts[i].Y;
            double l2 = dx * dx + dy * dy;
            if (l2 > 0) {
                double t = std::clamp(((a - pts[i].X) * dx + (b - pts[i].Y) * dy) / l2, 0.0, 1.0);
                best = std::min(best, std::hypot(a - pts[i].X - t * dx, b - pts[i].Y - t * dy));
            }
        }
    }
    return best;
}

/// Default parameter grid for the trap curve: dense near both ends.
inline std::vector<double> trap_grid(std::size_t n = 4000)
{
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        double t = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        g[i] = 0.5 - 0.5 * std::cos(std::numbers::pi * t);
    }
    return g;
}

/// Membership of (L², V²) in ℬ(η): tube around the curve, origin disk, or |V| ≥ K.
inline bool bad_set_membership(const std::vector<TrapPoint>& curve, const Vec3& nu,
                               const Vec3& V, double eta, double K)
{
    if (!(eta > 0) || !(K > 0))
        throw Error(ErrorKind::precondition, "bad set needs eta > 0 and K > 0");
    double V2 = norm2(V);
    if (std::sqrt(V2) >= K)
        return true;
    double L = norm(cross(nu, V));
    double L2 = L * L;
    if (std::hypot(L2, V2) < eta)
        return true;
    return distance_to_physical_curve(curve, L2, V2) < eta;
}

inline TrapDiagnostics trap_diagnostics(const RadialPotential& pot, const Vec3& nu,
                                        const Vec3& V, double eta, double K,
                                        const std::vector<double>& ys = trap_grid())
{
    TrapDiagnostics d;
    d.curve_points = trap_curve(pot, ys);
    d.eta = eta;
    d.K = K;
    double L = norm(cross(nu, V));
    d.distance = distance_to_physical_curve(d.curve_points, L * L, norm2(V));
    d.in_bad_set = bad_set_membership(d.curve_points, nu, V, eta, K);
    return d;
}

} // namespace bgl
