#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "vec3.hpp"

namespace bgl {

/// Φ, Φ′, Φ″ at one radius. `at_jump` marks a radius where a derivative
/// jumps; the values there are the limits from below.
struct PotentialValue {
    double phi = 0, dphi = 0, d2phi = 0;
    bool at_jump = false;
};

struct ClassFlags {
    bool repulsive_monotone = false;
    bool diverges_at_origin = false;
    bool smooth_at_boundary = false;
};

enum class Family {
    zero,
    inverse_power_truncated,
    smooth_junction,
    arctan_wall,
    piecewise_well,
    cutoff_lennard_jones,
    tabulated,
};

inline const char* to_string(Family f)
{
    switch (f) {
    case Family::zero: return "zero";
    case Family::inverse_power_truncated: return "inverse-power";
    case Family::smooth_junction: return "smooth-junction";
    case Family::arctan_wall: return "arctan-wall";
    case Family::piecewise_well: return "piecewise-well";
    case Family::cutoff_lennard_jones: return "cutoff-lj";
    case Family::tabulated: return "tabulated";
    }
    return "unknown";
}

namespace shapes {

struct Zero {
    PotentialValue operator()(double) const { return {}; }
};

/// Φ = r^{-k} − 1.
struct InversePower {
    double k;
    PotentialValue operator()(double r) const
    {
        double rk = std::pow(r, -k);
        return {rk - 1.0, -k * rk / r, k * (k + 1.0) * rk / (r * r)};
    }
};

/// Inverse power core joined C¹ to e^{-1/(1-r)} at r = 1 − δ.
struct SmoothJunction {
    double delta, k;
    double c, a, b; // e^{−1/δ}, inner amplitude and offset

    SmoothJunction(double delta_, double k_)
      : delta(delta_), k(k_), c(std::exp(-1.0 / delta_)),
        a(std::pow(1.0 - delta_, k_ + 1.0) / (delta_ * delta_ * k_)),
        b(1.0 - (1.0 - delta_) / (delta_ * delta_ * k_)) {}

    PotentialValue operator()(double r) const
    {
        if (r <= 1.0 - delta) {
            double rk = std::pow(r, -k);
            return {c * (a * rk + b), -c * a * k * rk / r, c * a * k * (k + 1.0) * rk / (r * r)};
        }
        double s = 1.0 - r;
        double e = s > 0 ? std::exp(-1.0 / s) : 0.0;
        if (e == 0.0)
            return {};
        double s2 = s * s;
        return {e, -e / s2, e * (1.0 - 2.0 * s) / (s2 * s2)};
    }
};

/// Φ = −ε tan(a r − π/2) + 1 with a = arctan(1/ε) + π/2.
struct ArctanWall {
    double eps;
    PotentialValue operator()(double r) const
    {
        double a = std::atan(1.0 / eps) + std::numbers::pi / 2;
        double t = std::tan(a * r - std::numbers::pi / 2);
        double sec2 = 1.0 + t * t;
        return {1.0 - eps * t, -eps * a * sec2, -2.0 * eps * a * a * sec2 * t};
    }
};

/// Inverse power core for r < δ, linear ramp δ(1 − r) outside.
struct PiecewiseWell {
    double delta, k;
    PotentialValue operator()(double r) const
    {
        if (r <= delta) {
            double c = std::pow(delta, k + 2.0);
            double rk = std::pow(r, -k);
            return {c * rk / k + delta - delta * delta * (1.0 + 1.0 / k),
                    -c * rk / r,
                    (k + 1.0) * c * rk / (r * r)};
        }
        return {delta * (1.0 - r), -delta, 0.0};
    }
};

/// 12-6 shape, shifted-force truncated at r = 1 and rescaled to the given
/// well depth.
struct CutoffLennardJones {
    double sigma, depth;
    double scale = 1.0, r_min = 0.0;

    static PotentialValue lj(double sigma, double r)
    {
        double x6 = std::pow(sigma / r, 6.0);
        double x12 = x6 * x6;
        return {4.0 * (x12 - x6), 4.0 * (-12.0 * x12 + 6.0 * x6) / r,
                4.0 * (156.0 * x12 - 42.0 * x6) / (r * r)};
    }

    PotentialValue raw(double r) const
    {
        PotentialValue u = lj(sigma, r), u1 = lj(sigma, 1.0);
        return {u.phi - u1.phi - (r - 1.0) * u1.dphi, u.dphi - u1.dphi, u.d2phi};
    }

    CutoffLennardJones(double s, double d) : sigma(s), depth(d)
    {
        // raw′ < 0 at r = σ and > 0 at the inflection point of the 12-6 shape
        double lo = sigma, hi = std::pow(26.0 / 7.0, 1.0 / 6.0) * sigma;
        for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
            double mid = 0.5 * (lo + hi);
            (raw(mid).dphi < 0 ? lo : hi) = mid;
        }
        r_min = 0.5 * (lo + hi);
        scale = depth / -raw(r_min).phi;
    }

    PotentialValue operator()(double r) const
    {
        PotentialValue p = raw(r);
        return {scale * p.phi, scale * p.dphi, scale * p.d2phi};
    }
};

/// Monotone cubic (Fritsch–Carlson) through (r_i, φ_i), clamped to zero value
/// and slope at r = 1. Linear below the first knot.
struct Tabulated {
    std::vector<double> r, phi, slope;

    Tabulated(std::vector<double> radii, std::vector<double> values)
      : r(std::move(radii)), phi(std::move(values))
    {
        if (r.size() < 2 || r.size() != phi.size())
            throw Error(ErrorKind::config, "tabulated potential needs >= 2 matching knots");
        if (r.back() != 1.0) {
            r.push_back(1.0);
            phi.push_back(0.0);
        }
        phi.back() = 0.0;
        for (std::size_t i = 1; i < r.size(); ++i)
            if (!(r[i] > r[i - 1]) || !(r[i - 1] > 0))
                throw Error(ErrorKind::config, "tabulated radii must increase in (0,1]");
        std::size_t n = r.size();
        std::vector<double> d(n - 1);
        for (std::size_t i = 0; i + 1 < n; ++i)
            d[i] = (phi[i + 1] - phi[i]) / (r[i + 1] - r[i]);
        slope.assign(n, 0.0);
        slope[0] = d[0];
        for (std::size_t i = 1; i + 1 < n; ++i) {
            if (d[i - 1] * d[i] <= 0) {
                slope[i] = 0;
            } else {
                double h0 = r[i] - r[i - 1], h1 = r[i + 1] - r[i];
                double w1 = 2 * h1 + h0, w2 = h1 + 2 * h0;
                slope[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        slope[n - 1] = 0.0;
    }

    PotentialValue operator()(double x) const
    {
        if (x < r.front())
            return {phi[0] + slope[0] * (x - r[0]), slope[0], 0.0};
        std::size_t i = 0;
        if (x > r.front()) {
            auto it = std::lower_bound(r.begin(), r.end(), x);
            i = static_cast<std::size_t>(it - r.begin()) - 1;
        }
        i = std::min(i, r.size() - 2);
        double h = r[i + 1] - r[i];
        double t = (x - r[i]) / h;
        double p0 = phi[i], p1 = phi[i + 1], m0 = slope[i] * h, m1 = slope[i + 1] * h;
        double t2 = t * t, t3 = t2 * t;
        double v = (2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * p1
                 + (t3 - t2) * m1;
        double dv = (6 * t2 - 6 * t) * p0 + (3 * t2 - 4 * t + 1) * m0 + (-6 * t2 + 6 * t) * p1
                  + (3 * t2 - 2 * t) * m1;
        double d2v = (12 * t - 6) * p0 + (6 * t - 4) * m0 + (-12 * t + 6) * p1 + (6 * t - 2) * m1;
        return {v, dv / h, d2v / (h * h)};
    }
};

} // namespace shapes

/**
 * Radial pair potential with support in |q| < 1 (microscopic units).
 * Cheap to copy; the shape is shared and immutable.
 */
class RadialPotential {
public:
    using Shape = std::variant<shapes::Zero, shapes::InversePower, shapes::SmoothJunction,
                               shapes::ArctanWall, shapes::PiecewiseWell,
                               shapes::CutoffLennardJones, shapes::Tabulated>;

    static RadialPotential zero()
    {
        return {Family::zero, shapes::Zero{}, {true, false, true}, {}, {}};
    }

    static RadialPotential inverse_power(double k)
    {
        if (!(k >= 1))
            throw Error(ErrorKind::config, "inverse-power needs k >= 1");
        return {Family::inverse_power_truncated, shapes::InversePower{k}, {true, true, false}, {},
                {{"k", k}}};
    }

    static RadialPotential smooth_junction(double delta, double k)
    {
        if (!(delta > 0 && delta < 1.0 / 3.0) || !(k >= 1))
            throw Error(ErrorKind::config, "smooth-junction needs 0 < delta < 1/3 and k >= 1");
        return {Family::smooth_junction, shapes::SmoothJunction{delta, k}, {true, true, true},
                {1.0 - delta}, {{"delta", delta}, {"k", k}}};
    }

    static RadialPotential arctan_wall(double eps)
    {
        if (!(eps > 0))
            throw Error(ErrorKind::config, "arctan-wall needs eps > 0");
        return {Family::arctan_wall, shapes::ArctanWall{eps}, {true, true, false}, {},
                {{"eps", eps}}};
    }

    static RadialPotential piecewise_well(double delta, double k)
    {
        if (!(delta > 0 && delta < 1) || !(k >= 1))
            throw Error(ErrorKind::config, "piecewise-well needs 0 < delta < 1 and k >= 1");
        return {Family::piecewise_well, shapes::PiecewiseWell{delta, k}, {true, true, false},
                {delta}, {{"delta", delta}, {"k", k}}};
    }

    static RadialPotential cutoff_lennard_jones(double sigma = 0.5, double depth = 1.0)
    {
        if (!(sigma > 0 && sigma < 0.8) || !(depth > 0))
            throw Error(ErrorKind::config, "cutoff-lj needs 0 < sigma < 0.8 and depth > 0");
        return {Family::cutoff_lennard_jones, shapes::CutoffLennardJones{sigma, depth},
                {false, true, true}, {}, {{"sigma", sigma}, {"depth", depth}}};
    }

    static RadialPotential tabulated(std::vector<double> radii, std::vector<double> values)
    {
        shapes::Tabulated t(std::move(radii), std::move(values));
        bool monotone = std::is_sorted(t.phi.rbegin(), t.phi.rend());
        std::vector<double> jumps(t.r.begin() + 1, t.r.end() - 1);
        return {Family::tabulated, std::move(t), {monotone, false, true}, std::move(jumps),
                {{"knots", 0.0}}};
    }

    Family family() const { return family_; }
    const ClassFlags& flags() const { return flags_; }
    /// Radii in (0,1) where Φ′ or Φ″ jumps.
    const std::vector<double>& jump_radii() const { return jumps_; }
    const std::vector<std::pair<std::string, double>>& parameters() const { return params_; }
    const Shape& shape() const { return *shape_; }

    /// Φ, Φ′, Φ″ at r > 0; exactly zero for r ≥ 1.
    PotentialValue evaluate(double r) const
    {
        if (!(r > 0))
            throw Error(ErrorKind::domain, "potential evaluated at r <= 0");
        if (r >= 1.0)
            return {};
        return branch(r);
    }

    /// Branch formula without the support cutoff, valid on (0,1]. At r = 1 it
    /// gives the limits from below, e.g. Φ′(1⁻).
    PotentialValue branch(double r) const
    {
        PotentialValue v = std::visit([r](const auto& s) { return s(r); }, *shape_);
        for (double j : jumps_)
            if (r == j)
                v.at_jump = true;
        return v;
    }

    double phi(double r) const { return evaluate(r).phi; }
    double dphi_edge() const { return branch(1.0).dphi; }

private:
    RadialPotential(Family f, Shape s, ClassFlags fl, std::vector<double> jumps,
                    std::vector<std::pair<std::string, double>> params)
      : family_(f), shape_(std::make_shared<const Shape>(std::move(s))), flags_(fl),
        jumps_(std::move(jumps)), params_(std::move(params))
    {
        if (family_ == Family::tabulated)
            params_ = {{"knots", static_cast<double>(std::get<shapes::Tabulated>(*shape_).r.size())}};
    }

    Family family_;
    std::shared_ptr<const Shape> shape_;
    ClassFlags flags_;
    std::vector<double> jumps_;
    std::vector<std::pair<std::string, double>> params_;
};

struct MonotonicityReport {
    bool holds = true;
    std::vector<double> violations;
};

/**
 * Checks rΦ″(r) + 2Φ′(r) ≥ 0 on the grid. The comparison allows a relative
 * rounding slack so that exact cancellations (k = 1) are not reported.
 */
inline MonotonicityReport check_monotonicity_condition(const RadialPotential& pot,
                                                       const std::vector<double>& grid)
{
    if (grid.empty())
        throw Error(ErrorKind::precondition, "empty grid");
    MonotonicityReport rep;
    for (double r : grid) {
        if (!(r > 0 && r < 1))
            throw Error(ErrorKind::precondition, "grid radius outside (0,1)");
        PotentialValue v = pot.evaluate(r);
        double a = r * v.d2phi, b = 2.0 * v.dphi;
        double slack = 1e-12 * (std::abs(a) + std::abs(b));
        if (a + b < -slack) {
            rep.holds = false;
            rep.violations.push_back(r);
        }
    }
    return rep;
}

inline std::vector<double> uniform_open_grid(std::size_t n, double lo = 0.0, double hi = 1.0)
{
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i)
        g[i] = lo + (hi - lo) * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    return g;
}

struct StabilityEstimate {
    double b_hat = 0;
    std::vector<Vec3> minimizer;
};

/// Total pair energy Σ_{i<h} Φ(|q_i − q_h|); +∞ on coincident points.
inline double configuration_energy(const RadialPotential& pot, const std::vector<Vec3>& q)
{
    double u = 0;
    for (std::size_t i = 0; i < q.size(); ++i)
        for (std::size_t h = i + 1; h < q.size(); ++h) {
            double d = norm(q[i] - q[h]);
            if (d == 0)
                return std::numeric_limits<double>::infinity();
            u += pot.evaluate(d).phi;
        }
    return u;
}

/**
 * Lower bound on the stability constant B from uniform sampling of j points
 * in a box of side 3. Each sample is polished by a short coordinate descent
 * so that narrow wells are not missed.
 */
inline StabilityEstimate estimate_stability_constant(const RadialPotential& pot, int j,
                                                     std::size_t trials, std::uint64_t seed)
{
    if (j < 2 || trials < 1)
        throw Error(ErrorKind::precondition, "stability estimate needs j >= 2, trials >= 1");
    StabilityEstimate est;
    if (pot.flags().repulsive_monotone)
        return est;
    double best = std::numeric_limits<double>::infinity();
    std::vector<Vec3> q(static_cast<std::size_t>(j));
    for (std::size_t t = 0; t < trials; ++t) {
        StreamRng rng(seed, 0x5ab1e, t);
        for (auto& p : q)
            p = {3.0 * rng.uniform(), 3.0 * rng.uniform(), 3.0 * rng.uniform()};
        double u = configuration_energy(pot, q);
        if (u < best) {
            best = u;
            est.minimizer = q;
        }
    }
    // local polish of the best sample
    q = est.minimizer;
    for (double step = 0.05; step > 1e-6; step *= 0.5) {
        bool improved = true;
        while (improved) {
            improved = false;
            for (auto& p : q)
                for (int c = 0; c < 3; ++c)
                    for (double s : {step, -step}) {
                        double old = p[c];
                        p[c] = std::clamp(old + s, 0.0, 3.0);
                        double u = configuration_energy(pot, q);
                        if (u < best - 1e-15) {
                            best = u;
                            improved = true;
                        } else {
                            p[c] = old;
                        }
                    }
        }
    }
    est.minimizer = q;
    est.b_hat = std::max(0.0, -best / j);
    return est;
}

} // namespace bgl
