#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "errors.hpp"
#include "potentials.hpp"
#include "vec3.hpp"

namespace bgl {

struct OrbitSample {
    double tau;
    Vec3 q, qdot;
};

struct OracleResult {
    std::vector<OrbitSample> samples;
    double theta = 0;
    double tau_star = 0;
    double r_star = 1;
    int turns = 0;
    Vec3 V_out;
    Vec3 nu_out;
    Vec3 omega;
    double energy_drift = 0; ///< max relative deviation of the reduced energy
    bool possibly_trapped = false;
};

struct OracleOptions {
    double tol = 1e-13;
    double max_time_factor = 1e3; ///< max time is this over |V|
    std::size_t sample_stride = 0; ///< 0 disables trajectory samples
};

/**
 * Brute-force integration of q̈ = −2Φ′(|q|) q/|q| from q = ν, q̇ = V until the
 * orbit leaves the unit ball. The swept polar angle ψ gives
 * Θ = arcsin ρ + Δψ/2, which also counts full turns.
 */
inline OracleResult oracle_integrate_central(const RadialPotential& pot, const Vec3& nu,
                                             const Vec3& V, const OracleOptions& opt = {})
{
    namespace ode = boost::numeric::odeint;
    using State = std::array<double, 7>;
    double speed = norm(V);
    if (!(speed > 0))
        throw Error(ErrorKind::domain, "zero relative velocity");
    if (dot(V, nu) > 0)
        throw Error(ErrorKind::precondition, "oracle needs an incoming pair");
    const double L = norm(cross(nu, V));

    auto rhs = [&](const State& s, State& d, double) {
        double r = std::sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2]);
        double f = 0;
        if (r < 1.0 && r > 0)
            f = -2.0 * pot.branch(r).dphi / r;
        for (int i = 0; i < 3; ++i) {
            d[i] = s[3 + i];
            d[3 + i] = f * s[i];
        }
        d[6] = r > 0 ? L / (r * r) : 0.0;
    };
    auto radius = [](const State& s) { return std::sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2]); };
    auto radial_velocity = [](const State& s) {
        return s[0] * s[3] + s[1] * s[4] + s[2] * s[5];
    };
    auto energy = [&](const State& s) {
        double r = radius(s);
        double k = 0.5 * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]);
        return k + (r < 1.0 && r > 0 ? 2.0 * pot.branch(r).phi : 0.0);
    };

    State x{nu.x, nu.y, nu.z, V.x, V.y, V.z, 0.0};
    const double e_ref = energy(x);
    const double e_scale = std::max(std::abs(e_ref), 0.5 * speed * speed);
    const double t_max = opt.max_time_factor / speed;

    auto stepper = ode::make_dense_output(opt.tol, opt.tol, ode::runge_kutta_dopri5<State>());
    stepper.initialize(x, 0.0, 1e-3 / speed);

    OracleResult res;
    res.r_star = 1.0;
    std::size_t step = 0;
    State cur = x, tmp;
    auto bisect = [&](double a, double b, auto&& pred) {
        // pred(a) false, pred(b) true
        for (int i = 0; i < 200 && b - a > 1e-16 * std::max(1.0, b); ++i) {
            double m = 0.5 * (a + b);
            stepper.calc_state(m, tmp);
            (pred(tmp) ? b : a) = m;
        }
        return b;
    };
    double t_exit = -1;
    while (true) {
        auto [t0, t1] = stepper.do_step(rhs);
        State next = stepper.current_state();
        res.energy_drift = std::max(res.energy_drift, std::abs(energy(next) - e_ref) / e_scale);
        if (radial_velocity(cur) < 0 && radial_velocity(next) >= 0) {
            double tm = bisect(t0, t1, [&](const State& s) { return radial_velocity(s) >= 0; });
            stepper.calc_state(tm, tmp);
            res.r_star = std::min(res.r_star, radius(tmp));
        }
        if (radius(next) > 1.0 && radial_velocity(next) > 0) {
            t_exit = bisect(t0, t1, [&](const State& s) { return radius(s) > 1.0; });
            stepper.calc_state(t_exit, cur);
            break;
        }
        if (opt.sample_stride && step % opt.sample_stride == 0)
            res.samples.push_back({t1, {next[0], next[1], next[2]}, {next[3], next[4], next[5]}});
        ++step;
        cur = next;
        if (t1 > t_max) {
            res.possibly_trapped = true;
            break;
        }
    }
    Vec3 qf{cur[0], cur[1], cur[2]}, pf{cur[3], cur[4], cur[5]};
    res.tau_star = t_exit >= 0 ? t_exit : stepper.current_time();
    res.nu_out = qf / norm(qf);
    res.V_out = pf;
    double rho = std::min(1.0, L / speed);
    res.theta = std::asin(rho) + 0.5 * cur[6];
    res.turns = static_cast<int>(std::floor(res.theta / std::numbers::pi));
    Vec3 dv = V - pf;
    if (norm(dv) > 1e-6 * speed) {
        res.omega = normalized(dv);
    } else {
        Vec3 u = normalized(V);
        Vec3 perp = nu - dot(nu, u) * u;
        res.omega = norm(perp) > 1e-14 ? normalized(perp) : any_orthogonal(u);
    }
    if (opt.sample_stride)
        res.samples.push_back({res.tau_star, qf, pf});
    return res;
}

} // namespace bgl
