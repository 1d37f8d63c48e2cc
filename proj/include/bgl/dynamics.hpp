#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <cmath>
#include <limits>
#include <ostream>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "potentials.hpp"
#include "vec3.hpp"

namespace bgl {

/// One particle in macroscopic variables.
struct PhasePoint {
    Vec3 x, v;
};

struct SystemState {
    std::vector<PhasePoint> particles;
    double epsilon = 1.0;
    double time = 0.0;

    SystemState() = default;
    SystemState(std::vector<PhasePoint> p, double eps, double t = 0.0)
      : particles(std::move(p)), epsilon(eps), time(t)
    {
        if (!(epsilon > 0))
            throw Error(ErrorKind::precondition, "epsilon must be positive");
    }

    std::size_t size() const { return particles.size(); }
};

/// N ε² = 1 bookkeeping.
struct BoltzmannGradScaling {
    std::size_t N;
    double epsilon;

    BoltzmannGradScaling(std::size_t n, double eps) : N(n), epsilon(eps)
    {
        if (std::abs(static_cast<double>(N) * eps * eps - 1.0) >= 1e-12)
            throw Error(ErrorKind::precondition, "Boltzmann-Grad mode requires N eps^2 = 1");
    }

    static BoltzmannGradScaling from_epsilon(double eps)
    {
        double n = std::round(1.0 / (eps * eps));
        return {static_cast<std::size_t>(n), 1.0 / std::sqrt(n)};
    }
};

enum class UnitDirection { micro_to_macro, macro_to_micro };

/// Positions (and times) scale by ε; velocities are unchanged.
inline PhasePoint convert_units(const PhasePoint& p, double epsilon, UnitDirection dir)
{
    if (!(epsilon > 0))
        throw Error(ErrorKind::precondition, "epsilon must be positive");
    double s = dir == UnitDirection::micro_to_macro ? epsilon : 1.0 / epsilon;
    return {p.x * s, p.v};
}

inline double convert_time(double t, double epsilon, UnitDirection dir)
{
    return dir == UnitDirection::micro_to_macro ? t * epsilon : t / epsilon;
}

/// H = ½Σv² + ½Σ_{i≠k} Φ(|x_i − x_k|/ε).
inline double hamiltonian(const SystemState& s, const RadialPotential& pot)
{
    double kin = 0, pot_e = 0;
    const auto& p = s.particles;
    for (std::size_t i = 0; i < p.size(); ++i) {
        kin += 0.5 * norm2(p[i].v);
        for (std::size_t k = i + 1; k < p.size(); ++k) {
            double r = norm(p[i].x - p[k].x) / s.epsilon;
            if (r < 1.0)
                pot_e += pot.evaluate(r).phi;
        }
    }
    return kin + pot_e;
}

inline Vec3 total_momentum(const SystemState& s)
{
    Vec3 m;
    for (const auto& p : s.particles)
        m += p.v;
    return m;
}

/// A maximal time window in which a given pair stayed closer than ε.
struct ContactEpisode {
    std::size_t i, k;
    double t_begin, t_end;
};

struct FlowOptions {
    double tol = 1e-12; ///< local error target per step, relative
    double min_separation = 1e-6; ///< guard, in units of ε
    std::size_t max_steps = 50'000'000;
    bool record_contacts = true;
    /// Called after every accepted step or free flight with the state.
    std::function<void(const SystemState&)> observer;
};

struct FlowReport {
    std::vector<ContactEpisode> contacts;
    std::size_t steps = 0, rejected = 0, free_flights = 0;
    double energy_drift = 0; ///< |H_end − H_start| / max(|H_start|, kinetic scale)
};

class IntegrationStiff : public Error {
public:
    IntegrationStiff(const std::string& what, SystemState partial)
      : Error(ErrorKind::integration_stiff, what), partial_(std::move(partial)) {}
    const SystemState& partial_state() const { return partial_; }

private:
    SystemState partial_;
};

namespace detail {

/// Pairs closer than `range`, using a uniform cell grid for larger systems.
inline std::vector<std::pair<std::size_t, std::size_t>>
close_pairs(const std::vector<PhasePoint>& p, double range)
{
    std::vector<std::pair<std::size_t, std::size_t>> out;
    const std::size_t n = p.size();
    const double r2 = range * range;
    if (n < 48) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = i + 1; k < n; ++k)
                if (norm2(p[i].x - p[k].x) < r2)
                    out.emplace_back(i, k);
        return out;
    }
    auto key = [](long a, long b, long c) {
        return (static_cast<std::uint64_t>(a & 0x1fffff) << 42)
             | (static_cast<std::uint64_t>(b & 0x1fffff) << 21)
             | static_cast<std::uint64_t>(c & 0x1fffff);
    };
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells;
    std::vector<std::array<long, 3>> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c)
            idx[i][c] = static_cast<long>(std::floor(p[i].x[c] / range));
        cells[key(idx[i][0], idx[i][1], idx[i][2])].push_back(i);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (long a = -1; a <= 1; ++a)
            for (long b = -1; b <= 1; ++b)
                for (long c = -1; c <= 1; ++c) {
                    auto it = cells.find(key(idx[i][0] + a, idx[i][1] + b, idx[i][2] + c));
                    if (it == cells.end())
                        continue;
                    for (std::size_t k : it->second)
                        if (k > i && norm2(p[i].x - p[k].x) < r2)
                            out.emplace_back(i, k);
                }
    std::sort(out.begin(), out.end());
    return out;
}

/// Earliest s in (0, horizon] at which some pair reaches distance ε under free motion.
inline double next_contact(const std::vector<PhasePoint>& p, double eps, double horizon)
{
    double best = std::numeric_limits<double>::infinity();
    const double e2 = eps * eps;
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t k = i + 1; k < p.size(); ++k) {
            Vec3 dx = p[i].x - p[k].x, dv = p[i].v - p[k].v;
            double b = dot(dx, dv);
            if (b >= 0)
                continue;
            double a = norm2(dv), c = norm2(dx) - e2;
            // quick reject: cannot get within ε before the horizon
            double disc = b * b - a * c;
            if (disc < 0)
                continue;
            double s = c / (-b + std::sqrt(disc));
            if (s < 0)
                s = 0;
            if (s < best && s <= horizon)
                best = s;
        }
    return best;
}

} // namespace detail

/**
 * Newton flow d²x_i/dt² = (1/ε) Σ F((x_i − x_k)/ε) for a signed duration.
 *
 * Free stretches are streamed exactly to the next pair contact at distance
 * ε. While any pair is inside the range, a fourth-order symmetric
 * composition of velocity Verlet (Yoshida) is used with step-doubling error
 * control. Negative durations run the same scheme on reversed velocities.
 */
class NewtonFlow {
public:
    NewtonFlow(const RadialPotential& pot, FlowOptions opt = {}) : pot_(pot), opt_(std::move(opt)) {}

    SystemState run(SystemState s, double duration, FlowReport* report = nullptr) const
    {
        FlowReport local;
        FlowReport& rep = report ? *report : local;
        check_separated(s);
        const double h0 = hamiltonian(s, pot_);
        double kin_scale = 0;
        for (const auto& p : s.particles)
            kin_scale += 0.5 * norm2(p.v);
        if (duration < 0) {
            for (auto& p : s.particles)
                p.v = -p.v;
            s = forward(std::move(s), -duration, rep, -1.0);
            for (auto& p : s.particles)
                p.v = -p.v;
        } else {
            s = forward(std::move(s), duration, rep, 1.0);
        }
        double h1 = hamiltonian(s, pot_);
        rep.energy_drift = std::abs(h1 - h0) / std::max({std::abs(h0), kin_scale, 1e-300});
        return s;
    }

private:
    void check_separated(const SystemState& s) const
    {
        const auto& p = s.particles;
        for (std::size_t i = 0; i < p.size(); ++i)
            for (std::size_t k = i + 1; k < p.size(); ++k)
                if (!(norm2(p[i].x - p[k].x) > 0))
                    throw Error(ErrorKind::precondition, "overlapping initial positions");
    }

    void accelerations(const std::vector<PhasePoint>& p, double eps,
                       const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                       std::vector<Vec3>& acc, double guard) const
    {
        std::fill(acc.begin(), acc.end(), Vec3{});
        for (auto [i, k] : pairs) {
            Vec3 d = p[i].x - p[k].x;
            double r = norm(d) / eps;
            if (r >= 1.0)
                continue;
            if (r < guard)
                throw Error(ErrorKind::integration_stiff, "pair closer than the separation guard");
            // F(q) = −Φ′(|q|) q/|q|, scaled by 1/ε
            Vec3 f = d * (-pot_.evaluate(r).dphi / (r * eps * eps));
            acc[i] += f;
            acc[k] -= f;
        }
    }

    /// One Yoshida-4 step of size h on the interacting set.
    void yoshida(std::vector<PhasePoint>& p, double eps, double h,
                 const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                 std::vector<Vec3>& acc, double guard) const
    {
        static const double w1 = 1.0 / (2.0 - std::cbrt(2.0));
        static const double w0 = -std::cbrt(2.0) * w1;
        for (double w : {w1, w0, w1}) {
            double dt = w * h;
            accelerations(p, eps, pairs, acc, guard);
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i].v += 0.5 * dt * acc[i];
                p[i].x += dt * p[i].v;
            }
            accelerations(p, eps, pairs, acc, guard);
            for (std::size_t i = 0; i < p.size(); ++i)
                p[i].v += 0.5 * dt * acc[i];
        }
    }

    SystemState forward(SystemState s, double T, FlowReport& rep, double sign) const
    {
        const double eps = s.epsilon;
        const double guard = opt_.min_separation;
        auto& p = s.particles;
        std::vector<Vec3> acc(p.size());
        double t = 0;
        double h = 0;
        std::vector<std::pair<std::pair<std::size_t, std::size_t>, double>> open;
        auto pair_range = 1.0 * eps;
        const double t_origin = s.time;

        auto touch_contacts = [&](double now) {
            if (!opt_.record_contacts)
                return;
            auto cp = detail::close_pairs(p, pair_range);
            // close finished episodes
            for (auto it = open.begin(); it != open.end();) {
                if (!std::binary_search(cp.begin(), cp.end(), it->first)) {
                    rep.contacts.push_back({it->first.first, it->first.second,
                                            t_origin + sign * it->second, t_origin + sign * now});
                    it = open.erase(it);
                } else {
                    ++it;
                }
            }
            for (auto& pr : cp)
                if (std::none_of(open.begin(), open.end(), [&](auto& o) { return o.first == pr; }))
                    open.push_back({pr, now});
        };

        auto notify = [&] {
            if (!opt_.observer)
                return;
            if (sign > 0) {
                opt_.observer(s);
                return;
            }
            SystemState c = s;
            for (auto& q : c.particles)
                q.v = -q.v;
            opt_.observer(c);
        };

        std::size_t steps = 0;
        while (t < T) {
            // the skin matches the landing point of a free flight, which can sit a rounding error outside ε
            auto pairs = detail::close_pairs(p, pair_range * (1.0 + 1e-12));
            if (pairs.empty()) {
                double s_hit = detail::next_contact(p, eps, T - t);
                double dt = std::min(s_hit, T - t);
                for (auto& q : p)
                    q.x += dt * q.v;
                t += dt;
                ++rep.free_flights;
                s.time = t_origin + sign * t;
                touch_contacts(t);
                notify();
                if (t >= T)
                    break;
                // step into the range; the integrator takes over from here
                pairs = detail::close_pairs(p, pair_range * (1.0 + 1e-12));
                h = 0;
            }
            // interacting stretch: integrate all particles, forces only on close pairs
            double vmax = 0;
            for (const auto& q : p)
                vmax = std::max(vmax, norm(q.v));
            vmax = std::max(vmax, 1e-300);
            if (h == 0)
                h = 1e-3 * eps / vmax;
            // neighbour list with a skin so it stays valid over one step
            double skin = 0.5 * eps;
            auto nb = detail::close_pairs(p, pair_range + skin);
            double h_max = 0.25 * skin / vmax;
            h = std::min({h, h_max, T - t});
            auto trial = p, half = p;
            try {
                yoshida(trial, eps, h, nb, acc, guard);
                yoshida(half, eps, 0.5 * h, nb, acc, guard);
                yoshida(half, eps, 0.5 * h, nb, acc, guard);
            } catch (const Error&) {
                throw IntegrationStiff("separation guard violated", s);
            }
            double err = 0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                err = std::max(err, norm(trial[i].x - half[i].x) / eps);
                err = std::max(err, norm(trial[i].v - half[i].v) / vmax);
            }
            err /= 15.0; // Richardson estimate for a fourth-order method
            if (!std::isfinite(err))
                throw IntegrationStiff("non-finite step error", s);
            if (err <= opt_.tol || h <= 1e-14 * eps / vmax) {
                if (h <= 1e-14 * eps / vmax && err > opt_.tol)
                    throw IntegrationStiff("step size underflow", s);
                // Richardson extrapolation is not symplectic; keep the half-step result
                p = std::move(half);
                t += h;
                ++rep.steps;
                s.time = t_origin + sign * t;
                touch_contacts(t);
                notify();
                double fac = err > 0 ? 0.9 * std::pow(opt_.tol / err, 0.2) : 4.0;
                h *= std::clamp(fac, 0.2, 4.0);
            } else {
                ++rep.rejected;
                h *= std::clamp(0.9 * std::pow(opt_.tol / err, 0.2), 0.1, 0.5);
            }
            if (++steps > opt_.max_steps)
                throw IntegrationStiff("step budget exhausted", s);
        }
        if (opt_.record_contacts)
            for (auto& o : open)
                rep.contacts.push_back({o.first.first, o.first.second,
                                        t_origin + sign * o.second, t_origin + sign * t});
        s.time = t_origin + sign * T;
        return s;
    }

    RadialPotential pot_;
    FlowOptions opt_;
};

/// Convenience wrapper: integrates `duration` (signed, macroscopic) and returns the state.
inline SystemState newton_flow(const SystemState& state, const RadialPotential& pot,
                               double duration, double tol = 1e-12, FlowReport* report = nullptr)
{
    FlowOptions opt;
    opt.tol = tol;
    return NewtonFlow(pot, opt).run(state, duration, report);
}

/// CSV rows (time, index, x, v) for a trajectory dump.
inline void write_trajectory_row(std::ostream& os, const SystemState& s)
{
    os.precision(17);
    for (std::size_t i = 0; i < s.particles.size(); ++i) {
        const auto& q = s.particles[i];
        os << s.time << ',' << i << ',' << q.x.x << ',' << q.x.y << ',' << q.x.z << ',' << q.v.x
           << ',' << q.v.y << ',' << q.v.z << '\n';
    }
}

} // namespace bgl
