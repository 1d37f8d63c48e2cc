#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dynamics.hpp"
#include "errors.hpp"
#include "potentials.hpp"
#include "rng.hpp"
#include "two_body.hpp"
#include "vec3.hpp"

namespace bgl {

// ---------------------------------------------------------------------------
// Tree graphs and sign sequences

/// k₁..k_n with 1 ≤ k_i ≤ j+i−1 (labels are 1-based, as in the expansion).
struct TreeGraph {
    int j = 1;
    std::vector<int> k;

    int n() const { return static_cast<int>(k.size()); }

    bool valid() const
    {
        if (j < 1)
            return false;
        for (int i = 0; i < n(); ++i)
            if (k[i] < 1 || k[i] > j + i)
                return false;
        return true;
    }

    std::string str() const
    {
        std::string s;
        for (int i = 0; i < n(); ++i)
            s += (i ? " " : "") + std::to_string(k[i]);
        return s;
    }
};

/// j(j+1)⋯(j+n−1), with an explicit error when it does not fit in 64 bits.
inline std::uint64_t tree_count(int j, int n)
{
    if (j < 1 || n < 0)
        throw Error(ErrorKind::precondition, "tree_count needs j >= 1, n >= 0");
    std::uint64_t c = 1;
    for (int i = 0; i < n; ++i)
        if (__builtin_mul_overflow(c, static_cast<std::uint64_t>(j + i), &c))
            throw Error(ErrorKind::overflow, "tree count exceeds 64 bits");
    return c;
}

/// Lexicographic enumeration of Γ(j, n), k₁ most significant.
class TreeEnumerator {
public:
    TreeEnumerator(int j, int n) : j_(j), n_(n)
    {
        total_ = tree_count(j, n);
        cur_.j = j;
        cur_.k.assign(n, 1);
    }

    std::uint64_t total() const { return total_; }

    /// Writes the next tree into `out`; false when exhausted.
    bool next(TreeGraph& out)
    {
        if (done_)
            return false;
        out = cur_;
        int i = n_ - 1;
        while (i >= 0 && cur_.k[i] == j_ + i) {
            cur_.k[i] = 1;
            --i;
        }
        if (i < 0)
            done_ = true;
        else
            ++cur_.k[i];
        return true;
    }

private:
    int j_, n_;
    std::uint64_t total_;
    TreeGraph cur_;
    bool done_ = false;
};

inline std::vector<TreeGraph> enumerate_trees(int j, int n)
{
    TreeEnumerator e(j, n);
    std::vector<TreeGraph> out;
    out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(e.total(), 1u << 20)));
    TreeGraph g;
    while (e.next(g))
        out.push_back(g);
    return out;
}

/// σ_i ∈ {+1, −1}. The term sign counts the loss (−) creations.
struct SignSequence {
    std::vector<int> sigma;

    int n() const { return static_cast<int>(sigma.size()); }

    int minus_count() const
    {
        return static_cast<int>(std::count(sigma.begin(), sigma.end(), -1));
    }

    double sign() const { return minus_count() % 2 ? -1.0 : 1.0; }

    std::string str() const
    {
        std::string s;
        for (int v : sigma)
            s += v > 0 ? '+' : '-';
        return s;
    }

    static SignSequence parse(const std::string& s)
    {
        SignSequence out;
        for (char c : s) {
            if (c == '+')
                out.sigma.push_back(1);
            else if (c == '-')
                out.sigma.push_back(-1);
            else
                throw Error(ErrorKind::config, "sign string must contain only '+' and '-'");
        }
        return out;
    }

    /// All 2ⁿ sequences, bit i set meaning σ_{i+1} = −.
    static std::vector<SignSequence> all(int n)
    {
        if (n < 0 || n > 30)
            throw Error(ErrorKind::overflow, "too many sign sequences");
        std::vector<SignSequence> out;
        for (std::uint32_t m = 0; m < (1u << n); ++m) {
            SignSequence s;
            for (int i = 0; i < n; ++i)
                s.sigma.push_back(m >> i & 1u ? -1 : 1);
            out.push_back(std::move(s));
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Collision parameters and trajectories

enum class NodeForm {
    created_velocity,  ///< (ν_r, v_{j+r}) as in the measure dΛ
    incoming_relative, ///< (ν′_r, V′_r) after the incoming-variables map
};

struct CollisionParams {
    std::vector<double> times; ///< t₁ > … > t_n
    std::vector<Vec3> nus;
    std::vector<Vec3> velocities;
    std::vector<NodeForm> forms; ///< empty means all created_velocity

    int n() const { return static_cast<int>(times.size()); }

    NodeForm form(int r) const { return forms.empty() ? NodeForm::created_velocity : forms[r]; }

    void validate(double t) const
    {
        if (nus.size() != times.size() || velocities.size() != times.size())
            throw Error(ErrorKind::precondition, "collision parameter lengths differ");
        if (!forms.empty() && forms.size() != times.size())
            throw Error(ErrorKind::precondition, "collision parameter lengths differ");
        double prev = t;
        for (double s : times) {
            if (!(s < prev && s > 0))
                throw Error(ErrorKind::precondition, "creation times must satisfy t > t1 > ... > tn > 0");
            prev = s;
        }
        for (const auto& nu : nus)
            if (std::abs(norm(nu) - 1.0) > 1e-9)
                throw Error(ErrorKind::precondition, "impact vectors must be unit");
    }
};

struct CreationRecord {
    double time;
    int parent, child; ///< 1-based labels
    int sigma;
    Vec3 nu;
    Vec3 parent_after, child_after;   ///< η_k(t⁺), v_{j+r}: the future side
    Vec3 parent_before, child_before; ///< η_k(t⁻), η_{j+r}(t⁻)
    Vec3 omega;                       ///< zero for σ = −
    double tau_star = 0;              ///< interaction time (micro units), σ = + only
};

/// State valid from `time` downward until the next snapshot; positions are affine in between.
struct Snapshot {
    double time;
    std::vector<PhasePoint> state;
};

enum class FlowKind { bbf, ibf };

struct BackwardTrajectory {
    FlowKind kind = FlowKind::bbf;
    double epsilon = 0;
    int j = 0;
    double t = 0;
    TreeGraph tree;
    SignSequence signs;
    std::vector<Snapshot> snapshots; ///< decreasing times, last at 0
    std::vector<CreationRecord> records;
    std::vector<ContactEpisode> recollisions; ///< IBF only, 0-based indices
    double energy_drift = 0;                  ///< IBF: worst relative drift of any flow segment
    std::size_t fallback_windows = 0;         ///< IBF: σ=+ scatterings integrated numerically
    std::size_t stiff_segments = 0;

    int particle_count() const { return j + static_cast<int>(records.size()); }

    const Snapshot& snapshot_at(double s) const
    {
        // last snapshot with time ≥ s
        auto it = std::partition_point(snapshots.begin(), snapshots.end(),
                                       [s](const Snapshot& a) { return a.time >= s; });
        return it == snapshots.begin() ? snapshots.front() : *(it - 1);
    }

    /// State of particle `i` (0-based) at time s; it must exist at s.
    PhasePoint at(int i, double s) const
    {
        const Snapshot& sn = snapshot_at(s);
        if (i < 0 || i >= static_cast<int>(sn.state.size()))
            throw Error(ErrorKind::precondition, "particle does not exist at this time");
        const PhasePoint& p = sn.state[i];
        return {p.x + (s - sn.time) * p.v, p.v};
    }

    bool alive(int i, double s) const { return i < static_cast<int>(snapshot_at(s).state.size()); }

    const std::vector<PhasePoint>& state_at_zero() const { return snapshots.back().state; }

    /// Creation times t_0 = t, t_1, …, t_n.
    std::vector<double> node_times() const
    {
        std::vector<double> ts{t};
        for (const auto& r : records)
            ts.push_back(r.time);
        return ts;
    }
};

namespace detail {

inline void check_roots(const std::vector<PhasePoint>& z, int j, double t)
{
    if (j < 1 || static_cast<int>(z.size()) != j)
        throw Error(ErrorKind::precondition, "z_j must hold j particles");
    if (!(t > 0))
        throw Error(ErrorKind::precondition, "final time must be positive");
}

/// Created velocity from the incoming parametrization given η_k(t⁺).
inline std::pair<Vec3, Vec3> resolve_node(const RadialPotential& pot, const CollisionParams& p,
                                          int r, int sigma, const Vec3& eta_k)
{
    if (p.form(r) == NodeForm::created_velocity)
        return {p.nus[r], p.velocities[r]};
    const Vec3& nu_in = p.nus[r];
    const Vec3& V_in = p.velocities[r];
    if (sigma < 0)
        return {nu_in, V_in + eta_k};
    PairState out = scattering_operator(pot, nu_in, V_in);
    return {out.nu, out.V + eta_k};
}

} // namespace detail

// ---------------------------------------------------------------------------
// Boltzmann backward flow

/**
 * Incremental BBF construction. The sampler asks for η_k(t_r⁺) before it
 * draws ν_r, so nodes are added one at a time in decreasing time order.
 */
class BbfBuilder {
public:
    BbfBuilder(const RadialPotential& pot, int j, const std::vector<PhasePoint>& z_j, double t)
      : pot_(pot)
    {
        detail::check_roots(z_j, j, t);
        traj_.kind = FlowKind::bbf;
        traj_.j = j;
        traj_.t = t;
        traj_.tree.j = j;
        traj_.snapshots.push_back({t, z_j});
    }

    double time() const { return traj_.snapshots.back().time; }
    int size() const { return static_cast<int>(traj_.snapshots.back().state.size()); }

    /// η_k(s⁺) for the 1-based label k at the current node time or any time below it.
    Vec3 velocity(int k) const { return current(k).v; }
    Vec3 position(int k, double s) const
    {
        const auto& sn = traj_.snapshots.back();
        const auto& p = current(k);
        return p.x + (s - sn.time) * p.v;
    }

    /// Adds node r at time s; throws `rejected` on a half-space violation.
    const CreationRecord& create(int k, int sigma, double s, const Vec3& nu, const Vec3& v_new)
    {
        if (!(s < time() && s > 0))
            throw Error(ErrorKind::precondition, "creation times must decrease inside (0, t)");
        if (k < 1 || k > size())
            throw Error(ErrorKind::precondition, "progenitor label out of range");
        if (sigma != 1 && sigma != -1)
            throw Error(ErrorKind::precondition, "sigma must be +1 or -1");
        std::vector<PhasePoint> next = traj_.snapshots.back().state;
        const double dt = s - time();
        for (auto& p : next)
            p.x += dt * p.v;
        PhasePoint& par = next[k - 1];
        const Vec3 V = v_new - par.v;
        if (sigma * dot(nu, V) < 0)
            throw Error(ErrorKind::rejected, "impact vector outside the sigma half-space");

        CreationRecord rec{};
        rec.time = s;
        rec.parent = k;
        rec.child = size() + 1;
        rec.sigma = sigma;
        rec.nu = nu;
        rec.parent_after = par.v;
        rec.child_after = v_new;
        Vec3 vp = par.v, vc = v_new;
        if (sigma > 0 && norm2(V) > 0) {
            rec.omega = scattering_vector(pot_, nu, V);
            std::tie(vp, vc) = apply_collision_rule(par.v, v_new, rec.omega);
        }
        rec.parent_before = vp;
        rec.child_before = vc;
        par.v = vp;
        next.push_back({par.x, vc});
        traj_.snapshots.push_back({s, std::move(next)});
        traj_.tree.k.push_back(k);
        traj_.signs.sigma.push_back(sigma);
        traj_.records.push_back(rec);
        return traj_.records.back();
    }

    BackwardTrajectory finish()
    {
        std::vector<PhasePoint> last = traj_.snapshots.back().state;
        const double dt = -time();
        for (auto& p : last)
            p.x += dt * p.v;
        traj_.snapshots.push_back({0.0, std::move(last)});
        return std::move(traj_);
    }

private:
    const PhasePoint& current(int k) const
    {
        const auto& st = traj_.snapshots.back().state;
        if (k < 1 || k > static_cast<int>(st.size()))
            throw Error(ErrorKind::precondition, "particle label out of range");
        return st[k - 1];
    }

    RadialPotential pot_;
    BackwardTrajectory traj_;
};

inline BackwardTrajectory build_bbf(const RadialPotential& pot, const TreeGraph& tree,
                                    const SignSequence& signs, const std::vector<PhasePoint>& z_j,
                                    const CollisionParams& params, double t)
{
    if (!tree.valid() || signs.n() != tree.n() || params.n() != tree.n())
        throw Error(ErrorKind::precondition, "tree, signs and parameters disagree");
    params.validate(t);
    BbfBuilder b(pot, tree.j, z_j, t);
    for (int r = 0; r < tree.n(); ++r) {
        auto [nu, v] = detail::resolve_node(pot, params, r, signs.sigma[r], b.velocity(tree.k[r]));
        b.create(tree.k[r], signs.sigma[r], params.times[r], nu, v);
    }
    return b.finish();
}

// ---------------------------------------------------------------------------
// Interacting backward flow

enum class IbfMode {
    exact_pair,    ///< isolated σ=+ scatterings use the exact two-body map
    full_dynamics, ///< every stretch is integrated numerically
};

struct IbfOptions {
    IbfMode mode = IbfMode::exact_pair;
    double tol = 1e-12;
    double isolation = 1.5; ///< third particles must stay this many ε from the pair centre
};

namespace detail {

/// min over s ∈ [0, T] of |a + s b|.
inline double min_affine_distance(const Vec3& a, const Vec3& b, double T)
{
    double bb = norm2(b);
    double s = bb > 0 ? std::clamp(-dot(a, b) / bb, 0.0, T) : 0.0;
    return norm(a + s * b);
}

} // namespace detail

class IbfBuilder {
public:
    IbfBuilder(const RadialPotential& pot, int j, const std::vector<PhasePoint>& z_j, double t,
               double epsilon, IbfOptions opt = {})
      : pot_(pot), opt_(opt)
    {
        detail::check_roots(z_j, j, t);
        if (!(epsilon > 0))
            throw Error(ErrorKind::precondition, "epsilon must be positive");
        traj_.kind = FlowKind::ibf;
        traj_.epsilon = epsilon;
        traj_.j = j;
        traj_.t = t;
        traj_.tree.j = j;
        state_ = SystemState(z_j, epsilon, t);
        traj_.snapshots.push_back({t, z_j});
    }

    double time() const { return state_.time; }
    int size() const { return static_cast<int>(state_.size()); }
    const SystemState& state() const { return state_; }

    /// Flows the system backward to time s (no-op if already there).
    void advance_to(double s)
    {
        if (s > state_.time)
            throw Error(ErrorKind::precondition, "IBF only runs backward");
        if (s == state_.time)
            return;
        if (pending_) {
            Pending pd = *pending_;
            pending_.reset();
            if (!try_exact_window(pd, s)) {
                ++traj_.fallback_windows;
                creation_contacts_.push_back({pd.a, pd.b, pd.t_create, pd.tol});
            } else {
                creation_contacts_.push_back({pd.a, pd.b, state_.time, pd.tol});
            }
        }
        if (s < state_.time)
            run_flow(s);
    }

    Vec3 velocity(int k) const { return state_.particles.at(k - 1).v; }
    Vec3 position(int k) const { return state_.particles.at(k - 1).x; }

    /// Creation at the current time; throws `rejected` on constraint violations.
    const CreationRecord& create(int k, int sigma, const Vec3& nu, const Vec3& v_new)
    {
        if (k < 1 || k > size())
            throw Error(ErrorKind::precondition, "progenitor label out of range");
        if (sigma != 1 && sigma != -1)
            throw Error(ErrorKind::precondition, "sigma must be +1 or -1");
        const double eps = state_.epsilon;
        if (pending_) {
            // a second creation at the same instant: the window cannot be done exactly
            ++traj_.fallback_windows;
            creation_contacts_.push_back({pending_->a, pending_->b, pending_->t_create, pending_->tol});
            pending_.reset();
        }
        PhasePoint& par = state_.particles[k - 1];
        const Vec3 V = v_new - par.v;
        // a creation pair touching right after t_r is not a recollision
        const double contact_tol = 0.01 * eps / std::max(norm(V), 1e-12) + 1e-12;
        if (sigma * dot(nu, V) < 0)
            throw Error(ErrorKind::rejected, "impact vector outside the sigma half-space");
        Vec3 x_new = par.x + eps * nu;
        // keep the new pair at distance ≥ ε so no spurious force acts at creation
        for (double f = 1.0; norm(x_new - par.x) < eps; f = std::nextafter(f, 2.0))
            x_new = par.x + (eps * f) * nu;
        for (int i = 0; i < size(); ++i)
            if (i != k - 1 && !(norm(x_new - state_.particles[i].x) > eps))
                throw Error(ErrorKind::rejected, "third particle within epsilon of the created one");

        CreationRecord rec{};
        rec.time = state_.time;
        rec.parent = k;
        rec.child = size() + 1;
        rec.sigma = sigma;
        rec.nu = nu;
        rec.parent_after = par.v;
        rec.child_after = v_new;
        rec.parent_before = par.v;
        rec.child_before = v_new;
        state_.particles.push_back({x_new, v_new});
        if (sigma > 0 && norm2(V) > 0) {
            ScatteringResult sc = scatter(pot_, nu, V, true);
            rec.omega = sc.omega;
            rec.tau_star = sc.tau_star;
            auto [vp, vc] = apply_collision_rule(rec.parent_after, v_new, sc.omega);
            rec.parent_before = vp;
            rec.child_before = vc;
            if (opt_.mode == IbfMode::exact_pair)
                pending_ = Pending{static_cast<std::size_t>(k - 1),
                                   static_cast<std::size_t>(size() - 1),
                                   state_.time, sc.tau_star, contact_tol, sc.omega, nu, vp, vc};
        }
        if (!pending_ || opt_.mode != IbfMode::exact_pair)
            creation_contacts_.push_back({static_cast<std::size_t>(k - 1),
                                          static_cast<std::size_t>(size() - 1), state_.time,
                                          contact_tol});
        traj_.snapshots.push_back({state_.time, state_.particles});
        traj_.tree.k.push_back(k);
        traj_.signs.sigma.push_back(sigma);
        traj_.records.push_back(rec);
        return traj_.records.back();
    }

    BackwardTrajectory finish()
    {
        advance_to(0.0);
        if (traj_.snapshots.back().time != 0.0)
            traj_.snapshots.push_back({0.0, state_.particles});
        traj_.recollisions.clear();
        for (const auto& c : contacts_) {
            bool creation = false;
            for (const auto& cc : creation_contacts_)
                if (((c.i == cc.a && c.k == cc.b) || (c.i == cc.b && c.k == cc.a))
                    && std::abs(std::max(c.t_begin, c.t_end) - cc.time) <= cc.tol)
                    creation = true;
            if (!creation)
                traj_.recollisions.push_back(c);
        }
        return std::move(traj_);
    }

private:
    struct Pending {
        std::size_t a, b; ///< progenitor, child (0-based)
        double t_create, tau_star, tol;
        Vec3 omega, nu, va, vb; ///< va, vb: velocities before the scattering
    };
    struct CreationContact {
        std::size_t a, b;
        double time, tol;
    };

    /// Exact isolated-pair window; false if it does not fit or the pair is not isolated.
    bool try_exact_window(const Pending& pd, double s_target)
    {
        const double eps = state_.epsilon;
        const double w = eps * pd.tau_star;
        const double t_rel = pd.t_create - w;
        if (!(t_rel > s_target))
            return false;
        auto& P = state_.particles;
        const Vec3 vcm_future = 0.5 * (P[pd.a].v + P[pd.b].v);
        const Vec3 cm = 0.5 * (P[pd.a].x + P[pd.b].x);
        // backward over [t_rel, t_create]: positions x − u v for u ∈ [0, w]
        for (std::size_t i = 0; i < P.size(); ++i) {
            if (i == pd.a || i == pd.b)
                continue;
            if (detail::min_affine_distance(P[i].x - cm, -(P[i].v - vcm_future), w)
                <= opt_.isolation * eps)
                return false;
            for (std::size_t h = i + 1; h < P.size(); ++h) {
                if (h == pd.a || h == pd.b)
                    continue;
                if (detail::min_affine_distance(P[i].x - P[h].x, -(P[i].v - P[h].v), w) <= eps)
                    return false;
            }
        }
        // the pair is represented by its centre of mass track inside the window
        std::vector<PhasePoint> during = P;
        during[pd.a].v = vcm_future;
        during[pd.b].v = vcm_future;
        traj_.snapshots.back().state = during;
        for (std::size_t i = 0; i < P.size(); ++i)
            P[i].x -= w * (i == pd.a || i == pd.b ? vcm_future : P[i].v);
        const Vec3 nu_in = -pd.nu + 2.0 * pd.omega * dot(pd.omega, pd.nu);
        const Vec3 cm_rel = cm - w * vcm_future;
        Vec3 off = 0.5 * eps * nu_in;
        Vec3 xa = cm_rel - off, xb = cm_rel + off;
        for (double f = 1.0; norm(xb - xa) < eps; f = std::nextafter(f, 2.0)) {
            off = (0.5 * eps * f) * nu_in;
            xa = cm_rel - off;
            xb = cm_rel + off;
        }
        P[pd.a] = {xa, pd.va};
        P[pd.b] = {xb, pd.vb};
        state_.time = t_rel;
        traj_.snapshots.push_back({t_rel, P});
        return true;
    }

    void run_flow(double s)
    {
        FlowOptions fo;
        fo.tol = opt_.tol;
        fo.record_contacts = true;
        fo.observer = [this](const SystemState& st) { traj_.snapshots.push_back({st.time, st.particles}); };
        FlowReport rep;
        try {
            state_ = NewtonFlow(pot_, fo).run(state_, s - state_.time, &rep);
        } catch (const IntegrationStiff&) {
            ++traj_.stiff_segments;
            throw;
        }
        // the observer may already have pushed the end state
        if (traj_.snapshots.back().time != state_.time)
            traj_.snapshots.push_back({state_.time, state_.particles});
        traj_.energy_drift = std::max(traj_.energy_drift, rep.energy_drift);
        contacts_.insert(contacts_.end(), rep.contacts.begin(), rep.contacts.end());
    }

    RadialPotential pot_;
    IbfOptions opt_;
    SystemState state_;
    BackwardTrajectory traj_;
    std::optional<Pending> pending_;
    std::vector<ContactEpisode> contacts_;
    std::vector<CreationContact> creation_contacts_;
};

inline BackwardTrajectory build_ibf(const RadialPotential& pot, const TreeGraph& tree,
                                    const SignSequence& signs, const std::vector<PhasePoint>& z_j,
                                    const CollisionParams& params, double t, double epsilon,
                                    IbfOptions opt = {})
{
    if (!tree.valid() || signs.n() != tree.n() || params.n() != tree.n())
        throw Error(ErrorKind::precondition, "tree, signs and parameters disagree");
    params.validate(t);
    IbfBuilder b(pot, tree.j, z_j, t, epsilon, opt);
    for (int r = 0; r < tree.n(); ++r) {
        b.advance_to(params.times[r]);
        auto [nu, v] = detail::resolve_node(pot, params, r, signs.sigma[r], b.velocity(tree.k[r]));
        b.create(tree.k[r], signs.sigma[r], nu, v);
    }
    return b.finish();
}

// ---------------------------------------------------------------------------
// Virtual trajectories and overlaps

struct VirtualPiece {
    int label; ///< 1-based particle whose state is used
    double s_lo, s_hi;
};

struct VirtualTrajectory {
    int particle;
    std::vector<VirtualPiece> pieces; ///< increasing time, covering [0, t]

    int label_at(double s) const
    {
        for (const auto& p : pieces)
            if (s < p.s_hi || &p == &pieces.back())
                return p.label;
        return pieces.back().label;
    }

    /// Times at which the path changes line, below t.
    std::vector<double> switch_times() const
    {
        std::vector<double> ts;
        for (std::size_t i = 1; i < pieces.size(); ++i)
            ts.push_back(pieces[i].s_lo);
        return ts;
    }
};

/// ζⁱ for the 1-based particle i: its own line up to its creation, then its progenitors'.
inline VirtualTrajectory virtual_trajectory(const BackwardTrajectory& traj, int i)
{
    if (i < 1 || i > traj.particle_count())
        throw Error(ErrorKind::precondition, "particle index out of range");
    VirtualTrajectory vt{i, {}};
    int label = i;
    double lo = 0;
    while (label > traj.j) {
        const auto& rec = traj.records[label - traj.j - 1];
        vt.pieces.push_back({label, lo, rec.time});
        lo = rec.time;
        label = rec.parent;
    }
    vt.pieces.push_back({label, lo, traj.t});
    return vt;
}

inline Vec3 virtual_position(const BackwardTrajectory& traj, const VirtualTrajectory& vt, double s)
{
    return traj.at(vt.label_at(s) - 1, s).x;
}

struct PairOverlap {
    int i, h; ///< 1-based
    double t0, t1;
    double s_min, distance;
};

struct OverlapReport {
    bool in_N_delta = false;
    std::vector<PairOverlap> witnesses;
    std::vector<PairOverlap> pairs; ///< every pair's minimum over [0, t¹]
};

/// t⁰ and t¹ for the pair of virtual trajectories.
inline std::pair<double, double> pair_times(const BackwardTrajectory& traj,
                                            const VirtualTrajectory& a, const VirtualTrajectory& b)
{
    double t0 = traj.t;
    if (a.pieces.back().label == b.pieces.back().label) {
        // merge node: lowest time at which both paths run on the same line
        std::vector<double> cand = a.switch_times();
        auto sb = b.switch_times();
        cand.insert(cand.end(), sb.begin(), sb.end());
        std::sort(cand.begin(), cand.end());
        for (double s : cand)
            if (a.label_at(s) == b.label_at(s)) {
                t0 = s;
                break;
            }
    }
    double t1 = 0;
    for (const auto* vt : {&a, &b})
        for (double s : vt->switch_times())
            if (s < t0)
                t1 = std::max(t1, s);
    return {t0, t1};
}

inline OverlapReport overlap_detect(const BackwardTrajectory& traj, double delta)
{
    if (!(delta > 0))
        throw Error(ErrorKind::precondition, "delta must be positive");
    if (traj.kind != FlowKind::bbf)
        throw Error(ErrorKind::precondition, "overlap detection runs on a BBF");
    const int N = traj.particle_count();
    std::vector<VirtualTrajectory> vts;
    for (int i = 1; i <= N; ++i)
        vts.push_back(virtual_trajectory(traj, i));
    std::vector<double> nodes;
    for (const auto& r : traj.records)
        nodes.push_back(r.time);

    OverlapReport rep;
    for (int i = 1; i <= N; ++i)
        for (int h = i + 1; h <= N; ++h) {
            const auto& a = vts[i - 1];
            const auto& b = vts[h - 1];
            auto [t0, t1] = pair_times(traj, a, b);
            std::vector<double> cuts{0.0, t1};
            for (double s : nodes)
                if (s > 0 && s < t1)
                    cuts.push_back(s);
            std::sort(cuts.begin(), cuts.end());
            PairOverlap best{i, h, t0, t1, 0.0, std::numeric_limits<double>::infinity()};
            auto consider = [&](double s, double d) {
                if (d < best.distance) {
                    best.distance = d;
                    best.s_min = s;
                }
            };
            if (t1 == 0.0) {
                consider(0.0, norm(virtual_position(traj, a, 0.0) - virtual_position(traj, b, 0.0)));
            }
            for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
                double lo = cuts[c], hi = cuts[c + 1];
                if (!(hi > lo))
                    continue;
                double mid = 0.5 * (lo + hi);
                int la = a.label_at(mid), lb = b.label_at(mid);
                PhasePoint pa = traj.at(la - 1, mid), pb = traj.at(lb - 1, mid);
                Vec3 d = pb.x - pa.x, w = pb.v - pa.v;
                // relative position d + (s − mid) w on [lo, hi]
                double ww = norm2(w);
                double s = ww > 0 ? std::clamp(mid - dot(d, w) / ww, lo, hi) : lo;
                consider(s, norm(d + (s - mid) * w));
                consider(lo, norm(d + (lo - mid) * w));
                consider(hi, norm(d + (hi - mid) * w));
            }
            rep.pairs.push_back(best);
            if (best.distance <= delta) {
                rep.in_N_delta = true;
                rep.witnesses.push_back(best);
            }
        }
    return rep;
}

/// δ = ε^{1−μ}(log ε)².
inline double default_delta(double epsilon, double mu = 0.1)
{
    double l = std::log(epsilon);
    return std::pow(epsilon, 1.0 - mu) * l * l;
}

/// No pair of z_j can collide pointwise under free flow: (x_i − x_k) ∧ (v_i − v_k) ≠ 0.
inline bool omega_j_membership(const std::vector<PhasePoint>& z)
{
    for (std::size_t i = 0; i < z.size(); ++i)
        for (std::size_t k = i + 1; k < z.size(); ++k) {
            Vec3 dx = z[i].x - z[k].x, dv = z[i].v - z[k].v;
            double s = norm(dx) * norm(dv);
            if (!(s > 0) || norm(cross(dx, dv)) / s <= 1e-12)
                return false;
        }
    return true;
}

// ---------------------------------------------------------------------------
// Cutoffs and the incoming-variables map

struct CutoffOptions {
    double mu = 0.1;
    double beta = 1.0;
    /// Stable-potential mode: replace the impact test by the bad-set/speed test.
    bool stable_mode = false;
    double eta = 1e-3;
    double K = 10.0;
    const std::vector<TrapPoint>* trap = nullptr;
};

struct CutoffResult {
    bool energy_ok = true;
    bool impact_ok = true;
    double energy = 0;
    double min_wedge = std::numeric_limits<double>::infinity();
};

inline CutoffResult cutoff_indicators(const BackwardTrajectory& traj, double epsilon,
                                      const CutoffOptions& opt = {})
{
    if (!(epsilon > 0 && epsilon < 1))
        throw Error(ErrorKind::precondition, "cutoffs need 0 < epsilon < 1");
    CutoffResult res;
    const auto& top = traj.snapshots.front().state;
    double sum = 0;
    for (const auto& p : top)
        sum += norm2(p.v);
    for (const auto& r : traj.records)
        sum += norm2(r.child_after);
    res.energy = 0.5 * opt.beta * sum;
    res.energy_ok = res.energy < std::abs(std::log(epsilon));
    const double thr = std::pow(epsilon, opt.mu);
    for (const auto& r : traj.records) {
        Vec3 V = r.child_after - r.parent_after;
        double w = norm(cross(V, r.nu));
        res.min_wedge = std::min(res.min_wedge, w);
        if (opt.stable_mode) {
            if (!opt.trap)
                throw Error(ErrorKind::precondition, "stable mode needs a trap curve");
            if (bad_set_membership(*opt.trap, r.nu, V, opt.eta, opt.K))
                res.impact_ok = false;
        } else if (!(w > thr)) {
            res.impact_ok = false;
        }
    }
    return res;
}

/**
 * ℐ^(r): node r (1-based) switches to incoming variables. Outgoing nodes get
 * ν′ = −ν + 2ω(ω·ν); all nodes get V′ = η_{j+r}(t_r⁻) − η_{k_r}(t_r⁻).
 */
inline CollisionParams incoming_map(const BackwardTrajectory& traj, int r,
                                    const CollisionParams& params)
{
    if (traj.kind != FlowKind::bbf)
        throw Error(ErrorKind::precondition, "incoming map is defined on a BBF");
    if (r < 1 || r > static_cast<int>(traj.records.size()) || params.n() != traj.tree.n())
        throw Error(ErrorKind::precondition, "node index out of range");
    if (params.form(r - 1) != NodeForm::created_velocity)
        throw Error(ErrorKind::precondition, "node already in incoming variables");
    const CreationRecord& rec = traj.records[r - 1];
    CollisionParams out = params;
    if (out.forms.empty())
        out.forms.assign(params.n(), NodeForm::created_velocity);
    const Vec3 V = rec.child_after - rec.parent_after;
    Vec3 nu = rec.nu;
    if (dot(nu, V) > 0) {
        if (norm2(rec.omega) == 0)
            throw Error(ErrorKind::precondition, "outgoing node without scattering vector");
        nu = -nu + 2.0 * rec.omega * dot(rec.omega, nu);
    }
    out.nus[r - 1] = nu;
    out.velocities[r - 1] = rec.child_before - rec.parent_before;
    out.forms[r - 1] = NodeForm::incoming_relative;
    return out;
}

// ---------------------------------------------------------------------------
// Flow comparison

struct FlowComparison {
    double max_position_gap = 0;
    double velocity_gap_at_zero = 0;
    bool ibf_recollided = false;
    std::size_t fallback_windows = 0;
    double ibf_energy_drift = 0;
};

inline FlowComparison compare_trajectories(const BackwardTrajectory& bbf,
                                           const BackwardTrajectory& ibf, std::size_t grid = 2000)
{
    FlowComparison res;
    std::vector<double> ts;
    for (std::size_t g = 0; g <= grid; ++g)
        ts.push_back(bbf.t * static_cast<double>(g) / static_cast<double>(grid));
    for (const auto& r : bbf.records)
        ts.push_back(r.time);
    for (const auto& sn : ibf.snapshots)
        ts.push_back(sn.time);
    for (double s : ts)
        for (int i = 0; i < bbf.particle_count(); ++i)
            if (bbf.alive(i, s) && ibf.alive(i, s))
                res.max_position_gap
                    = std::max(res.max_position_gap, norm(bbf.at(i, s).x - ibf.at(i, s).x));
    const auto& a = bbf.state_at_zero();
    const auto& b = ibf.state_at_zero();
    for (std::size_t i = 0; i < a.size(); ++i)
        res.velocity_gap_at_zero = std::max(res.velocity_gap_at_zero, norm(a[i].v - b[i].v));
    res.ibf_recollided = !ibf.recollisions.empty();
    res.fallback_windows = ibf.fallback_windows;
    res.ibf_energy_drift = ibf.energy_drift;
    return res;
}

inline FlowComparison compare_flows(const RadialPotential& pot, const TreeGraph& tree,
                                    const SignSequence& signs, const std::vector<PhasePoint>& z_j,
                                    const CollisionParams& params, double t, double epsilon,
                                    IbfOptions opt = {})
{
    auto bbf = build_bbf(pot, tree, signs, z_j, params, t);
    auto ibf = build_ibf(pot, tree, signs, z_j, params, t, epsilon, opt);
    return compare_trajectories(bbf, ibf);
}

// ---------------------------------------------------------------------------
// Random parameter points

struct ParameterPoint {
    std::vector<PhasePoint> z_j;
    CollisionParams params;
};

/**
 * Draws z_j (normal positions of scale `spread`, standard normal velocities)
 * and admissible collision parameters: ordered uniform times, standard normal
 * created velocities, ν uniform and flipped into the σ half-space relative to
 * the BBF velocity of the progenitor.
 */
inline ParameterPoint random_parameter_point(const RadialPotential& pot, const TreeGraph& tree,
                                             const SignSequence& signs, double t, StreamRng& g,
                                             double spread = 1.0)
{
    if (!tree.valid() || signs.n() != tree.n())
        throw Error(ErrorKind::precondition, "tree and signs disagree");
    ParameterPoint pp;
    auto gauss = [&g] { return Vec3{g.normal(), g.normal(), g.normal()}; };
    do {
        pp.z_j.clear();
        for (int i = 0; i < tree.j; ++i)
            pp.z_j.push_back({spread * gauss(), gauss()});
    } while (!omega_j_membership(pp.z_j));
    const int n = tree.n();
    auto& p = pp.params;
    p.times.resize(n);
    for (auto& s : p.times)
        s = t * g.uniform_open();
    std::sort(p.times.begin(), p.times.end(), std::greater<>());
    BbfBuilder b(pot, tree.j, pp.z_j, t);
    for (int r = 0; r < n; ++r) {
        Vec3 v = gauss(), nu = g.unit_vector();
        if (signs.sigma[r] * dot(nu, v - b.velocity(tree.k[r])) < 0)
            nu = -nu;
        p.nus.push_back(nu);
        p.velocities.push_back(v);
        b.create(tree.k[r], signs.sigma[r], p.times[r], nu, v);
    }
    return pp;
}

/// Outside 𝒩(δ) with δ = ε^{1−μ}(log ε)² and inside both cutoffs.
inline bool flow_comparison_admissible(const BackwardTrajectory& bbf, double epsilon, double mu = 0.1,
                            double beta = 1.0)
{
    if (overlap_detect(bbf, default_delta(epsilon, mu)).in_N_delta)
        return false;
    auto c = cutoff_indicators(bbf, epsilon, CutoffOptions{mu, beta});
    return c.energy_ok && c.impact_ok;
}

} // namespace bgl
