#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "dynamics.hpp"
#include "errors.hpp"
#include "potentials.hpp"
#include "rng.hpp"
#include "trees_flows.hpp"
#include "two_body.hpp"
#include "vec3.hpp"

namespace bgl {

// ---------------------------------------------------------------------------
// Initial data

enum class SpatialProfile { gaussian, box };

/// f₀(x, v) = ρ(x) M_β(v − u): a spatial profile times a drifting Maxwellian.
struct InitialData {
    SpatialProfile profile = SpatialProfile::gaussian;
    double width = 1.0; ///< standard deviation (gaussian) or side length (box)
    Vec3 center;
    double beta = 1.0;
    Vec3 drift;
    Vec3 aspect{1, 1, 1}; ///< per-axis multipliers of width

    static InitialData gaussian_cloud(double sigma, double beta, Vec3 drift = {}, Vec3 center = {},
                                      Vec3 aspect = {1, 1, 1})
    {
        if (!(sigma > 0) || !(beta > 0) || !(aspect.x > 0 && aspect.y > 0 && aspect.z > 0))
            throw Error(ErrorKind::config, "gaussian cloud needs sigma, beta and aspect > 0");
        return {SpatialProfile::gaussian, sigma, center, beta, drift, aspect};
    }

    static InitialData box_maxwellian(double side, double beta, Vec3 drift = {}, Vec3 center = {})
    {
        if (!(side > 0) || !(beta > 0))
            throw Error(ErrorKind::config, "box maxwellian needs side > 0 and beta > 0");
        return {SpatialProfile::box, side, center, beta, drift, {1, 1, 1}};
    }

    std::string name() const { return profile == SpatialProfile::gaussian ? "gaussian" : "box"; }

    Vec3 axes() const { return width * aspect; }
    double volume() const { Vec3 s = axes(); return s.x * s.y * s.z; }

    double spatial(const Vec3& x) const
    {
        Vec3 d = x - center, s = axes();
        if (profile == SpatialProfile::gaussian) {
            double q = d.x * d.x / (s.x * s.x) + d.y * d.y / (s.y * s.y) + d.z * d.z / (s.z * s.z);
            return std::exp(-0.5 * q) / (std::pow(2.0 * std::numbers::pi, 1.5) * volume());
        }
        if (std::abs(d.x) > 0.5 * s.x || std::abs(d.y) > 0.5 * s.y || std::abs(d.z) > 0.5 * s.z)
            return 0.0;
        return 1.0 / volume();
    }

    double velocity(const Vec3& v) const
    {
        return std::pow(beta / (2.0 * std::numbers::pi), 1.5) * std::exp(-0.5 * beta * norm2(v - drift));
    }

    double operator()(const PhasePoint& z) const { return spatial(z.x) * velocity(z.v); }

    double spatial_sup() const
    {
        return profile == SpatialProfile::gaussian ? 1.0 / (std::pow(2.0 * std::numbers::pi, 1.5) * volume())
                                                   : 1.0 / volume();
    }

    /// ∫ρ².
    double spatial_l2() const
    {
        return profile == SpatialProfile::gaussian ? 1.0 / (std::pow(4.0 * std::numbers::pi, 1.5) * volume())
                                                   : 1.0 / volume();
    }

    /// sup e^{βv²/2} f₀, the weighted sup-norm of the hypotheses.
    double weighted_sup() const
    {
        // e^{βv²/2 − β(v−u)²/2} is unbounded unless u = 0
        if (norm2(drift) > 0)
            return std::numeric_limits<double>::infinity();
        return spatial_sup() * std::pow(beta / (2.0 * std::numbers::pi), 1.5);
    }

    /// C₀ = (4π/3) sup ρ: bounds the f₀-mass of any ε-ball by C₀ε³.
    double c0() const { return 4.0 * std::numbers::pi / 3.0 * spatial_sup(); }

    Vec3 sample_position(StreamRng& g) const
    {
        Vec3 s = axes();
        if (profile == SpatialProfile::gaussian)
            return center + Vec3{s.x * g.normal(), s.y * g.normal(), s.z * g.normal()};
        return center + Vec3{s.x * (g.uniform() - 0.5), s.y * (g.uniform() - 0.5), s.z * (g.uniform() - 0.5)};
    }

    Vec3 sample_velocity(StreamRng& g) const
    {
        return drift + Vec3{g.normal(), g.normal(), g.normal()} / std::sqrt(beta);
    }
};

// ---------------------------------------------------------------------------
// Estimates and reductions

struct MarginalEstimate {
    double value = 0;
    double std_error = 0;
    std::uint64_t n_samples = 0;
    std::uint64_t seed = 0;
    double rejected_fraction = 0;
    // rejection and diagnostic breakdown
    std::uint64_t trapped = 0;    ///< scattering vector undefined
    std::uint64_t constraint = 0; ///< third particle within ε at a creation (integrand zero)
    std::uint64_t stiff = 0;      ///< integration-stiff IBF segments
    double overlap_fraction = 0;  ///< samples whose BBF lies in 𝒩(δ)
    double cutoff_fraction = 0;   ///< samples outside 𝟙₁ᵉ𝟙₂ᵉ
    double energy_cut_weight = 0; ///< fraction of |weight| removed by 𝟙₁ᵉ
    double clipped_mass = 0;      ///< fraction of |weight| with ΠBᵉ > ε^{−λ} (reported only)
    double recollision_fraction = 0;
};

namespace detail {

/// Order-fixed pairwise summation, so results do not depend on the thread count.
inline double pairwise_sum(const double* x, std::size_t n)
{
    if (n <= 8) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i)
            s += x[i];
        return s;
    }
    std::size_t h = n / 2;
    return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

inline double pairwise_sum(const std::vector<double>& x) { return pairwise_sum(x.data(), x.size()); }

/// Runs body(i) for i in [0, n) on `threads` workers; each index is written by one worker.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body)
{
    if (threads <= 1 || n < 64) {
        for (std::size_t i = 0; i < n; ++i)
            body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex m;
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = static_cast<std::size_t>(w); i < n; i += threads)
                    body(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(m);
                if (!err)
                    err = std::current_exception();
            }
        });
    for (auto& th : pool)
        th.join();
    if (err)
        std::rethrow_exception(err);
}

inline void mean_and_error(const std::vector<double>& v, double& mean, double& se)
{
    const double n = static_cast<double>(v.size());
    if (v.empty()) {
        mean = se = 0;
        return;
    }
    mean = pairwise_sum(v) / n;
    if (v.size() < 2) {
        se = 0;
        return;
    }
    std::vector<double> d(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        d[i] = (v[i] - mean) * (v[i] - mean);
    se = std::sqrt(pairwise_sum(d) / (n - 1.0) / n);
}

} // namespace detail

/// ε^{2n}(N−j)(N−j−1)⋯(N−j−n+1); zero and flagged when n > N − j.
struct AlphaFactor {
    double value;
    bool beyond_range;
};

inline AlphaFactor alpha_factor(double epsilon, std::uint64_t N, int n, int j)
{
    if (n < 0 || j < 1)
        throw Error(ErrorKind::precondition, "alpha factor needs n >= 0 and j >= 1");
    if (static_cast<std::uint64_t>(j) > N || static_cast<std::uint64_t>(n) > N - j)
        return {0.0, true};
    double a = 1.0;
    for (int i = 0; i < n; ++i)
        a *= epsilon * epsilon * static_cast<double>(N - j - i);
    return {a, false};
}

// ---------------------------------------------------------------------------
// Excluded-volume initial marginals

struct ExcludedVolumeEstimate {
    MarginalEstimate marginal; ///< f^N_{0,j}(z_j)
    double ratio = 1;          ///< F^N(z_j)/𝒵_N
    double ratio_se = 0;
    double lower = 0, upper = 0; ///< 1 − 2C₀jε and (1 − C₀ε)^{−j}
    double c0 = 0;
    bool first_order = false; ///< complement above N_max: analytic approximation used
};

struct ExcludedVolumeOptions {
    std::uint64_t n_max = 512; ///< largest explicitly simulated complement
    std::size_t burn_in = 50;  ///< sweeps
    std::size_t batches = 20;
};

namespace detail {

inline bool separated(const std::vector<PhasePoint>& z, double eps)
{
    for (std::size_t i = 0; i < z.size(); ++i)
        for (std::size_t k = i + 1; k < z.size(); ++k)
            if (!(norm(z[i].x - z[k].x) > eps))
                return false;
    return true;
}

/// First-order F^N/𝒵_N: each ε-ball removes (4π/3)ε³ρ of mass per complement particle.
inline double first_order_ratio(const InitialData& init, std::uint64_t N, double eps,
                                const std::vector<PhasePoint>& z)
{
    const double m = static_cast<double>(N - z.size());
    const double ball = 4.0 * std::numbers::pi / 3.0 * eps * eps * eps;
    double a = 1.0, jd = static_cast<double>(z.size());
    for (const auto& p : z)
        a -= m * ball * init.spatial(p.x);
    double b = 1.0 - m * jd * ball * init.spatial_l2() - 0.5 * jd * (jd - 1.0) * ball * init.spatial_l2();
    return a / b;
}

} // namespace detail

/**
 * F^N(z_j)/𝒵_N as a ratio of two expectations under the hard-sphere gas of
 * the N − j complement particles: the probability that the fixed z_j fits,
 * over the probability that j fresh draws from ρ fit (Widom insertion). Both
 * use the same Markov chain, so their fluctuations largely cancel.
 */
inline ExcludedVolumeEstimate initial_marginal_excluded_volume(
    const InitialData& init, std::uint64_t N, double epsilon, const std::vector<PhasePoint>& z_j,
    std::size_t n_samples, std::uint64_t seed, const ExcludedVolumeOptions& opt = {})
{
    const std::size_t j = z_j.size();
    if (j == 0 || N < j)
        throw Error(ErrorKind::precondition, "need 1 <= j <= N");
    if (!(epsilon > 0))
        throw Error(ErrorKind::precondition, "epsilon must be positive");
    ExcludedVolumeEstimate res;
    res.c0 = init.c0();
    const double jd = static_cast<double>(j);
    res.lower = 1.0 - 2.0 * res.c0 * jd * epsilon;
    res.upper = std::pow(1.0 - res.c0 * epsilon, -jd);
    res.marginal.seed = seed;
    double prod = 1.0;
    for (const auto& p : z_j)
        prod *= init(p);
    if (!detail::separated(z_j, epsilon)) {
        res.ratio = 0;
        res.marginal.n_samples = n_samples;
        return res;
    }
    const std::uint64_t m = N - j;
    if (m > opt.n_max) {
        res.first_order = true;
        res.ratio = std::clamp(detail::first_order_ratio(init, N, epsilon, z_j), res.lower, res.upper);
        res.marginal.value = res.ratio * prod;
        res.marginal.n_samples = 0;
        return res;
    }

    StreamRng g(seed, hash_label("excluded-volume"), N * 1000003ULL + j);
    std::vector<Vec3> cfg;
    cfg.reserve(m);
    const double e2 = epsilon * epsilon;
    auto clear_of = [&](const Vec3& x, std::size_t skip) {
        for (std::size_t i = 0; i < cfg.size(); ++i)
            if (i != skip && norm2(cfg[i] - x) <= e2)
                return false;
        return true;
    };
    // random sequential start, then independence Metropolis sweeps (proposals from ρ)
    for (std::size_t tries = 0; cfg.size() < m; ++tries) {
        if (tries > 1000 * (m + 1))
            throw Error(ErrorKind::budget_exhausted, "could not place the complement particles");
        Vec3 x = init.sample_position(g);
        if (clear_of(x, cfg.size()))
            cfg.push_back(x);
    }
    auto sweep = [&] {
        for (std::size_t i = 0; i < m; ++i) {
            Vec3 x = init.sample_position(g);
            if (clear_of(x, i))
                cfg[i] = x;
        }
    };
    for (std::size_t s = 0; s < opt.burn_in && m > 0; ++s)
        sweep();
    std::vector<double> a(n_samples), b(n_samples);
    std::vector<Vec3> fresh(j);
    for (std::size_t s = 0; s < n_samples; ++s) {
        if (m > 0)
            sweep();
        bool fits = true;
        for (const auto& p : z_j)
            fits = fits && clear_of(p.x, cfg.size());
        a[s] = fits ? 1.0 : 0.0;
        bool ins = true;
        for (std::size_t q = 0; q < j; ++q) {
            fresh[q] = init.sample_position(g);
            ins = ins && clear_of(fresh[q], cfg.size());
            for (std::size_t r = 0; r < q; ++r)
                ins = ins && norm2(fresh[q] - fresh[r]) > e2;
        }
        b[s] = ins ? 1.0 : 0.0;
    }
    // ratio of means with batch-means error (the chain is correlated)
    double A = detail::pairwise_sum(a) / static_cast<double>(n_samples);
    double B = detail::pairwise_sum(b) / static_cast<double>(n_samples);
    if (!(B > 0))
        throw Error(ErrorKind::budget_exhausted, "no successful insertion; raise the sample count");
    res.ratio = A / B;
    const std::size_t nb = std::max<std::size_t>(2, std::min(opt.batches, n_samples / 2));
    const std::size_t bs = n_samples / nb;
    std::vector<double> lin(nb);
    for (std::size_t k = 0; k < nb; ++k) {
        double sa = 0, sb = 0;
        for (std::size_t s = k * bs; s < (k + 1) * bs; ++s) {
            sa += a[s];
            sb += b[s];
        }
        lin[k] = (sa - res.ratio * sb) / (static_cast<double>(bs) * B);
    }
    double mean_lin, se_lin;
    detail::mean_and_error(lin, mean_lin, se_lin);
    res.ratio_se = se_lin;
    res.marginal.value = res.ratio * prod;
    res.marginal.std_error = res.ratio_se * prod;
    res.marginal.n_samples = n_samples;
    return res;
}

/// How f_{0,m} is evaluated at the time-zero state of a backward flow.
struct DatumSpec {
    bool excluded_volume = false;
    std::uint64_t N = 0;
    double epsilon = 0;

    double operator()(const InitialData& init, const std::vector<PhasePoint>& z) const
    {
        double prod = 1.0;
        for (const auto& p : z)
            prod *= init(p);
        if (!excluded_volume || prod == 0.0)
            return prod;
        if (!detail::separated(z, epsilon))
            return 0.0;
        const double jd = static_cast<double>(z.size());
        const double c0 = init.c0();
        double r = detail::first_order_ratio(init, N, epsilon, z);
        return prod * std::clamp(r, 1.0 - 2.0 * c0 * jd * epsilon, std::pow(1.0 - c0 * epsilon, -jd));
    }
};

// ---------------------------------------------------------------------------
// Term estimators

struct TermOptions {
    QuadratureOptions quad{1e-10, 10, 1e-16};
    int threads = 1;
    /// Sample σ=+ nodes in incoming variables (ν′, V′) and map back through ℐ.
    bool incoming_parametrization = false;
    // interacting sampler
    IbfOptions ibf;
    bool diagnostics = true;
    bool apply_cutoffs = false;
    double mu = 0.1;
    double lambda = 0.2;
    double delta = 0; ///< 0 means ε^{1−μ}(log ε)²
    /// Sample indices start here, so a continuation run extends an earlier one.
    std::uint64_t first_index = 0;
};

/// Pools two estimates of the same term drawn from disjoint sample indices.
inline MarginalEstimate merge_estimates(const MarginalEstimate& a, const MarginalEstimate& b)
{
    if (a.n_samples == 0)
        return b;
    if (b.n_samples == 0)
        return a;
    const double na = static_cast<double>(a.n_samples), nb = static_cast<double>(b.n_samples);
    const double n = na + nb;
    MarginalEstimate m = a;
    m.n_samples = a.n_samples + b.n_samples;
    m.value = (na * a.value + nb * b.value) / n;
    // pooled sum of squares, recovered from each part's standard error
    double ss = a.std_error * a.std_error * na * (na - 1) + b.std_error * b.std_error * nb * (nb - 1)
                + na * nb / n * (a.value - b.value) * (a.value - b.value);
    m.std_error = n > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0;
    m.trapped += b.trapped;
    m.constraint += b.constraint;
    m.stiff += b.stiff;
    auto mix = [&](double x, double y) { return (na * x + nb * y) / n; };
    m.rejected_fraction = mix(a.rejected_fraction, b.rejected_fraction);
    m.overlap_fraction = mix(a.overlap_fraction, b.overlap_fraction);
    m.cutoff_fraction = mix(a.cutoff_fraction, b.cutoff_fraction);
    m.energy_cut_weight = mix(a.energy_cut_weight, b.energy_cut_weight);
    m.clipped_mass = mix(a.clipped_mass, b.clipped_mass);
    m.recollision_fraction = mix(a.recollision_fraction, b.recollision_fraction);
    return m;
}

inline std::uint64_t term_stream(const TreeGraph& tree, const SignSequence& signs)
{
    std::uint64_t h = splitmix64(static_cast<std::uint64_t>(tree.j) * 0x100000001b3ULL);
    for (int k : tree.k)
        h = splitmix64(h ^ static_cast<std::uint64_t>(k));
    for (int s : signs.sigma)
        h = splitmix64(h ^ (s > 0 ? 0x2bULL : 0x2dULL));
    return h;
}

namespace detail {

struct NodeDraw {
    Vec3 nu, v;
    double weight; ///< 1 / proposal density, including |ν·V|
};

/// Draws (ν, v) for one node given η_k(t_r⁺); returns the weight times Bᵉ.
inline NodeDraw draw_node(StreamRng& g, const InitialData& init, int sigma, const Vec3& eta,
                          const RadialPotential& pot, const TermOptions& opt)
{
    Vec3 u = init.sample_velocity(g);
    Vec3 nu = g.unit_vector();
    const double dens_v = init.velocity(u);
    const double hemi = 2.0 * std::numbers::pi;
    if (opt.incoming_parametrization && sigma > 0) {
        Vec3 Vin = u - eta;
        if (dot(nu, Vin) > 0)
            nu = -nu;
        if (!(norm2(Vin) > 0))
            return {nu, u, 0.0};
        PairState out = scattering_operator(pot, nu, Vin, opt.quad);
        return {out.nu, out.V + eta, hemi / dens_v * std::abs(dot(nu, Vin))};
    }
    Vec3 V = u - eta;
    if (sigma * dot(nu, V) < 0)
        nu = -nu;
    return {nu, u, hemi / dens_v * std::abs(dot(nu, V))};
}

inline std::vector<double> draw_times(StreamRng& g, int n, double t, double& weight)
{
    std::vector<double> ts(n);
    for (auto& s : ts)
        s = t * g.uniform_open();
    std::sort(ts.begin(), ts.end(), std::greater<>());
    weight = std::pow(t, n) / std::tgamma(n + 1.0);
    return ts;
}

} // namespace detail

/**
 * 𝒯_σ(z_j, t) by importance sampling of dΛ: ordered uniform times, created
 * velocities from the initial-data Maxwellian, ν uniform on the admissible
 * half-sphere. Each sample builds the BBF and evaluates ΠB · f_{0,j+n}(ζ(0)).
 */
inline MarginalEstimate sample_term_bbf(const RadialPotential& pot, const TreeGraph& tree,
                                        const SignSequence& signs, const std::vector<PhasePoint>& z_j,
                                        double t, const InitialData& init, std::size_t n_samples,
                                        std::uint64_t seed, const TermOptions& opt = {})
{
    if (!tree.valid() || signs.n() != tree.n())
        throw Error(ErrorKind::precondition, "tree and signs disagree");
    if (!omega_j_membership(z_j))
        throw Error(ErrorKind::precondition, "z_j is not in Omega_j");
    if (!(t > 0))
        throw Error(ErrorKind::precondition, "t must be positive");
    MarginalEstimate est;
    est.seed = seed;
    est.n_samples = n_samples;
    const int n = tree.n();
    if (n == 0) {
        BbfBuilder b(pot, tree.j, z_j, t);
        est.value = DatumSpec{}(init, b.finish().state_at_zero());
        return est;
    }
    const std::uint64_t stream = term_stream(tree, signs);
    std::vector<double> vals(n_samples, 0.0);
    std::vector<unsigned char> trapped(n_samples, 0);
    detail::parallel_for(n_samples, opt.threads, [&](std::size_t i) {
        StreamRng g(seed, stream, opt.first_index + i);
        double w = 1.0;
        auto ts = detail::draw_times(g, n, t, w);
        try {
            BbfBuilder b(pot, tree.j, z_j, t);
            for (int r = 0; r < n; ++r) {
                Vec3 eta = b.velocity(tree.k[r]);
                auto d = detail::draw_node(g, init, signs.sigma[r], eta, pot, opt);
                w *= d.weight;
                if (w == 0.0)
                    return;
                b.create(tree.k[r], signs.sigma[r], ts[r], d.nu, d.v);
            }
            vals[i] = w * DatumSpec{}(init, b.finish().state_at_zero());
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::trapped_or_singular && e.kind() != ErrorKind::rejected)
                throw;
            trapped[i] = 1;
        }
    });
    detail::mean_and_error(vals, est.value, est.std_error);
    est.trapped = static_cast<std::uint64_t>(std::count(trapped.begin(), trapped.end(), 1));
    est.rejected_fraction = static_cast<double>(est.trapped) / static_cast<double>(n_samples);
    return est;
}

/**
 * 𝒯ᵉ_σ(z_j, t): same sampler over the IBF with Bᵉ (including the
 * third-particle indicator) and the excluded-volume datum at (N, ε).
 */
inline MarginalEstimate sample_term_ibf(const RadialPotential& pot, const TreeGraph& tree,
                                        const SignSequence& signs, const std::vector<PhasePoint>& z_j,
                                        double t, const InitialData& init, double epsilon,
                                        std::uint64_t N, std::size_t n_samples, std::uint64_t seed,
                                        const TermOptions& opt = {}, bool excluded_volume = true)
{
    if (!tree.valid() || signs.n() != tree.n())
        throw Error(ErrorKind::precondition, "tree and signs disagree");
    if (!omega_j_membership(z_j))
        throw Error(ErrorKind::precondition, "z_j is not in Omega_j");
    if (!(t > 0) || !(epsilon > 0 && epsilon < 1))
        throw Error(ErrorKind::precondition, "need t > 0 and 0 < epsilon < 1");
    const DatumSpec datum{excluded_volume, N, epsilon};
    MarginalEstimate est;
    est.seed = seed;
    est.n_samples = n_samples;
    const int n = tree.n();
    if (n == 0) {
        IbfBuilder b(pot, tree.j, z_j, t, epsilon, opt.ibf);
        est.value = datum(init, b.finish().state_at_zero());
        return est;
    }
    const double delta = opt.delta > 0 ? opt.delta : default_delta(epsilon, opt.mu);
    const double clip = std::pow(epsilon, -opt.lambda);
    const std::uint64_t stream = term_stream(tree, signs);
    enum Flag : unsigned char { ok = 0, trapped = 1, constraint = 2, stiff = 4, overlap = 8, cut = 16,
                                energy_cut = 32, clipped = 64, recollided = 128 };
    std::vector<double> vals(n_samples, 0.0), weights(n_samples, 0.0);
    std::vector<unsigned char> flags(n_samples, 0);
    detail::parallel_for(n_samples, opt.threads, [&](std::size_t i) {
        StreamRng g(seed, stream, opt.first_index + i);
        double w = 1.0;
        auto ts = detail::draw_times(g, n, t, w);
        CollisionParams params;
        params.times = ts;
        double bprod = 1.0;
        unsigned char fl = 0;
        try {
            IbfBuilder b(pot, tree.j, z_j, t, epsilon, opt.ibf);
            for (int r = 0; r < n; ++r) {
                b.advance_to(ts[r]);
                Vec3 eta = b.velocity(tree.k[r]);
                auto d = detail::draw_node(g, init, signs.sigma[r], eta, pot, opt);
                w *= d.weight;
                bprod *= std::abs(dot(d.nu, d.v - eta));
                params.nus.push_back(d.nu);
                params.velocities.push_back(d.v);
                if (w == 0.0) {
                    flags[i] = fl;
                    return;
                }
                b.create(tree.k[r], signs.sigma[r], d.nu, d.v);
            }
            auto traj = b.finish();
            double val = w * datum(init, traj.state_at_zero());
            if (!traj.recollisions.empty())
                fl |= recollided;
            if (opt.diagnostics || opt.apply_cutoffs) {
                auto cu = cutoff_indicators(traj, epsilon, CutoffOptions{opt.mu, init.beta});
                if (!cu.energy_ok)
                    fl |= energy_cut;
                if (!(cu.energy_ok && cu.impact_ok))
                    fl |= cut;
                try {
                    auto bbf = build_bbf(pot, tree, signs, z_j, params, t);
                    if (overlap_detect(bbf, delta).in_N_delta)
                        fl |= overlap;
                } catch (const Error&) {
                    fl |= overlap;
                }
            }
            if (bprod > clip)
                fl |= clipped;
            weights[i] = std::abs(val);
            if (opt.apply_cutoffs && (fl & (cut | overlap)))
                val = 0.0;
            vals[i] = val;
        } catch (const IntegrationStiff&) {
            fl |= stiff;
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::rejected)
                fl |= constraint;
            else if (e.kind() == ErrorKind::trapped_or_singular)
                fl |= trapped;
            else
                throw;
        }
        flags[i] = fl;
    });
    detail::mean_and_error(vals, est.value, est.std_error);
    double total_w = detail::pairwise_sum(weights), ecut_w = 0, clip_w = 0;
    std::uint64_t n_ov = 0, n_cut = 0, n_rec = 0;
    for (std::size_t i = 0; i < n_samples; ++i) {
        est.trapped += (flags[i] & trapped) != 0;
        est.constraint += (flags[i] & constraint) != 0;
        est.stiff += (flags[i] & stiff) != 0;
        n_ov += (flags[i] & overlap) != 0;
        n_cut += (flags[i] & cut) != 0;
        n_rec += (flags[i] & recollided) != 0;
        if (flags[i] & energy_cut)
            ecut_w += weights[i];
        if (flags[i] & clipped)
            clip_w += weights[i];
    }
    const double ns = static_cast<double>(n_samples);
    est.rejected_fraction = static_cast<double>(est.trapped + est.stiff) / ns;
    est.overlap_fraction = static_cast<double>(n_ov) / ns;
    est.cutoff_fraction = static_cast<double>(n_cut) / ns;
    est.recollision_fraction = static_cast<double>(n_rec) / ns;
    est.energy_cut_weight = total_w > 0 ? ecut_w / total_w : 0.0;
    est.clipped_mass = total_w > 0 ? clip_w / total_w : 0.0;
    return est;
}

// ---------------------------------------------------------------------------
// Deterministic oracle for one node

namespace detail {

/// Gauss–Legendre nodes and weights on [−1, 1].
inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w)
{
    x.assign(n, 0.0);
    w.assign(n, 0.0);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5)), dp = 0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1, p1 = 0;
            for (int k = 1; k <= n; ++k) {
                double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
            }
            dp = n * (z * p0 - p1) / (z * z - 1.0);
            double z1 = z;
            z = z1 - p0 / dp;
            if (std::abs(z - z1) < 1e-15)
                break;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = w[n - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
}

} // namespace detail

struct OracleGrid {
    int time = 8, speed = 24, polar = 12, azimuth = 16, theta = 16, phi = 16;
};

/**
 * 𝒯_σ for j = 1, n = 1 by tensor-product quadrature. The created velocity is
 * written as v₂ = v₁ + V with V in spherical coordinates, and ν by its polar
 * angle about V̂, so |ν·V| = |V||cos θ| is smooth on every panel. Gauss–Legendre
 * in t₁, |V| ∈ [0, V_max], the polar angles and trapezoid in the azimuths.
 * Θ depends only on (sin θ, |V|) and is computed once per node pair.
 */
inline double n1_quadrature_oracle(const RadialPotential& pot, int sigma, const PhasePoint& z,
                                   double t, const InitialData& init, const OracleGrid& grid = {},
                                   const QuadratureOptions& q = {1e-10, 10, 1e-16})
{
    if (sigma != 1 && sigma != -1)
        throw Error(ErrorKind::precondition, "sigma must be +1 or -1");
    using std::numbers::pi;
    std::vector<double> xt, wt, xs, ws, xa, wa, xth, wth;
    detail::gauss_legendre(grid.time, xt, wt);
    detail::gauss_legendre(grid.speed, xs, ws);
    detail::gauss_legendre(grid.polar, xa, wa);
    detail::gauss_legendre(grid.theta, xth, wth);
    const Vec3 v1 = z.v;
    // M(v₁ + V) is below e^{−50} past this radius
    const double vmax = norm(v1 - init.drift) + 10.0 / std::sqrt(init.beta);
    const double th_lo = sigma > 0 ? 0.0 : pi / 2;

    std::vector<double> theta_def(grid.speed * grid.theta, pi / 2);
    if (sigma > 0)
        for (int is = 0; is < grid.speed; ++is)
            for (int ia = 0; ia < grid.theta; ++ia) {
                double sp = 0.5 * vmax * (xs[is] + 1.0);
                double th = th_lo + 0.25 * pi * (xth[ia] + 1.0);
                theta_def[is * grid.theta + ia] = theta_of_rho(pot, std::min(1.0, std::sin(th)), sp, q);
            }

    double total = 0;
    for (int is = 0; is < grid.speed; ++is) {
        const double sp = 0.5 * vmax * (xs[is] + 1.0);
        const double wsp = 0.5 * vmax * ws[is] * sp * sp;
        for (int ip = 0; ip < grid.polar; ++ip) {
            const double ca = xa[ip], sa = std::sqrt(std::max(0.0, 1.0 - ca * ca));
            for (int iz = 0; iz < grid.azimuth; ++iz) {
                const double az = 2.0 * pi * iz / grid.azimuth;
                const double wdir = wsp * wa[ip] * 2.0 * pi / grid.azimuth;
                const Vec3 e0{sa * std::cos(az), sa * std::sin(az), ca};
                const Vec3 V = sp * e0, v2 = v1 + V;
                const double m2 = init.velocity(v2);
                if (m2 == 0.0)
                    continue;
                const Vec3 e1 = any_orthogonal(e0), e2 = cross(e0, e1);
                for (int ia = 0; ia < grid.theta; ++ia) {
                    const double th = th_lo + 0.25 * pi * (xth[ia] + 1.0);
                    const double ct = std::cos(th), st = std::sin(th);
                    const double wang = wdir * 0.25 * pi * wth[ia] * st * sp * std::abs(ct) * m2;
                    for (int iq = 0; iq < grid.phi; ++iq) {
                        const double ph = 2.0 * pi * iq / grid.phi;
                        const Vec3 nu = ct * e0 + st * (std::cos(ph) * e1 + std::sin(ph) * e2);
                        Vec3 a1 = v1, a2 = v2;
                        if (sigma > 0)
                            std::tie(a1, a2)
                                = apply_collision_rule(v1, v2, omega_from_theta(nu, V, theta_def[is * grid.theta + ia]));
                        double inner = 0;
                        for (int it = 0; it < grid.time; ++it) {
                            const double t1 = 0.5 * t * (xt[it] + 1.0);
                            const Vec3 xc = z.x - (t - t1) * v1;
                            inner += 0.5 * t * wt[it] * init.spatial(xc - t1 * a1) * init.spatial(xc - t1 * a2);
                        }
                        total += wang * (2.0 * pi / grid.phi) * inner;
                    }
                }
            }
        }
    }
    // M(a₁)M(a₂) = M(v₁)M(v₂) by conservation
    return init.velocity(v1) * total;
}

// ---------------------------------------------------------------------------
// Series assembly

struct SeriesConfig {
    int n_bar = 3;
    double mu = 0.1;
    double lambda = 0.2;
    double delta = 0; ///< 0 means ε^{1−μ}(log ε)²
    double beta_cutoff = 1.0;
    double target_rel_error = 0.05; ///< per term; drives the second-pass allocation
};

struct InteractingMode {
    double epsilon;
    std::uint64_t N;
    bool excluded_volume = true; ///< false: product datum f₀^{⊗m}, isolating the dynamics
};

struct LevelSummary {
    int n;
    double signed_sum, abs_sum, variance;
    std::uint64_t samples;
    std::size_t terms;
};

struct TermRecord {
    TreeGraph tree;
    SignSequence signs;
    double coefficient; ///< (−1)^{#−} times α_n in interacting mode
    MarginalEstimate estimate;
};

struct SeriesEstimate {
    MarginalEstimate estimate;
    std::vector<LevelSummary> levels;
    std::vector<TermRecord> terms;
    double tail_bound = 0; ///< geometric estimate of the truncated remainder
    double tail_ratio = 0;
    bool budget_exhausted = false;
    bool beyond_convergence = false; ///< ratio ≥ 1: t likely beyond the short-time radius
    std::size_t terms_above_target = 0;
    // sample-weighted over all n ≥ 1 terms
    double overlap_fraction = 0, cutoff_fraction = 0, energy_cut_weight = 0, clipped_mass = 0,
           recollision_fraction = 0;
};

/**
 * Σ_{n ≤ n̄} Σ_Γ Σ_σ (−1)^{#−} [α_n] 𝒯. The sample budget is split over levels
 * proportionally to tⁿ|Γ(j,n)|/n!. Half of a level's share goes evenly to its
 * terms; the rest is spread in proportion to the pilot standard deviations,
 * continuing each term's sample stream.
 */
inline SeriesEstimate assemble_series(const RadialPotential& pot, const std::vector<PhasePoint>& z_j,
                                      double t, const SeriesConfig& cfg, const InitialData& init,
                                      const InteractingMode* mode, std::uint64_t budget,
                                      std::uint64_t seed, const TermOptions& base_opt = {},
                                      std::size_t min_samples_per_term = 64)
{
    const int j = static_cast<int>(z_j.size());
    if (cfg.n_bar < 0)
        throw Error(ErrorKind::config, "n_bar must be >= 0");
    if (!(t >= 0))
        throw Error(ErrorKind::precondition, "t must be nonnegative");
    if (!omega_j_membership(z_j))
        throw Error(ErrorKind::precondition, "z_j is not in Omega_j");
    SeriesEstimate res;
    res.estimate.seed = seed;
    TermOptions opt = base_opt;
    opt.mu = cfg.mu;
    opt.lambda = cfg.lambda;
    opt.delta = cfg.delta;
    opt.first_index = 0;
    const DatumSpec datum = mode ? DatumSpec{mode->excluded_volume, mode->N, mode->epsilon} : DatumSpec{};
    if (t == 0.0) {
        res.estimate.value = datum(init, z_j);
        res.levels.push_back({0, res.estimate.value, std::abs(res.estimate.value), 0, 0, 1});
        return res;
    }
    std::vector<double> share(cfg.n_bar + 1, 0.0);
    double share_sum = 0;
    for (int n = 1; n <= cfg.n_bar; ++n) {
        share[n] = std::pow(t, n) * static_cast<double>(tree_count(j, n)) / std::tgamma(n + 1.0);
        share_sum += share[n];
    }
    auto run = [&](const TreeGraph& tree, const SignSequence& sg, std::uint64_t ns, const TermOptions& o) {
        return mode ? sample_term_ibf(pot, tree, sg, z_j, t, init, mode->epsilon, mode->N, ns, seed, o,
                                     mode->excluded_volume)
                    : sample_term_bbf(pot, tree, sg, z_j, t, init, ns, seed, o);
    };
    double value = 0, var = 0;
    std::uint64_t used = 0, weighted_n = 0;
    double w_ov = 0, w_cut = 0, w_ecut = 0, w_clip = 0, w_rec = 0;
    for (int n = 0; n <= cfg.n_bar; ++n) {
        double alpha = 1.0;
        if (mode) {
            auto af = alpha_factor(mode->epsilon, mode->N, n, j);
            if (af.beyond_range)
                break;
            alpha = af.value;
        }
        std::vector<TermRecord> level;
        TreeEnumerator trees(j, n);
        TreeGraph tree;
        while (trees.next(tree))
            for (const auto& sg : SignSequence::all(n))
                level.push_back({tree, sg, sg.sign() * alpha, {}});
        const auto n_terms = static_cast<double>(level.size());
        if (n == 0) {
            level[0].estimate = run(level[0].tree, level[0].signs, 1, opt);
        } else {
            const double level_budget = static_cast<double>(budget) * share[n] / share_sum;
            const auto pilot = static_cast<std::uint64_t>(0.5 * level_budget / n_terms);
            if (pilot < min_samples_per_term) {
                res.budget_exhausted = true;
                break;
            }
            double sd_sum = 0;
            for (auto& tr : level) {
                tr.estimate = run(tr.tree, tr.signs, pilot, opt);
                sd_sum += tr.estimate.std_error * std::sqrt(static_cast<double>(pilot));
            }
            const double extra = level_budget - static_cast<double>(pilot) * n_terms;
            TermOptions cont = opt;
            cont.first_index = pilot;
            for (auto& tr : level) {
                double sd = tr.estimate.std_error * std::sqrt(static_cast<double>(pilot));
                auto more = static_cast<std::uint64_t>(sd_sum > 0 ? extra * sd / sd_sum : extra / n_terms);
                if (more > 0)
                    tr.estimate = merge_estimates(tr.estimate, run(tr.tree, tr.signs, more, cont));
            }
        }
        LevelSummary lv{n, 0, 0, 0, 0, level.size()};
        for (auto& tr : level) {
            const auto& e = tr.estimate;
            lv.signed_sum += tr.coefficient * e.value;
            lv.abs_sum += std::abs(tr.coefficient * e.value);
            lv.variance += tr.coefficient * tr.coefficient * e.std_error * e.std_error;
            if (n == 0)
                continue;
            lv.samples += e.n_samples;
            if (e.std_error > cfg.target_rel_error * std::abs(e.value))
                ++res.terms_above_target;
            const double ns = static_cast<double>(e.n_samples);
            weighted_n += e.n_samples;
            w_ov += ns * e.overlap_fraction;
            w_cut += ns * e.cutoff_fraction;
            w_ecut += ns * e.energy_cut_weight;
            w_clip += ns * e.clipped_mass;
            w_rec += ns * e.recollision_fraction;
            res.estimate.trapped += e.trapped;
            res.estimate.constraint += e.constraint;
            res.estimate.stiff += e.stiff;
        }
        value += lv.signed_sum;
        var += lv.variance;
        used += lv.samples;
        res.levels.push_back(lv);
        for (auto& tr : level)
            res.terms.push_back(std::move(tr));
    }
    res.estimate.value = value;
    res.estimate.std_error = std::sqrt(var);
    res.estimate.n_samples = used;
    if (used > 0)
        res.estimate.rejected_fraction
            = static_cast<double>(res.estimate.trapped + res.estimate.stiff) / static_cast<double>(used);
    if (weighted_n > 0) {
        const double w = static_cast<double>(weighted_n);
        res.overlap_fraction = w_ov / w;
        res.cutoff_fraction = w_cut / w;
        res.energy_cut_weight = w_ecut / w;
        res.clipped_mass = w_clip / w;
        res.recollision_fraction = w_rec / w;
    }
    // geometric tail from the last two levels
    if (res.levels.size() >= 2) {
        const auto& a = res.levels[res.levels.size() - 2];
        const auto& b = res.levels.back();
        double q = a.abs_sum > 0 ? b.abs_sum / a.abs_sum : 0.0;
        res.tail_ratio = q;
        if (q < 1) {
            res.tail_bound = b.abs_sum * q / (1 - q);
        } else {
            res.tail_bound = std::numeric_limits<double>::infinity();
            res.beyond_convergence = true;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Convergence experiment

struct ConvergenceRow {
    double epsilon;
    std::uint64_t N;
    double f_boltzmann, err_boltzmann;
    double f_interacting, err_interacting;
    double gap, err; ///< err = √(e₁² + e₂²)
    double overlap_fraction, cutoff_fraction, recollision_fraction;
    double energy_cut_weight, clipped_mass;
    bool budget_exhausted;
};

struct ConvergenceTable {
    std::vector<ConvergenceRow> rows;
    double slope = std::numeric_limits<double>::quiet_NaN(); ///< log-log fit of gap vs ε
};

inline ConvergenceTable convergence_experiment(const RadialPotential& pot,
                                               const std::vector<PhasePoint>& z_j, double t,
                                               const std::vector<double>& epsilons,
                                               const SeriesConfig& cfg, const InitialData& init,
                                               std::uint64_t budget, std::uint64_t seed,
                                               const TermOptions& opt = {},
                                               bool excluded_volume = true)
{
    if (!omega_j_membership(z_j))
        throw Error(ErrorKind::precondition, "z_j is not in Omega_j");
    ConvergenceTable tab;
    // the Boltzmann side does not depend on ε; matched seeds make it identical for every row
    SeriesEstimate boltz = assemble_series(pot, z_j, t, cfg, init, nullptr, budget, seed, opt);
    for (double eps : epsilons) {
        auto bg = BoltzmannGradScaling::from_epsilon(eps);
        InteractingMode mode{bg.epsilon, bg.N, excluded_volume};
        SeriesEstimate inter = assemble_series(pot, z_j, t, cfg, init, &mode, budget, seed, opt);
        ConvergenceRow row{};
        row.epsilon = bg.epsilon;
        row.N = bg.N;
        row.f_boltzmann = boltz.estimate.value;
        row.err_boltzmann = boltz.estimate.std_error;
        row.f_interacting = inter.estimate.value;
        row.err_interacting = inter.estimate.std_error;
        row.gap = std::abs(row.f_interacting - row.f_boltzmann);
        row.err = std::hypot(row.err_boltzmann, row.err_interacting);
        row.overlap_fraction = inter.overlap_fraction;
        row.cutoff_fraction = inter.cutoff_fraction;
        row.recollision_fraction = inter.recollision_fraction;
        row.energy_cut_weight = inter.energy_cut_weight;
        row.clipped_mass = inter.clipped_mass;
        row.budget_exhausted = inter.budget_exhausted || boltz.budget_exhausted;
        tab.rows.push_back(row);
    }
    // least-squares slope of log gap against log ε over rows with a positive gap
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (const auto& r : tab.rows)
        if (r.gap > 0) {
            double x = std::log(r.epsilon), y = std::log(r.gap);
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
            ++m;
        }
    if (m >= 2 && m * sxx - sx * sx > 0)
        tab.slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    return tab;
}

} // namespace bgl
