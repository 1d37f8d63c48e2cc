// bgl_cli: command-line front end. Every command writes CSV whose first line
// is "# " followed by the resolved configuration as JSON; `replay` reruns it.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <bgl/cross_section.hpp>
#include <bgl/hierarchy_mc.hpp>
#include <bgl/trees_flows.hpp>
#include <bgl/two_body.hpp>

using namespace bgl;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

enum Exit { ok = 0, config_error = 2, numerical = 3, budget = 4 };

using Params = std::map<std::string, std::string>;

struct OptSpec {
    std::string name, def, help;
};

const std::vector<OptSpec> potential_opts{
    {"potential", "smooth-junction",
     "zero | inverse-power | smooth-junction | arctan-wall | piecewise-well | cutoff-lj | tabulated"},
    {"delta", "0.1", "smooth-junction / piecewise-well δ"},
    {"k", "", "exponent (family default when empty)"},
    {"eps", "0.1", "arctan-wall width"},
    {"sigma", "0.5", "cutoff-lj σ"},
    {"depth", "1", "cutoff-lj well depth"},
    {"table", "", "tabulated potential: file of 'r,phi' lines"},
};

const std::vector<OptSpec> init_opts{
    {"init", "cloud", "initial datum: cloud | box"},
    {"width", "0.6", "cloud width"},
    {"side", "2", "box side"},
    {"beta", "1", "inverse temperature"},
    {"drift", "0.2,0,0", "mean velocity"},
    {"aspect", "1,0.5,2", "cloud axis scales"},
};

const std::vector<OptSpec> tree_opts{
    {"j", "2", "number of root particles"},
    {"n", "2", "number of creations"},
    {"tree", "", "parent labels k_1..k_n, space separated (random when empty)"},
    {"signs", "", "sign string such as +-+ (random when empty)"},
    {"t", "1", "time"},
    {"spread", "1", "scale of random root positions"},
};

struct Command {
    std::string name, help;
    std::vector<OptSpec> opts;
    std::function<int(Params&, std::ostream&)> run;
};

// ---------------------------------------------------------------------------
// parameter access

std::string get(const Params& p, const std::string& key)
{
    auto it = p.find(key);
    if (it == p.end())
        throw Error(ErrorKind::config, "missing parameter " + key);
    return it->second;
}

double num(const Params& p, const std::string& key)
{
    std::string s = get(p, key);
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size())
            throw std::invalid_argument(s);
        return v;
    } catch (const std::logic_error&) {
        throw Error(ErrorKind::config, "--" + key + ": not a number: '" + s + "'");
    }
}

std::uint64_t count(const Params& p, const std::string& key)
{
    double v = num(p, key);
    if (!(v >= 0) || v != std::floor(v) || v > 1e18)
        throw Error(ErrorKind::config, "--" + key + ": expected a non-negative integer");
    return static_cast<std::uint64_t>(v);
}

bool flag(const Params& p, const std::string& key)
{
    std::string s = get(p, key);
    if (s == "true" || s == "1")
        return true;
    if (s == "false" || s == "0")
        return false;
    throw Error(ErrorKind::config, "--" + key + ": expected true or false");
}

std::vector<double> num_list(const std::string& s, const std::string& key)
{
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        try {
            out.push_back(std::stod(item));
        } catch (const std::logic_error&) {
            throw Error(ErrorKind::config, "--" + key + ": bad list entry '" + item + "'");
        }
    return out;
}

Vec3 vec(const Params& p, const std::string& key)
{
    auto v = num_list(get(p, key), key);
    if (v.size() != 3)
        throw Error(ErrorKind::config, "--" + key + ": expected three comma-separated numbers");
    return {v[0], v[1], v[2]};
}

// ---------------------------------------------------------------------------
// output

std::string fmt(double x)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

struct Csv {
    std::ostream& os;

    template <class... T>
    void row(const T&... xs)
    {
        bool first = true;
        ((os << (first ? "" : ",") << cell(xs), first = false), ...);
        os << '\n';
    }

    static std::string cell(double x) { return fmt(x); }
    static std::string cell(const std::string& s) { return s; }
    static std::string cell(const char* s) { return s; }
    static std::string cell(bool b) { return b ? "1" : "0"; }
    template <class I>
        requires std::is_integral_v<I>
    static std::string cell(I i) { return std::to_string(i); }
};

/// Output path under the output directory; absolute paths and ".." are refused.
fs::path output_path(const std::string& rel)
{
    fs::path p(rel);
    if (p.is_absolute())
        throw Error(ErrorKind::config, "--out must be relative to the output directory");
    for (const auto& part : p)
        if (part == "..")
            throw Error(ErrorKind::config, "--out may not contain '..'");
    const char* env = std::getenv("BGL_OUTPUT_DIR");
    return fs::path(env && *env ? env : ".") / p;
}

Params read_config_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error(ErrorKind::config, "cannot read config " + path);
    Params out;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty())
            continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorKind::config, path + ":" + std::to_string(lineno) + ": expected key = value");
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

// ---------------------------------------------------------------------------
// shared builders

RadialPotential make_potential(Params& p)
{
    std::string fam = get(p, "potential");
    auto k_or = [&](const char* def) {
        if (get(p, "k").empty())
            p["k"] = def;
        return num(p, "k");
    };
    if (fam == "zero")
        return RadialPotential::zero();
    if (fam == "inverse-power")
        return RadialPotential::inverse_power(k_or("1"));
    if (fam == "smooth-junction")
        return RadialPotential::smooth_junction(num(p, "delta"), k_or("20"));
    if (fam == "arctan-wall")
        return RadialPotential::arctan_wall(num(p, "eps"));
    if (fam == "piecewise-well")
        return RadialPotential::piecewise_well(num(p, "delta"), k_or("4"));
    if (fam == "cutoff-lj")
        return RadialPotential::cutoff_lennard_jones(num(p, "sigma"), num(p, "depth"));
    if (fam == "tabulated") {
        std::ifstream in(get(p, "table"));
        if (!in)
            throw Error(ErrorKind::config, "tabulated potential needs a readable --table file");
        std::vector<double> r, phi;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty() || line[0] == '#')
                continue;
            auto v = num_list(line, "table");
            if (v.size() != 2)
                throw Error(ErrorKind::config, "table lines must be 'r,phi'");
            r.push_back(v[0]);
            phi.push_back(v[1]);
        }
        return RadialPotential::tabulated(r, phi);
    }
    throw Error(ErrorKind::config, "unknown potential '" + fam + "'");
}

InitialData make_init(const Params& p)
{
    std::string kind = get(p, "init");
    if (kind == "cloud")
        return InitialData::gaussian_cloud(num(p, "width"), num(p, "beta"), vec(p, "drift"), {}, vec(p, "aspect"));
    if (kind == "box")
        return InitialData::box_maxwellian(num(p, "side"), num(p, "beta"), vec(p, "drift"));
    throw Error(ErrorKind::config, "unknown initial datum '" + kind + "'");
}

/// "x,y,z,vx,vy,vz;…"
std::vector<PhasePoint> parse_points(const std::string& s)
{
    std::vector<PhasePoint> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ';')) {
        auto v = num_list(item, "z");
        if (v.size() != 6)
            throw Error(ErrorKind::config, "--z: each point needs six numbers");
        out.push_back({{v[0], v[1], v[2]}, {v[3], v[4], v[5]}});
    }
    return out;
}

struct TreeSetup {
    TreeGraph tree;
    SignSequence signs;
};

TreeSetup make_tree(const Params& p, int j, int n, StreamRng& g)
{
    TreeSetup s;
    s.tree.j = j;
    std::string tr = get(p, "tree");
    if (tr.empty()) {
        auto trees = enumerate_trees(j, n);
        s.tree = trees[g() % trees.size()];
    } else {
        std::stringstream ss(tr);
        int k;
        while (ss >> k)
            s.tree.k.push_back(k);
        if (!ss.eof())
            throw Error(ErrorKind::config, "--tree: expected integers");
    }
    std::string sg = get(p, "signs");
    if (sg.empty())
        for (int i = 0; i < n; ++i)
            s.signs.sigma.push_back(g.uniform() < 0.5 ? 1 : -1);
    else
        s.signs = SignSequence::parse(sg);
    if (!s.tree.valid() || s.tree.n() != n || s.signs.n() != n)
        throw Error(ErrorKind::config, "tree and signs must describe n creations on j roots");
    return s;
}

struct TraceSetup {
    RadialPotential pot;
    TreeSetup ts;
    ParameterPoint pp;
    double t;
};

TraceSetup make_trace(Params& p)
{
    auto pot = make_potential(p);
    int j = static_cast<int>(count(p, "j")), n = static_cast<int>(count(p, "n"));
    if (j < 1)
        throw Error(ErrorKind::config, "--j must be at least 1");
    StreamRng g(count(p, "seed"), hash_label("cli-trace"), 0);
    auto ts = make_tree(p, j, n, g);
    double t = num(p, "t");
    auto pp = random_parameter_point(pot, ts.tree, ts.signs, t, g, num(p, "spread"));
    return {pot, ts, pp, t};
}

void write_trace(Csv& csv, const BackwardTrajectory& tr)
{
    for (const auto& r : tr.records)
        std::cerr << "creation t=" << fmt(r.time) << " parent=" << r.parent << " child=" << r.child
                  << " sigma=" << (r.sigma > 0 ? "+" : "-") << '\n';
    csv.row("time", "particle", "x1", "x2", "x3", "v1", "v2", "v3");
    for (const auto& snap : tr.snapshots)
        for (std::size_t i = 0; i < snap.state.size(); ++i) {
            const auto& q = snap.state[i];
            csv.row(snap.time, i + 1, q.x.x, q.x.y, q.x.z, q.v.x, q.v.y, q.v.z);
        }
}

IbfOptions ibf_options(const Params& p)
{
    IbfOptions o;
    std::string m = get(p, "mode");
    if (m == "exact")
        o.mode = IbfMode::exact_pair;
    else if (m == "full")
        o.mode = IbfMode::full_dynamics;
    else
        throw Error(ErrorKind::config, "--mode: exact or full");
    return o;
}

TermOptions term_options(const Params& p)
{
    TermOptions o;
    o.threads = static_cast<int>(std::max<std::uint64_t>(1, count(p, "threads")));
    o.quad.rel_tol = num(p, "tol");
    return o;
}

std::vector<PhasePoint> roots(const Params& p, int j)
{
    std::string z = get(p, "z");
    if (!z.empty())
        return parse_points(z);
    const std::vector<PhasePoint> def{{{0.3, -0.2, 0.1}, {0.5, 0.1, -0.3}},
                                      {{-0.4, 0.3, 0.0}, {-0.2, 0.6, 0.1}},
                                      {{0.1, 0.5, -0.6}, {0.0, -0.3, 0.2}},
                                      {{-0.2, -0.5, 0.4}, {0.3, 0.2, 0.4}}};
    if (j < 1 || j > 4)
        throw Error(ErrorKind::config, "default roots cover j <= 4; pass --z");
    return {def.begin(), def.begin() + j};
}

// ---------------------------------------------------------------------------
// commands

int cmd_scattering_map(Params& p, std::ostream& os)
{
    auto pot = make_potential(p);
    double V = speed_from_e0(num(p, "e0"));
    Csv csv{os};
    csv.row("rho", "theta", "dtheta", "tau_star", "excluded");
    for (double rho : uniform_open_grid(count(p, "grid"))) {
        try {
            csv.row(rho, theta_of_rho(pot, rho, V), dtheta_drho(pot, rho, V), scattering_time(pot, rho, V), false);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::trapped_or_singular)
                throw;
            csv.row(rho, NAN, NAN, NAN, true);
        }
    }
    try {
        auto dec = branch_decompose(pot, V);
        std::cerr << dec.branches.size() << " branch(es), " << dec.exclusions.size() << " excluded interval(s)\n";
        for (const auto& b : dec.branches)
            std::cerr << "  rho [" << fmt(b.rho_lo) << ", " << fmt(b.rho_hi) << "] theta [" << fmt(b.theta_min())
                      << ", " << fmt(b.theta_max()) << "]\n";
    } catch (const Error& e) {
        std::cerr << "branch summary unavailable: " << e.what() << '\n';
    }
    return ok;
}

int cmd_cross_section(Params& p, std::ostream& os)
{
    auto pot = make_potential(p);
    double V = speed_from_e0(num(p, "e0"));
    auto dec = branch_decompose(pot, V);
    Csv csv{os};
    csv.row("theta", "sigma", "branches", "branch_edge", "excluded");
    for (double th : uniform_open_grid(count(p, "grid"), 0.0, std::numbers::pi)) {
        try {
            auto s = sigma_at(pot, V, th, dec);
            csv.row(th, s.sigma, s.branch_count, s.branch_edge, false);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::no_preimage)
                throw;
            csv.row(th, 0.0, 0, false, true);
        }
    }
    auto m = kernel_mass(pot, V, dec);
    std::cerr << "kernel mass " << fmt(m.total()) << " (pi|V| = " << fmt(std::numbers::pi * V) << ")\n";
    return ok;
}

int cmd_trap_curve(Params& p, std::ostream& os)
{
    auto pot = make_potential(p);
    auto pts = trap_curve(pot, trap_grid(count(p, "points")));
    Csv csv{os};
    csv.row("y", "X", "Y", "physical");
    for (const auto& q : pts)
        csv.row(q.y, q.X, q.Y, q.physical);
    std::cerr << "physical arc length " << fmt(physical_arc_length(pts)) << '\n';
    return ok;
}

int cmd_tree_count(Params& p, std::ostream& os)
{
    int j = static_cast<int>(count(p, "j")), n = static_cast<int>(count(p, "n"));
    Csv csv{os};
    if (flag(p, "list")) {
        csv.row("index", "tree");
        std::uint64_t i = 0;
        TreeEnumerator en(j, n);
        TreeGraph g;
        while (en.next(g))
            csv.row(i++, g.str());
        return ok;
    }
    csv.row("j", "n", "count");
    csv.row(j, n, tree_count(j, n));
    return ok;
}

int cmd_bbf_trace(Params& p, std::ostream& os)
{
    auto s = make_trace(p);
    Csv csv{os};
    write_trace(csv, build_bbf(s.pot, s.ts.tree, s.ts.signs, s.pp.z_j, s.pp.params, s.t));
    return ok;
}

int cmd_ibf_trace(Params& p, std::ostream& os)
{
    auto s = make_trace(p);
    auto tr = build_ibf(s.pot, s.ts.tree, s.ts.signs, s.pp.z_j, s.pp.params, s.t, num(p, "epsilon"), ibf_options(p));
    Csv csv{os};
    write_trace(csv, tr);
    std::cerr << "recollisions " << tr.recollisions.size() << ", fallback windows " << tr.fallback_windows
              << ", energy drift " << fmt(tr.energy_drift) << '\n';
    return ok;
}

int cmd_compare_flows(Params& p, std::ostream& os)
{
    auto s = make_trace(p);
    double eps = num(p, "epsilon");
    auto bbf = build_bbf(s.pot, s.ts.tree, s.ts.signs, s.pp.z_j, s.pp.params, s.t);
    bool admissible = flow_comparison_admissible(bbf, eps);
    auto c = compare_flows(s.pot, s.ts.tree, s.ts.signs, s.pp.z_j, s.pp.params, s.t, eps, ibf_options(p));
    Csv csv{os};
    csv.row("tree", "signs", "epsilon", "max_position_gap", "velocity_gap_at_zero", "ibf_recollided",
            "fallback_windows", "admissible");
    csv.row(s.ts.tree.str(), s.ts.signs.str(), eps, c.max_position_gap, c.velocity_gap_at_zero, c.ibf_recollided,
            c.fallback_windows, admissible);
    return ok;
}

int cmd_mc_term(Params& p, std::ostream& os)
{
    auto pot = make_potential(p);
    auto init = make_init(p);
    int j = static_cast<int>(count(p, "j")), n = static_cast<int>(count(p, "n"));
    auto z = roots(p, j);
    if (static_cast<int>(z.size()) != j)
        throw Error(ErrorKind::config, "--z must hold j points");
    StreamRng g(count(p, "seed"), hash_label("cli-term"), 0);
    auto ts = make_tree(p, j, n, g);
    auto opt = term_options(p);
    opt.incoming_parametrization = flag(p, "incoming");
    double t = num(p, "t"), eps = num(p, "epsilon");
    std::uint64_t samples = count(p, "samples"), seed = count(p, "seed");
    MarginalEstimate e;
    if (eps > 0) {
        auto bg = BoltzmannGradScaling::from_epsilon(eps);
        e = sample_term_ibf(pot, ts.tree, ts.signs, z, t, init, bg.epsilon, bg.N, samples, seed, opt,
                            flag(p, "excluded-volume"));
    } else {
        e = sample_term_bbf(pot, ts.tree, ts.signs, z, t, init, samples, seed, opt);
    }
    Csv csv{os};
    csv.row("tree", "signs", "coefficient", "value", "std_error", "n_samples", "rejected_fraction",
            "overlap_fraction", "cutoff_fraction", "recollision_fraction");
    csv.row(ts.tree.str(), ts.signs.str(), ts.signs.sign(), e.value, e.std_error, e.n_samples, e.rejected_fraction,
            e.overlap_fraction, e.cutoff_fraction, e.recollision_fraction);
    return ok;
}

int cmd_convergence(Params& p, std::ostream& os)
{
    auto pot = make_potential(p);
    auto init = make_init(p);
    auto z = roots(p, static_cast<int>(count(p, "j")));
    SeriesConfig cfg;
    cfg.n_bar = static_cast<int>(count(p, "n-bar"));
    auto tab = convergence_experiment(pot, z, num(p, "t"), num_list(get(p, "epsilons"), "epsilons"), cfg, init,
                                      count(p, "budget"), count(p, "seed"), term_options(p),
                                      flag(p, "excluded-volume"));
    Csv csv{os};
    csv.row("epsilon", "N", "f_boltzmann", "err_boltzmann", "f_interacting", "err_interacting", "gap", "err",
            "overlap_fraction", "cutoff_fraction", "recollision_fraction", "energy_cut_weight", "clipped_mass",
            "budget_exhausted");
    bool exhausted = false;
    for (const auto& r : tab.rows) {
        csv.row(r.epsilon, r.N, r.f_boltzmann, r.err_boltzmann, r.f_interacting, r.err_interacting, r.gap, r.err,
                r.overlap_fraction, r.cutoff_fraction, r.recollision_fraction, r.energy_cut_weight, r.clipped_mass,
                r.budget_exhausted);
        exhausted = exhausted || r.budget_exhausted;
    }
    std::cerr << "log-log slope of gap vs epsilon " << fmt(tab.slope) << '\n';
    if (exhausted) {
        std::cerr << "budget exhausted before every level got its pilot samples\n";
        return budget;
    }
    return ok;
}

std::vector<OptSpec> concat(std::initializer_list<std::vector<OptSpec>> parts)
{
    std::vector<OptSpec> out;
    for (const auto& v : parts)
        out.insert(out.end(), v.begin(), v.end());
    return out;
}

std::vector<Command> commands()
{
    const std::vector<OptSpec> energy{{"e0", "9", "E0; the relative speed is 2 sqrt(E0)"}};
    const std::vector<OptSpec> ibf{{"epsilon", "1e-3", "interaction range"}, {"mode", "exact", "exact | full"}};
    const std::vector<OptSpec> mc{{"z", "", "roots 'x,y,z,vx,vy,vz;...' (built-in points when empty)"},
                                  {"excluded-volume", "true", "interacting datum with excluded volume"}};
    return {
        {"scattering-map", "deflection map theta(rho) with derivative and interaction time",
         concat({potential_opts, energy, {{"grid", "200", "number of rho points"}}}), cmd_scattering_map},
        {"cross-section", "differential cross-section over a theta grid",
         concat({potential_opts, energy, {{"grid", "200", "number of theta points"}}}), cmd_cross_section},
        {"trap-curve", "trapping curve (X, Y) = (2 phi' y^3, 4 phi + 2 phi' y)",
         concat({potential_opts, {{"points", "4000", "curve samples"}}}), cmd_trap_curve},
        {"tree-count", "number of collision trees",
         {{"j", "2", "roots"}, {"n", "3", "creations"}, {"list", "false", "list the trees instead"}}, cmd_tree_count},
        {"bbf-trace", "Boltzmann backward flow at a random parameter point", concat({potential_opts, tree_opts}),
         cmd_bbf_trace},
        {"ibf-trace", "interacting backward flow at a random parameter point",
         concat({potential_opts, tree_opts, ibf}), cmd_ibf_trace},
        {"compare-flows", "BBF vs IBF gaps at a random parameter point",
         concat({potential_opts, tree_opts, ibf}), cmd_compare_flows},
        {"mc-term", "Monte Carlo estimate of one signed tree term",
         concat({potential_opts, init_opts, mc,
                 {{"j", "1", "roots"}, {"n", "1", "creations"}, {"tree", "", "parent labels (random when empty)"},
                  {"signs", "", "sign string (random when empty)"}, {"t", "0.5", "time"},
                  {"samples", "10000", "sample count"}, {"epsilon", "0", "interacting side when > 0"},
                  {"incoming", "false", "sample gain nodes in incoming variables"}}}),
         cmd_mc_term},
        {"convergence", "truncated series on both sides across epsilon",
         concat({potential_opts, init_opts, mc,
                 {{"j", "1", "roots"}, {"t", "0.5", "time"}, {"epsilons", "1e-2,3e-3,1e-3", "comma list"},
                  {"budget", "60000", "samples per assembly"}, {"n-bar", "3", "truncation order"}}}),
         cmd_convergence},
    };
}

const std::vector<OptSpec> global_opts{
    {"seed", "1", "master seed"},
    {"threads", "", "worker threads (hardware parallelism when empty)"},
    {"tol", "1e-10", "relative quadrature tolerance for sampled terms"},
};

int exit_code(const Error& e)
{
    switch (e.kind()) {
    case ErrorKind::config:
    case ErrorKind::domain:
    case ErrorKind::precondition:
    case ErrorKind::overflow:
        return config_error;
    case ErrorKind::budget_exhausted:
        return budget;
    default:
        return numerical;
    }
}

/// Runs a command on fully resolved parameters and writes header and body.
int execute(const Command& c, Params p, const std::string& out)
{
    std::ostringstream body;
    int rc = c.run(p, body);
    Json hdr;
    hdr["command"] = c.name;
    for (const auto& [k, v] : p)
        hdr["params"][k] = v;
    std::string text = "# " + hdr.dump() + "\n" + body.str();
    if (out.empty()) {
        std::cout << text;
    } else {
        auto path = output_path(out);
        if (path.has_parent_path())
            fs::create_directories(path.parent_path());
        std::ofstream f(path, std::ios::binary);
        if (!(f << text))
            throw Error(ErrorKind::config, "cannot write " + path.string());
    }
    return rc;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Boltzmann-Grad hierarchy toolkit"};
    app.require_subcommand(1);
    std::string out, config;
    app.add_option("--out", out, "output file, relative to $BGL_OUTPUT_DIR (default: stdout)");
    app.add_option("--config", config, "key = value file; flags override it");

    const auto cmds = commands();
    std::map<std::string, Params> given;
    std::map<std::string, std::vector<CLI::Option*>> handles;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->fallthrough();
        for (const auto& o : concat({global_opts, c.opts})) {
            auto* h = sub->add_option("--" + o.name, given[c.name][o.name], o.help);
            if (!o.def.empty())
                h->default_str(o.def);
            handles[c.name].push_back(h);
        }
    }
    std::string replay_file;
    auto* replay = app.add_subcommand("replay", "rerun the configuration embedded in an output file");
    replay->fallthrough();
    replay->add_option("file", replay_file, "earlier output")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : config_error;
    }

    try {
        if (replay->parsed()) {
            std::ifstream in(replay_file);
            std::string line;
            if (!std::getline(in, line) || line.rfind("# ", 0) != 0)
                throw Error(ErrorKind::config, replay_file + " has no configuration header");
            Json hdr = Json::parse(line.substr(2), nullptr, false);
            if (hdr.is_discarded() || !hdr.contains("command") || !hdr.contains("params"))
                throw Error(ErrorKind::config, "malformed configuration header");
            auto it = std::find_if(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == hdr["command"]; });
            if (it == cmds.end())
                throw Error(ErrorKind::config, "unknown command in header");
            Params p;
            for (const auto& [k, v] : hdr["params"].items())
                p[k] = v.get<std::string>();
            return execute(*it, p, out);
        }
        for (const auto& c : cmds) {
            if (!app.got_subcommand(c.name))
                continue;
            // defaults, then the config document, then explicit flags
            Params p;
            for (const auto& o : concat({global_opts, c.opts}))
                p[o.name] = o.def;
            if (!config.empty())
                for (const auto& [k, v] : read_config_file(config)) {
                    if (!p.count(k))
                        throw Error(ErrorKind::config, "unknown key '" + k + "' for " + c.name);
                    p[k] = v;
                }
            for (auto* h : handles[c.name])
                if (h->count())
                    p[h->get_name().substr(2)] = given[c.name][h->get_name().substr(2)];
            if (p["threads"].empty())
                p["threads"] = std::to_string(std::max(1u, std::thread::hardware_concurrency()));
            return execute(c, p, out);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return numerical;
    }
    return config_error;
}
