// Acceptance suite: one PASS/FAIL line per criterion, JSON summaries under --out.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "eotstab/analysis.hpp"
#include "eotstab/flow.hpp"
#include "oracles.hpp"

using namespace eotstab;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSeed = 20240611;

// ---------------------------------------------------------------------------
// Shared helpers.

Grid1D unit_grid(std::size_t n) { return Grid1D(0.0, 1.0, n); }

std::vector<double> linspace(double a, double b, std::size_t k) {
    std::vector<double> t(k);
    for (std::size_t j = 0; j < k; ++j) t[j] = a + (b - a) * static_cast<double>(j) / static_cast<double>(k - 1);
    return t;
}

MeasureFamily random_family(const std::vector<Grid1D>& grids, std::mt19937_64& rng) {
    std::vector<DiscreteMeasure> m;
    for (const auto& g : grids) m.push_back(random_bump_mixture(g, rng));
    return MeasureFamily(std::move(m));
}

/// Bump with zero mass beyond `cutoff`, so that it can be translated to the right.
DiscreteMeasure left_bump(const Grid1D& g, double center, double width, double cutoff = 0.75) {
    std::vector<double> w(g.n());
    for (std::size_t k = 0; k < g.n(); ++k) {
        const double x = g.node(k);
        w[k] = x < cutoff ? std::exp(-0.5 * std::pow((x - center) / width, 2)) + 1e-3 : 0.0;
    }
    return DiscreteMeasure::normalized(g, std::move(w));
}

PlanFamily translation_family(const MeasureFamily& mu, const std::vector<long>& cells) {
    std::vector<TransportPlan> p;
    for (std::size_t i = 0; i < mu.size(); ++i) p.push_back(translation_plan(mu[i], cells[i]));
    return PlanFamily(std::move(p));
}

PlanFamily optimal_family(const MeasureFamily& a, const MeasureFamily& b) {
    std::vector<TransportPlan> p;
    for (std::size_t i = 0; i < a.size(); ++i) p.push_back(optimal_plan_1d(a[i], b[i]));
    return PlanFamily(std::move(p));
}

CostTensor tabulated(const std::vector<std::vector<double>>& C) {
    const std::vector<Grid1D> grids = {unit_grid(C.size()), unit_grid(C[0].size())};
    TabulatedCost t;
    for (const auto& row : C)
        for (double v : row) t.values.push_back(v);
    return build_cost(t, grids, 0);
}

/// Marginals of the primal coupling by direct summation over the product grid.
GridFunctions axis_sums(const Coupling& g, const std::vector<Grid1D>& grids) {
    const std::size_t N = grids.size();
    GridFunctions out(N);
    for (std::size_t i = 0; i < N; ++i) out[i].assign(grids[i].n(), 0.0);
    for (std::size_t flat = 0; flat < g.weights.size(); ++flat) {
        std::size_t rest = flat;
        for (std::size_t ax = N; ax-- > 0;) {
            out[ax][rest % grids[ax].n()] += g.weights[flat];
            rest /= grids[ax].n();
        }
    }
    return out;
}

double worst(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); }

double spread_of(const std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *lo > 0.0 ? (*hi - *lo) / *lo : std::numeric_limits<double>::infinity();
}

std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
    std::ostringstream os;
    for (unsigned int k = 0; k < len; ++k) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[k]);
    return os.str();
}

std::vector<SeparableTerm> separable_terms() {
    return {{0.8, 5.0, 0.1, 0.4, -0.3, 0.2}, {0.0, 0.0, 0.0, 1.1, 0.7, -0.5}, {1.2, 2.0 * M_PI, 0.3, 0.0, 0.5, 0.0}};
}

// ---------------------------------------------------------------------------
// Lazily built instances shared between criteria.

struct SolvedInstance {
    std::string name;
    CostTensor cost;
    MeasureFamily mu;
    SolveReport report;
};

struct DisplacementPath {
    std::string name;
    CostTensor cost;
    PlanFamily plans;
    double t_probe;  // away from kinks of the binned path
};

struct FlowCase {
    FlowSpec spec;
    FlowRun run;
    std::vector<DiscreteMeasure> reference;
};

class Context {
public:
    const std::vector<SolvedInstance>& random_instances() {
        if (random_) return *random_;
        random_.emplace();
        for (int trial = 0; trial < 20; ++trial) {
            std::mt19937_64 rng(kSeed + static_cast<std::uint64_t>(trial));
            const bool three = trial >= 10;
            const std::vector<Grid1D> grids(three ? 3 : 2, unit_grid(three ? 16 : 32));
            const CostDescriptor desc = trial % 2 == 0 ? CostDescriptor{QuadraticCost::pairwise(grids.size(), 1.0 + 0.25 * (trial % 4))}
                                                       : CostDescriptor{GaussianCost{1.5, 0.3}};
            auto cost = build_cost(desc, grids);
            auto mu = random_family(grids, rng);
            auto rep = solve(cost, mu);
            random_->push_back({"random_" + std::to_string(trial), std::move(cost), std::move(mu), std::move(rep)});
        }
        return *random_;
    }

    const std::vector<SolvedInstance>& separable_instances() {
        if (separable_) return *separable_;
        separable_.emplace();
        std::mt19937_64 rng(kSeed + 100);
        const auto terms = separable_terms();
        for (std::size_t N : {2u, 3u}) {
            const std::vector<Grid1D> grids(N, unit_grid(N == 2 ? 32 : 16));
            SeparableCost s;
            s.terms.assign(terms.begin(), terms.begin() + static_cast<long>(N));
            auto cost = build_cost(s, grids);
            auto mu = random_family(grids, rng);
            auto rep = solve(cost, mu);
            separable_->push_back({"separable_N" + std::to_string(N), std::move(cost), std::move(mu), std::move(rep)});
        }
        return *separable_;
    }

    const std::vector<SolvedInstance>& corpus_instances() {
        if (corpus_) return *corpus_;
        corpus_.emplace();
        std::ifstream in(std::string(EOTSTAB_SOURCE_DIR) + "/tests/data/regression_corpus.json");
        if (!in) throw std::runtime_error("regression corpus not found");
        const auto corpus = json::parse(in);
        for (const auto& inst : corpus.at("instances")) {
            const auto a = inst.at("a").get<std::vector<double>>();
            const auto b = inst.at("b").get<std::vector<double>>();
            const auto C = inst.at("cost").get<std::vector<std::vector<double>>>();
            if (!((a.size() == 2 && b.size() == 2) || (a.size() == 3 && b.size() == 3))) continue;
            auto cost = tabulated(C);
            MeasureFamily mu({DiscreteMeasure::normalized(cost.grid(0), a), DiscreteMeasure::normalized(cost.grid(1), b)});
            auto rep = solve(cost, mu);
            corpus_->push_back({inst.at("name").get<std::string>(), std::move(cost), std::move(mu), std::move(rep)});
        }
        return *corpus_;
    }

    /// Ten N = 2, n = 64 displacement paths, five per cost family.
    const std::vector<DisplacementPath>& paths() {
        if (paths_) return *paths_;
        paths_.emplace();
        const std::vector<Grid1D> grids(2, unit_grid(64));
        const std::vector<std::pair<std::string, CostDescriptor>> costs = {
            {"quadratic", QuadraticCost::pairwise(2, 1.0)}, {"gaussian", GaussianCost{1.5, 0.3}}};
        std::mt19937_64 rng(kSeed + 200);
        for (const auto& [cname, desc] : costs) {
            const auto cost = build_cost(desc, grids);
            const MeasureFamily a({left_bump(grids[0], 0.35, 0.1), left_bump(grids[1], 0.45, 0.15)});
            const MeasureFamily b({left_bump(grids[0], 0.3, 0.08), left_bump(grids[1], 0.4, 0.1)});
            paths_->push_back({cname + "_translate_8_5", cost, translation_family(a, {8, 5}), 0.43});
            paths_->push_back({cname + "_translate_4_10", cost, translation_family(b, {4, 10}), 0.43});
            const MeasureFamily g0({gaussian_bump(grids[0], 0.3, 0.1, 1e-3), two_bump(grids[1], 0.25, 0.7, 0.08, 0.4, 1e-3)});
            const MeasureFamily g1({gaussian_bump(grids[0], 0.6, 0.12, 1e-3), gaussian_bump(grids[1], 0.5, 0.1, 1e-3)});
            paths_->push_back({cname + "_optimal_bumps", cost, optimal_family(g0, g1), 0.43});
            for (int r = 0; r < 2; ++r) {
                const auto m0 = random_family(grids, rng), m1 = random_family(grids, rng);
                paths_->push_back({cname + "_optimal_random_" + std::to_string(r), cost, optimal_family(m0, m1), 0.43});
            }
        }
        return *paths_;
    }

    const PathProbe& probe(std::size_t k) {
        if (probes_.empty()) {
            for (const auto& p : paths()) probes_.push_back(probe_path(p.cost, p.plans, linspace(0.0, 1.0, 21)));
        }
        return probes_.at(k);
    }

    const FlowCase& multispecies() {
        if (multispecies_) return *multispecies_;
        const std::size_t n = 64;
        const auto g = unit_grid(n);
        const auto cost = normalize_cost(build_cost(QuadraticCost::pairwise(2, 3.0), {g, g}, 1)).cost;
        auto spec = make_flow_spec(FlowPreset::multi_species, cost);
        spec.t_end = 10.0;
        spec.dt_max = 1e-2;
        spec.record_every = 200;
        spec.abort_on_energy_increase = false;
        const auto eq = equilibrium_multispecies(cost).members();
        const std::vector<DiscreteMeasure> init{gaussian_bump(g, 0.25, 0.1, 1e-3), two_bump(g, 0.3, 0.8, 0.08, 0.5, 1e-3)};
        auto run = run_flow(spec, init, eq);
        multispecies_ = FlowCase{spec, std::move(run), eq};
        return *multispecies_;
    }

    const FlowCase& bridge() {
        if (bridge_) return *bridge_;
        const std::size_t n = 32;
        const auto g = unit_grid(n);
        const SeparableCost sep{{SeparableTerm{1.5, 2.0 * M_PI, 0.0, 0.0, 0.0, 0.0}, SeparableTerm{0.0, 0.0, 0.0, 0.0, 1.0, 0.0}}};
        const auto nu = gaussian_bump(g, 0.5, 0.2, 1e-3);
        auto spec = make_flow_spec(FlowPreset::bridge_energy, build_cost(sep, {g, g}, 1), nu);
        spec.t_end = 10.0;
        spec.dt_max = 1e-2;
        spec.record_every = 100;
        spec.abort_on_energy_increase = false;
        std::vector<double> f(n);
        for (std::size_t k = 0; k < n; ++k) f[k] = sep.terms[0](g.node(k));
        const std::vector<DiscreteMeasure> gibbs{gibbs_measure(g, f)};
        auto run = run_flow(spec, {gaussian_bump(g, 0.2, 0.05, 1e-4)}, gibbs);
        bridge_ = FlowCase{spec, std::move(run), gibbs};
        return *bridge_;
    }

    const FlowCase& eot_only() {
        if (eot_only_) return *eot_only_;
        const auto g = unit_grid(32);
        auto spec = make_flow_spec(FlowPreset::eot_only, build_cost(QuadraticCost::pairwise(2, 2.0), {g, g}, 1));
        spec.t_end = 1.0;
        spec.dt_max = 5e-3;
        spec.record_every = 20;
        spec.abort_on_energy_increase = false;
        auto run = run_flow(spec, {gaussian_bump(g, 0.3, 0.1, 1e-3), gaussian_bump(g, 0.7, 0.1, 1e-3)});
        eot_only_ = FlowCase{spec, std::move(run), {}};
        return *eot_only_;
    }

    const FlowCase& divergence() {
        if (divergence_) return *divergence_;
        const auto g = unit_grid(32);
        const auto nu = gaussian_bump(g, 0.6, 0.1, 1e-3);
        auto spec = make_flow_spec(FlowPreset::sinkhorn_divergence, build_cost(QuadraticCost::pairwise(2, 4.0), {g, g}, 1), nu);
        spec.t_end = 1.0;
        spec.dt_max = 5e-3;
        spec.record_every = 20;
        spec.abort_on_energy_increase = false;
        auto run = run_flow(spec, {gaussian_bump(g, 0.35, 0.1, 1e-3)}, std::vector<DiscreteMeasure>{nu});
        divergence_ = FlowCase{spec, std::move(run), {nu}};
        return *divergence_;
    }

private:
    std::optional<std::vector<SolvedInstance>> random_, separable_, corpus_;
    std::optional<std::vector<DisplacementPath>> paths_;
    std::vector<PathProbe> probes_;
    std::optional<FlowCase> multispecies_, bridge_, eot_only_, divergence_;
};

struct Outcome {
    bool pass = false;
    json metrics = json::object();
};

// ---------------------------------------------------------------------------
// Criteria.

Outcome solver_correctness(Context& ctx) {
    std::vector<double> residual, gap, marginal;
    for (const auto& inst : ctx.random_instances()) {
        residual.push_back(inst.report.final_residual);
        gap.push_back(std::abs(inst.report.primal_value - inst.report.dual_value));
        const auto sums = axis_sums(primal_plan(inst.report, inst.mu, inst.cost), inst.cost.grids());
        double e = 0.0;
        for (std::size_t i = 0; i < sums.size(); ++i)
            for (std::size_t k = 0; k < sums[i].size(); ++k) e = std::max(e, std::abs(sums[i][k] - inst.mu[i].weight(k)));
        marginal.push_back(e);
    }
    double sep_potential = 0.0, sep_value = 0.0;
    for (const auto& inst : ctx.separable_instances()) {
        const auto& grids = inst.cost.grids();
        const auto terms = separable_terms();
        GridFunctions f(grids.size());
        double expected = 0.0;
        for (std::size_t i = 0; i < grids.size(); ++i) {
            for (std::size_t k = 0; k < grids[i].n(); ++k) f[i].push_back(terms[i](grids[i].node(k)));
            expected += inst.mu[i].integrate(f[i]);
        }
        sep_potential = std::max(sep_potential, quotient_ck_norm(inst.report.potentials - PotentialFamily(grids, f), 0));
        sep_value = std::max(sep_value, std::abs(inst.report.dual_value - expected));
    }
    Outcome o;
    o.metrics = {{"instances", residual.size()},
                 {"max_residual", worst(residual)},
                 {"max_primal_dual_gap", worst(gap)},
                 {"max_marginal_error", worst(marginal)},
                 {"separable_potential_error", sep_potential},
                 {"separable_value_error", sep_value}};
    o.pass = worst(residual) <= 1e-10 && worst(gap) <= 1e-8 && worst(marginal) <= 1e-9 && sep_potential <= 1e-10 &&
             sep_value <= 1e-10;
    return o;
}

Outcome schrodinger_oracle(Context& ctx) {
    std::vector<double> err;
    json per = json::object();
    for (const auto& inst : ctx.corpus_instances()) {
        const auto& w0 = inst.mu[0].weights();
        const auto& w1 = inst.mu[1].weights();
        std::vector<std::vector<double>> C(inst.cost.grid(0).n(), std::vector<double>(inst.cost.grid(1).n()));
        for (std::size_t a = 0; a < C.size(); ++a)
            for (std::size_t b = 0; b < C[a].size(); ++b) C[a][b] = inst.cost(a, b);
        const double oracle =
            oracle::entropic_dual_newton({w0.begin(), w0.end()}, {w1.begin(), w1.end()}, C);
        err.push_back(std::abs(inst.report.dual_value - oracle));
        per[inst.name] = err.back();
    }
    Outcome o;
    o.metrics = {{"instances", err.size()}, {"max_dual_error", worst(err)}, {"per_instance", per}};
    o.pass = !err.empty() && worst(err) <= 1e-8;
    return o;
}

Outcome density_bounds(Context& ctx) {
    std::size_t instances = 0, checked = 0, violations = 0;
    double worst_ratio = 0.0;
    auto visit = [&](const std::vector<SolvedInstance>& list) {
        for (const auto& inst : list) {
            const auto r = check_density_bounds(density_fields(inst.report.potentials, inst.mu, inst.cost));
            ++instances;
            checked += r.checked;
            violations += r.violations;
            worst_ratio = std::max(worst_ratio, r.worst_log_ratio);
        }
    };
    visit(ctx.random_instances());
    visit(ctx.separable_instances());
    visit(ctx.corpus_instances());
    Outcome o;
    o.metrics = {{"instances", instances}, {"entries_checked", checked}, {"violations", violations},
                 {"max_log_ratio_to_bound", worst_ratio}};
    o.pass = violations == 0 && checked > 0;
    return o;
}

Outcome quotient_norms(Context&) {
    std::mt19937_64 rng(kSeed + 300);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    double closed_error = 0.0;
    std::size_t sandwich_violations = 0;
    double lower_margin = std::numeric_limits<double>::infinity(), upper_margin = lower_margin;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t N = 2 + static_cast<std::size_t>(trial % 2);
        const std::size_t n = 6 + static_cast<std::size_t>(trial % 5);
        const std::vector<Grid1D> grids(N, unit_grid(n));
        const auto mu = random_family(grids, rng);
        GridFunctions members(N, std::vector<double>(n));
        for (auto& f : members) {
            const double offset = u(rng);
            for (double& v : f) v = offset + u(rng);
        }
        const PotentialFamily h(grids, members);

        // Weighted least squares over the free gauge (kappa_N = -sum of the others).
        const Eigen::Index rows = static_cast<Eigen::Index>(N * n), free = static_cast<Eigen::Index>(N - 1);
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(rows, free);
        Eigen::VectorXd b(rows);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t k = 0; k < n; ++k) {
                const Eigen::Index r = static_cast<Eigen::Index>(i * n + k);
                const double s = std::sqrt(mu[i].weight(k));
                b(r) = s * h[i][k];
                for (Eigen::Index j = 0; j < free; ++j)
                    A(r, j) = (static_cast<Eigen::Index>(i) == j ? s : 0.0) - (i == N - 1 ? s : 0.0);
            }
        const Eigen::VectorXd kappa = A.colPivHouseholderQr().solve(b);
        const double brute = (A * kappa - b).squaredNorm();
        const double q2 = std::pow(quotient_l2_norm(h, mu).norm, 2);
        closed_error = std::max(closed_error, std::abs(q2 - brute));

        const double d2 = direct_sum_l2_squared(h, mu, build_cost(ZeroCost{}, grids, 0));
        if (!(q2 <= d2) || !(d2 <= static_cast<double>(N) * q2)) ++sandwich_violations;
        lower_margin = std::min(lower_margin, d2 - q2);
        upper_margin = std::min(upper_margin, static_cast<double>(N) * q2 - d2);
    }
    Outcome o;
    o.metrics = {{"families", 50},
                 {"max_closed_form_error", closed_error},
                 {"sandwich_violations", sandwich_violations},
                 {"min_lower_margin", lower_margin},
                 {"min_upper_margin", upper_margin}};
    o.pass = closed_error <= 1e-10 && sandwich_violations == 0;
    return o;
}

Outcome lipschitz_certification(Context& ctx) {
    const std::vector<double> steps = {0.2, 0.1, 0.05};
    json per = json::array();
    double max_spread = 0.0;
    bool finite = true;
    for (std::size_t k = 0; k < ctx.paths().size(); ++k) {
        const auto stats = lipschitz_ratio_ck(ctx.probe(k), 1);
        const auto sp = ratio_spread_by_step(stats, steps);
        finite = finite && std::isfinite(stats.max) && stats.max > 0.0;
        max_spread = std::max(max_spread, sp.spread);
        per.push_back({{"path", ctx.paths()[k].name}, {"max_ratio", stats.max}, {"max_ratio_per_step", sp.max_ratio},
                       {"spread", sp.spread}});
    }
    Outcome o;
    o.metrics = {{"paths", per.size()}, {"steps", steps}, {"max_spread", max_spread}, {"per_path", per}};
    o.pass = finite && max_spread < 0.2;
    return o;
}

Outcome implicit_derivative(Context& ctx) {
    const double inner_tol = 1e-9;
    const double limit = std::max(1e-4, 100.0 * inner_tol);
    double max_err = 0.0;
    std::size_t kernel_mismatch = 0;
    json per = json::array();
    auto check = [&](const std::string& name, const CostTensor& cost, const PlanFamily& plans, double t) {
        const auto probe = probe_path(cost, plans, {t});
        const auto d = potential_time_derivative(probe, t, cost);
        const auto fd = potential_time_derivative_fd(cost, plans, t, 1e-4, 1e-12);
        const double err = quotient_ck_norm(d - fd, 0);
        const auto ker = kernel_structure(assemble_linearization(probe.potentials_at_t[0], probe.measures_at_t[0], cost));
        const std::size_t expected = plans.size() - 1;
        if (ker.kernel_dim != expected) ++kernel_mismatch;
        max_err = std::max(max_err, err);
        per.push_back({{"path", name}, {"t", t}, {"derivative_error", err}, {"kernel_dim", ker.kernel_dim},
                       {"expected_kernel_dim", expected}, {"margin", ker.margin}});
    };
    for (const auto& p : ctx.paths()) check(p.name, p.cost, p.plans, p.t_probe);
    std::mt19937_64 rng(kSeed + 400);
    const std::vector<Grid1D> g3(3, unit_grid(12));
    const auto c3 = build_cost(GaussianCost{1.0, 0.5}, g3);
    for (int r = 0; r < 2; ++r) {
        const auto a = random_family(g3, rng), b = random_family(g3, rng);
        check("three_marginal_optimal_" + std::to_string(r), c3, optimal_family(a, b), 0.55);
    }
    Outcome o;
    o.metrics = {{"paths", per.size()}, {"limit", limit}, {"max_derivative_error", max_err},
                 {"kernel_mismatches", kernel_mismatch}, {"per_path", per}};
    o.pass = max_err <= limit && kernel_mismatch == 0 && per.size() >= 10;
    return o;
}

Outcome displacement_smoothness(Context& ctx) {
    const std::vector<Grid1D> grids(2, unit_grid(64));
    const MeasureFamily mu({left_bump(grids[0], 0.3, 0.1), left_bump(grids[1], 0.4, 0.1)});
    // Shifts of 4 and 2 cells: kinks only at multiples of 1/4.
    const auto plans = translation_family(mu, {4, 2});
    const double t = 0.375;
    json orders = json::array();
    double min_order = std::numeric_limits<double>::infinity();
    for (const auto& [name, desc] : std::vector<std::pair<std::string, CostDescriptor>>{
             {"quadratic", QuadraticCost::pairwise(2, 1.0)}, {"gaussian", GaussianCost{1.5, 0.3}}}) {
        const auto cost = build_cost(desc, grids);
        const double exact = energy_derivative(probe_path(cost, plans, {t}, 1e-12), t);
        std::vector<double> err;
        for (double h : {0.08, 0.04, 0.02}) err.push_back(std::abs(energy_derivative_fd(cost, plans, t, h, 1e-12) - exact));
        const double o1 = std::log2(err[0] / err[1]), o2 = std::log2(err[1] / err[2]);
        min_order = std::min({min_order, o1, o2});
        orders.push_back({{"cost", name}, {"errors", err}, {"orders", {o1, o2}}});
    }
    std::size_t chord_failures = 0;
    json per = json::array();
    for (std::size_t k = 0; k < ctx.paths().size(); ++k) {
        const auto r = semiconvexity_modulus(ctx.probe(k));
        if (!r.chords_hold) ++chord_failures;
        per.push_back({{"path", ctx.paths()[k].name}, {"modulus", r.modulus}, {"worst_upper", r.worst_upper},
                       {"worst_lower", r.worst_lower}});
    }
    Outcome o;
    o.metrics = {{"refinement", orders}, {"min_order", min_order}, {"chord_failures", chord_failures}, {"per_path", per}};
    o.pass = min_order >= 1.8 && chord_failures == 0;
    return o;
}

Outcome sobolev_stability(Context&) {
    const std::vector<Grid1D> grids(2, unit_grid(64));
    std::mt19937_64 rng(kSeed + 500);
    const auto mu = random_family(grids, rng);
    const auto cost = build_cost(GaussianCost{1.0, 0.5}, grids);
    const auto bump = gaussian_bump(grids[0], 0.3, 0.08, 1e-6);
    const std::vector<double> amps = {1e-1, 1e-2, 1e-3, 1e-4};
    std::vector<double> ratios;
    for (double amp : amps) {
        std::vector<double> w(64);
        for (std::size_t k = 0; k < 64; ++k) w[k] = (1 - amp) * mu[0].weight(k) + amp * bump.weight(k);
        const MeasureFamily nu({DiscreteMeasure::normalized(grids[0], w), mu[1]});
        ratios.push_back(lipschitz_ratio_sobolev(cost, mu, nu, 1, 2, 1e-13).ratio);
    }
    const double spread = spread_of(ratios);

    const auto G = sobolev_gram(grids[0], 2);
    std::size_t violations = 0, functions = 0;
    double worst_fraction = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto rho = weight_difference(random_bump_mixture(grids[0], rng), random_bump_mixture(grids[0], rng));
        const double norm = hneg_norm(rho, G);
        const double lower = hneg_sampled_lower_bound(rho, G, rng, 1000);
        functions += 1000;
        if (lower > norm) ++violations;
        worst_fraction = std::max(worst_fraction, lower / norm);
    }
    Outcome o;
    o.metrics = {{"amplitudes", amps}, {"ratios", ratios}, {"ratio_spread", spread},
                 {"test_functions", functions}, {"violations", violations}, {"max_lower_over_norm", worst_fraction}};
    o.pass = spread <= 0.3 && violations == 0;
    return o;
}

Outcome multi_species(Context& ctx) {
    const auto& fc = ctx.multispecies();
    const auto& sum = fc.run.summary;
    const auto& traj = fc.run.trajectory;
    const double f_star = flow_energy(fc.spec, fc.reference);
    const double w2 = *traj.back().w2_to_equilibrium;
    std::vector<double> gap;
    for (double e : sum.energies) gap.push_back(e - f_star);
    const auto fit = fit_decay_rate(sum.times, gap);

    // Fisher identity and dissipation at recorded states inside the fitted window,
    // where the gap is well above roundoff.
    const std::size_t end = fit.last > fit.first ? fit.last - 1 : fit.first;
    const double t_lo = sum.times[fit.first], t_hi = sum.times[end];
    double fisher_gap = 0.0, dissipation_error = 0.0;
    std::size_t states = 0;
    for (std::size_t k = 1; k + 1 < traj.size(); ++k) {
        if (traj[k - 1].time < t_lo || traj[k + 1].time > t_hi) continue;
        const auto fr = fisher_information(traj[k], fc.spec);
        fisher_gap = std::max(fisher_gap, fr.relative_gap.value_or(std::numeric_limits<double>::infinity()));
        const double dFdt = (traj[k + 1].energy - traj[k - 1].energy) / (traj[k + 1].time - traj[k - 1].time);
        dissipation_error = std::max(dissipation_error, std::abs(-dFdt - fr.species_sum) / fr.species_sum);
        ++states;
    }
    Outcome o;
    o.metrics = {{"equilibrium_energy", f_star},
                 {"w2_final", w2},
                 {"t_final", sum.t_final},
                 {"steps", sum.steps},
                 {"kappa_hat", fit.rate},
                 {"r_squared", fit.r_squared},
                 {"fit_window", {t_lo, t_hi}},
                 {"fit_flagged", fit.flagged},
                 {"states_checked", states},
                 {"max_fisher_relative_gap", fisher_gap},
                 {"max_dissipation_relative_error", dissipation_error}};
    o.pass = std::abs(f_star) <= 1e-8 && w2 <= 1e-3 && !fit.flagged && fit.rate > 0.0 && fit.r_squared > 0.99 &&
             states > 0 && fisher_gap <= 0.02 && dissipation_error <= 0.05;
    return o;
}

Outcome bridge_energy(Context& ctx) {
    const auto& fc = ctx.bridge();
    const auto& sum = fc.run.summary;
    const double f_star = flow_energy(fc.spec, fc.reference);
    std::vector<double> gap;
    for (double e : sum.energies) gap.push_back(e - f_star);
    const auto fit = fit_decay_rate(sum.times, gap);
    const double w2 = *fc.run.trajectory.back().w2_to_equilibrium;
    Outcome o;
    o.metrics = {{"w2_final", w2}, {"kappa_hat", fit.rate}, {"r_squared", fit.r_squared}, {"fit_flagged", fit.flagged},
                 {"steps", sum.steps}};
    o.pass = w2 <= 1e-3 && !fit.flagged && fit.rate > 0.0 && fit.r_squared > 0.99;
    return o;
}

Outcome conservation(Context& ctx) {
    json per = json::object();
    double drift = 0.0;
    bool energy_ok = true;
    std::size_t steps = 0;
    const std::vector<std::pair<std::string, const FlowCase*>> runs = {{"multi_species", &ctx.multispecies()},
                                                                       {"bridge_energy", &ctx.bridge()},
                                                                       {"eot_only", &ctx.eot_only()},
                                                                       {"sinkhorn_divergence", &ctx.divergence()}};
    for (const auto& [name, fc] : runs) {
        const auto& s = fc->run.summary;
        drift = std::max(drift, s.max_mass_drift);
        energy_ok = energy_ok && s.energy_ok;
        steps += s.steps;
        per[name] = {{"steps", s.steps}, {"max_mass_drift", s.max_mass_drift},
                     {"max_energy_increase", s.max_energy_increase}, {"energy_ok", s.energy_ok},
                     {"clip_events", s.clip_events}};
    }
    Outcome o;
    o.metrics = {{"steps", steps}, {"max_mass_drift", drift}, {"energy_nonincreasing", energy_ok}, {"per_run", per}};
    o.pass = drift <= 1e-13 && energy_ok;
    return o;
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome(Context&)> run;
};

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> list = {
        {1, "solver correctness", solver_correctness},
        {2, "schrodinger system oracle", schrodinger_oracle},
        {3, "density bounds", density_bounds},
        {4, "quotient norms", quotient_norms},
        {5, "lipschitz certification", lipschitz_certification},
        {6, "implicit function derivative", implicit_derivative},
        {7, "displacement smoothness", displacement_smoothness},
        {8, "sobolev stability", sobolev_stability},
        {9, "multi-species equilibrium", multi_species},
        {10, "bridge energy flow", bridge_energy},
        {11, "conservation", conservation},
    };
    return list;
}

std::string headline(const json& metrics) {
    std::ostringstream os;
    os << std::setprecision(3);
    bool first = true;
    for (const auto& [k, v] : metrics.items()) {
        if (!v.is_number() && !v.is_boolean()) continue;
        os << (first ? "" : ", ") << k << '=';
        if (v.is_boolean()) os << (v.get<bool>() ? "true" : "false");
        else os << v.get<double>();
        first = false;
    }
    return os.str();
}

/// Runs the selected criteria in a fresh context and returns the summary document.
json run_suite(const std::set<int>& only, bool verbose) {
    Context ctx;
    json doc{{"seed", kSeed}, {"criteria", json::array()}};
    for (const auto& c : criteria()) {
        if (!only.empty() && !only.count(c.id)) continue;
        Outcome o;
        std::string error;
        try {
            o = c.run(ctx);
        } catch (const std::exception& e) {
            o.pass = false;
            error = e.what();
        }
        json entry{{"id", c.id}, {"name", c.name}, {"pass", o.pass}, {"metrics", o.metrics}};
        if (!error.empty()) entry["error"] = error;
        if (verbose) {
            std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): "
                      << (error.empty() ? headline(o.metrics) : "error: " + error) << std::endl;
        }
        doc["criteria"].push_back(entry);
    }
    return doc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance suite"};
    std::string out = "acceptance_out";
    std::vector<int> only_list;
    app.add_option("--out", out, "Directory for JSON summaries");
    app.add_option("--only", only_list, "Run only these criteria (1-11); 12 reruns the selection");
    CLI11_PARSE(app, argc, argv);
    const std::set<int> only(only_list.begin(), only_list.end());

    std::filesystem::create_directories(out);
    const json first = run_suite(only, true);
    const std::string first_text = first.dump(2);
    {
        std::ofstream os(std::filesystem::path(out) / "acceptance_summary.json");
        os << first_text << '\n';
    }
    bool all = true;
    for (const auto& c : first.at("criteria")) all = all && c.at("pass").get<bool>();

    const json second = run_suite(only, false);
    const std::string second_text = second.dump(2);
    {
        std::ofstream os(std::filesystem::path(out) / "acceptance_summary_rerun.json");
        os << second_text << '\n';
    }
    const bool identical = first_text == second_text;
    const json det{{"id", 12},
                   {"name", "determinism"},
                   {"pass", identical},
                   {"metrics", {{"sha256_first", sha256_hex(first_text)}, {"sha256_second", sha256_hex(second_text)},
                                {"bytes", first_text.size()}}}};
    {
        std::ofstream os(std::filesystem::path(out) / "determinism.json");
        os << det.dump(2) << '\n';
    }
    std::cout << (identical ? "PASS" : "FAIL") << " criterion 12 (determinism): sha256=" << sha256_hex(first_text)
              << (identical ? " (identical on rerun)" : " (rerun differs)") << std::endl;
    all = all && identical;
    std::cout << (all ? "ALL PASS" : "SOME CRITERIA FAILED") << std::endl;
    return all ? 0 : 1;
}
