#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eotstab/cost.hpp"
#include "eotstab/errors.hpp"
#include "eotstab/logsumexp.hpp"
#include "eotstab/measure.hpp"
#include "eotstab/potential.hpp"
#include "eotstab/solver.hpp"

namespace eotstab {

enum class FlowPreset { eot_only, sinkhorn_divergence, bridge_energy, multi_species };

inline const char* preset_name(FlowPreset p) {
    switch (p) {
        case FlowPreset::eot_only: return "eot_only";
        case FlowPreset::sinkhorn_divergence: return "sinkhorn_divergence";
        case FlowPreset::bridge_energy: return "bridge_energy";
        case FlowPreset::multi_species: return "multi_species";
    }
    return "unknown";
}

inline FlowPreset preset_from_name(const std::string& s) {
    for (auto p : {FlowPreset::eot_only, FlowPreset::sinkhorn_divergence, FlowPreset::bridge_energy,
                   FlowPreset::multi_species})
        if (s == preset_name(p)) return p;
    throw ConfigError("preset", "unknown flow preset '" + s + "'");
}

/// Presets with a fixed target nu flow only the first marginal of a two-marginal cost.
inline bool single_species(FlowPreset p) {
    return p == FlowPreset::sinkhorn_divergence || p == FlowPreset::bridge_energy;
}

struct FlowSpec {
    FlowPreset preset = FlowPreset::eot_only;
    CostTensor cost;
    std::optional<DiscreteMeasure> target_nu;
    std::vector<double> diffusion;  // per flowing species
    double t_end = 1.0;
    double dt_max = 1e-2;
    double cfl_fraction = 0.4;
    double inner_tol = 1e-9;
    int inner_max_iter = 100000;
    std::size_t record_every = 1;
    bool abort_on_energy_increase = true;
};

/// Spec with the preset's diffusion coefficients (1 for bridge_energy and multi_species, 0 otherwise).
inline FlowSpec make_flow_spec(FlowPreset preset, CostTensor cost, std::optional<DiscreteMeasure> nu = std::nullopt) {
    FlowSpec s{preset, std::move(cost), std::move(nu), {}};
    const std::size_t species = single_species(preset) ? 1 : s.cost.order();
    const double alpha = (preset == FlowPreset::bridge_energy || preset == FlowPreset::multi_species) ? 1.0 : 0.0;
    s.diffusion.assign(species, alpha);
    return s;
}

inline std::size_t species_count(const FlowSpec& spec) {
    return single_species(spec.preset) ? 1 : spec.cost.order();
}

inline void validate(const FlowSpec& spec) {
    const std::size_t S = species_count(spec);
    if (spec.diffusion.size() != S) throw InvariantError("FlowSpec: diffusion must have one entry per species");
    const double forced = (spec.preset == FlowPreset::bridge_energy || spec.preset == FlowPreset::multi_species) ? 1.0 : 0.0;
    for (double a : spec.diffusion)
        if (a != forced) {
            throw InvariantError(std::string("FlowSpec: preset ") + preset_name(spec.preset) + " requires diffusion " +
                                 std::to_string(forced));
        }
    if (single_species(spec.preset)) {
        if (!spec.target_nu) throw InvariantError("FlowSpec: preset requires target_nu");
        if (spec.cost.order() != 2) throw InvariantError("FlowSpec: preset requires a two-marginal cost");
        if (!(spec.target_nu->grid() == spec.cost.grid(1))) throw DomainMismatch("FlowSpec: target_nu grid differs");
        if (spec.preset == FlowPreset::sinkhorn_divergence && !(spec.cost.grid(0) == spec.cost.grid(1))) {
            throw DomainMismatch("FlowSpec: sinkhorn_divergence needs both marginals on one grid");
        }
    }
    if (!(spec.t_end >= 0.0) || !(spec.dt_max > 0.0) || !(spec.cfl_fraction > 0.0 && spec.cfl_fraction <= 1.0) ||
        !(spec.inner_tol > 0.0) || spec.record_every == 0) {
        throw InvariantError("FlowSpec: invalid time-stepping parameters");
    }
}

/// sum w log(w / h) with 0 log 0 = 0.
inline double entropy(const DiscreteMeasure& mu) {
    const double h = mu.grid().spacing();
    double s = 0.0;
    for (double w : mu.weights())
        if (w > 0.0) s += w * std::log(w / h);
    return s;
}

struct FlowState {
    double time = 0.0;
    std::vector<DiscreteMeasure> measures;
    GridFunctions first_variation;  // V_i, velocity is -V_i'
    PotentialFamily potentials;     // S(mu) or S(mu, nu)
    std::optional<PotentialFamily> self_potentials;  // S(mu, mu) for the divergence preset
    double energy = 0.0;
    std::optional<double> fisher;
    std::optional<double> w2_to_equilibrium;
    std::size_t clip_events = 0;  // produced by the step that led here
    double mass_drift = 0.0;
};

namespace detail {

inline MeasureFamily flowing_family(const FlowSpec& spec, const std::vector<DiscreteMeasure>& m) {
    if (single_species(spec.preset)) return MeasureFamily({m[0], *spec.target_nu});
    return MeasureFamily(m);
}

inline SolveReport inner_solve(const FlowSpec& spec, const MeasureFamily& mu, const std::optional<PotentialFamily>& warm) {
    SolveOptions opt;
    opt.tol = spec.inner_tol;
    opt.max_iter = spec.inner_max_iter;
    opt.init = warm;
    return solve(spec.cost, mu, opt);
}

}  // namespace detail

/// E(nu, nu) for the divergence preset (constant along the flow).
inline double target_self_energy(const FlowSpec& spec) {
    if (spec.preset != FlowPreset::sinkhorn_divergence) return 0.0;
    return detail::inner_solve(spec, MeasureFamily({*spec.target_nu, *spec.target_nu}), std::nullopt).dual_value;
}

/// Solves the inner problems at `measures` and fills potentials, first variations and energy.
inline FlowState evaluate_state(const FlowSpec& spec, std::vector<DiscreteMeasure> measures, double time,
                                const FlowState* warm = nullptr, double nu_self_energy = 0.0) {
    const auto fam = detail::flowing_family(spec, measures);
    std::optional<PotentialFamily> w;
    if (warm) w = warm->potentials;
    auto main = detail::inner_solve(spec, fam, w);
    FlowState st{time, std::move(measures), {}, main.potentials, std::nullopt, 0.0, std::nullopt, std::nullopt, 0, 0.0};
    switch (spec.preset) {
        case FlowPreset::eot_only:
        case FlowPreset::multi_species: {
            st.first_variation = main.potentials.members();
            st.energy = main.dual_value;
            if (spec.preset == FlowPreset::multi_species)
                for (const auto& m : st.measures) st.energy += entropy(m);
            break;
        }
        case FlowPreset::bridge_energy: {
            st.first_variation = {main.potentials[0]};
            st.energy = main.dual_value + entropy(st.measures[0]);
            break;
        }
        case FlowPreset::sinkhorn_divergence: {
            std::optional<PotentialFamily> ws;
            if (warm && warm->self_potentials) ws = warm->self_potentials;
            const auto self = detail::inner_solve(spec, MeasureFamily({st.measures[0], st.measures[0]}), ws);
            std::vector<double> v(main.potentials[0].size());
            for (std::size_t k = 0; k < v.size(); ++k)
                v[k] = main.potentials[0][k] - 0.5 * (self.potentials[0][k] + self.potentials[1][k]);
            st.first_variation = {std::move(v)};
            st.energy = main.dual_value - 0.5 * self.dual_value - 0.5 * nu_self_energy;
            st.self_potentials = self.potentials;
            break;
        }
    }
    return st;
}

/// Face velocities u_{k+1/2} = -(V[k+1] - V[k]) / h for each species.
inline GridFunctions velocity_field(const FlowSpec& spec, const FlowState& state) {
    GridFunctions u(state.measures.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double h = state.measures[i].grid().spacing();
        const auto& V = state.first_variation[i];
        u[i].resize(V.size() - 1);
        for (std::size_t k = 0; k + 1 < V.size(); ++k) u[i][k] = -(V[k + 1] - V[k]) / h;
    }
    (void)spec;
    return u;
}

/// Largest stable dt: cfl_fraction * min(h / max|u|, h^2 / (2 alpha)).
inline double cfl_limit(const FlowSpec& spec, const FlowState& state) {
    const auto u = velocity_field(spec, state);
    double lim = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double h = state.measures[i].grid().spacing();
        double vmax = 0.0;
        for (double v : u[i]) vmax = std::max(vmax, std::abs(v));
        if (vmax > 0.0) lim = std::min(lim, h / vmax);
        if (spec.diffusion[i] > 0.0) lim = std::min(lim, h * h / (2.0 * spec.diffusion[i]));
    }
    return spec.cfl_fraction * lim;
}

namespace detail {

/// Bernoulli function x / (e^x - 1).
inline double bernoulli(double x) {
    if (std::abs(x) < 1e-10) return 1.0 - 0.5 * x;
    return x / std::expm1(x);
}

/// Mass flux through interior faces (rightward positive); zero flux at both ends.
/// alpha = 0: upwind. alpha > 0: exponentially fitted (Scharfetter-Gummel) flux,
/// which vanishes exactly on w proportional to exp(-V / alpha).
inline std::vector<double> face_flux(const DiscreteMeasure& mu, const std::vector<double>& V, double alpha) {
    const double h = mu.grid().spacing();
    const std::size_t n = mu.size();
    std::vector<double> J(n - 1);
    for (std::size_t k = 0; k + 1 < n; ++k) {
        const double rl = mu.weight(k) / h, rr = mu.weight(k + 1) / h;
        if (alpha == 0.0) {
            const double u = -(V[k + 1] - V[k]) / h;
            J[k] = u > 0.0 ? u * rl : u * rr;
        } else {
            const double P = -(V[k + 1] - V[k]) / alpha;
            J[k] = alpha / h * (bernoulli(-P) * rl - bernoulli(P) * rr);
        }
    }
    return J;
}

}  // namespace detail

/// Explicit finite-volume step; the returned state is re-evaluated at the new measures.
inline FlowState flow_step(const FlowSpec& spec, const FlowState& state, double dt, double nu_self_energy = 0.0) {
    const double lim = cfl_limit(spec, state);
    if (!(dt > 0.0)) throw InvariantError("flow_step: dt must be positive");
    if (dt > lim * (1.0 + 1e-12)) {
        throw CflViolation("flow_step: dt=" + std::to_string(dt) + " exceeds the stability limit " + std::to_string(lim),
                           lim);
    }
    std::vector<DiscreteMeasure> next;
    std::size_t clips = 0;
    double drift = 0.0;
    for (std::size_t i = 0; i < state.measures.size(); ++i) {
        const auto& mu = state.measures[i];
        const auto J = detail::face_flux(mu, state.first_variation[i], spec.diffusion[i]);
        const std::size_t n = mu.size();
        std::vector<double> w(n);
        double before = 0.0, after = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double in = k > 0 ? J[k - 1] : 0.0;
            const double out = k + 1 < n ? J[k] : 0.0;
            w[k] = mu.weight(k) + dt * (in - out);
            before += mu.weight(k);
            after += w[k];
        }
        drift = std::max(drift, std::abs(after - before));
        for (std::size_t k = 0; k < n; ++k) {
            if (w[k] < -1e-14) {
                throw InvariantError("flow_step: weight " + std::to_string(w[k]) + " at node " + std::to_string(k) +
                                     " of species " + std::to_string(i) + " is below the clipping floor");
            }
            if (w[k] < 0.0) {
                w[k] = 0.0;
                ++clips;
            }
        }
        // Clipped weights are zeroed and counted; renormalizing also stops roundoff drift.
        next.push_back(DiscreteMeasure::normalized(mu.grid(), std::move(w)));
    }
    auto st = evaluate_state(spec, std::move(next), state.time + dt, &state, nu_self_energy);
    st.clip_events = clips;
    st.mass_drift = drift;
    return st;
}

// ---------------------------------------------------------------------------
// Equilibria and diagnostics.

/// Marginals of exp(-c) times the cell volume; requires a normalized cost.
inline MeasureFamily equilibrium_multispecies(const CostTensor& cost, double tol = 1e-10) {
    const double lz = log_partition(cost);
    if (std::abs(lz) > tol) {
        throw InvariantError("equilibrium_multispecies: cost is not normalized (log integral of exp(-c) = " +
                             std::to_string(lz) + ")");
    }
    const std::size_t N = cost.order();
    const double vol = cost.cell_volume();
    GridFunctions m;
    for (const auto& g : cost.grids()) m.emplace_back(g.n(), 0.0);
    const auto c = cost.values();
    detail::for_each_cell(cost, [&](std::size_t flat, const auto& idx) {
        const double w = std::exp(-c[flat]) * vol;
        for (std::size_t j = 0; j < N; ++j) m[j][idx[j]] += w;
    });
    std::vector<DiscreteMeasure> out;
    for (std::size_t j = 0; j < N; ++j) out.push_back(DiscreteMeasure::normalized(cost.grid(j), std::move(m[j])));
    return MeasureFamily(std::move(out));
}

/// Minimizer of sum w f + sum w log(w / h): w proportional to h exp(-f).
inline DiscreteMeasure gibbs_measure(const Grid1D& g, const std::vector<double>& f) {
    LogSumExp z;
    for (double v : f) z.add(-v);
    std::vector<double> w(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) w[k] = std::exp(-f[k] - z.value());
    return DiscreteMeasure::normalized(g, std::move(w));
}

/// Energy of the preset at fixed measures (one solve, cold start).
inline double flow_energy(const FlowSpec& spec, const std::vector<DiscreteMeasure>& measures) {
    return evaluate_state(spec, measures, 0.0, nullptr, target_self_energy(spec)).energy;
}

inline double product_w2_density(const std::vector<DiscreteMeasure>& a, const std::vector<DiscreteMeasure>& b) {
    if (a.size() != b.size()) throw DomainMismatch("product_w2_density: family sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double w = wasserstein2_1d_density(a[i], b[i]);
        s += w * w;
    }
    return std::sqrt(s);
}

struct FisherReport {
    double species_sum = 0.0;                 // sum_i I_i(mu_i | exp(-V_i))
    std::optional<double> product_grid;       // I(gamma | exp(-c)), multi_species only
    std::optional<double> relative_gap;
    std::size_t masked_faces = 0;             // faces next to a zero weight
};

/// Relative Fisher information with exponentially fitted face masses, so that
/// it equals the dissipation rate of the semi-discrete scheme.
inline FisherReport fisher_information(const FlowState& state, const FlowSpec& spec) {
    if (spec.preset != FlowPreset::multi_species && spec.preset != FlowPreset::bridge_energy) {
        throw InvariantError("fisher_information: requires a preset with diffusion");
    }
    FisherReport out;
    for (std::size_t i = 0; i < state.measures.size(); ++i) {
        const auto& mu = state.measures[i];
        const auto& V = state.first_variation[i];
        const double alpha = spec.diffusion[i];
        const auto J = detail::face_flux(mu, V, alpha);
        for (std::size_t k = 0; k + 1 < mu.size(); ++k) {
            const double a = mu.weight(k), b = mu.weight(k + 1);
            if (a <= 0.0 || b <= 0.0) {
                ++out.masked_faces;
                continue;
            }
            const double dchi = (V[k + 1] - V[k]) + alpha * std::log(b / a);
            out.species_sum += -J[k] * dchi;
        }
    }
    if (spec.preset == FlowPreset::multi_species) {
        // log(gamma / gamma*) = sum_j (phi_j + log mu_j) - log vol is separable; face masses
        // are logarithmic means of neighbouring cells of gamma.
        const auto fam = MeasureFamily(state.measures);
        const auto g = primal_plan(state.potentials, fam, spec.cost);
        const std::size_t N = fam.size();
        const auto& strides = spec.cost.strides();
        GridFunctions chi(N);
        for (std::size_t j = 0; j < N; ++j) {
            chi[j].resize(fam[j].size());
            for (std::size_t k = 0; k < chi[j].size(); ++k)
                chi[j][k] = state.potentials[j][k] + safe_log(fam[j].weight(k));
        }
        double I = 0.0;
        detail::for_each_cell(spec.cost, [&](std::size_t flat, const auto& idx) {
            for (std::size_t j = 0; j < N; ++j) {
                if (idx[j] + 1 >= fam[j].size()) continue;
                const double a = g.weights[flat], b = g.weights[flat + strides[j]];
                if (a <= 0.0 || b <= 0.0) continue;
                const double d = chi[j][idx[j] + 1] - chi[j][idx[j]];
                const double lm = std::abs(a - b) > 1e-14 * std::max(a, b) ? (a - b) / std::log(a / b) : 0.5 * (a + b);
                const double h = fam[j].grid().spacing();
                I += lm * d * d / (h * h);
            }
        });
        out.product_grid = I;
        out.relative_gap = out.species_sum > 0.0 ? std::abs(I - out.species_sum) / out.species_sum : 0.0;
    }
    return out;
}

struct DecayFit {
    double rate = 0.0;       // kappa_hat
    double r_squared = 0.0;
    std::size_t first = 0;   // window [first, last) into the series
    std::size_t last = 0;
    bool flagged = false;    // rate <= 0 or fewer than three points
};

/// Least-squares slope of log(gap) against t after a burn-in to 10% of the
/// initial gap, truncated where the gap falls below 1e-13.
inline DecayFit fit_decay_rate(const std::vector<double>& t, const std::vector<double>& gap, double floor = 1e-13) {
    if (t.size() != gap.size() || t.empty()) throw InvariantError("fit_decay_rate: series lengths differ or are empty");
    DecayFit out;
    const double g0 = gap.front();
    std::size_t first = 0;
    while (first < gap.size() && gap[first] > 0.1 * g0) ++first;
    if (first == gap.size()) first = 0;
    std::size_t last = first;
    while (last < gap.size() && gap[last] >= floor) ++last;
    out.first = first;
    out.last = last;
    const std::size_t m = last - first;
    if (m < 3) {
        out.flagged = true;
        return out;
    }
    double st = 0.0, sy = 0.0;
    for (std::size_t k = first; k < last; ++k) {
        st += t[k];
        sy += std::log(gap[k]);
    }
    st /= static_cast<double>(m);
    sy /= static_cast<double>(m);
    double stt = 0.0, sty = 0.0, syy = 0.0;
    for (std::size_t k = first; k < last; ++k) {
        const double dt = t[k] - st, dy = std::log(gap[k]) - sy;
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    if (stt <= 0.0) {
        out.flagged = true;
        return out;
    }
    const double slope = sty / stt;
    out.rate = -slope;
    out.r_squared = syy > 0.0 ? (sty * sty) / (stt * syy) : 1.0;
    if (syy == 0.0) out.rate = 0.0;
    out.flagged = !(out.rate > 0.0);
    return out;
}

/// Least-squares slope of log(values) against t over [first, last).
inline double log_slope(const std::vector<double>& t, const std::vector<double>& values, std::size_t first,
                        std::size_t last) {
    double st = 0.0, sy = 0.0;
    std::size_t m = 0;
    for (std::size_t k = first; k < last; ++k) {
        if (!(values[k] > 0.0)) continue;
        st += t[k];
        sy += std::log(values[k]);
        ++m;
    }
    if (m < 2) return 0.0;
    st /= static_cast<double>(m);
    sy /= static_cast<double>(m);
    double stt = 0.0, sty = 0.0;
    for (std::size_t k = first; k < last; ++k) {
        if (!(values[k] > 0.0)) continue;
        stt += (t[k] - st) * (t[k] - st);
        sty += (t[k] - st) * (std::log(values[k]) - sy);
    }
    return stt > 0.0 ? sty / stt : 0.0;
}

// ---------------------------------------------------------------------------
// Runs.

struct FlowSummary {
    std::size_t steps = 0;
    double t_final = 0.0;
    std::size_t clip_events = 0;
    double max_mass_drift = 0.0;
    double max_energy_increase = -std::numeric_limits<double>::infinity();  // max of F_{n+1} - F_n - slack
    bool energy_ok = true;
    double dt_min = std::numeric_limits<double>::infinity();
    double dt_max = 0.0;
    std::vector<double> times;     // every step, including t = 0
    std::vector<double> energies;
};

struct FlowRun {
    std::vector<FlowState> trajectory;  // recorded states, always including the first and last
    FlowSummary summary;
};

/// Integrates to t_end. If `equilibrium` is given, recorded states carry the
/// density W2 distance to it. Fisher information is recorded for diffusive presets.
inline FlowRun run_flow(const FlowSpec& spec, const std::vector<DiscreteMeasure>& initial,
                        const std::optional<std::vector<DiscreteMeasure>>& equilibrium = std::nullopt) {
    validate(spec);
    if (initial.size() != species_count(spec)) throw InvariantError("run_flow: wrong number of initial measures");
    const double nu_self = target_self_energy(spec);
    const bool diffusive = spec.preset == FlowPreset::multi_species || spec.preset == FlowPreset::bridge_energy;
    FlowRun run;
    auto decorate = [&](FlowState& st) {
        if (equilibrium) st.w2_to_equilibrium = product_w2_density(st.measures, *equilibrium);
        if (diffusive) st.fisher = fisher_information(st, spec).species_sum;
    };
    FlowState cur = evaluate_state(spec, initial, 0.0, nullptr, nu_self);
    decorate(cur);
    run.trajectory.push_back(cur);
    auto& sum = run.summary;
    sum.times.push_back(0.0);
    sum.energies.push_back(cur.energy);
    while (cur.time < spec.t_end) {
        double dt = std::min(spec.dt_max, cfl_limit(spec, cur));
        const bool last = cur.time + dt >= spec.t_end * (1.0 - 1e-14);
        if (last) dt = spec.t_end - cur.time;
        if (!(dt > 0.0)) break;
        FlowState nxt = flow_step(spec, cur, dt, nu_self);
        if (last) nxt.time = spec.t_end;
        ++sum.steps;
        sum.clip_events += nxt.clip_events;
        sum.max_mass_drift = std::max(sum.max_mass_drift, nxt.mass_drift);
        sum.dt_min = std::min(sum.dt_min, dt);
        sum.dt_max = std::max(sum.dt_max, dt);
        const double slack = 10.0 * dt * dt + spec.inner_tol;
        const double excess = nxt.energy - cur.energy - slack;
        sum.max_energy_increase = std::max(sum.max_energy_increase, excess);
        if (excess > 0.0) {
            sum.energy_ok = false;
            if (spec.abort_on_energy_increase) {
                throw InvariantError("run_flow: energy increased by " + std::to_string(nxt.energy - cur.energy) +
                                     " at t=" + std::to_string(nxt.time) + " (slack " + std::to_string(slack) + ")");
            }
        }
        sum.times.push_back(nxt.time);
        sum.energies.push_back(nxt.energy);
        cur = std::move(nxt);
        if (sum.steps % spec.record_every == 0 || cur.time >= spec.t_end) {
            decorate(cur);
            run.trajectory.push_back(cur);
        }
    }
    sum.t_final = cur.time;
    return run;
}

}  // namespace eotstab
