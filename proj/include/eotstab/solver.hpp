#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eotstab/cost.hpp"
#include "eotstab/errors.hpp"
#include "eotstab/logsumexp.hpp"
#include "eotstab/measure.hpp"
#include "eotstab/potential.hpp"

namespace eotstab {

struct SolveOptions {
    double tol = 1e-10;
    int max_iter = 100000;
    /// Warm start; any representative of any class is accepted.
    std::optional<PotentialFamily> init;
    bool keep_history = false;
};

struct SolveReport {
    PotentialFamily potentials;  // canonical gauge
    int iterations = 0;
    double final_residual = 0.0;
    double primal_value = 0.0;
    double dual_value = 0.0;
    double marginal_error = 0.0;
    /// Geometric mean contraction of the residual over the last iterations (diagnostic only).
    double observed_rate = 0.0;
    std::vector<double> residual_history;
};

/// Joint weights exp(sum phi - c) mu on the product grid.
struct Coupling {
    std::vector<Grid1D> grids;
    std::vector<double> weights;  // same layout as CostTensor values

    double total() const {
        double s = 0.0;
        for (double w : weights) s += w;
        return s;
    }
};

namespace detail {

inline double residual_of(const GridFunctions& phi, const GridFunctions& tbar, std::size_t count) {
    GridFunctions T(phi.size());
    for (std::size_t i = 0; i < phi.size(); ++i) {
        if (i < count) {
            T[i].resize(phi[i].size());
            for (std::size_t k = 0; k < phi[i].size(); ++k) T[i][k] = phi[i][k] + tbar[i][k];
        } else {
            T[i].assign(phi[i].size(), 0.0);
        }
    }
    return quotient_sup_norm_nodes(T);
}

}  // namespace detail

/// sum_i int phi_i dmu_i + 1 - int exp(sum phi - c) dmu.
inline double eot_value_dual(const PotentialFamily& phi, const MeasureFamily& mu, const CostTensor& cost) {
    double s = 1.0 - std::exp(log_partition(phi, mu, cost));
    for (std::size_t i = 0; i < phi.size(); ++i) s += mu[i].integrate(phi[i]);
    return s;
}

inline Coupling primal_plan(const PotentialFamily& phi, const MeasureFamily& mu, const CostTensor& cost) {
    detail::check_shapes(phi, mu, cost);
    Coupling g{cost.grids(), std::vector<double>(cost.size(), 0.0)};
    const auto c = cost.values();
    const std::size_t N = phi.size();
    detail::for_each_cell(cost, [&](std::size_t flat, const auto& idx) {
        double w = 1.0, e = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            w *= mu[j].weight(idx[j]);
            e += phi[j][idx[j]];
        }
        if (w > 0.0) g.weights[flat] = w * std::exp(e - c[flat]);
    });
    return g;
}

inline Coupling primal_plan(const SolveReport& report, const MeasureFamily& mu, const CostTensor& cost) {
    return primal_plan(report.potentials, mu, cost);
}

/// Axis sums of a coupling.
inline GridFunctions coupling_marginals(const Coupling& g, const CostTensor& shape) {
    GridFunctions m;
    for (const auto& gr : g.grids) m.emplace_back(gr.n(), 0.0);
    detail::for_each_cell(shape, [&](std::size_t flat, const auto& idx) {
        for (std::size_t j = 0; j < m.size(); ++j) m[j][idx[j]] += g.weights[flat];
    });
    return m;
}

inline double marginal_error(const Coupling& g, const MeasureFamily& mu, const CostTensor& shape) {
    const auto m = coupling_marginals(g, shape);
    double e = 0.0;
    for (std::size_t j = 0; j < m.size(); ++j)
        for (std::size_t k = 0; k < m[j].size(); ++k) e = std::max(e, std::abs(m[j][k] - mu[j].weight(k)));
    return e;
}

/// int c dgamma + H(gamma | mu_1 x ... x mu_N), with 0 log 0 = 0.
inline double eot_value_primal(const Coupling& g, const MeasureFamily& mu, const CostTensor& cost) {
    const auto c = cost.values();
    const std::size_t N = mu.size();
    double s = 0.0;
    detail::for_each_cell(cost, [&](std::size_t flat, const auto& idx) {
        const double w = g.weights[flat];
        if (w == 0.0) return;
        double ref = 1.0;
        for (std::size_t j = 0; j < N; ++j) ref *= mu[j].weight(idx[j]);
        if (ref == 0.0) {
            s = std::numeric_limits<double>::infinity();
            return;
        }
        s += w * (c[flat] + std::log(w / ref));
    });
    return s;
}

/// Multi-marginal Sinkhorn: cyclic updates phi_i <- -Tbar_i(phi, mu) until the
/// gauge-minimized node sup-norm of T(phi, mu) is at most tol.
inline SolveReport solve(const CostTensor& cost, const MeasureFamily& mu, const SolveOptions& opt = {}) {
    if (!(opt.tol > 0.0)) throw InvariantError("solve: tol must be positive");
    const std::size_t N = mu.size();
    PotentialFamily start = opt.init ? *opt.init : PotentialFamily::zeros(cost.grids());
    detail::check_shapes(start, mu, cost);
    GridFunctions phi = start.members();
    GridFunctions a(N), tbar(N);
    for (std::size_t j = 0; j < N; ++j) detail::log_weights_into(a[j], phi[j], mu[j]);

    auto update = [&](std::size_t i, bool recompute) {
        if (recompute) detail::contract_lse(cost, a, i, tbar[i]);
        for (std::size_t k = 0; k < phi[i].size(); ++k) phi[i][k] = -tbar[i][k];
        detail::log_weights_into(a[i], phi[i], mu[i]);
    };

    // One full sweep first, so that T_N = 0 holds at every residual check.
    for (std::size_t i = 0; i < N; ++i) update(i, true);
    int it = 1;
    double residual = 0.0;
    std::vector<double> history;
    for (;; ++it) {
        for (std::size_t i = 0; i + 1 < N; ++i) detail::contract_lse(cost, a, i, tbar[i]);
        residual = detail::residual_of(phi, tbar, N - 1);
        history.push_back(residual);
        if (!std::isfinite(residual)) {
            throw NonConvergence("solve: residual is not finite", it, residual);
        }
        if (residual <= opt.tol) break;
        if (it >= opt.max_iter) {
            throw NonConvergence("solve: max_iter=" + std::to_string(opt.max_iter) +
                                     " reached with residual " + std::to_string(residual),
                                 it, residual);
        }
        update(0, false);
        for (std::size_t i = 1; i < N; ++i) update(i, true);
    }

    SolveReport rep{canonical_gauge(PotentialFamily(cost.grids(), std::move(phi)), mu), 0, 0.0, 0.0, 0.0, 0.0, 0.0, {}};
    rep.iterations = it;
    rep.final_residual = residual;
    const auto g = primal_plan(rep.potentials, mu, cost);
    rep.primal_value = eot_value_primal(g, mu, cost);
    rep.dual_value = eot_value_dual(rep.potentials, mu, cost);
    rep.marginal_error = marginal_error(g, mu, cost);
    if (history.size() >= 3) {
        const std::size_t k = std::min<std::size_t>(history.size() - 1, 10);
        const double last = history.back(), prev = history[history.size() - 1 - k];
        if (last > 0.0 && prev > 0.0) rep.observed_rate = std::pow(last / prev, 1.0 / static_cast<double>(k));
    }
    if (opt.keep_history) rep.residual_history = std::move(history);
    return rep;
}

struct LipschitzCheck {
    std::vector<double> slopes;  // max |phi_i[j+1] - phi_i[j]| / h
    std::vector<double> bounds;  // L_i from the cost
    bool ok = true;
};

/// Largest node-to-node slope of each potential against L_i = sup |d c / d x_i|.
inline LipschitzCheck potential_lipschitz_check(const SolveReport& rep, const CostTensor& cost, double slack = 1e-9) {
    LipschitzCheck out;
    const auto& phi = rep.potentials;
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const double h = phi.grids()[i].spacing();
        double s = 0.0;
        for (std::size_t j = 0; j + 1 < phi[i].size(); ++j) s = std::max(s, std::abs(phi[i][j + 1] - phi[i][j]) / h);
        out.slopes.push_back(s);
        out.bounds.push_back(cost.grad_bounds()[i]);
        if (s > cost.grad_bounds()[i] * (1.0 + slack) + slack) out.ok = false;
    }
    return out;
}

/// Schrodinger potentials S(mu) in canonical gauge.
inline PotentialFamily schrodinger_map(const CostTensor& cost, const MeasureFamily& mu, const SolveOptions& opt = {}) {
    return solve(cost, mu, opt).potentials;
}

}  // namespace eotstab
