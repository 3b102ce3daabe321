#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "eotstab/cost.hpp"
#include "eotstab/errors.hpp"
#include "eotstab/logsumexp.hpp"
#include "eotstab/measure.hpp"
#include "eotstab/potential.hpp"
#include "eotstab/solver.hpp"

namespace eotstab {

inline constexpr std::size_t kMaxLinearizationNodes = 1024;

// ---------------------------------------------------------------------------
// Discrete H^p and its dual.

struct SobolevGram {
    int p = 1;
    Grid1D grid;
    Eigen::MatrixXd gram;
};

/// <f, g>_{H^p} on nodal values: h sum f g + h sum D1f D1g / h^2 (+ h sum D2f D2g / h^4 for p = 2).
inline SobolevGram sobolev_gram(const Grid1D& grid, int p) {
    if (p != 1 && p != 2) throw InvariantError("sobolev_gram: p must be 1 or 2");
    const auto n = static_cast<Eigen::Index>(grid.n());
    if (n < p + 1) throw GridTooCoarse("sobolev_gram: grid too coarse for p");
    const double h = grid.spacing();
    Eigen::MatrixXd D1 = Eigen::MatrixXd::Zero(n - 1, n);
    for (Eigen::Index k = 0; k + 1 < n; ++k) {
        D1(k, k) = -1.0;
        D1(k, k + 1) = 1.0;
    }
    Eigen::MatrixXd G = h * Eigen::MatrixXd::Identity(n, n) + (D1.transpose() * D1) / h;
    if (p == 2) {
        Eigen::MatrixXd D2 = Eigen::MatrixXd::Zero(n - 2, n);
        for (Eigen::Index k = 0; k + 2 < n; ++k) {
            D2(k, k) = 1.0;
            D2(k, k + 1) = -2.0;
            D2(k, k + 2) = 1.0;
        }
        G += (D2.transpose() * D2) / (h * h * h);
    }
    G = 0.5 * (G + G.transpose());
    return {p, grid, std::move(G)};
}

inline double sobolev_norm(std::span<const double> f, const SobolevGram& g) {
    const Eigen::Map<const Eigen::VectorXd> v(f.data(), static_cast<Eigen::Index>(f.size()));
    return std::sqrt(std::max(0.0, v.dot(g.gram * v)));
}

/// sup { sum f rho : ||f||_{H^p} <= 1 } = sqrt(rho^T G^{-1} rho).
inline double hneg_norm(std::span<const double> rho, const SobolevGram& g) {
    if (rho.size() != g.grid.n()) throw DomainMismatch("hneg_norm: length differs from the grid");
    double total = 0.0, scale = 0.0;
    for (double r : rho) {
        total += r;
        scale += std::abs(r);
    }
    if (std::abs(total) > 1e-12 * std::max(1.0, scale)) throw InvariantError("hneg_norm: input does not sum to zero");
    const Eigen::Map<const Eigen::VectorXd> v(rho.data(), static_cast<Eigen::Index>(rho.size()));
    if (v.squaredNorm() == 0.0) return 0.0;
    const Eigen::VectorXd x = g.gram.ldlt().solve(v);
    return std::sqrt(std::max(0.0, v.dot(x)));
}

inline std::vector<double> weight_difference(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    if (!(mu.grid() == nu.grid())) throw DomainMismatch("weight_difference: grids differ");
    std::vector<double> d(mu.size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = mu.weight(k) - nu.weight(k);
    return d;
}

inline double hneg_norm(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const SobolevGram& g) {
    return hneg_norm(weight_difference(mu, nu), g);
}

/// sum_i ||mu_i - nu_i||_{H^-p}.
inline double hneg_family_norm(const MeasureFamily& mu, const MeasureFamily& nu, int p) {
    if (mu.size() != nu.size()) throw DomainMismatch("hneg_family_norm: family sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) s += hneg_norm(mu[i], nu[i], sobolev_gram(mu[i].grid(), p));
    return s;
}

enum class TestFunctionFamily { gaussian, low_degree };

/// Largest sum f rho over `count` random test functions normalized in H^p.
/// `gaussian` draws i.i.d. nodal values. `low_degree` draws directions in the
/// span of Legendre polynomials of degree <= 8, uniformly on the unit H^p
/// sphere for the first half of the budget and as shrinking perturbations of
/// the best direction so far for the second half.
inline double hneg_sampled_lower_bound(std::span<const double> rho, const SobolevGram& g, std::mt19937_64& rng,
                                       std::size_t count, TestFunctionFamily family = TestFunctionFamily::gaussian) {
    const std::size_t n = g.grid.n();
    if (rho.size() != n) throw DomainMismatch("hneg_sampled_lower_bound: length differs from the grid");
    const Eigen::Map<const Eigen::VectorXd> r(rho.data(), static_cast<Eigen::Index>(n));
    std::normal_distribution<double> z(0.0, 1.0);
    double best = 0.0;
    if (family == TestFunctionFamily::gaussian) {
        Eigen::VectorXd f(static_cast<Eigen::Index>(n));
        for (std::size_t s = 0; s < count; ++s) {
            for (Eigen::Index k = 0; k < f.size(); ++k) f(k) = z(rng);
            const double nrm = std::sqrt(f.dot(g.gram * f));
            if (nrm > 0.0) best = std::max(best, std::abs(f.dot(r)) / nrm);
        }
        return best;
    }
    const Eigen::Index dim = std::min<Eigen::Index>(9, static_cast<Eigen::Index>(n));
    Eigen::MatrixXd B(static_cast<Eigen::Index>(n), dim);
    for (std::size_t k = 0; k < n; ++k) {
        const double u = 2.0 * (g.grid.node(k) - g.grid.lo()) / g.grid.length() - 1.0;
        double p0 = 1.0, p1 = u;
        for (Eigen::Index d = 0; d < dim; ++d) {
            double v = p0;
            if (d == 1) v = p1;
            if (d >= 2) {
                const double dd = static_cast<double>(d);
                v = ((2.0 * dd - 1.0) * u * p1 - (dd - 1.0) * p0) / dd;
                p0 = p1;
                p1 = v;
            }
            B(static_cast<Eigen::Index>(k), d) = v;
        }
    }
    // Whitened coordinates: f = B L^{-T} c has ||f||_{H^p} = |c|.
    const Eigen::LLT<Eigen::MatrixXd> llt(B.transpose() * g.gram * B);
    const Eigen::VectorXd proj = llt.matrixL().solve(B.transpose() * r);
    Eigen::VectorXd c(dim), best_c = Eigen::VectorXd::Zero(dim);
    double radius = 0.5;
    for (std::size_t s = 0; s < count; ++s) {
        for (Eigen::Index d = 0; d < dim; ++d) c(d) = z(rng);
        if (2 * s >= count && best > 0.0) {
            c = best_c + radius * c / std::sqrt(static_cast<double>(dim));
            radius = std::max(1e-4, radius * 0.9999);
        }
        const double nrm = c.norm();
        if (!(nrm > 0.0)) continue;
        c /= nrm;
        const double v = std::abs(c.dot(proj));
        if (v > best) {
            best = v;
            best_c = c.dot(proj) < 0.0 ? Eigen::VectorXd(-c) : c;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Displacement paths.

namespace detail {

/// Cell [k, k+1] whose interpolation weights move when an atom at index
/// position s travels with index velocity v (left cell at a node when v < 0).
inline std::size_t moving_cell(double s, double v, std::size_t n) {
    double base = std::floor(s);
    if (v < 0.0 && s == base) base -= 1.0;
    base = std::clamp(base, 0.0, static_cast<double>(n - 2));
    return static_cast<std::size_t>(base);
}

}  // namespace detail

/// d/dt of displacement_marginal(plan, t): each atom moves mass between the
/// two nodes bracketing its current index position.
inline std::vector<double> displacement_rate(const TransportPlan& plan, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw InvariantError("displacement_rate: t outside [0,1]");
    const Grid1D& g = plan.source_grid();
    const Grid1D& tgt = plan.target_grid();
    const bool shared = (g == tgt);
    const std::size_t n = g.n(), m = tgt.n();
    const double top = static_cast<double>(n - 1);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double sx = static_cast<double>(i);
        for (std::size_t j = 0; j < m; ++j) {
            const double w = plan(i, j);
            if (w == 0.0) continue;
            const double sy = shared ? static_cast<double>(j) : g.index_coordinate(tgt.node(j));
            const double v = sy - sx;
            const double s = (1.0 - t) * sx + t * sy;
            if (v == 0.0 || (s <= 0.0 && v < 0.0) || (s >= top && v > 0.0)) continue;
            const std::size_t k = detail::moving_cell(s, v, n);
            out[k] -= w * v;
            out[k + 1] += w * v;
        }
    }
    return out;
}

struct PathProbe {
    PlanFamily plans;
    std::vector<double> t_samples;
    std::vector<MeasureFamily> measures_at_t;
    std::vector<PotentialFamily> potentials_at_t;
    std::vector<double> energies_at_t;
    std::vector<double> residuals;
    double plan_cost = 0.0;

    std::size_t index_of(double t) const {
        for (std::size_t k = 0; k < t_samples.size(); ++k)
            if (std::abs(t_samples[k] - t) <= 1e-12) return k;
        throw InvariantError("PathProbe: t=" + std::to_string(t) + " is not a probed sample");
    }
};

/// Solves S(mu^t) along the displacement path at each sample, warm-starting
/// from the previous sample.
inline PathProbe probe_path(const CostTensor& cost, const PlanFamily& plans, const std::vector<double>& t_samples,
                            double tol = 1e-10, int max_iter = 100000) {
    if (t_samples.empty()) throw InvariantError("probe_path: no samples");
    for (std::size_t k = 0; k < t_samples.size(); ++k) {
        if (!(t_samples[k] >= 0.0 && t_samples[k] <= 1.0)) throw InvariantError("probe_path: sample outside [0,1]");
        if (k > 0 && !(t_samples[k] > t_samples[k - 1])) throw InvariantError("probe_path: samples must increase");
    }
    PathProbe probe{plans, t_samples, {}, {}, {}, {}, plan_cost(plans)};
    SolveOptions opt;
    opt.tol = tol;
    opt.max_iter = max_iter;
    for (double t : t_samples) {
        auto mu = displacement_path(plans, t);
        auto rep = [&] {
            try {
                return solve(cost, mu, opt);
            } catch (const NonConvergence& e) {
                throw NonConvergence("probe_path: solve failed at t=" + std::to_string(t) + ": " + e.what(),
                                     e.iterations(), e.residual());
            }
        }();
        opt.init = rep.potentials;
        probe.measures_at_t.push_back(std::move(mu));
        probe.potentials_at_t.push_back(rep.potentials);
        probe.energies_at_t.push_back(rep.dual_value);
        probe.residuals.push_back(rep.final_residual);
    }
    return probe;
}

struct RatioSample {
    double t = 0.0;
    double s = 0.0;
    double ratio = 0.0;
};

struct RatioStats {
    std::vector<RatioSample> samples;
    double max = 0.0;
    double median = 0.0;
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// ||phi^t - phi^s||_{C~^k} / (|t - s| sqrt(cost)) over all sample pairs.
inline RatioStats lipschitz_ratio_ck(const PathProbe& probe, int k, double constant_tol = 1e-8) {
    if (probe.t_samples.size() < 2) throw InvariantError("lipschitz_ratio_ck: need at least two samples");
    RatioStats out;
    const double root = std::sqrt(probe.plan_cost);
    std::vector<double> values;
    for (std::size_t a = 0; a < probe.t_samples.size(); ++a) {
        for (std::size_t b = a + 1; b < probe.t_samples.size(); ++b) {
            const double num = quotient_ck_norm(probe.potentials_at_t[b] - probe.potentials_at_t[a], k);
            double ratio = 0.0;
            if (probe.plan_cost > 0.0) {
                ratio = num / ((probe.t_samples[b] - probe.t_samples[a]) * root);
            } else if (num > constant_tol) {
                throw InvariantError("lipschitz_ratio_ck: zero plan cost but potentials vary by " +
                                     std::to_string(num));
            }
            out.samples.push_back({probe.t_samples[a], probe.t_samples[b], ratio});
            values.push_back(ratio);
        }
    }
    out.max = *std::max_element(values.begin(), values.end());
    out.median = median_of(values);
    return out;
}

struct StepSpread {
    std::vector<double> steps;
    std::vector<double> max_ratio;  // per step
    double spread = 0.0;            // (max - min) / min over steps
};

/// Largest ratio among pairs at each separation, and the relative spread.
inline StepSpread ratio_spread_by_step(const RatioStats& stats, const std::vector<double>& steps) {
    StepSpread out{steps, std::vector<double>(steps.size(), 0.0), 0.0};
    std::vector<bool> seen(steps.size(), false);
    for (const auto& r : stats.samples) {
        for (std::size_t k = 0; k < steps.size(); ++k) {
            if (std::abs((r.s - r.t) - steps[k]) <= 1e-9) {
                out.max_ratio[k] = std::max(out.max_ratio[k], r.ratio);
                seen[k] = true;
            }
        }
    }
    for (std::size_t k = 0; k < steps.size(); ++k)
        if (!seen[k]) throw InvariantError("ratio_spread_by_step: no pair at step " + std::to_string(steps[k]));
    const auto [lo, hi] = std::minmax_element(out.max_ratio.begin(), out.max_ratio.end());
    out.spread = *lo > 0.0 ? (*hi - *lo) / *lo : (*hi > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    return out;
}

struct SobolevRatio {
    double ratio = 0.0;
    double numerator = 0.0;    // ||S(mu) - S(nu)||_{C~^k}
    double denominator = 0.0;  // sum_i ||mu_i - nu_i||_{H^-p}
};

inline SobolevRatio lipschitz_ratio_sobolev(const CostTensor& cost, const MeasureFamily& mu, const MeasureFamily& nu,
                                            int k, int p, double tol = 1e-10) {
    SobolevRatio out;
    out.denominator = hneg_family_norm(mu, nu, p);
    SolveOptions opt;
    opt.tol = tol;
    const auto a = solve(cost, mu, opt);
    opt.init = a.potentials;
    const auto b = solve(cost, nu, opt);
    out.numerator = quotient_ck_norm(a.potentials - b.potentials, k);
    if (out.denominator > 0.0) out.ratio = out.numerator / out.denominator;
    return out;
}

// ---------------------------------------------------------------------------
// Linearized Schrodinger operator.

struct LinearizedOperator {
    std::vector<Grid1D> grids;
    std::vector<std::size_t> offsets;  // start of each block, plus the total
    Eigen::MatrixXd matrix;            // Id + L, unpinned
    GridFunctions mu_weights;          // for the mean-pinning rows
    GridFunctions q_marginals;         // marginals of exp(sum phi - c) mu, normalized

    std::size_t total() const { return offsets.back(); }

    Eigen::VectorXd flatten(const GridFunctions& h) const {
        Eigen::VectorXd v(static_cast<Eigen::Index>(total()));
        for (std::size_t i = 0; i < h.size(); ++i)
            for (std::size_t k = 0; k < h[i].size(); ++k) v(static_cast<Eigen::Index>(offsets[i] + k)) = h[i][k];
        return v;
    }

    GridFunctions unflatten(const Eigen::VectorXd& v) const {
        GridFunctions h(grids.size());
        for (std::size_t i = 0; i < grids.size(); ++i) {
            h[i].resize(grids[i].n());
            for (std::size_t k = 0; k < h[i].size(); ++k) h[i][k] = v(static_cast<Eigen::Index>(offsets[i] + k));
        }
        return h;
    }

    GridFunctions apply(const GridFunctions& h) const { return unflatten(matrix * flatten(h)); }

    /// Largest deviation of an off-diagonal block row sum from 1.
    double row_sum_defect() const {
        double d = 0.0;
        const std::size_t N = grids.size();
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j) {
                if (i == j) continue;
                const auto blk = matrix.block(static_cast<Eigen::Index>(offsets[i]), static_cast<Eigen::Index>(offsets[j]),
                                              static_cast<Eigen::Index>(grids[i].n()),
                                              static_cast<Eigen::Index>(grids[j].n()));
                for (Eigen::Index r = 0; r < blk.rows(); ++r) d = std::max(d, std::abs(blk.row(r).sum() - 1.0));
            }
        return d;
    }
};

/// Id + L with L_i(h)(x_i) = conditional expectation of sum_{j != i} h_j given x_i
/// under exp(sum phi - c) mu.
inline LinearizedOperator assemble_linearization(const PotentialFamily& phi, const MeasureFamily& mu,
                                                 const CostTensor& cost) {
    detail::check_shapes(phi, mu, cost);
    const std::size_t N = phi.size();
    LinearizedOperator op;
    op.grids = cost.grids();
    op.offsets.push_back(0);
    for (const auto& g : op.grids) op.offsets.push_back(op.offsets.back() + g.n());
    if (op.total() > kMaxLinearizationNodes) {
        throw CapacityError("assemble_linearization: " + std::to_string(op.total()) + " nodes exceed the dense limit of " +
                            std::to_string(kMaxLinearizationNodes));
    }
    const auto T = static_cast<Eigen::Index>(op.total());
    op.matrix = Eigen::MatrixXd::Identity(T, T);
    const auto a = detail::log_weights(phi.members(), mu);
    const auto c = cost.values();
    for (std::size_t i = 0; i < N; ++i) {
        std::vector<double> tbar;
        detail::contract_lse(cost, a, i, tbar);
        detail::for_each_cell(cost, [&](std::size_t flat, const auto& idx) {
            double e = -c[flat] - tbar[idx[i]];
            for (std::size_t j = 0; j < N; ++j)
                if (j != i) e += a[j][idx[j]];
            if (e == -std::numeric_limits<double>::infinity()) return;
            const double w = std::exp(e);
            const auto row = static_cast<Eigen::Index>(op.offsets[i] + idx[i]);
            for (std::size_t j = 0; j < N; ++j)
                if (j != i) op.matrix(row, static_cast<Eigen::Index>(op.offsets[j] + idx[j])) += w;
        });
        // Q_i proportional to mu_i exp(phi_i + Tbar_i).
        LogSumExp z;
        for (std::size_t k = 0; k < tbar.size(); ++k) z.add(a[i][k] + tbar[k]);
        std::vector<double> q(tbar.size());
        for (std::size_t k = 0; k < q.size(); ++k) q[k] = std::exp(a[i][k] + tbar[k] - z.value());
        op.q_marginals.push_back(std::move(q));
        op.mu_weights.emplace_back(mu[i].weights().begin(), mu[i].weights().end());
    }
    return op;
}

struct KernelReport {
    std::vector<double> singular_values;  // ascending
    std::size_t kernel_dim = 0;
    double margin = 0.0;               // smallest singular value above the threshold
    double max_principal_angle = 0.0;  // between the numerical kernel and the gauge directions
};

/// Numerical kernel of the unpinned operator and its angle to {(k_1, ..., k_N) constants, sum k = 0}.
inline KernelReport kernel_structure(const LinearizedOperator& op, double threshold = 1e-8) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(op.matrix, Eigen::ComputeFullV);
    const Eigen::VectorXd& s = svd.singularValues();  // descending
    KernelReport out;
    const auto T = s.size();
    for (Eigen::Index k = T; k-- > 0;) out.singular_values.push_back(s(k));
    for (double v : out.singular_values) {
        if (v < threshold) {
            ++out.kernel_dim;
        } else {
            out.margin = v;
            break;
        }
    }
    const std::size_t N = op.grids.size();
    if (out.kernel_dim == 0) {
        out.max_principal_angle = std::numbers::pi / 2;
        return out;
    }
    const Eigen::MatrixXd K = svd.matrixV().rightCols(static_cast<Eigen::Index>(out.kernel_dim));
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(T, static_cast<Eigen::Index>(N - 1));
    for (std::size_t g = 0; g + 1 < N; ++g) {
        for (std::size_t k = 0; k < op.grids[g].n(); ++k)
            G(static_cast<Eigen::Index>(op.offsets[g] + k), static_cast<Eigen::Index>(g)) = 1.0;
        for (std::size_t k = 0; k < op.grids[N - 1].n(); ++k)
            G(static_cast<Eigen::Index>(op.offsets[N - 1] + k), static_cast<Eigen::Index>(g)) = -1.0;
    }
    const Eigen::MatrixXd Qg = Eigen::HouseholderQR<Eigen::MatrixXd>(G).householderQ() *
                               Eigen::MatrixXd::Identity(T, static_cast<Eigen::Index>(N - 1));
    // Largest principal angle: sin = ||(I - P_gauge) K||_2, compared in both directions.
    const Eigen::MatrixXd resid_k = K - Qg * (Qg.transpose() * K);
    const Eigen::MatrixXd resid_g = Qg - K * (K.transpose() * Qg);
    const double s1 = Eigen::JacobiSVD<Eigen::MatrixXd>(resid_k).singularValues()(0);
    const double s2 = Eigen::JacobiSVD<Eigen::MatrixXd>(resid_g).singularValues()(0);
    out.max_principal_angle = std::asin(std::min(1.0, std::max(s1, s2)));
    return out;
}

struct PinnedSolution {
    GridFunctions h;
    double residual = 0.0;  // ||(Id + L) h - projected rhs||_inf
    double rhs_projection = 0.0;  // size of the constant shift removed from the rhs
};

/// Solves (Id + L) h = r with equal mu-means of the h_i. The rhs is first
/// shifted by per-block constants to have equal Q_i-means (the range condition).
inline PinnedSolution solve_pinned(const LinearizedOperator& op, GridFunctions rhs) {
    const std::size_t N = op.grids.size();
    std::vector<double> m(N, 0.0);
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t k = 0; k < rhs[i].size(); ++k) m[i] += op.q_marginals[i][k] * rhs[i][k];
        mean += m[i] / static_cast<double>(N);
    }
    PinnedSolution out;
    for (std::size_t i = 0; i < N; ++i) {
        out.rhs_projection = std::max(out.rhs_projection, std::abs(m[i] - mean));
        for (double& v : rhs[i]) v -= m[i] - mean;
    }
    const auto T = static_cast<Eigen::Index>(op.total());
    Eigen::MatrixXd A(T + static_cast<Eigen::Index>(N - 1), T);
    A.topRows(T) = op.matrix;
    A.bottomRows(static_cast<Eigen::Index>(N - 1)).setZero();
    for (std::size_t i = 0; i + 1 < N; ++i) {
        const auto row = T + static_cast<Eigen::Index>(i);
        for (std::size_t k = 0; k < op.grids[i].n(); ++k)
            A(row, static_cast<Eigen::Index>(op.offsets[i] + k)) = op.mu_weights[i][k];
        for (std::size_t k = 0; k < op.grids[i + 1].n(); ++k)
            A(row, static_cast<Eigen::Index>(op.offsets[i + 1] + k)) = -op.mu_weights[i + 1][k];
    }
    Eigen::VectorXd b = Eigen::VectorXd::Zero(A.rows());
    b.head(T) = op.flatten(rhs);
    const Eigen::VectorXd x = A.colPivHouseholderQr().solve(b);
    out.residual = (op.matrix * x - b.head(T)).lpNorm<Eigen::Infinity>();
    out.h = op.unflatten(x);
    return out;
}

// ---------------------------------------------------------------------------
// Time derivatives along displacement paths.

/// d/dt T_i(phi, mu^t) at fixed phi, for the binned path mu^t of `plans`.
inline GridFunctions dtG(const PotentialFamily& phi, const PlanFamily& plans, double t, const CostTensor& cost) {
    const auto mu = displacement_path(plans, t);
    detail::check_shapes(phi, mu, cost);
    const std::size_t N = phi.size();
    GridFunctions rate(N);
    for (std::size_t j = 0; j < N; ++j) rate[j] = displacement_rate(plans[j], t);
    const auto a = detail::log_weights(phi.members(), mu);
    const auto c = cost.values();
    GridFunctions out(N);
    for (std::size_t i = 0; i < N; ++i) {
        std::vector<double> tbar;
        detail::contract_lse(cost, a, i, tbar);
        out[i].assign(tbar.size(), 0.0);
        detail::for_each_cell(cost, [&](std::size_t flat, const auto& idx) {
            // Product rule over the moving marginals j != i.
            double d = 0.0;
            for (std::size_t j = 0; j < N; ++j) {
                if (j == i || rate[j][idx[j]] == 0.0) continue;
                double term = rate[j][idx[j]];
                for (std::size_t l = 0; l < N; ++l)
                    if (l != i && l != j) term *= mu[l].weight(idx[l]);
                d += term;
            }
            if (d == 0.0) return;
            double e = -c[flat] - tbar[idx[i]];
            for (std::size_t j = 0; j < N; ++j)
                if (j != i) e += phi[j][idx[j]];
            out[i][idx[i]] += d * std::exp(e);
        });
    }
    return out;
}

/// D_t phi^t = -(Id + L)^{-1} D_t G, represented with equal mu^t-means.
inline PotentialFamily potential_time_derivative(const PathProbe& probe, double t, const CostTensor& cost) {
    const std::size_t k = probe.index_of(t);
    const auto& phi = probe.potentials_at_t[k];
    const auto op = assemble_linearization(phi, probe.measures_at_t[k], cost);
    auto r = dtG(phi, probe.plans, probe.t_samples[k], cost);
    for (auto& f : r)
        for (double& v : f) v = -v;
    return PotentialFamily(phi.grids(), solve_pinned(op, std::move(r)).h);
}

/// (S(mu^{t+h}) - S(mu^{t-h})) / 2h.
inline PotentialFamily potential_time_derivative_fd(const CostTensor& cost, const PlanFamily& plans, double t, double h,
                                                    double tol = 1e-10) {
    const auto probe = probe_path(cost, plans, {t - h, t + h}, tol);
    return (probe.potentials_at_t[1] - probe.potentials_at_t[0]).scaled(1.0 / (2.0 * h));
}

/// dE(mu^t)/dt = sum_i sum_k phi_i[k] d mu_i^t[k] / dt at Schrodinger potentials phi.
inline double energy_derivative(const PotentialFamily& phi, const PlanFamily& plans, double t) {
    if (phi.size() != plans.size()) throw DomainMismatch("energy_derivative: marginal counts differ");
    double s = 0.0;
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const auto r = displacement_rate(plans[i], t);
        for (std::size_t k = 0; k < r.size(); ++k) s += r[k] * phi[i][k];
    }
    return s;
}

inline double energy_derivative(const PathProbe& probe, double t) {
    const std::size_t k = probe.index_of(t);
    return energy_derivative(probe.potentials_at_t[k], probe.plans, probe.t_samples[k]);
}

/// (E(mu^{t+h}) - E(mu^{t-h})) / 2h.
inline double energy_derivative_fd(const CostTensor& cost, const PlanFamily& plans, double t, double h,
                                   double tol = 1e-10) {
    const auto probe = probe_path(cost, plans, {t - h, t + h}, tol);
    return (probe.energies_at_t[1] - probe.energies_at_t[0]) / (2.0 * h);
}

struct SemiconvexityReport {
    double modulus = 0.0;
    std::vector<double> derivatives;  // dE/dt at each sample
    /// max over samples of E(t) - chord(t) - C cost t(1-t)/2, and the same for -E.
    double worst_upper = 0.0;
    double worst_lower = 0.0;
    bool chords_hold = true;
};

/// max |E'(t) - E'(s)| / (|t - s| cost) over sample pairs, plus both chord inequalities
/// with the measured modulus.
inline SemiconvexityReport semiconvexity_modulus(const PathProbe& probe, double slack = 1e-10) {
    const std::size_t S = probe.t_samples.size();
    if (S < 3) throw InvariantError("semiconvexity_modulus: need at least three samples");
    SemiconvexityReport out;
    for (std::size_t k = 0; k < S; ++k) out.derivatives.push_back(energy_derivative(probe, probe.t_samples[k]));
    if (probe.plan_cost > 0.0) {
        for (std::size_t a = 0; a < S; ++a)
            for (std::size_t b = a + 1; b < S; ++b)
                out.modulus = std::max(out.modulus, std::abs(out.derivatives[b] - out.derivatives[a]) /
                                                        ((probe.t_samples[b] - probe.t_samples[a]) * probe.plan_cost));
    }
    const double t0 = probe.t_samples.front(), t1 = probe.t_samples.back();
    const double e0 = probe.energies_at_t.front(), e1 = probe.energies_at_t.back();
    out.worst_upper = out.worst_lower = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < S; ++k) {
        const double u = (probe.t_samples[k] - t0) / (t1 - t0);
        const double chord = (1.0 - u) * e0 + u * e1;
        // Path restricted to [t0, t1] has cost (t1 - t0)^2 cost.
        const double bend = out.modulus * probe.plan_cost * (t1 - t0) * (t1 - t0) * u * (1.0 - u) / 2.0;
        out.worst_upper = std::max(out.worst_upper, probe.energies_at_t[k] - chord - bend);
        out.worst_lower = std::max(out.worst_lower, chord - probe.energies_at_t[k] - bend);
    }
    out.chords_hold = out.worst_upper <= slack && out.worst_lower <= slack;
    return out;
}

struct GradientCheckSample {
    double s = 0.0;
    double residual = 0.0;  // |E(mu^s) - E(mu^0) - s E'(0)|
    double w2_squared = 0.0;
    double ratio = 0.0;
};

struct GradientCheck {
    std::vector<GradientCheckSample> samples;
    double spread = 0.0;  // (max - min) / min of the ratios
    double first_order = 0.0;
};

/// First-order expansion of E along optimal displacement from mu0 toward mu1.
inline GradientCheck wasserstein_gradient_check(const CostTensor& cost, const MeasureFamily& mu0, const MeasureFamily& mu1,
                                                double tol = 1e-10, std::vector<double> s_values = {0.2, 0.1, 0.05}) {
    if (mu0.size() != mu1.size()) throw DomainMismatch("wasserstein_gradient_check: family sizes differ");
    std::vector<TransportPlan> p;
    for (std::size_t i = 0; i < mu0.size(); ++i) p.push_back(optimal_plan_1d(mu0[i], mu1[i]));
    const PlanFamily plans(std::move(p));
    std::sort(s_values.begin(), s_values.end());
    std::vector<double> samples{0.0};
    samples.insert(samples.end(), s_values.begin(), s_values.end());
    const auto probe = probe_path(cost, plans, samples, tol);
    GradientCheck out;
    // sum_i int (y - x) phi_i'(x) d gamma_i with nodal central-difference gradients.
    for (std::size_t i = 0; i < plans.size(); ++i) {
        const auto& phi = probe.potentials_at_t[0][i];
        const auto& g = plans[i].source_grid();
        const auto grad = fd_derivative(phi, g, 1);
        for (std::size_t a = 0; a < g.n(); ++a)
            for (std::size_t b = 0; b < plans[i].target_grid().n(); ++b) {
                const double w = plans[i](a, b);
                if (w != 0.0) out.first_order += w * (plans[i].target_grid().node(b) - g.node(a)) * grad[a];
            }
    }
    std::vector<double> ratios;
    for (std::size_t k = 1; k < samples.size(); ++k) {
        GradientCheckSample g;
        g.s = samples[k];
        g.residual = std::abs(probe.energies_at_t[k] - probe.energies_at_t[0] - g.s * out.first_order);
        const double w = product_wasserstein(probe.measures_at_t[0], probe.measures_at_t[k]);
        g.w2_squared = w * w;
        g.ratio = g.w2_squared > 0.0 ? g.residual / g.w2_squared : 0.0;
        ratios.push_back(g.ratio);
        out.samples.push_back(g);
    }
    const auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
    out.spread = *lo > 0.0 ? (*hi - *lo) / *lo : (*hi > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    return out;
}

}  // namespace eotstab
