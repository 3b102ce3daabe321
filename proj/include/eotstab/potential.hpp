#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eotstab/cost.hpp"
#include "eotstab/errors.hpp"
#include "eotstab/logsumexp.hpp"
#include "eotstab/measure.hpp"

namespace eotstab {

using GridFunctions = std::vector<std::vector<double>>;

enum class Gauge { unspecified, canonical };

inline const char* gauge_name(Gauge g) { return g == Gauge::canonical ? "canonical" : "unspecified"; }

/// N grid functions, one per marginal grid, representing a class modulo
/// constants (kappa_1, ..., kappa_N) with sum kappa_i = 0.
class PotentialFamily {
public:
    PotentialFamily(std::vector<Grid1D> grids, GridFunctions members, Gauge gauge = Gauge::unspecified)
        : grids_(std::move(grids)), members_(std::move(members)), gauge_(gauge) {
        if (grids_.size() != members_.size()) throw InvariantError("PotentialFamily: one function per grid");
        if (grids_.size() < 2) throw InvariantError("PotentialFamily: need at least two components");
        for (std::size_t i = 0; i < grids_.size(); ++i) {
            if (members_[i].size() != grids_[i].n()) throw InvariantError("PotentialFamily: component length");
            for (double v : members_[i])
                if (!std::isfinite(v)) throw InvariantError("PotentialFamily: non-finite value");
        }
    }

    static PotentialFamily zeros(const std::vector<Grid1D>& grids) {
        GridFunctions m;
        for (const auto& g : grids) m.emplace_back(g.n(), 0.0);
        return PotentialFamily(grids, std::move(m), Gauge::unspecified);
    }

    std::size_t size() const noexcept { return members_.size(); }
    const std::vector<Grid1D>& grids() const noexcept { return grids_; }
    const GridFunctions& members() const noexcept { return members_; }
    const std::vector<double>& operator[](std::size_t i) const noexcept { return members_[i]; }
    Gauge gauge() const noexcept { return gauge_; }

    /// Adds constants kappa_i to each component (a gauge move when they sum to 0).
    PotentialFamily shifted(std::span<const double> kappa) const {
        GridFunctions m = members_;
        for (std::size_t i = 0; i < m.size(); ++i)
            for (double& v : m[i]) v += kappa[i];
        return PotentialFamily(grids_, std::move(m), Gauge::unspecified);
    }

    friend PotentialFamily operator-(const PotentialFamily& a, const PotentialFamily& b) {
        check_same_shape(a, b);
        GridFunctions m = a.members_;
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = 0; j < m[i].size(); ++j) m[i][j] -= b.members_[i][j];
        return PotentialFamily(a.grids_, std::move(m), Gauge::unspecified);
    }

    friend PotentialFamily operator+(const PotentialFamily& a, const PotentialFamily& b) {
        check_same_shape(a, b);
        GridFunctions m = a.members_;
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = 0; j < m[i].size(); ++j) m[i][j] += b.members_[i][j];
        return PotentialFamily(a.grids_, std::move(m), Gauge::unspecified);
    }

    PotentialFamily scaled(double s) const {
        GridFunctions m = members_;
        for (auto& f : m)
            for (double& v : f) v *= s;
        return PotentialFamily(grids_, std::move(m), Gauge::unspecified);
    }

private:
    static void check_same_shape(const PotentialFamily& a, const PotentialFamily& b) {
        if (a.size() != b.size()) throw DomainMismatch("PotentialFamily: component count differs");
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!(a.grids_[i] == b.grids_[i])) throw DomainMismatch("PotentialFamily: grids differ");
    }

    std::vector<Grid1D> grids_;
    GridFunctions members_;
    Gauge gauge_;
};

namespace detail {

inline void check_shapes(const PotentialFamily& phi, const MeasureFamily& mu, const CostTensor& cost) {
    if (phi.size() != mu.size() || mu.size() != cost.order()) {
        throw DomainMismatch("potential/measure/cost marginal counts differ");
    }
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (!(phi.grids()[i] == mu[i].grid()) || !(mu[i].grid() == cost.grid(i))) {
            throw DomainMismatch("potential/measure/cost grids differ for marginal " + std::to_string(i));
        }
    }
}

inline void check_shapes(const PotentialFamily& phi, const MeasureFamily& mu) {
    if (phi.size() != mu.size()) throw DomainMismatch("potential/measure marginal counts differ");
    for (std::size_t i = 0; i < mu.size(); ++i)
        if (!(phi.grids()[i] == mu[i].grid())) throw DomainMismatch("potential/measure grids differ");
}

/// log-weights a_j = phi_j + log mu_j (-inf on zero-mass cells).
inline GridFunctions log_weights(const GridFunctions& phi, const MeasureFamily& mu) {
    GridFunctions a(phi.size());
    for (std::size_t j = 0; j < phi.size(); ++j) {
        a[j].resize(phi[j].size());
        for (std::size_t k = 0; k < phi[j].size(); ++k) a[j][k] = phi[j][k] + safe_log(mu[j].weight(k));
    }
    return a;
}

inline void log_weights_into(std::vector<double>& a, const std::vector<double>& phi, const DiscreteMeasure& mu) {
    a.resize(phi.size());
    for (std::size_t k = 0; k < phi.size(); ++k) a[k] = phi[k] + safe_log(mu.weight(k));
}

/// out[x_i] = log sum_{x_{-i}} exp(sum_{j != i} a_j[x_j] - c(x)).
///
/// Uses the precomputed kernel exp(min c - c) with per-marginal max
/// subtraction when available, and a two-pass log-domain reduction otherwise.
inline void contract_lse(const CostTensor& cost, const GridFunctions& a, std::size_t i, std::vector<double>& out) {
    const std::size_t N = cost.order();
    const auto& strides = cost.strides();
    std::array<std::size_t, kMaxMarginals> n{};
    for (std::size_t j = 0; j < N; ++j) n[j] = cost.grid(j).n();
    out.assign(n[i], 0.0);
    constexpr double ninf = -std::numeric_limits<double>::infinity();

    if (cost.has_gibbs()) {
        const auto K = cost.gibbs();
        std::array<std::vector<double>, kMaxMarginals> w;
        double shift = -cost.min_value();
        for (std::size_t j = 0; j < N; ++j) {
            if (j == i) continue;
            const double m = *std::max_element(a[j].begin(), a[j].end());
            shift += m;
            w[j].resize(n[j]);
            for (std::size_t k = 0; k < n[j]; ++k) w[j][k] = a[j][k] == ninf ? 0.0 : std::exp(a[j][k] - m);
        }
        if (N == 2) {
            const std::size_t o = 1 - i;
            for (std::size_t x = 0; x < n[i]; ++x) {
                double s = 0.0;
                for (std::size_t y = 0; y < n[o]; ++y) s += K[x * strides[i] + y * strides[o]] * w[o][y];
                out[x] = std::log(s) + shift;
            }
        } else {
            const std::size_t o1 = i == 0 ? 1 : 0;
            const std::size_t o2 = i == 2 ? 1 : 2;
            for (std::size_t x = 0; x < n[i]; ++x) {
                double s = 0.0;
                for (std::size_t y = 0; y < n[o1]; ++y) {
                    if (w[o1][y] == 0.0) continue;
                    double inner = 0.0;
                    const std::size_t base = x * strides[i] + y * strides[o1];
                    for (std::size_t z = 0; z < n[o2]; ++z) inner += K[base + z * strides[o2]] * w[o2][z];
                    s += w[o1][y] * inner;
                }
                out[x] = std::log(s) + shift;
            }
        }
        return;
    }

    const auto c = cost.values();
    if (N == 2) {
        const std::size_t o = 1 - i;
        for (std::size_t x = 0; x < n[i]; ++x) {
            double m = ninf;
            for (std::size_t y = 0; y < n[o]; ++y) {
                if (a[o][y] == ninf) continue;
                m = std::max(m, a[o][y] - c[x * strides[i] + y * strides[o]]);
            }
            double s = 0.0;
            for (std::size_t y = 0; y < n[o]; ++y) {
                if (a[o][y] == ninf) continue;
                s += std::exp(a[o][y] - c[x * strides[i] + y * strides[o]] - m);
            }
            out[x] = m + std::log(s);
        }
    } else {
        const std::size_t o1 = i == 0 ? 1 : 0;
        const std::size_t o2 = i == 2 ? 1 : 2;
        for (std::size_t x = 0; x < n[i]; ++x) {
            double m = ninf;
            for (std::size_t y = 0; y < n[o1]; ++y) {
                if (a[o1][y] == ninf) continue;
                for (std::size_t z = 0; z < n[o2]; ++z) {
                    if (a[o2][z] == ninf) continue;
                    m = std::max(m, a[o1][y] + a[o2][z] - c[x * strides[i] + y * strides[o1] + z * strides[o2]]);
                }
            }
            double s = 0.0;
            for (std::size_t y = 0; y < n[o1]; ++y) {
                if (a[o1][y] == ninf) continue;
                for (std::size_t z = 0; z < n[o2]; ++z) {
                    if (a[o2][z] == ninf) continue;
                    s += std::exp(a[o1][y] + a[o2][z] - c[x * strides[i] + y * strides[o1] + z * strides[o2]] - m);
                }
            }
            out[x] = m + std::log(s);
        }
    }
}

/// Calls f(flat, idx) for every cell of the product grid, last index fastest.
template <class F>
void for_each_cell(const CostTensor& cost, F&& f) {
    const std::size_t N = cost.order();
    std::array<std::size_t, kMaxMarginals> idx{};
    for (std::size_t flat = 0; flat < cost.size(); ++flat) {
        f(flat, idx);
        for (std::size_t a = N; a-- > 0;) {
            if (++idx[a] < cost.grid(a).n()) break;
            idx[a] = 0;
        }
    }
}

/// Piecewise-constant minimization of sum_i max(D_i, r_i + |kappa_i - c_i|)
/// subject to sum kappa_i = 0 (closed form, exact).
struct GaugeProblem {
    std::vector<double> center;     // (max + min) / 2 of each component
    std::vector<double> radius;     // (max - min) / 2
    std::vector<double> flat_part;  // sup of derivative orders >= 1

    std::pair<double, std::vector<double>> solve() const {
        const std::size_t N = center.size();
        double base = 0.0, lo = 0.0, hi = 0.0;
        std::vector<double> slack(N);
        for (std::size_t i = 0; i < N; ++i) {
            base += std::max(flat_part[i], radius[i]);
            slack[i] = std::max(0.0, flat_part[i] - radius[i]);
            lo += center[i] - slack[i];
            hi += center[i] + slack[i];
        }
        // Feasible kappa: start at the flat-region point nearest to sum = 0.
        std::vector<double> kappa(N);
        double excess = 0.0;
        if (0.0 < lo) {
            excess = lo;
            for (std::size_t i = 0; i < N; ++i) kappa[i] = center[i] - slack[i];
        } else if (0.0 > hi) {
            excess = -hi;
            for (std::size_t i = 0; i < N; ++i) kappa[i] = center[i] + slack[i];
        } else {
            // Interpolate inside the flat box so that the constraint holds.
            const double width = hi - lo;
            const double frac = width > 0.0 ? (0.0 - lo) / width : 0.0;
            for (std::size_t i = 0; i < N; ++i) kappa[i] = center[i] - slack[i] + 2.0 * slack[i] * frac;
        }
        const double s = std::accumulate(kappa.begin(), kappa.end(), 0.0);
        kappa[0] -= s;  // absorb any imbalance in the first component
        return {base + excess, kappa};
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Schrodinger operator.

/// Tbar_i(phi, mu)(x_i) = log integral of exp(sum_{j != i} phi_j - c) d mu_{-i};
/// defined at every node, including zero-mass ones.
inline PotentialFamily apply_Tbar(const PotentialFamily& phi, const MeasureFamily& mu, const CostTensor& cost) {
    detail::check_shapes(phi, mu, cost);
    const auto a = detail::log_weights(phi.members(), mu);
    GridFunctions out(phi.size());
    for (std::size_t i = 0; i < phi.size(); ++i) detail::contract_lse(cost, a, i, out[i]);
    return PotentialFamily(phi.grids(), std::move(out));
}

/// T_i = phi_i + Tbar_i. Gauge invariant; zero exactly at Schrodinger potentials.
inline PotentialFamily apply_T(const PotentialFamily& phi, const MeasureFamily& mu, const CostTensor& cost) {
    return apply_Tbar(phi, mu, cost) + phi;
}

/// log integral of exp(sum phi - c) d mu over the full product.
inline double log_partition(const PotentialFamily& phi, const MeasureFamily& mu, const CostTensor& cost) {
    detail::check_shapes(phi, mu, cost);
    const auto a = detail::log_weights(phi.members(), mu);
    std::vector<double> t0;
    detail::contract_lse(cost, a, 0, t0);
    LogSumExp acc;
    for (std::size_t k = 0; k < t0.size(); ++k) acc.add(a[0][k] + t0[k]);
    return acc.value();
}

// ---------------------------------------------------------------------------
// Quotient norms and gauge.

/// inf over kappa (sum kappa_i = 0) of sum_i ||phi_i - kappa_i||_{C^k}, with
/// the finite-difference C^k surrogate of ck_norm_estimate.
inline double quotient_ck_norm(const PotentialFamily& phi, int k, std::vector<double>* kappa_out = nullptr) {
    detail::GaugeProblem prob;
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const auto& g = phi.grids()[i];
        const auto [mn, mx] = refined_extrema(fd_derivative(phi[i], g, 0));
        double flat = 0.0;
        for (int j = 1; j <= k; ++j) flat = std::max(flat, derivative_sup_estimate(phi[i], g, j));
        prob.center.push_back(0.5 * (mx + mn));
        prob.radius.push_back(0.5 * (mx - mn));
        prob.flat_part.push_back(flat);
    }
    auto [value, kappa] = prob.solve();
    if (kappa_out) *kappa_out = std::move(kappa);
    return value;
}

/// inf over the gauge of sum_i max_j |f_i[j] - kappa_i|, using node values
/// only (no extrapolation). Used as the Sinkhorn stopping residual.
inline double quotient_sup_norm_nodes(const GridFunctions& f) {
    double spread = 0.0, centers = 0.0;
    for (const auto& fi : f) {
        const auto [mn, mx] = std::minmax_element(fi.begin(), fi.end());
        spread += 0.5 * (*mx - *mn);
        centers += 0.5 * (*mx + *mn);
    }
    return spread + std::abs(centers);
}

/// Measure argument kept for interface symmetry with the L2 norm; the C^k
/// quotient norm does not depend on the marginals.
inline double quotient_ck_norm(const PotentialFamily& phi, int k, const MeasureFamily& mu) {
    detail::check_shapes(phi, mu);
    return quotient_ck_norm(phi, k);
}

struct QuotientL2 {
    double norm;
    PotentialFamily representative;  // equal mu-means
};

/// Closed form sqrt(sum_i Var_{mu_i}(h_i) + (sum_i int h_i dmu_i)^2 / N).
inline QuotientL2 quotient_l2_norm(const PotentialFamily& h, const MeasureFamily& mu) {
    detail::check_shapes(h, mu);
    const std::size_t N = h.size();
    std::vector<double> means(N);
    double var = 0.0, total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        means[i] = mu[i].integrate(h[i]);
        total += means[i];
        for (std::size_t k = 0; k < h[i].size(); ++k) {
            const double d = h[i][k] - means[i];
            var += mu[i].weight(k) * d * d;
        }
    }
    std::vector<double> kappa(N);
    for (std::size_t i = 0; i < N; ++i) kappa[i] = total / static_cast<double>(N) - means[i];
    const double sq = var + total * total / static_cast<double>(N);
    auto rep = h.shifted(kappa);
    return {std::sqrt(std::max(sq, 0.0)), PotentialFamily(rep.grids(), rep.members(), Gauge::canonical)};
}

/// Representative with equal mu-weighted means.
inline PotentialFamily canonical_gauge(const PotentialFamily& phi, const MeasureFamily& mu) {
    detail::check_shapes(phi, mu);
    const std::size_t N = phi.size();
    std::vector<double> means(N);
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        means[i] = mu[i].integrate(phi[i]);
        total += means[i];
    }
    const double common = total / static_cast<double>(N);
    GridFunctions m = phi.members();
    for (std::size_t i = 0; i < N; ++i) {
        const double kappa = common - means[i];
        for (double& v : m[i]) v += kappa;
    }
    return PotentialFamily(phi.grids(), std::move(m), Gauge::canonical);
}

/// ||h_1 (+) ... (+) h_N||^2 in L^2(mu_1 x ... x mu_N) by product-grid quadrature.
inline double direct_sum_l2_squared(const PotentialFamily& h, const MeasureFamily& mu, const CostTensor& shape) {
    detail::check_shapes(h, mu, shape);
    const std::size_t N = h.size();
    double s = 0.0;
    detail::for_each_cell(shape, [&](std::size_t, const auto& idx) {
        double w = 1.0, v = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            w *= mu[j].weight(idx[j]);
            v += h[j][idx[j]];
        }
        s += w * v * v;
    });
    return s;
}

// ---------------------------------------------------------------------------
// Density fields.

struct DensityFields {
    std::vector<double> q;                    // density of Q w.r.t. mu on the product grid
    GridFunctions q_i;                        // density of Q_i w.r.t. mu_i
    std::vector<std::vector<double>> q_minus; // q_minus[i](x) = q_{-i}(x_{-i} | x_i)
    double log_z;                             // log integral of exp(sum phi - c) d mu
    double bound_exponent;                    // 2 (N ||phi||_{C~0} + ||c||_{C0})
};

inline DensityFields density_fields(const PotentialFamily& phi, const MeasureFamily& mu, const CostTensor& cost) {
    detail::check_shapes(phi, mu, cost);
    const std::size_t N = phi.size();
    const auto a = detail::log_weights(phi.members(), mu);
    GridFunctions tbar(N);
    for (std::size_t i = 0; i < N; ++i) detail::contract_lse(cost, a, i, tbar[i]);
    LogSumExp acc;
    for (std::size_t k = 0; k < tbar[0].size(); ++k) acc.add(a[0][k] + tbar[0][k]);
    DensityFields out;
    out.log_z = acc.value();
    out.q.resize(cost.size());
    out.q_minus.assign(N, std::vector<double>(cost.size()));
    out.q_i.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
        out.q_i[i].resize(phi[i].size());
        for (std::size_t k = 0; k < phi[i].size(); ++k) out.q_i[i][k] = std::exp(phi[i][k] + tbar[i][k] - out.log_z);
    }
    const auto c = cost.values();
    detail::for_each_cell(cost, [&](std::size_t flat, const auto& idx) {
        double s = 0.0;
        for (std::size_t j = 0; j < N; ++j) s += phi[j][idx[j]];
        const double e = s - c[flat];
        out.q[flat] = std::exp(e - out.log_z);
        for (std::size_t i = 0; i < N; ++i) out.q_minus[i][flat] = std::exp(e - phi[i][idx[i]] - tbar[i][idx[i]]);
    });
    out.bound_exponent = 2.0 * (static_cast<double>(N) * quotient_ck_norm(phi, 0) + cost.sup_norm());
    return out;
}

struct DensityBoundReport {
    std::size_t checked = 0;
    std::size_t violations = 0;
    double worst_log_ratio = 0.0;  // max |log q| / bound_exponent over all fields
};

/// Counts entries of q, q_i and q_{-i} outside exp(+-bound_exponent).
inline DensityBoundReport check_density_bounds(const DensityFields& f) {
    DensityBoundReport r;
    const double b = f.bound_exponent;
    auto visit = [&](double v) {
        ++r.checked;
        const double l = std::abs(std::log(v));
        if (!(v > 0.0) || l > b + 1e-12) ++r.violations;
        if (b > 0.0) r.worst_log_ratio = std::max(r.worst_log_ratio, l / b);
    };
    for (double v : f.q) visit(v);
    for (const auto& qi : f.q_i)
        for (double v : qi) visit(v);
    for (const auto& qm : f.q_minus)
        for (double v : qm) visit(v);
    return r;
}

}  // namespace eotstab
