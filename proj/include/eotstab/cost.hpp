#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "eotstab/errors.hpp"
#include "eotstab/logsumexp.hpp"
#include "eotstab/measure.hpp"

namespace eotstab {

inline constexpr std::size_t kMaxMarginals = 3;
inline constexpr int kMaxDerivativeOrder = 3;

// ---------------------------------------------------------------------------
// Cost descriptors. Each is a callable on a point x in R^N.

struct ZeroCost {
    double operator()(std::span<const double>) const noexcept { return 0.0; }
};

/// sum_{i<j} a_ij |x_i - x_j|^2 with nonnegative a_ij (upper triangle used).
struct QuadraticCost {
    std::vector<std::vector<double>> weights;

    static QuadraticCost pairwise(std::size_t n_marginals, double a = 1.0) {
        QuadraticCost q;
        q.weights.assign(n_marginals, std::vector<double>(n_marginals, 0.0));
        for (std::size_t i = 0; i < n_marginals; ++i)
            for (std::size_t j = i + 1; j < n_marginals; ++j) q.weights[i][j] = a;
        return q;
    }

    double a(std::size_t i, std::size_t j) const noexcept {
        return i < j ? weights[i][j] : weights[j][i];
    }

    double operator()(std::span<const double> x) const noexcept {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = i + 1; j < x.size(); ++j) {
                const double d = x[i] - x[j];
                s += weights[i][j] * d * d;
            }
        return s;
    }
};

/// One-dimensional term a cos(omega x + theta) + b x + q x^2 + constant.
struct SeparableTerm {
    double a = 0.0;
    double omega = 0.0;
    double theta = 0.0;
    double b = 0.0;
    double q = 0.0;
    double constant = 0.0;

    double derivative(double x, int order) const noexcept {
        const double arg = omega * x + theta;
        switch (order) {
            case 0: return a * std::cos(arg) + b * x + q * x * x + constant;
            case 1: return -a * omega * std::sin(arg) + b + 2.0 * q * x;
            case 2: return -a * omega * omega * std::cos(arg) + 2.0 * q;
            case 3: return a * omega * omega * omega * std::sin(arg);
            default: {
                // Higher orders: only the trigonometric part survives.
                const double w = std::pow(omega, order);
                switch (order % 4) {
                    case 0: return a * w * std::cos(arg);
                    case 1: return -a * w * std::sin(arg);
                    case 2: return -a * w * std::cos(arg);
                    default: return a * w * std::sin(arg);
                }
            }
        }
    }
    double operator()(double x) const noexcept { return derivative(x, 0); }
};

/// sum_i f_i(x_i).
struct SeparableCost {
    std::vector<SeparableTerm> terms;
    double operator()(std::span<const double> x) const noexcept {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += terms[i](x[i]);
        return s;
    }
};

/// amplitude * sum_{i<j} cos(omega (x_i - x_j)).
struct CosineCost {
    double amplitude = 1.0;
    double omega = 1.0;
    double operator()(std::span<const double> x) const noexcept {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = i + 1; j < x.size(); ++j) s += std::cos(omega * (x[i] - x[j]));
        return amplitude * s;
    }
};

/// amplitude * exp(-sum_{i<j} (x_i - x_j)^2 / (2 sigma^2)).
struct GaussianCost {
    double amplitude = 1.0;
    double sigma = 1.0;
    double operator()(std::span<const double> x) const noexcept {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = i + 1; j < x.size(); ++j) {
                const double d = x[i] - x[j];
                s += d * d;
            }
        return amplitude * std::exp(-s / (2.0 * sigma * sigma));
    }
};

/// Values given directly on the product grid (row-major, last index fastest).
struct TabulatedCost {
    std::vector<double> values;
};

/// Arbitrary smooth callable; derivative bounds are estimated by sampling.
struct FunctionCost {
    std::function<double(std::span<const double>)> f;
    double operator()(std::span<const double> x) const { return f(x); }
};

using CostDescriptor =
    std::variant<ZeroCost, QuadraticCost, SeparableCost, CosineCost, GaussianCost, TabulatedCost, FunctionCost>;

inline std::string descriptor_kind(const CostDescriptor& d) {
    static constexpr std::array<const char*, 7> names = {"zero",     "quadratic", "separable", "cosine",
                                                         "gaussian", "tabulated", "function"};
    return names[d.index()];
}

// ---------------------------------------------------------------------------

/// Cost evaluated on the product grid with derivative bounds.
///
/// deriv_bounds[j] bounds max_{|alpha| = j} sup |d^alpha c| over the product
/// of the grid intervals; grad_bounds[i] bounds sup |d c / d x_i|.
class CostTensor {
public:
    CostTensor(std::vector<Grid1D> grids, std::vector<double> values, std::vector<double> deriv_bounds,
               std::vector<double> grad_bounds, std::pair<double, double> range, bool analytic)
        : grids_(std::move(grids)),
          values_(std::move(values)),
          deriv_bounds_(std::move(deriv_bounds)),
          grad_bounds_(std::move(grad_bounds)),
          range_(range),
          analytic_(analytic) {
        if (grids_.size() < 2) throw InvariantError("CostTensor: need at least two grids");
        if (grids_.size() > kMaxMarginals) {
            throw CapacityError("CostTensor: at most " + std::to_string(kMaxMarginals) +
                                " marginals supported by dense storage");
        }
        strides_.assign(grids_.size(), 1);
        std::size_t total = 1;
        for (std::size_t i = grids_.size(); i-- > 0;) {
            strides_[i] = total;
            total *= grids_[i].n();
        }
        if (values_.size() != total) throw InvariantError("CostTensor: value count does not match grid shape");
        for (double v : values_)
            if (!std::isfinite(v)) throw InvariantError("CostTensor: non-finite value");
        if (deriv_bounds_.empty()) throw InvariantError("CostTensor: missing order-0 bound");
        if (grad_bounds_.size() != grids_.size()) throw InvariantError("CostTensor: grad_bounds size");
        const auto [mn, mx] = std::minmax_element(values_.begin(), values_.end());
        min_value_ = *mn;
        max_value_ = *mx;
        if (max_value_ - min_value_ <= kGibbsOscillationLimit) {
            gibbs_.resize(values_.size());
            for (std::size_t k = 0; k < values_.size(); ++k) gibbs_[k] = std::exp(min_value_ - values_[k]);
        }
    }

    /// Above this oscillation exp(min c - c) may underflow and callers must
    /// use the log-domain path.
    static constexpr double kGibbsOscillationLimit = 600.0;

    std::size_t order() const noexcept { return grids_.size(); }
    const std::vector<Grid1D>& grids() const noexcept { return grids_; }
    const Grid1D& grid(std::size_t i) const noexcept { return grids_[i]; }
    std::span<const double> values() const noexcept { return values_; }
    const std::vector<std::size_t>& strides() const noexcept { return strides_; }
    std::size_t size() const noexcept { return values_.size(); }

    double operator()(std::size_t i, std::size_t j) const noexcept { return values_[i * strides_[0] + j]; }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return values_[i * strides_[0] + j * strides_[1] + k];
    }
    double at(std::span<const std::size_t> idx) const noexcept {
        std::size_t f = 0;
        for (std::size_t a = 0; a < idx.size(); ++a) f += idx[a] * strides_[a];
        return values_[f];
    }

    int k_max() const noexcept { return static_cast<int>(deriv_bounds_.size()) - 1; }
    const std::vector<double>& deriv_bounds() const noexcept { return deriv_bounds_; }
    const std::vector<double>& grad_bounds() const noexcept { return grad_bounds_; }
    bool analytic_bounds() const noexcept { return analytic_; }

    /// Lower and upper bounds on c over the domain.
    std::pair<double, double> range() const noexcept { return range_; }

    /// max_{j <= k} deriv_bounds[j].
    double ck_bound(int k) const {
        if (k < 0 || k > k_max()) {
            throw InvariantError("CostTensor: derivative bound of order " + std::to_string(k) + " not available");
        }
        double m = 0.0;
        for (int j = 0; j <= k; ++j) m = std::max(m, deriv_bounds_[static_cast<std::size_t>(j)]);
        return m;
    }

    /// Sup of |c| over the tensor entries.
    double sup_norm() const noexcept {
        double m = 0.0;
        for (double v : values_) m = std::max(m, std::abs(v));
        return m;
    }

    double min_value() const noexcept { return min_value_; }
    double max_value() const noexcept { return max_value_; }

    /// exp(min c - c) on the product grid; empty when the oscillation of c
    /// exceeds kGibbsOscillationLimit.
    std::span<const double> gibbs() const noexcept { return gibbs_; }
    bool has_gibbs() const noexcept { return !gibbs_.empty(); }

    double cell_volume() const noexcept {
        double v = 1.0;
        for (const auto& g : grids_) v *= g.spacing();
        return v;
    }

    /// Copy with every value shifted by `kappa`.
    CostTensor shifted(double kappa) const {
        std::vector<double> v(values_);
        for (double& x : v) x += kappa;
        std::vector<double> db(deriv_bounds_);
        const auto r = std::make_pair(range_.first + kappa, range_.second + kappa);
        db[0] = std::max(std::abs(r.first), std::abs(r.second));
        return CostTensor(grids_, std::move(v), std::move(db), grad_bounds_, r, analytic_);
    }

private:
    std::vector<Grid1D> grids_;
    std::vector<double> values_;
    std::vector<std::size_t> strides_;
    std::vector<double> deriv_bounds_;
    std::vector<double> grad_bounds_;
    std::pair<double, double> range_;
    bool analytic_;
    double min_value_ = 0.0;
    double max_value_ = 0.0;
    std::vector<double> gibbs_;
};

namespace detail {

/// Nondecreasing axis sequences of length `order` over `dims` axes.
inline std::vector<std::vector<std::size_t>> multi_indices(std::size_t dims, int order) {
    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> cur;
    std::function<void(std::size_t)> rec = [&](std::size_t start) {
        if (static_cast<int>(cur.size()) == order) {
            out.push_back(cur);
            return;
        }
        for (std::size_t a = start; a < dims; ++a) {
            cur.push_back(a);
            rec(a);
            cur.pop_back();
        }
    };
    rec(0);
    return out;
}

/// Nested central differences of a callable along the axes in `alpha`.
template <class F>
double mixed_partial(const F& f, std::vector<double>& x, const std::vector<std::size_t>& alpha, std::size_t depth,
                     double delta) {
    if (depth == alpha.size()) return f(std::span<const double>(x));
    const std::size_t a = alpha[depth];
    const double saved = x[a];
    x[a] = saved + delta;
    const double up = mixed_partial(f, x, alpha, depth + 1, delta);
    x[a] = saved - delta;
    const double dn = mixed_partial(f, x, alpha, depth + 1, delta);
    x[a] = saved;
    return (up - dn) / (2.0 * delta);
}

struct SampledBounds {
    std::vector<double> deriv;
    std::vector<double> grad;
    std::pair<double, double> range;
};

/// Bounds by evaluating finite-difference partials of the callable on a lattice
/// that includes the interval endpoints.
template <class F>
SampledBounds sample_bounds(const F& f, const std::vector<Grid1D>& grids, int k_max) {
    const std::size_t dims = grids.size();
    const std::size_t per_axis = dims <= 2 ? 129 : 41;
    double min_len = std::numeric_limits<double>::infinity();
    for (const auto& g : grids) min_len = std::min(min_len, g.length());
    SampledBounds out;
    out.deriv.assign(static_cast<std::size_t>(k_max) + 1, 0.0);
    out.grad.assign(dims, 0.0);
    out.range = {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    std::vector<std::vector<std::vector<std::size_t>>> alphas;
    for (int j = 0; j <= k_max; ++j) alphas.push_back(multi_indices(dims, j));
    std::vector<std::size_t> idx(dims, 0);
    std::vector<double> x(dims);
    for (;;) {
        for (std::size_t a = 0; a < dims; ++a) {
            const double u = static_cast<double>(idx[a]) / static_cast<double>(per_axis - 1);
            x[a] = grids[a].lo() + u * grids[a].length();
        }
        const double v = f(std::span<const double>(x));
        out.range.first = std::min(out.range.first, v);
        out.range.second = std::max(out.range.second, v);
        out.deriv[0] = std::max(out.deriv[0], std::abs(v));
        for (int j = 1; j <= k_max; ++j) {
            const double delta = min_len * (j == 1 ? 1e-5 : 1e-3);
            for (const auto& alpha : alphas[static_cast<std::size_t>(j)]) {
                const double d = std::abs(mixed_partial(f, x, alpha, 0, delta));
                out.deriv[static_cast<std::size_t>(j)] = std::max(out.deriv[static_cast<std::size_t>(j)], d);
                if (j == 1) out.grad[alpha[0]] = std::max(out.grad[alpha[0]], d);
            }
        }
        std::size_t a = dims;
        while (a-- > 0) {
            if (++idx[a] < per_axis) break;
            idx[a] = 0;
        }
        if (a == static_cast<std::size_t>(-1)) break;
    }
    return out;
}

template <class F>
std::vector<double> tabulate(const F& f, const std::vector<Grid1D>& grids) {
    std::size_t total = 1;
    for (const auto& g : grids) total *= g.n();
    std::vector<double> values(total);
    std::vector<std::size_t> idx(grids.size(), 0);
    std::vector<double> x(grids.size());
    for (std::size_t flat = 0; flat < total; ++flat) {
        for (std::size_t a = 0; a < grids.size(); ++a) x[a] = grids[a].node(idx[a]);
        values[flat] = f(std::span<const double>(x));
        for (std::size_t a = grids.size(); a-- > 0;) {
            if (++idx[a] < grids[a].n()) break;
            idx[a] = 0;
        }
    }
    return values;
}

inline void check_grid_count(const std::vector<Grid1D>& grids) {
    if (grids.size() < 2) throw InvariantError("build_cost: need at least two grids");
    if (grids.size() > kMaxMarginals) {
        throw CapacityError("build_cost: at most " + std::to_string(kMaxMarginals) +
                            " marginals supported by dense storage");
    }
}

/// Sup and inf of a 1D function on [lo, hi] by dense sampling.
template <class F>
std::pair<double, double> sample_range_1d(const F& f, double lo, double hi) {
    constexpr int kSamples = 20001;
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (int s = 0; s < kSamples; ++s) {
        const double x = lo + (hi - lo) * static_cast<double>(s) / (kSamples - 1);
        const double v = f(x);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    return {mn, mx};
}

}  // namespace detail

/// Finite-difference derivative of order j (second-order stencils, one-sided
/// near the boundary) at every node.
inline std::vector<double> fd_derivative(std::span<const double> f, const Grid1D& grid, int j) {
    if (j < 0 || j > kMaxDerivativeOrder) throw InvariantError("fd_derivative: order must be in 0..3");
    const std::size_t n = f.size();
    if (n != grid.n()) throw InvariantError("fd_derivative: values do not match grid");
    if (n < static_cast<std::size_t>(2 * j + 1) || (j > 0 && n < 3)) {
        throw GridTooCoarse("ck_norm_estimate: need n >= 2k+1 nodes for order " + std::to_string(j));
    }
    const double h = grid.spacing();
    std::vector<double> d(f.begin(), f.end());
    if (j == 1) {
        for (std::size_t i = 1; i + 1 < n; ++i) d[i] = (f[i + 1] - f[i - 1]) / (2.0 * h);
        d[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h);
        d[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h);
    } else if (j == 2) {
        const double h2 = h * h;
        for (std::size_t i = 1; i + 1 < n; ++i) d[i] = (f[i + 1] - 2.0 * f[i] + f[i - 1]) / h2;
        d[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h2;
        d[n - 1] = (2.0 * f[n - 1] - 5.0 * f[n - 2] + 4.0 * f[n - 3] - f[n - 4]) / h2;
    } else if (j == 3) {
        const double h3 = 2.0 * h * h * h;
        for (std::size_t i = 2; i + 2 < n; ++i) d[i] = (f[i + 2] - 2.0 * f[i + 1] + 2.0 * f[i - 1] - f[i - 2]) / h3;
        for (std::size_t i = 0; i < 2; ++i) {
            d[i] = (-5.0 * f[i] + 18.0 * f[i + 1] - 24.0 * f[i + 2] + 14.0 * f[i + 3] - 3.0 * f[i + 4]) / h3;
            const std::size_t r = n - 1 - i;
            d[r] = (5.0 * f[r] - 18.0 * f[r - 1] + 24.0 * f[r - 2] - 14.0 * f[r - 3] + 3.0 * f[r - 4]) / h3;
        }
    }
    return d;
}

/// Min and max of a nodal function over the whole interval: node values,
/// quadratic extrapolation to both endpoints, and parabolic vertices at
/// interior local extrema (so the result does not depend on where the nodes
/// happen to fall relative to the true extremum).
inline std::pair<double, double> refined_extrema(std::span<const double> d) {
    const std::size_t n = d.size();
    if (n == 2) {
        // Linear extrapolation is all two nodes allow.
        const double left = 1.5 * d[0] - 0.5 * d[1];
        const double right = 1.5 * d[1] - 0.5 * d[0];
        return {std::min(left, right), std::max(left, right)};
    }
    // Lagrange weights for the quadratic through nodes 0,1,2 evaluated at index -0.5.
    const double left = 1.875 * d[0] - 1.25 * d[1] + 0.375 * d[2];
    const double right = 1.875 * d[n - 1] - 1.25 * d[n - 2] + 0.375 * d[n - 3];
    double mn = std::min(left, right), mx = std::max(left, right);
    for (double v : d) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const double a = d[i - 1], b = d[i], c = d[i + 1];
        const double curv = a - 2.0 * b + c;
        if (curv == 0.0) continue;
        const bool is_max = b >= a && b >= c && curv < 0.0;
        const bool is_min = b <= a && b <= c && curv > 0.0;
        if (!is_max && !is_min) continue;
        const double offset = std::clamp(0.5 * (a - c) / curv, -1.0, 1.0);
        const double vertex = b - 0.25 * (a - c) * offset;
        mn = std::min(mn, vertex);
        mx = std::max(mx, vertex);
    }
    return {mn, mx};
}

/// Sup of |f^(j)| from fd_derivative and refined_extrema.
inline double derivative_sup_estimate(std::span<const double> f, const Grid1D& grid, int j) {
    const auto d = fd_derivative(f, grid, j);
    const auto [mn, mx] = refined_extrema(d);
    return std::max(std::abs(mn), std::abs(mx));
}

/// C^k surrogate: max over orders j <= k of derivative_sup_estimate.
inline double ck_norm_estimate(std::span<const double> f, const Grid1D& grid, int k) {
    if (k < 0 || k > kMaxDerivativeOrder) throw InvariantError("ck_norm_estimate: k must be in 0..3");
    if (f.size() < static_cast<std::size_t>(2 * k + 1) || (k > 0 && f.size() < 3)) {
        throw GridTooCoarse("ck_norm_estimate: need n >= 2k+1 nodes for order " + std::to_string(k));
    }
    double best = 0.0;
    for (int j = 0; j <= k; ++j) best = std::max(best, derivative_sup_estimate(f, grid, j));
    return best;
}

/// Tabulates a descriptor on the product grid and attaches derivative bounds
/// up to order `k_max`.
inline CostTensor build_cost(const CostDescriptor& desc, const std::vector<Grid1D>& grids,
                             int k_max = kMaxDerivativeOrder) {
    detail::check_grid_count(grids);
    if (k_max < 0 || k_max > kMaxDerivativeOrder) throw InvariantError("build_cost: k_max must be in 0..3");
    const std::size_t dims = grids.size();
    const auto kb = static_cast<std::size_t>(k_max) + 1;

    return std::visit(
        [&](const auto& d) -> CostTensor {
            using D = std::decay_t<decltype(d)>;
            if constexpr (std::is_same_v<D, ZeroCost>) {
                return CostTensor(grids, detail::tabulate(d, grids), std::vector<double>(kb, 0.0),
                                  std::vector<double>(dims, 0.0), {0.0, 0.0}, true);
            } else if constexpr (std::is_same_v<D, QuadraticCost>) {
                if (d.weights.size() != dims) throw InvariantError("quadratic cost: weight matrix size");
                for (std::size_t i = 0; i < dims; ++i) {
                    if (d.weights[i].size() != dims) throw InvariantError("quadratic cost: weight matrix size");
                    for (std::size_t j = i + 1; j < dims; ++j)
                        if (d.weights[i][j] < 0.0) throw InvariantError("quadratic cost: weights must be >= 0");
                }
                // c is convex and its gradient affine, so sups sit on box corners.
                std::vector<double> grad(dims, 0.0);
                double cmax = 0.0;
                std::vector<double> x(dims);
                for (std::size_t mask = 0; mask < (std::size_t{1} << dims); ++mask) {
                    for (std::size_t a = 0; a < dims; ++a) x[a] = (mask >> a & 1U) ? grids[a].hi() : grids[a].lo();
                    cmax = std::max(cmax, d(x));
                    for (std::size_t i = 0; i < dims; ++i) {
                        double g = 0.0;
                        for (std::size_t j = 0; j < dims; ++j)
                            if (j != i) g += 2.0 * d.a(i, j) * (x[i] - x[j]);
                        grad[i] = std::max(grad[i], std::abs(g));
                    }
                }
                std::vector<double> db(kb, 0.0);
                db[0] = cmax;
                if (kb > 1) db[1] = *std::max_element(grad.begin(), grad.end());
                if (kb > 2) {
                    double h = 0.0;
                    for (std::size_t i = 0; i < dims; ++i) {
                        double diag = 0.0;
                        for (std::size_t j = 0; j < dims; ++j)
                            if (j != i) {
                                diag += 2.0 * d.a(i, j);
                                h = std::max(h, 2.0 * d.a(i, j));
                            }
                        h = std::max(h, diag);
                    }
                    db[2] = h;
                }
                return CostTensor(grids, detail::tabulate(d, grids), std::move(db), std::move(grad), {0.0, cmax},
                                  true);
            } else if constexpr (std::is_same_v<D, SeparableCost>) {
                if (d.terms.size() != dims) throw InvariantError("separable cost: need one term per marginal");
                std::vector<double> db(kb, 0.0);
                std::vector<double> grad(dims, 0.0);
                double lo = 0.0, hi = 0.0;
                for (std::size_t i = 0; i < dims; ++i) {
                    const auto& term = d.terms[i];
                    const auto r = detail::sample_range_1d([&](double x) { return term(x); }, grids[i].lo(),
                                                           grids[i].hi());
                    lo += r.first;
                    hi += r.second;
                    for (std::size_t j = 1; j < kb; ++j) {
                        const auto rj = detail::sample_range_1d(
                            [&](double x) { return term.derivative(x, static_cast<int>(j)); }, grids[i].lo(),
                            grids[i].hi());
                        const double s = std::max(std::abs(rj.first), std::abs(rj.second));
                        db[j] = std::max(db[j], s);
                        if (j == 1) grad[i] = s;
                    }
                }
                db[0] = std::max(std::abs(lo), std::abs(hi));
                return CostTensor(grids, detail::tabulate(d, grids), std::move(db), std::move(grad), {lo, hi}, true);
            } else if constexpr (std::is_same_v<D, TabulatedCost>) {
                // Bounds from finite differences of the table along each axis.
                std::size_t total = 1;
                for (const auto& g : grids) total *= g.n();
                if (d.values.size() != total) throw InvariantError("tabulated cost: value count does not match grids");
                CostTensor raw(grids, d.values, {0.0}, std::vector<double>(dims, 0.0), {0.0, 0.0}, false);
                std::vector<double> db(kb, 0.0);
                std::vector<double> grad(dims, 0.0);
                const auto [mn, mx] = std::minmax_element(d.values.begin(), d.values.end());
                db[0] = std::max(std::abs(*mn), std::abs(*mx));
                const auto& strides = raw.strides();
                for (std::size_t a = 0; a < dims; ++a) {
                    const std::size_t n = grids[a].n();
                    std::vector<double> line(n);
                    for (std::size_t base = 0; base < total; ++base) {
                        if ((base / strides[a]) % n != 0) continue;
                        for (std::size_t j = 0; j < n; ++j) line[j] = d.values[base + j * strides[a]];
                        for (std::size_t j = 1; j < kb; ++j) {
                            if (n < 2 * j + 1) break;
                            const double up = derivative_sup_estimate(line, grids[a], static_cast<int>(j));
                            db[j] = std::max(db[j], up);
                            if (j == 1) grad[a] = std::max(grad[a], up);
                        }
                    }
                }
                return CostTensor(grids, d.values, std::move(db), std::move(grad), {*mn, *mx}, false);
            } else {
                const auto s = detail::sample_bounds(d, grids, k_max);
                return CostTensor(grids, detail::tabulate(d, grids), s.deriv, s.grad, s.range, false);
            }
        },
        desc);
}

struct NormalizedCost {
    CostTensor cost;
    double shift;
};

/// Shifts c by kappa so that sum exp(-c - kappa) * cell_volume = 1.
inline NormalizedCost normalize_cost(const CostTensor& cost) {
    const auto v = cost.values();
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, -x);
    double s = 0.0;
    for (double x : v) s += std::exp(-x - m);
    const double kappa = m + std::log(s) + std::log(cost.cell_volume());
    return {cost.shifted(kappa), kappa};
}

/// log sum exp(-c) * cell_volume; zero for a normalized cost.
inline double log_partition(const CostTensor& cost) {
    std::vector<double> neg(cost.values().begin(), cost.values().end());
    for (double& x : neg) x = -x;
    return logsumexp(neg) + std::log(cost.cell_volume());
}

}  // namespace eotstab
