#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eotstab/errors.hpp"

namespace eotstab {

/// Uniform cell-centred grid on [lo, hi] with n cells.
class Grid1D {
public:
    Grid1D(double lo, double hi, std::size_t n) : lo_(lo), hi_(hi), n_(n) {
        if (!(std::isfinite(lo) && std::isfinite(hi)) || !(lo < hi)) {
            throw InvariantError("Grid1D: require finite lo < hi");
        }
        if (n < 2) {
            throw InvariantError("Grid1D: require n >= 2");
        }
        spacing_ = (hi_ - lo_) / static_cast<double>(n_);
    }

    double lo() const noexcept { return lo_; }
    double hi() const noexcept { return hi_; }
    std::size_t n() const noexcept { return n_; }
    double spacing() const noexcept { return spacing_; }
    double length() const noexcept { return hi_ - lo_; }

    double node(std::size_t j) const noexcept {
        return lo_ + (static_cast<double>(j) + 0.5) * spacing_;
    }

    std::vector<double> nodes() const {
        std::vector<double> out(n_);
        for (std::size_t j = 0; j < n_; ++j) out[j] = node(j);
        return out;
    }

    /// Position in fractional node-index units: node(j) maps to j.
    double index_coordinate(double x) const noexcept { return (x - lo_) / spacing_ - 0.5; }

    bool same_interval(const Grid1D& other) const noexcept {
        const double scale = std::max({1.0, std::abs(lo_), std::abs(hi_)});
        return std::abs(lo_ - other.lo_) <= 1e-12 * scale && std::abs(hi_ - other.hi_) <= 1e-12 * scale;
    }

    friend bool operator==(const Grid1D& a, const Grid1D& b) noexcept {
        return a.lo_ == b.lo_ && a.hi_ == b.hi_ && a.n_ == b.n_;
    }

private:
    double lo_;
    double hi_;
    std::size_t n_;
    double spacing_;
};

/// Probability vector of cell masses on a Grid1D.
class DiscreteMeasure {
public:
    static constexpr double kMassTolerance = 1e-12;

    DiscreteMeasure(Grid1D grid, std::vector<double> weights)
        : grid_(std::move(grid)), weights_(std::move(weights)) {
        if (weights_.size() != grid_.n()) {
            throw InvariantError("DiscreteMeasure: weight count does not match grid");
        }
        double total = 0.0;
        for (double w : weights_) {
            if (!(w >= 0.0) || !std::isfinite(w)) {
                throw InvariantError("DiscreteMeasure: weights must be finite and nonnegative");
            }
            total += w;
        }
        if (std::abs(total - 1.0) > kMassTolerance) {
            throw InvariantError("DiscreteMeasure: weights sum to " + std::to_string(total));
        }
    }

    /// Divides by the total so that the result is a probability vector.
    static DiscreteMeasure normalized(Grid1D grid, std::vector<double> raw) {
        double total = 0.0;
        for (double w : raw) {
            if (!(w >= 0.0) || !std::isfinite(w)) {
                throw InvariantError("DiscreteMeasure::normalized: weights must be finite and nonnegative");
            }
            total += w;
        }
        if (!(total > 0.0)) throw InvariantError("DiscreteMeasure::normalized: zero total mass");
        for (double& w : raw) w /= total;
        return DiscreteMeasure(std::move(grid), std::move(raw));
    }

    static DiscreteMeasure uniform(Grid1D grid) {
        std::vector<double> w(grid.n(), 1.0);
        return normalized(std::move(grid), std::move(w));
    }

    static DiscreteMeasure dirac(Grid1D grid, std::size_t j) {
        if (j >= grid.n()) throw InvariantError("DiscreteMeasure::dirac: node out of range");
        std::vector<double> w(grid.n(), 0.0);
        w[j] = 1.0;
        return DiscreteMeasure(std::move(grid), std::move(w));
    }

    const Grid1D& grid() const noexcept { return grid_; }
    std::span<const double> weights() const noexcept { return weights_; }
    double weight(std::size_t j) const noexcept { return weights_[j]; }
    std::size_t size() const noexcept { return weights_.size(); }

    double density(std::size_t j) const noexcept { return weights_[j] / grid_.spacing(); }

    double mean() const noexcept {
        double m = 0.0;
        for (std::size_t j = 0; j < weights_.size(); ++j) m += weights_[j] * grid_.node(j);
        return m;
    }

    /// Integral of a nodal function.
    double integrate(std::span<const double> f) const noexcept {
        double s = 0.0;
        for (std::size_t j = 0; j < weights_.size(); ++j) s += weights_[j] * f[j];
        return s;
    }

    bool all_positive() const noexcept {
        return std::all_of(weights_.begin(), weights_.end(), [](double w) { return w > 0.0; });
    }

private:
    Grid1D grid_;
    std::vector<double> weights_;
};

/// Ordered N-tuple of marginals, N >= 2.
class MeasureFamily {
public:
    explicit MeasureFamily(std::vector<DiscreteMeasure> members) : members_(std::move(members)) {
        if (members_.size() < 2) throw InvariantError("MeasureFamily: need at least two marginals");
    }

    std::size_t size() const noexcept { return members_.size(); }
    const DiscreteMeasure& operator[](std::size_t i) const noexcept { return members_[i]; }
    auto begin() const noexcept { return members_.begin(); }
    auto end() const noexcept { return members_.end(); }
    const std::vector<DiscreteMeasure>& members() const noexcept { return members_; }

    std::vector<Grid1D> grids() const {
        std::vector<Grid1D> g;
        g.reserve(members_.size());
        for (const auto& m : members_) g.push_back(m.grid());
        return g;
    }

private:
    std::vector<DiscreteMeasure> members_;
};

/// Coupling on source_grid x target_grid, row-major (source index major).
class TransportPlan {
public:
    static constexpr double kMarginalTolerance = 1e-10;

    TransportPlan(Grid1D source, Grid1D target, std::vector<double> weights)
        : source_(std::move(source)), target_(std::move(target)), weights_(std::move(weights)) {
        if (weights_.size() != source_.n() * target_.n()) {
            throw InvariantError("TransportPlan: weight matrix has the wrong shape");
        }
        double total = 0.0;
        for (double w : weights_) {
            if (!(w >= 0.0) || !std::isfinite(w)) {
                throw InvariantError("TransportPlan: weights must be finite and nonnegative");
            }
            total += w;
        }
        if (std::abs(total - 1.0) > kMarginalTolerance) {
            throw InvariantError("TransportPlan: total mass " + std::to_string(total));
        }
    }

    const Grid1D& source_grid() const noexcept { return source_; }
    const Grid1D& target_grid() const noexcept { return target_; }
    std::span<const double> weights() const noexcept { return weights_; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return weights_[i * target_.n() + j]; }

    std::vector<double> source_weights() const {
        std::vector<double> acc(source_.n(), 0.0);
        const std::size_t m = target_.n();
        for (std::size_t i = 0; i < source_.n(); ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const double w = weights_[i * m + j];
                if (w != 0.0) acc[i] += w;
            }
        }
        return acc;
    }

    std::vector<double> target_weights() const {
        std::vector<double> acc(target_.n(), 0.0);
        const std::size_t m = target_.n();
        for (std::size_t i = 0; i < source_.n(); ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const double w = weights_[i * m + j];
                if (w != 0.0) acc[j] += w;
            }
        }
        return acc;
    }

    DiscreteMeasure source_marginal() const { return DiscreteMeasure::normalized(source_, source_weights()); }
    DiscreteMeasure target_marginal() const { return DiscreteMeasure::normalized(target_, target_weights()); }

    /// Row and column sums match the given marginals within `tol`.
    bool feasible_for(const DiscreteMeasure& mu, const DiscreteMeasure& nu,
                      double tol = kMarginalTolerance) const {
        if (!(mu.grid() == source_) || !(nu.grid() == target_)) return false;
        const auto rows = source_weights();
        const auto cols = target_weights();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (std::abs(rows[i] - mu.weight(i)) > tol) return false;
        }
        for (std::size_t j = 0; j < cols.size(); ++j) {
            if (std::abs(cols[j] - nu.weight(j)) > tol) return false;
        }
        return true;
    }

    /// Quadratic transport cost of this plan.
    double cost() const noexcept {
        double c = 0.0;
        const std::size_t m = target_.n();
        for (std::size_t i = 0; i < source_.n(); ++i) {
            const double x = source_.node(i);
            for (std::size_t j = 0; j < m; ++j) {
                const double w = weights_[i * m + j];
                if (w == 0.0) continue;
                const double d = target_.node(j) - x;
                c += w * d * d;
            }
        }
        return c;
    }

private:
    Grid1D source_;
    Grid1D target_;
    std::vector<double> weights_;
};

class PlanFamily {
public:
    explicit PlanFamily(std::vector<TransportPlan> members) : members_(std::move(members)) {
        if (members_.empty()) throw InvariantError("PlanFamily: empty");
    }
    std::size_t size() const noexcept { return members_.size(); }
    const TransportPlan& operator[](std::size_t i) const noexcept { return members_[i]; }
    auto begin() const noexcept { return members_.begin(); }
    auto end() const noexcept { return members_.end(); }

    MeasureFamily sources() const {
        std::vector<DiscreteMeasure> out;
        for (const auto& p : members_) out.push_back(p.source_marginal());
        return MeasureFamily(std::move(out));
    }
    MeasureFamily targets() const {
        std::vector<DiscreteMeasure> out;
        for (const auto& p : members_) out.push_back(p.target_marginal());
        return MeasureFamily(std::move(out));
    }

private:
    std::vector<TransportPlan> members_;
};

namespace detail {

inline void require_same_interval(const Grid1D& a, const Grid1D& b, const char* where) {
    if (!a.same_interval(b)) throw DomainMismatch(std::string(where) + ": grids cover different intervals");
}

/// Splits `mass` at fractional index s between its two neighbouring nodes.
inline void deposit_linear(std::vector<double>& out, double s, double mass) {
    const std::size_t n = out.size();
    if (s <= 0.0) {
        out[0] += mass;
        return;
    }
    const double top = static_cast<double>(n - 1);
    if (s >= top) {
        out[n - 1] += mass;
        return;
    }
    const double base = std::floor(s);
    const double frac = s - base;
    const auto k = static_cast<std::size_t>(base);
    out[k] += mass * (1.0 - frac);
    if (frac > 0.0) out[k + 1] += mass * frac;
}

/// Calls f(i, j, piece) for every piece of the monotone coupling.
template <class F>
void for_each_quantile_piece(const DiscreteMeasure& mu, const DiscreteMeasure& nu, F&& f) {
    const auto a = mu.weights();
    const auto b = nu.weights();
    std::size_t i = 0, j = 0;
    double ca = a[0], cb = b[0], prev = 0.0;
    while (i < a.size() && j < b.size()) {
        const double next = std::min(ca, cb);
        const double piece = next - prev;
        if (piece > 0.0) f(i, j, piece);
        prev = next;
        const bool adv_i = (ca == next);
        const bool adv_j = (cb == next);
        if (adv_i && ++i < a.size()) ca += a[i];
        if (adv_j && ++j < b.size()) cb += b[j];
    }
}

}  // namespace detail

/// Exact W2 between two histograms, treating cell masses as atoms at nodes.
inline double wasserstein2_1d(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    detail::require_same_interval(mu.grid(), nu.grid(), "wasserstein2_1d");
    double cost = 0.0;
    detail::for_each_quantile_piece(mu, nu, [&](std::size_t i, std::size_t j, double piece) {
        const double d = mu.grid().node(i) - nu.grid().node(j);
        cost += piece * d * d;
    });
    return std::sqrt(std::max(cost, 0.0));
}

/// W2 between the piecewise-constant densities of two histograms (mass spread
/// uniformly over each cell). Quadratic in small weight perturbations, unlike
/// the atomic distance, which is why flow diagnostics use it for decay slopes.
inline double wasserstein2_1d_density(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    detail::require_same_interval(mu.grid(), nu.grid(), "wasserstein2_1d_density");
    // Inverse CDF of a piecewise-constant density is piecewise linear in u.
    struct Piece {
        double u0, u1, x0, x1;
    };
    auto pieces = [](const DiscreteMeasure& m) {
        std::vector<Piece> out;
        double u = 0.0;
        const double h = m.grid().spacing();
        for (std::size_t j = 0; j < m.size(); ++j) {
            const double w = m.weight(j);
            if (w <= 0.0) continue;
            const double left = m.grid().lo() + static_cast<double>(j) * h;
            out.push_back({u, u + w, left, left + h});
            u += w;
        }
        return out;
    };
    const auto pa = pieces(mu);
    const auto pb = pieces(nu);
    auto inv = [](const Piece& p, double u) { return p.x0 + (u - p.u0) / (p.u1 - p.u0) * (p.x1 - p.x0); };
    double cost = 0.0;
    std::size_t i = 0, j = 0;
    double prev = 0.0;
    while (i < pa.size() && j < pb.size()) {
        const double next = std::min(pa[i].u1, pb[j].u1);
        if (next > prev) {
            // Difference of two linear functions on [prev, next]: integrate square exactly.
            const double d0 = inv(pa[i], prev) - inv(pb[j], prev);
            const double d1 = inv(pa[i], next) - inv(pb[j], next);
            cost += (next - prev) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
        }
        prev = next;
        if (pa[i].u1 == next) ++i;
        if (j < pb.size() && pb[j].u1 == next) ++j;
    }
    return std::sqrt(std::max(cost, 0.0));
}

inline double product_wasserstein(const MeasureFamily& a, const MeasureFamily& b) {
    if (a.size() != b.size()) throw DomainMismatch("product_wasserstein: family sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double w = wasserstein2_1d(a[i], b[i]);
        s += w * w;
    }
    return std::sqrt(s);
}

/// Monotone (quantile) coupling; optimal for the quadratic cost in 1D.
inline TransportPlan optimal_plan_1d(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    detail::require_same_interval(mu.grid(), nu.grid(), "optimal_plan_1d");
    const std::size_t m = nu.size();
    std::vector<double> w(mu.size() * m, 0.0);
    detail::for_each_quantile_piece(mu, nu, [&](std::size_t i, std::size_t j, double piece) {
        w[i * m + j] += piece;
    });
    return TransportPlan(mu.grid(), nu.grid(), std::move(w));
}

inline double plan_cost(const PlanFamily& plans) {
    double c = 0.0;
    for (const auto& p : plans) c += p.cost();
    return c;
}

/// Plan moving each cell `cells` nodes to the right (negative: left).
inline TransportPlan translation_plan(const DiscreteMeasure& mu, long cells) {
    const auto n = static_cast<long>(mu.size());
    std::vector<double> w(mu.size() * mu.size(), 0.0);
    for (long a = 0; a < n; ++a) {
        const double m = mu.weight(static_cast<std::size_t>(a));
        if (m == 0.0) continue;
        const long b = a + cells;
        if (b < 0 || b >= n) throw DomainMismatch("translation_plan: mass would leave the grid");
        w[static_cast<std::size_t>(a * n + b)] = m;
    }
    return TransportPlan(mu.grid(), mu.grid(), std::move(w));
}

/// Interpolated marginal ((1-t)x + t y)_# gamma, binned on the source grid by
/// two-node linear splitting (preserves mass and first moment).
inline DiscreteMeasure displacement_marginal(const TransportPlan& plan, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw InvariantError("displacement_path: t outside [0,1]");
    const Grid1D& out_grid = plan.source_grid();
    const Grid1D& tgt = plan.target_grid();
    detail::require_same_interval(out_grid, tgt, "displacement_path");
    const bool shared = (out_grid == tgt);
    const std::size_t n = out_grid.n();
    const std::size_t m = tgt.n();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double sx = static_cast<double>(i);
        for (std::size_t j = 0; j < m; ++j) {
            const double w = plan(i, j);
            if (w == 0.0) continue;
            const double sy = shared ? static_cast<double>(j) : out_grid.index_coordinate(tgt.node(j));
            detail::deposit_linear(out, (1.0 - t) * sx + t * sy, w);
        }
    }
    return DiscreteMeasure::normalized(out_grid, std::move(out));
}

inline MeasureFamily displacement_path(const PlanFamily& plans, double t) {
    std::vector<DiscreteMeasure> out;
    out.reserve(plans.size());
    for (const auto& p : plans) out.push_back(displacement_marginal(p, t));
    return MeasureFamily(std::move(out));
}

/// Binned pushforward of mu by a nodal map; map values must lie in [lo, hi].
inline DiscreteMeasure pushforward(const DiscreteMeasure& mu, std::span<const double> map_values) {
    const Grid1D& g = mu.grid();
    if (map_values.size() != g.n()) throw InvariantError("pushforward: map has wrong length");
    const double slack = 1e-12 * std::max(1.0, g.length());
    std::vector<double> out(g.n(), 0.0);
    for (std::size_t j = 0; j < g.n(); ++j) {
        const double v = map_values[j];
        if (!(v >= g.lo() - slack && v <= g.hi() + slack)) {
            throw DomainMismatch("pushforward: map value outside the grid interval");
        }
        if (mu.weight(j) == 0.0) continue;
        double s = g.index_coordinate(v);
        const double r = std::round(s);
        if (std::abs(s - r) < 1e-9) s = r;
        detail::deposit_linear(out, s, mu.weight(j));
    }
    return DiscreteMeasure::normalized(g, std::move(out));
}

// ---------------------------------------------------------------------------
// Marginal generators used by tests, sweeps and the CLI.

inline DiscreteMeasure gaussian_bump(const Grid1D& g, double center, double width, double floor = 0.0) {
    std::vector<double> w(g.n());
    for (std::size_t j = 0; j < g.n(); ++j) {
        const double z = (g.node(j) - center) / width;
        w[j] = std::exp(-0.5 * z * z) + floor;
    }
    return DiscreteMeasure::normalized(g, std::move(w));
}

inline DiscreteMeasure two_bump(const Grid1D& g, double c1, double c2, double width, double mix,
                                double floor = 0.0) {
    std::vector<double> w(g.n());
    for (std::size_t j = 0; j < g.n(); ++j) {
        const double z1 = (g.node(j) - c1) / width;
        const double z2 = (g.node(j) - c2) / width;
        w[j] = mix * std::exp(-0.5 * z1 * z1) + (1.0 - mix) * std::exp(-0.5 * z2 * z2) + floor;
    }
    return DiscreteMeasure::normalized(g, std::move(w));
}

/// Seeded mixture of Gaussian bumps; every cell keeps at least `floor` mass
/// before normalization so that entropies stay finite.
template <class Rng>
DiscreteMeasure random_bump_mixture(const Grid1D& g, Rng& rng, int bumps = 3, double floor = 1e-6) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> w(g.n(), 0.0);
    for (int b = 0; b < bumps; ++b) {
        const double center = g.lo() + (0.1 + 0.8 * unit(rng)) * g.length();
        const double width = (0.05 + 0.15 * unit(rng)) * g.length();
        const double amp = 0.2 + unit(rng);
        for (std::size_t j = 0; j < g.n(); ++j) {
            const double z = (g.node(j) - center) / width;
            w[j] += amp * std::exp(-0.5 * z * z);
        }
    }
    double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x : w) x = x / total + floor;
    return DiscreteMeasure::normalized(g, std::move(w));
}

}  // namespace eotstab
