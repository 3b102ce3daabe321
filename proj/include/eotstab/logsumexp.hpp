#pragma once

#include <cmath>
#include <limits>
#include <span>

namespace eotstab {

/// Streaming log-sum-exp with max subtraction. Terms equal to -inf are
/// ignored, so zero-mass cells (log weight -inf) drop out of integrals.
class LogSumExp {
public:
    void add(double v) noexcept {
        if (v == -kInf) return;
        if (v <= max_) {
            sum_ += std::exp(v - max_);
        } else {
            sum_ = sum_ * std::exp(max_ - v) + 1.0;
            max_ = v;
        }
    }

    double value() const noexcept { return max_ == -kInf ? -kInf : max_ + std::log(sum_); }

private:
    static constexpr double kInf = std::numeric_limits<double>::infinity();
    double max_ = -kInf;
    double sum_ = 0.0;
};

inline double logsumexp(std::span<const double> v) noexcept {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = x > m ? x : m;
    if (m == -std::numeric_limits<double>::infinity()) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

/// log of a probability weight, -inf for zero mass.
inline double safe_log(double w) noexcept {
    return w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity();
}

}  // namespace eotstab
