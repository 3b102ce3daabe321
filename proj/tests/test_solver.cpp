#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "eotstab/cost.hpp"
#include "eotstab/measure.hpp"
#include "eotstab/potential.hpp"
#include "eotstab/solver.hpp"
#include "oracles.hpp"

using namespace eotstab;

namespace {

MeasureFamily random_family(const std::vector<Grid1D>& grids, std::mt19937_64& rng) {
    std::vector<DiscreteMeasure> m;
    for (const auto& g : grids) m.push_back(random_bump_mixture(g, rng));
    return MeasureFamily(std::move(m));
}

double max_abs_diff(const PotentialFamily& a, const PotentialFamily& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < a[i].size(); ++k) d = std::max(d, std::abs(a[i][k] - b[i][k]));
    return d;
}

CostTensor tabulated(const std::vector<std::vector<double>>& C) {
    const std::vector<Grid1D> grids = {Grid1D(0.0, 1.0, C.size()), Grid1D(0.0, 1.0, C[0].size())};
    TabulatedCost t;
    for (const auto& row : C)
        for (double v : row) t.values.push_back(v);
    return build_cost(t, grids, 0);
}

}  // namespace

TEST(Solve, ZeroCost) {
    std::mt19937_64 rng(1);
    const std::vector<Grid1D> grids(3, Grid1D(0.0, 1.0, 8));
    const auto mu = random_family(grids, rng);
    const auto cost = build_cost(ZeroCost{}, grids);
    const auto rep = solve(cost, mu);
    EXPECT_LE(rep.final_residual, 1e-10);
    for (std::size_t i = 0; i < 3; ++i)
        for (double v : rep.potentials[i]) EXPECT_NEAR(v, 0.0, 1e-12);
    EXPECT_NEAR(rep.primal_value, 0.0, 1e-12);
    EXPECT_NEAR(rep.dual_value, 0.0, 1e-12);
    const auto g = primal_plan(rep, mu, cost);
    std::size_t flat = 0;
    for (std::size_t a = 0; a < 8; ++a)
        for (std::size_t b = 0; b < 8; ++b)
            for (std::size_t c = 0; c < 8; ++c, ++flat)
                EXPECT_NEAR(g.weights[flat], mu[0].weight(a) * mu[1].weight(b) * mu[2].weight(c), 1e-15);
}

TEST(Solve, SeparableClosedForm) {
    std::mt19937_64 rng(2);
    const std::vector<Grid1D> grids = {Grid1D(0.0, 1.0, 24), Grid1D(-1.0, 1.0, 20)};
    SeparableCost s;
    s.terms = {{0.8, 5.0, 0.1, 0.4, -0.3, 0.2}, {0.0, 0.0, 0.0, 1.1, 0.7, -0.5}};
    const auto cost = build_cost(s, grids);
    const auto mu = random_family(grids, rng);
    const auto rep = solve(cost, mu);
    std::vector<std::vector<double>> f(2);
    double expected = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t k = 0; k < grids[i].n(); ++k) f[i].push_back(s.terms[i](grids[i].node(k)));
        expected += mu[i].integrate(f[i]);
    }
    const auto diff = rep.potentials - PotentialFamily(grids, f);
    EXPECT_LE(quotient_ck_norm(diff, 0), 1e-10);
    EXPECT_NEAR(rep.dual_value, expected, 1e-10);
    EXPECT_NEAR(rep.primal_value, expected, 1e-10);
    const auto g = primal_plan(rep, mu, cost);
    for (std::size_t a = 0; a < 24; ++a)
        for (std::size_t b = 0; b < 20; ++b) EXPECT_NEAR(g.weights[a * 20 + b], mu[0].weight(a) * mu[1].weight(b), 1e-10);

    const auto lc = potential_lipschitz_check(rep, cost);
    EXPECT_TRUE(lc.ok);
    for (std::size_t i = 0; i < 2; ++i) {
        double slope = 0.0;
        for (std::size_t k = 0; k + 1 < f[i].size(); ++k)
            slope = std::max(slope, std::abs(f[i][k + 1] - f[i][k]) / grids[i].spacing());
        EXPECT_NEAR(lc.slopes[i], slope, 1e-8);
    }
}

TEST(Solve, TwoByTwoMatchesDualOracle) {
    const std::vector<std::vector<double>> C = {{0.0, 1.0}, {1.0, 0.0}};
    const auto cost = tabulated(C);
    const MeasureFamily mu({DiscreteMeasure::uniform(cost.grid(0)), DiscreteMeasure::uniform(cost.grid(1))});
    const auto rep = solve(cost, mu);
    const double oracle = oracle::entropic_dual_newton({0.5, 0.5}, {0.5, 0.5}, C);
    EXPECT_NEAR(rep.dual_value, oracle, 1e-8);
    EXPECT_NEAR(rep.primal_value, oracle, 1e-8);
}

TEST(Solve, RegressionCorpusMatchesDualOracle) {
    std::ifstream in(std::string(EOTSTAB_SOURCE_DIR) + "/tests/data/regression_corpus.json");
    ASSERT_TRUE(in.good());
    const auto corpus = nlohmann::json::parse(in);
    for (const auto& inst : corpus.at("instances")) {
        const auto a = inst.at("a").get<std::vector<double>>();
        const auto b = inst.at("b").get<std::vector<double>>();
        const auto C = inst.at("cost").get<std::vector<std::vector<double>>>();
        const auto cost = tabulated(C);
        const MeasureFamily mu({DiscreteMeasure::normalized(cost.grid(0), a), DiscreteMeasure::normalized(cost.grid(1), b)});
        const auto rep = solve(cost, mu);
        const double oracle = oracle::entropic_dual_newton({mu[0].weights().begin(), mu[0].weights().end()},
                                                         {mu[1].weights().begin(), mu[1].weights().end()}, C);
        EXPECT_NEAR(rep.dual_value, oracle, 1e-8) << inst.at("name");
    }
}

TEST(Solve, RandomInstancesPrimalDualAndMarginals) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 4; ++trial) {
        const bool three = trial % 2 == 1;
        const std::vector<Grid1D> grids(three ? 3 : 2, Grid1D(0.0, 1.0, three ? 12 : 24));
        const auto cost = build_cost(trial < 2 ? CostDescriptor{QuadraticCost::pairwise(grids.size())}
                                               : CostDescriptor{GaussianCost{1.5, 0.3}},
                                     grids);
        const auto mu = random_family(grids, rng);
        const auto rep = solve(cost, mu);
        EXPECT_LE(rep.final_residual, 1e-10);
        EXPECT_NEAR(rep.primal_value, rep.dual_value, 1e-8);
        const auto g = primal_plan(rep, mu, cost);
        EXPECT_NEAR(g.total(), 1.0, 1e-10);
        // Independent axis sums.
        const std::size_t n = grids[0].n();
        for (std::size_t axis = 0; axis < grids.size(); ++axis) {
            std::vector<double> m(n, 0.0);
            for (std::size_t flat = 0; flat < g.weights.size(); ++flat) {
                std::size_t rest = flat;
                std::size_t idx = 0;
                for (std::size_t ax = grids.size(); ax-- > 0;) {
                    if (ax == axis) idx = rest % n;
                    rest /= n;
                }
                m[idx] += g.weights[flat];
            }
            for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(m[k], mu[axis].weight(k), 1e-9);
        }
        EXPECT_LE(rep.marginal_error, 1e-9);
    }
}

TEST(Solve, WeakDuality) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> z(0.0, 0.5);
    const std::vector<Grid1D> grids(2, Grid1D(0.0, 1.0, 16));
    const auto cost = build_cost(QuadraticCost::pairwise(2), grids);
    for (int trial = 0; trial < 10; ++trial) {
        const auto mu = random_family(grids, rng);
        GridFunctions phi(2, std::vector<double>(16));
        for (auto& f : phi)
            for (double& v : f) v = z(rng);
        const double dual = eot_value_dual(PotentialFamily(grids, phi), mu, cost);
        // Feasible couplings: product plan and the solved plan.
        Coupling prod{grids, std::vector<double>(256)};
        for (std::size_t a = 0; a < 16; ++a)
            for (std::size_t b = 0; b < 16; ++b) prod.weights[a * 16 + b] = mu[0].weight(a) * mu[1].weight(b);
        EXPECT_LE(dual, eot_value_primal(prod, mu, cost) + 1e-12);
        const auto rep = solve(cost, mu);
        EXPECT_LE(dual, rep.primal_value + 1e-12);
    }
}

TEST(Solve, GaugeDeterminismFromRandomStart) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> z(0.0, 2.0);
    const std::vector<Grid1D> grids(3, Grid1D(0.0, 1.0, 10));
    const auto cost = build_cost(GaussianCost{2.0, 0.4}, grids);
    const auto mu = random_family(grids, rng);
    const auto a = solve(cost, mu);
    GridFunctions init(3, std::vector<double>(10));
    for (auto& f : init)
        for (double& v : f) v = z(rng);
    SolveOptions opt;
    opt.init = PotentialFamily(grids, init);
    const auto b = solve(cost, mu, opt);
    EXPECT_LE(max_abs_diff(a.potentials, b.potentials), 1e-9);
    EXPECT_EQ(a.potentials.gauge(), Gauge::canonical);
    double m0 = mu[0].integrate(a.potentials[0]);
    for (std::size_t i = 1; i < 3; ++i) EXPECT_NEAR(mu[i].integrate(a.potentials[i]), m0, 1e-12);
}

TEST(Solve, NonConvergenceCarriesResidual) {
    std::mt19937_64 rng(7);
    const std::vector<Grid1D> grids(2, Grid1D(0.0, 1.0, 32));
    const auto cost = build_cost(QuadraticCost::pairwise(2, 20.0), grids);
    const auto mu = random_family(grids, rng);
    SolveOptions opt;
    opt.max_iter = 2;
    try {
        solve(cost, mu, opt);
        FAIL();
    } catch (const NonConvergence& e) {
        EXPECT_EQ(e.iterations(), 2);
        EXPECT_GT(e.residual(), opt.tol);
    }
    opt.tol = -1.0;
    EXPECT_THROW(solve(cost, mu, opt), InvariantError);
}

TEST(Solve, ZeroMassCellsKeepPotentialsDefined) {
    const std::vector<Grid1D> grids(2, Grid1D(0.0, 1.0, 12));
    std::vector<double> w(12, 0.0);
    w[2] = 0.3;
    w[3] = 0.2;
    w[8] = 0.5;
    const MeasureFamily mu({DiscreteMeasure(grids[0], w), DiscreteMeasure::uniform(grids[1])});
    const auto cost = build_cost(QuadraticCost::pairwise(2), grids);
    const auto rep = solve(cost, mu);
    EXPECT_LE(rep.final_residual, 1e-10);
    for (double v : rep.potentials[0]) EXPECT_TRUE(std::isfinite(v));
    // Off-support values equal -Tbar there.
    const auto tbar = apply_Tbar(rep.potentials, mu, cost);
    for (std::size_t k = 0; k < 12; ++k) EXPECT_NEAR(rep.potentials[0][k], -tbar[0][k], 1e-9);
    EXPECT_NEAR(rep.primal_value, rep.dual_value, 1e-8);
    EXPECT_TRUE(potential_lipschitz_check(rep, cost).ok);
}

TEST(Solve, QuadraticLipschitzAndBoundedness) {
    std::mt19937_64 rng(8);
    const std::vector<Grid1D> grids(2, Grid1D(0.0, 1.0, 48));
    const auto cost = build_cost(QuadraticCost::pairwise(2), grids);
    const double bound = 2.0 * (cost.ck_bound(1) + std::log(1.0));
    for (int trial = 0; trial < 8; ++trial) {
        const auto mu = random_family(grids, rng);
        const auto rep = solve(cost, mu);
        const auto lc = potential_lipschitz_check(rep, cost);
        EXPECT_TRUE(lc.ok) << lc.slopes[0] << ' ' << lc.slopes[1];
        for (double s : lc.slopes) EXPECT_LE(s, 2.0 + 1e-9);
        EXPECT_LE(quotient_ck_norm(rep.potentials, 1), bound);
    }
}
