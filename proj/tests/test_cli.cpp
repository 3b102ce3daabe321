#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>

#include <openssl/sha.h>

#include "eotstab/cli.hpp"

using namespace eotstab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = EOTSTAB_SOURCE_DIR;
const fs::path kGolden = kSource / "tests" / "golden" / "stability_reference.json";

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("eotstab_cli_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

json minimal_solve() {
    return json::parse(R"({
        "schema_version": 1, "command": "solve",
        "grid": {"lo": 0.0, "hi": 1.0, "n": 16}, "n_marginals": 2,
        "cost": {"kind": "quadratic", "weight": 2.0},
        "marginals": [{"kind": "gaussian_bump", "center": 0.4, "width": 0.1, "floor": 1e-3}, {"kind": "uniform"}]
    })");
}

std::string config_error_path(const json& j) {
    try {
        cli::parse_config(j);
    } catch (const ConfigError& e) {
        return e.path();
    }
    return "<accepted>";
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(EOTSTAB_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string sha256_hex(const std::string& data) {
    unsigned char md[SHA256_DIGEST_LENGTH];
    SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), md);
    std::ostringstream os;
    for (unsigned char c : md) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c);
    return os.str();
}

/// Ratio curves of the reference stability config computed directly from the
/// library, independent of the driver's config handling and report writing.
json stability_oracle() {
    const Grid1D g(0.0, 1.0, 64);
    std::mt19937_64 rng(20240611);
    const auto cost = build_cost(QuadraticCost::pairwise(2, 1.0), {g, g});
    const MeasureFamily mu({gaussian_bump(g, 0.35, 0.1, 1e-3), two_bump(g, 0.3, 0.7, 0.08, 0.4, 1e-3)});
    std::vector<std::vector<DiscreteMeasure>> targets;
    targets.push_back({gaussian_bump(g, 0.55, 0.12, 1e-3), gaussian_bump(g, 0.5, 0.15, 1e-3)});
    auto r0 = random_bump_mixture(g, rng, 3, 1e-6);
    auto r1 = random_bump_mixture(g, rng, 2, 1e-6);
    targets.push_back({r0, r1});
    std::vector<double> t(21);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<double>(k) / 20.0;
    json paths = json::array();
    for (const auto& nu : targets) {
        const PlanFamily plans({optimal_plan_1d(mu[0], nu[0]), optimal_plan_1d(mu[1], nu[1])});
        const auto stats = lipschitz_ratio_ck(probe_path(cost, plans, t, 1e-10), 1);
        const auto spread = ratio_spread_by_step(stats, {0.2, 0.1, 0.05});
        paths.push_back({{"max_ratio_per_step", spread.max_ratio}, {"spread", spread.spread}});
    }
    return {{"paths", paths}};
}

void expect_close(const json& a, const json& b, double rel) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double x = a[k].get<double>(), y = b[k].get<double>();
        EXPECT_NEAR(x, y, rel * std::max(1.0, std::abs(y)));
    }
}

}  // namespace

TEST(Config, UnknownKeysNameTheirPath) {
    auto j = minimal_solve();
    j["tolerence"] = 1e-9;
    EXPECT_EQ(config_error_path(j), "tolerence");
    j = minimal_solve();
    j["marginals"][0]["centre"] = 0.3;
    EXPECT_EQ(config_error_path(j), "marginals[0].centre");
    j = minimal_solve();
    j["cost"]["sigma"] = 1.0;
    EXPECT_EQ(config_error_path(j), "cost.sigma");
    j = minimal_solve();
    j["flow"] = {{"tend", 1.0}};
    EXPECT_EQ(config_error_path(j), "flow.tend");
}

TEST(Config, ValidationErrors) {
    auto j = minimal_solve();
    j["schema_version"] = 2;
    EXPECT_EQ(config_error_path(j), "schema_version");
    j = minimal_solve();
    j["tolerances"] = {{"solver", 0.0}};
    EXPECT_EQ(config_error_path(j), "tolerances.solver");
    j = minimal_solve();
    j["marginals"][1] = {{"kind", "random"}};
    EXPECT_EQ(config_error_path(j), "seed");
    j["seed"] = 5;
    EXPECT_EQ(config_error_path(j), "<accepted>");
    j = minimal_solve();
    j["marginals"].erase(1);
    EXPECT_EQ(config_error_path(j), "marginals");
    j = minimal_solve();
    j["command"] = "flow";
    j["flow"] = {{"preset", "bridge_energy"}};
    j["marginals"].erase(1);
    EXPECT_EQ(config_error_path(j), "flow.target");
    j["flow"]["preset"] = "jko";
    EXPECT_EQ(config_error_path(j), "flow.preset");
}

TEST(Config, ResolvedEchoRoundTrips) {
    auto j = minimal_solve();
    j["seed"] = 11;
    const auto c = cli::parse_config(j);
    const auto echoed = cli::to_json(c);
    EXPECT_EQ(echoed.at("tolerances").at("solver"), 1e-10);
    EXPECT_EQ(echoed.at("ceilings").at("ratio_spread"), 0.2);
    EXPECT_EQ(echoed.at("grids").size(), 2u);
    EXPECT_EQ(cli::to_json(cli::parse_config(echoed)), echoed);
}

TEST(Run, SolveZeroCost) {
    auto j = minimal_solve();
    j["cost"] = {{"kind", "zero"}};
    auto c = cli::parse_config(j);
    c.output_dir = scratch("solve_zero").string();
    const auto r = cli::run(c);
    EXPECT_EQ(r.exit_code, 0);
    const auto rep = read_json(fs::path(c.output_dir) / "report.json");
    EXPECT_EQ(rep.at("status"), "ok");
    EXPECT_NEAR(rep.at("metrics").at("dual_value").get<double>(), 0.0, 1e-14);
    EXPECT_LE(rep.at("metrics").at("final_residual").get<double>(), c.tolerances.solver);
}

TEST(Run, ManifestChecksumsMatchArtifacts) {
    auto c = cli::parse_config(minimal_solve());
    c.output_dir = scratch("manifest").string();
    cli::run(c);
    const auto m = read_json(fs::path(c.output_dir) / "manifest.json");
    EXPECT_EQ(m.at("config"), cli::to_json(c));
    ASSERT_GE(m.at("artifacts").size(), 3u);
    for (const auto& a : m.at("artifacts")) {
        const auto data = slurp(fs::path(c.output_dir) / a.at("path").get<std::string>());
        EXPECT_EQ(a.at("sha256").get<std::string>(), sha256_hex(data)) << a.at("path");
        EXPECT_EQ(a.at("bytes").get<std::size_t>(), data.size());
    }
    EXPECT_EQ(slurp(fs::path(c.output_dir) / "manifest.json").find("time"), std::string::npos);
}

TEST(Run, SameSeedIsByteIdentical) {
    auto j = minimal_solve();
    j["seed"] = 99;
    j["marginals"][1] = {{"kind", "random"}};
    auto c = cli::parse_config(j);
    c.output_dir = scratch("det_a").string();
    cli::run(c);
    const auto a = slurp(fs::path(c.output_dir) / "report.json");
    const auto ma = slurp(fs::path(c.output_dir) / "manifest.json");
    c.output_dir = scratch("det_b").string();
    cli::run(c);
    EXPECT_EQ(a, slurp(fs::path(c.output_dir) / "report.json"));
    // Manifests differ only in the echoed output directory.
    auto jb = read_json(fs::path(c.output_dir) / "manifest.json");
    auto ja = json::parse(ma);
    ja["config"].erase("output");
    jb["config"].erase("output");
    EXPECT_EQ(ja, jb);

    c.seed = 100;
    c.output_dir = scratch("det_c").string();
    cli::run(c);
    EXPECT_NE(a, slurp(fs::path(c.output_dir) / "report.json"));
}

TEST(Run, FailuresAreMachineReadable) {
    auto j = minimal_solve();
    j["ceilings"] = {{"duality_gap", 1e-300}, {"residual", 1e-300}};
    auto c = cli::parse_config(j);
    c.output_dir = scratch("fail").string();
    const auto r = cli::run(c);
    EXPECT_EQ(r.exit_code, 1);
    const auto m = read_json(fs::path(c.output_dir) / "manifest.json");
    EXPECT_EQ(m.at("status"), "failed");
    bool found = false;
    for (const auto& f : m.at("failures")) {
        if (f.at("invariant") == "solver_residual") {
            found = true;
            EXPECT_EQ(f.at("limit").get<double>(), 1e-300);
            EXPECT_GT(f.at("measured").get<double>(), 0.0);
        }
    }
    EXPECT_TRUE(found);
}

TEST(Run, StabilityMatchesGolden) {
    const auto oracle = stability_oracle();
    if (std::getenv("EOTSTAB_REGEN_GOLDEN")) {
        fs::create_directories(kGolden.parent_path());
        std::ofstream(kGolden) << std::setprecision(17) << oracle.dump(2) << '\n';
    }
    ASSERT_TRUE(fs::exists(kGolden)) << "run with EOTSTAB_REGEN_GOLDEN=1 to create " << kGolden;
    const auto golden = read_json(kGolden);
    auto c = cli::load_config(kSource / "configs" / "stability_reference.json");
    c.output_dir = scratch("stability").string();
    const auto r = cli::run(c);
    EXPECT_EQ(r.exit_code, 0);
    const auto rep = read_json(fs::path(c.output_dir) / "report.json");
    ASSERT_EQ(rep.at("paths").size(), golden.at("paths").size());
    for (std::size_t p = 0; p < golden.at("paths").size(); ++p) {
        const auto& g = golden.at("paths")[p];
        expect_close(rep.at("paths")[p].at("max_ratio_per_step"), g.at("max_ratio_per_step"), 1e-9);
        expect_close(oracle.at("paths")[p].at("max_ratio_per_step"), g.at("max_ratio_per_step"), 1e-9);
        EXPECT_NEAR(rep.at("paths")[p].at("spread").get<double>(), g.at("spread").get<double>(), 1e-9);
    }
}

TEST(Run, ReportAggregatesSummaries) {
    auto c1 = cli::parse_config(minimal_solve());
    c1.output_dir = scratch("agg_solve").string();
    cli::run(c1);
    json j = {{"schema_version", 1},
              {"command", "report"},
              {"report", {{"inputs", {c1.output_dir, c1.output_dir + "/report.json"}}}}};
    auto c = cli::parse_config(j);
    c.output_dir = scratch("agg").string();
    EXPECT_EQ(cli::run(c).exit_code, 0);
    const auto csv = slurp(fs::path(c.output_dir) / "summary.csv");
    std::istringstream is(csv);
    std::string header, row;
    std::getline(is, header);
    EXPECT_EQ(header.rfind("input,command,status", 0), 0u);
    EXPECT_NE(header.find("dual_value"), std::string::npos);
    int rows = 0;
    while (std::getline(is, row)) ++rows;
    EXPECT_EQ(rows, 2);
}

TEST(Binary, ExitCodesAndFlags) {
    const auto dir = scratch("binary");
    fs::create_directories(dir);
    const auto cfg = dir / "config.json";
    std::ofstream(cfg) << minimal_solve().dump();
    const auto log = dir / "log.txt";
    EXPECT_EQ(run_cli("solve --config " + cfg.string() + " --out " + (dir / "out").string() + " --tol 1e-11", log), 0);
    const auto m = read_json(dir / "out" / "manifest.json");
    EXPECT_EQ(m.at("config").at("tolerances").at("solver"), 1e-11);

    EXPECT_EQ(run_cli("flow --config " + cfg.string(), log), 2);
    EXPECT_NE(slurp(log).find("command"), std::string::npos);

    auto bad = minimal_solve();
    bad["grid"]["m"] = 3;
    std::ofstream(cfg) << bad.dump();
    EXPECT_EQ(run_cli("solve --config " + cfg.string(), log), 2);
    EXPECT_NE(slurp(log).find("grid.m"), std::string::npos);

    auto strict = minimal_solve();
    strict["ceilings"] = {{"residual", 1e-300}};
    std::ofstream(cfg) << strict.dump();
    EXPECT_EQ(run_cli("solve --config " + cfg.string() + " --out " + (dir / "strict").string(), log), 1);
    EXPECT_NE(slurp(log).find("solver_residual"), std::string::npos);

    EXPECT_EQ(run_cli("solve --config " + (dir / "missing.json").string(), log), 2);
}
