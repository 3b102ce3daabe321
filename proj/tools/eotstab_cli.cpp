#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <utility>

#include <CLI11.hpp>

#include "eotstab/cli.hpp"

namespace {

enum Exit { kOk = 0, kAssertions = 1, kUsage = 2, kRuntime = 3 };

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Entropic multi-marginal transport: solver, stability sweeps and gradient flows"};
    app.require_subcommand(1);
    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<double> tol;
    const std::pair<const char*, const char*> commands[] = {
        {"solve", "Solve the Schrodinger system and check primal-dual agreement"},
        {"stability", "Sweep displacement paths and report potential Lipschitz ratios"},
        {"flow", "Run a Wasserstein gradient flow and check conservation and decay"},
        {"report", "Aggregate report.json files from earlier runs into one CSV"}};
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "JSON experiment config")->required();
        sub->add_option("--seed", seed, "Seed for randomized marginals (overrides the config)");
        sub->add_option("--out", out_dir, "Output directory (overrides the config)");
        sub->add_option("--tol", tol, "Tolerance for every Sinkhorn solve, including flow inner solves (overrides the config)");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    eotstab::cli::ExperimentConfig cfg;
    try {
        cfg = eotstab::cli::load_config(config_path);
        if (eotstab::cli::command_from_name(command) != cfg.command) {
            throw eotstab::ConfigError("command", "config is for '" + std::string(eotstab::cli::command_name(cfg.command)) +
                                                      "' but subcommand is '" + command + "'");
        }
        if (seed) cfg.seed = *seed;
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        if (tol) {
            if (!(*tol > 0.0)) throw eotstab::ConfigError("--tol", "must be positive");
            cfg.tolerances.solver = *tol;
            cfg.tolerances.inner = *tol;
        }
    } catch (const eotstab::ConfigError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    }

    try {
        const auto result = eotstab::cli::run(cfg);
        for (const auto& f : result.failures) {
            std::cerr << "FAILED " << f.invariant << ": measured " << f.measured << ", limit " << f.limit;
            if (!f.detail.empty()) std::cerr << " (" << f.detail << ')';
            std::cerr << '\n';
        }
        std::cout << cfg.output_dir << "/manifest.json " << (result.exit_code == 0 ? "ok" : "failed") << '\n';
        return result.exit_code == 0 ? kOk : kAssertions;
    } catch (const eotstab::ConfigError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
}
