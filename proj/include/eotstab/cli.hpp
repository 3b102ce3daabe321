#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "eotstab/analysis.hpp"
#include "eotstab/cost.hpp"
#include "eotstab/cost_io.hpp"
#include "eotstab/errors.hpp"
#include "eotstab/flow.hpp"
#include "eotstab/measure.hpp"
#include "eotstab/measure_io.hpp"
#include "eotstab/potential_io.hpp"
#include "eotstab/solver.hpp"

namespace eotstab::cli {

inline constexpr int kSchemaVersion = 1;

enum class Command { solve, stability, flow, report };

inline const char* command_name(Command c) {
    switch (c) {
        case Command::solve: return "solve";
        case Command::stability: return "stability";
        case Command::flow: return "flow";
        case Command::report: return "report";
    }
    return "unknown";
}

inline Command command_from_name(const std::string& s, const std::string& path = "command") {
    for (auto c : {Command::solve, Command::stability, Command::flow, Command::report})
        if (s == command_name(c)) return c;
    throw ConfigError(path, "unknown command '" + s + "'");
}

/// uniform | gaussian_bump | two_bump | csv | random (seeded mixture of bumps).
struct MarginalSpec {
    std::string kind = "uniform";
    double center = 0.5;
    double width = 0.1;
    double c1 = 0.3;
    double c2 = 0.7;
    double mix = 0.5;
    double floor = 0.0;
    int bumps = 3;
    std::string csv;
};

/// translation (integer cell shifts) | optimal (monotone plans to target marginals).
struct PathSpec {
    std::string kind = "translation";
    std::vector<long> cells;
    std::vector<MarginalSpec> targets;
};

struct Tolerances {
    double solver = 1e-10;
    double inner = 1e-9;
};

struct Ceilings {
    double residual = 1e-10;
    double duality_gap = 1e-8;
    double marginal_error = 1e-9;
    double ratio_spread = 0.2;
    double w2_equilibrium = 1e-3;
    double r_squared_min = 0.99;
    double mass_drift = 1e-13;
};

struct StabilityConfig {
    std::vector<PathSpec> paths;
    std::size_t samples = 21;
    std::vector<double> steps{0.2, 0.1, 0.05};
    int k = 1;
};

struct FlowConfig {
    FlowPreset preset = FlowPreset::multi_species;
    double t_end = 1.0;
    double dt_max = 1e-2;
    std::size_t record_every = 10;
    std::optional<MarginalSpec> target;
};

struct ReportConfig {
    std::vector<std::string> inputs;
};

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    Command command = Command::solve;
    std::optional<std::uint64_t> seed;
    std::string output_dir = "out";
    std::vector<Grid1D> grids;
    nlohmann::json cost = {{"kind", "zero"}};
    bool normalize_cost = false;
    std::vector<MarginalSpec> marginals;
    Tolerances tolerances;
    Ceilings ceilings;
    StabilityConfig stability;
    FlowConfig flow;
    ReportConfig report;
    std::filesystem::path base_dir = ".";  // relative csv paths resolve here
};

// ---------------------------------------------------------------------------
// Parsing.

namespace detail {

using config::check_keys;
using config::get_or;

inline MarginalSpec parse_marginal(const nlohmann::json& j, const std::string& path) {
    MarginalSpec m;
    m.kind = config::require<std::string>(j, "kind", path);
    if (m.kind == "uniform") {
        check_keys(j, {"kind"}, path);
    } else if (m.kind == "gaussian_bump") {
        check_keys(j, {"kind", "center", "width", "floor"}, path);
        m.center = get_or(j, "center", m.center, path);
        m.width = get_or(j, "width", m.width, path);
        m.floor = get_or(j, "floor", m.floor, path);
    } else if (m.kind == "two_bump") {
        check_keys(j, {"kind", "c1", "c2", "width", "mix", "floor"}, path);
        m.c1 = get_or(j, "c1", m.c1, path);
        m.c2 = get_or(j, "c2", m.c2, path);
        m.width = get_or(j, "width", m.width, path);
        m.mix = get_or(j, "mix", m.mix, path);
        m.floor = get_or(j, "floor", m.floor, path);
        if (!(m.mix >= 0.0 && m.mix <= 1.0)) throw ConfigError(path + ".mix", "must lie in [0, 1]");
    } else if (m.kind == "csv") {
        check_keys(j, {"kind", "path"}, path);
        m.csv = config::require<std::string>(j, "path", path);
    } else if (m.kind == "random") {
        check_keys(j, {"kind", "bumps", "floor"}, path);
        m.bumps = get_or(j, "bumps", m.bumps, path);
        m.floor = get_or(j, "floor", 1e-6, path);
        if (m.bumps < 1) throw ConfigError(path + ".bumps", "must be at least 1");
    } else {
        throw ConfigError(path + ".kind", "unknown marginal descriptor '" + m.kind + "'");
    }
    if (!(m.width > 0.0)) throw ConfigError(path + ".width", "must be positive");
    if (!(m.floor >= 0.0)) throw ConfigError(path + ".floor", "must be nonnegative");
    return m;
}

inline nlohmann::json marginal_json(const MarginalSpec& m) {
    nlohmann::json j{{"kind", m.kind}};
    if (m.kind == "gaussian_bump") {
        j["center"] = m.center;
        j["width"] = m.width;
        j["floor"] = m.floor;
    } else if (m.kind == "two_bump") {
        j["c1"] = m.c1;
        j["c2"] = m.c2;
        j["width"] = m.width;
        j["mix"] = m.mix;
        j["floor"] = m.floor;
    } else if (m.kind == "csv") {
        j["path"] = m.csv;
    } else if (m.kind == "random") {
        j["bumps"] = m.bumps;
        j["floor"] = m.floor;
    }
    return j;
}

inline Grid1D parse_grid(const nlohmann::json& j, const std::string& path) {
    check_keys(j, {"lo", "hi", "n"}, path);
    const double lo = get_or(j, "lo", 0.0, path), hi = get_or(j, "hi", 1.0, path);
    const auto n = config::require<std::size_t>(j, "n", path);
    if (!(lo < hi)) throw ConfigError(path, "need lo < hi");
    if (n < 2) throw ConfigError(path + ".n", "need at least two nodes");
    return Grid1D(lo, hi, n);
}

inline void positive(double v, const std::string& path) {
    if (!(v > 0.0)) throw ConfigError(path, "must be positive");
}

}  // namespace detail

/// Validates a config document; unknown keys anywhere are errors.
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
    using detail::check_keys;
    using detail::get_or;
    check_keys(j,
               {"schema_version", "command", "seed", "output", "grid", "n_marginals", "grids", "cost",
                "normalize_cost", "marginals", "tolerances", "ceilings", "stability", "flow", "report"},
               "");
    ExperimentConfig c;
    c.base_dir = base_dir;
    c.schema_version = config::require<int>(j, "schema_version", "");
    if (c.schema_version != kSchemaVersion) {
        throw ConfigError("schema_version", "unsupported version " + std::to_string(c.schema_version) + " (expected " +
                                                std::to_string(kSchemaVersion) + ")");
    }
    c.command = command_from_name(config::require<std::string>(j, "command", ""));
    if (j.contains("seed")) c.seed = get_or<std::uint64_t>(j, "seed", 0, "");
    c.output_dir = get_or<std::string>(j, "output", c.output_dir, "");

    if (c.command != Command::report) {
        if (j.contains("grids")) {
            if (j.contains("grid") || j.contains("n_marginals")) {
                throw ConfigError("grids", "give either 'grids' or 'grid' with 'n_marginals'");
            }
            const auto& gs = j.at("grids");
            if (!gs.is_array()) throw ConfigError("grids", "expected an array");
            for (std::size_t i = 0; i < gs.size(); ++i)
                c.grids.push_back(detail::parse_grid(gs[i], "grids[" + std::to_string(i) + "]"));
        } else {
            if (!j.contains("grid")) throw ConfigError("grid", "missing required field");
            const auto g = detail::parse_grid(j.at("grid"), "grid");
            const auto N = get_or<std::size_t>(j, "n_marginals", 2, "");
            c.grids.assign(N, g);
        }
        if (c.grids.size() < 2 || c.grids.size() > kMaxMarginals) {
            throw ConfigError("grids", "need between 2 and " + std::to_string(kMaxMarginals) + " marginals");
        }
        if (!j.contains("cost")) throw ConfigError("cost", "missing required field");
        c.cost = j.at("cost");
        // Validates the descriptor now so that errors carry the field path.
        (void)cost_descriptor_from_json(c.cost, c.grids.size(), "cost", nullptr);
        c.normalize_cost = get_or(j, "normalize_cost", false, "");
        if (j.contains("marginals")) {
            const auto& ms = j.at("marginals");
            if (!ms.is_array()) throw ConfigError("marginals", "expected an array");
            for (std::size_t i = 0; i < ms.size(); ++i)
                c.marginals.push_back(detail::parse_marginal(ms[i], "marginals[" + std::to_string(i) + "]"));
        }
    }

    if (j.contains("tolerances")) {
        const auto& t = j.at("tolerances");
        check_keys(t, {"solver", "inner"}, "tolerances");
        c.tolerances.solver = get_or(t, "solver", c.tolerances.solver, "tolerances");
        c.tolerances.inner = get_or(t, "inner", c.tolerances.inner, "tolerances");
    }
    detail::positive(c.tolerances.solver, "tolerances.solver");
    detail::positive(c.tolerances.inner, "tolerances.inner");

    if (j.contains("ceilings")) {
        const auto& t = j.at("ceilings");
        check_keys(t,
                   {"residual", "duality_gap", "marginal_error", "ratio_spread", "w2_equilibrium", "r_squared_min",
                    "mass_drift"},
                   "ceilings");
        auto& e = c.ceilings;
        e.residual = get_or(t, "residual", e.residual, "ceilings");
        e.duality_gap = get_or(t, "duality_gap", e.duality_gap, "ceilings");
        e.marginal_error = get_or(t, "marginal_error", e.marginal_error, "ceilings");
        e.ratio_spread = get_or(t, "ratio_spread", e.ratio_spread, "ceilings");
        e.w2_equilibrium = get_or(t, "w2_equilibrium", e.w2_equilibrium, "ceilings");
        e.r_squared_min = get_or(t, "r_squared_min", e.r_squared_min, "ceilings");
        e.mass_drift = get_or(t, "mass_drift", e.mass_drift, "ceilings");
    }
    for (auto [v, name] : {std::pair{c.ceilings.residual, "residual"}, {c.ceilings.duality_gap, "duality_gap"},
                           {c.ceilings.marginal_error, "marginal_error"}, {c.ceilings.ratio_spread, "ratio_spread"},
                           {c.ceilings.w2_equilibrium, "w2_equilibrium"}, {c.ceilings.r_squared_min, "r_squared_min"},
                           {c.ceilings.mass_drift, "mass_drift"}})
        detail::positive(v, std::string("ceilings.") + name);

    if (j.contains("stability")) {
        const auto& s = j.at("stability");
        check_keys(s, {"paths", "samples", "steps", "k"}, "stability");
        c.stability.samples = get_or(s, "samples", c.stability.samples, "stability");
        c.stability.steps = get_or(s, "steps", c.stability.steps, "stability");
        c.stability.k = get_or(s, "k", c.stability.k, "stability");
        if (c.stability.samples < 2) throw ConfigError("stability.samples", "need at least two samples");
        if (c.stability.k < 0 || c.stability.k > kMaxDerivativeOrder - 1) {
            throw ConfigError("stability.k", "must be in 0.." + std::to_string(kMaxDerivativeOrder - 1));
        }
        for (double st : c.stability.steps) detail::positive(st, "stability.steps");
        if (s.contains("paths")) {
            const auto& ps = s.at("paths");
            if (!ps.is_array()) throw ConfigError("stability.paths", "expected an array");
            for (std::size_t i = 0; i < ps.size(); ++i) {
                const std::string pp = "stability.paths[" + std::to_string(i) + "]";
                PathSpec p;
                p.kind = config::require<std::string>(ps[i], "kind", pp);
                if (p.kind == "translation") {
                    check_keys(ps[i], {"kind", "cells"}, pp);
                    p.cells = config::require<std::vector<long>>(ps[i], "cells", pp);
                    if (p.cells.size() != c.grids.size()) throw ConfigError(pp + ".cells", "need one shift per marginal");
                } else if (p.kind == "optimal") {
                    check_keys(ps[i], {"kind", "targets"}, pp);
                    const auto& ts = ps[i].contains("targets") ? ps[i].at("targets") : nlohmann::json::array();
                    if (!ts.is_array() || ts.size() != c.grids.size()) {
                        throw ConfigError(pp + ".targets", "need one target per marginal");
                    }
                    for (std::size_t k = 0; k < ts.size(); ++k)
                        p.targets.push_back(detail::parse_marginal(ts[k], pp + ".targets[" + std::to_string(k) + "]"));
                } else {
                    throw ConfigError(pp + ".kind", "unknown path kind '" + p.kind + "'");
                }
                c.stability.paths.push_back(std::move(p));
            }
        }
    }

    if (j.contains("flow")) {
        const auto& f = j.at("flow");
        check_keys(f, {"preset", "t_end", "dt_max", "record_every", "target"}, "flow");
        if (f.contains("preset")) {
            try {
                c.flow.preset = preset_from_name(get_or<std::string>(f, "preset", "", "flow"));
            } catch (const ConfigError& e) {
                throw ConfigError("flow.preset", e.what());
            }
        }
        c.flow.t_end = get_or(f, "t_end", c.flow.t_end, "flow");
        c.flow.dt_max = get_or(f, "dt_max", c.flow.dt_max, "flow");
        c.flow.record_every = get_or(f, "record_every", c.flow.record_every, "flow");
        detail::positive(c.flow.t_end, "flow.t_end");
        detail::positive(c.flow.dt_max, "flow.dt_max");
        if (c.flow.record_every == 0) throw ConfigError("flow.record_every", "must be positive");
        if (f.contains("target")) c.flow.target = detail::parse_marginal(f.at("target"), "flow.target");
    }

    if (j.contains("report")) {
        const auto& r = j.at("report");
        check_keys(r, {"inputs"}, "report");
        c.report.inputs = get_or(r, "inputs", c.report.inputs, "report");
    }

    // Command-specific requirements.
    const std::size_t N = c.grids.size();
    auto need_marginals = [&](std::size_t count) {
        if (c.marginals.size() != count) {
            throw ConfigError("marginals", "expected " + std::to_string(count) + " descriptors, got " +
                                               std::to_string(c.marginals.size()));
        }
    };
    switch (c.command) {
        case Command::solve: need_marginals(N); break;
        case Command::stability:
            need_marginals(N);
            if (c.stability.paths.empty()) throw ConfigError("stability.paths", "need at least one path");
            break;
        case Command::flow:
            if (single_species(c.flow.preset)) {
                if (N != 2) throw ConfigError("grids", "this flow preset needs exactly two grids");
                need_marginals(1);
                if (!c.flow.target) throw ConfigError("flow.target", "required by preset " + std::string(preset_name(c.flow.preset)));
            } else {
                need_marginals(N);
            }
            break;
        case Command::report:
            if (c.report.inputs.empty()) throw ConfigError("report.inputs", "need at least one input");
            break;
    }
    bool random = false;
    for (const auto& m : c.marginals) random = random || m.kind == "random";
    for (const auto& p : c.stability.paths)
        for (const auto& m : p.targets) random = random || m.kind == "random";
    if (c.flow.target) random = random || c.flow.target->kind == "random";
    if (random && !c.seed) throw ConfigError("seed", "required when a random marginal is requested");
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("--config", "cannot open '" + file.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(j, file.has_parent_path() ? file.parent_path() : std::filesystem::path("."));
}

/// The fully resolved config, defaults included, as echoed in the manifest.
inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    j["command"] = command_name(c.command);
    j["seed"] = c.seed ? nlohmann::json(*c.seed) : nlohmann::json(nullptr);
    j["output"] = c.output_dir;
    if (c.command != Command::report) {
        nlohmann::json gs = nlohmann::json::array();
        for (const auto& g : c.grids) gs.push_back(eotstab::to_json(g));
        j["grids"] = gs;
        j["cost"] = c.cost;
        j["normalize_cost"] = c.normalize_cost;
        nlohmann::json ms = nlohmann::json::array();
        for (const auto& m : c.marginals) ms.push_back(detail::marginal_json(m));
        j["marginals"] = ms;
    }
    j["tolerances"] = {{"solver", c.tolerances.solver}, {"inner", c.tolerances.inner}};
    const auto& e = c.ceilings;
    j["ceilings"] = {{"residual", e.residual},         {"duality_gap", e.duality_gap},
                     {"marginal_error", e.marginal_error}, {"ratio_spread", e.ratio_spread},
                     {"w2_equilibrium", e.w2_equilibrium}, {"r_squared_min", e.r_squared_min},
                     {"mass_drift", e.mass_drift}};
    if (c.command == Command::stability) {
        nlohmann::json ps = nlohmann::json::array();
        for (const auto& p : c.stability.paths) {
            nlohmann::json pj{{"kind", p.kind}};
            if (p.kind == "translation") pj["cells"] = p.cells;
            nlohmann::json ts = nlohmann::json::array();
            for (const auto& t : p.targets) ts.push_back(detail::marginal_json(t));
            if (p.kind == "optimal") pj["targets"] = ts;
            ps.push_back(pj);
        }
        j["stability"] = {{"paths", ps}, {"samples", c.stability.samples}, {"steps", c.stability.steps},
                          {"k", c.stability.k}};
    }
    if (c.command == Command::flow) {
        j["flow"] = {{"preset", preset_name(c.flow.preset)}, {"t_end", c.flow.t_end}, {"dt_max", c.flow.dt_max},
                     {"record_every", c.flow.record_every}};
        if (c.flow.target) j["flow"]["target"] = detail::marginal_json(*c.flow.target);
    }
    if (c.command == Command::report) j["report"] = {{"inputs", c.report.inputs}};
    return j;
}

// ---------------------------------------------------------------------------
// Building inputs.

inline DiscreteMeasure build_marginal(const MarginalSpec& m, const Grid1D& g, std::mt19937_64& rng,
                                      const std::filesystem::path& base_dir) {
    if (m.kind == "uniform") return DiscreteMeasure::uniform(g);
    if (m.kind == "gaussian_bump") return gaussian_bump(g, m.center, m.width, m.floor);
    if (m.kind == "two_bump") return two_bump(g, m.c1, m.c2, m.width, m.mix, m.floor);
    if (m.kind == "random") return random_bump_mixture(g, rng, m.bumps, m.floor);
    std::filesystem::path p(m.csv);
    if (p.is_relative()) p = base_dir / p;
    std::ifstream in(p);
    if (!in) throw ConfigError("marginals", "cannot open '" + p.string() + "'");
    auto mu = read_measure_csv(in);
    if (!(mu.grid() == g) && !(mu.grid().same_interval(g) && mu.size() == g.n())) {
        throw DomainMismatch("marginal csv '" + p.string() + "' does not match the configured grid");
    }
    return DiscreteMeasure(g, std::vector<double>(mu.weights().begin(), mu.weights().end()));
}

inline CostTensor build_config_cost(const ExperimentConfig& c) {
    auto cost = build_cost(cost_descriptor_from_json(c.cost, c.grids.size(), "cost", &c.grids), c.grids);
    if (c.normalize_cost) cost = normalize_cost(cost).cost;
    return cost;
}

// ---------------------------------------------------------------------------
// Running.

struct Failure {
    std::string invariant;
    double measured = 0.0;
    double limit = 0.0;
    std::string detail;
};

struct RunResult {
    int exit_code = 0;  // 0 ok, 1 assertion failures
    std::vector<Failure> failures;
    std::vector<std::string> artifacts;  // relative to the output directory
    nlohmann::json report;
};

namespace detail {

inline std::string sha256_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InvariantError("sha256: cannot open '" + p.string() + "'");
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 14];
    while (in) {
        in.read(buf, sizeof buf);
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

/// Collects artifacts and failures while a command runs.
class Session {
public:
    explicit Session(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

    std::ofstream open(const std::string& name) {
        artifacts_.push_back(name);
        std::ofstream os(dir_ / name, std::ios::binary);
        if (!os) throw InvariantError("cannot write '" + (dir_ / name).string() + "'");
        os << std::setprecision(17);
        return os;
    }

    void write_json(const std::string& name, const nlohmann::json& j) {
        auto os = open(name);
        os << j.dump(2) << '\n';
    }

    /// Records a failure unless measured <= limit.
    void at_most(const std::string& invariant, double measured, double limit, const std::string& detail = "") {
        if (!(measured <= limit)) failures_.push_back({invariant, measured, limit, detail});
    }
    void at_least(const std::string& invariant, double measured, double limit, const std::string& detail = "") {
        if (!(measured >= limit)) failures_.push_back({invariant, measured, limit, detail});
    }

    const std::filesystem::path& dir() const { return dir_; }
    std::vector<std::string>& artifacts() { return artifacts_; }
    std::vector<Failure>& failures() { return failures_; }

private:
    std::filesystem::path dir_;
    std::vector<std::string> artifacts_;
    std::vector<Failure> failures_;
};

inline nlohmann::json failure_json(const Failure& f) {
    return {{"invariant", f.invariant}, {"measured", f.measured}, {"limit", f.limit}, {"detail", f.detail}};
}

inline std::vector<DiscreteMeasure> build_marginals(const ExperimentConfig& c, const std::vector<MarginalSpec>& specs,
                                                    std::mt19937_64& rng) {
    std::vector<DiscreteMeasure> out;
    for (std::size_t i = 0; i < specs.size(); ++i) out.push_back(build_marginal(specs[i], c.grids[i], rng, c.base_dir));
    return out;
}

inline nlohmann::json run_solve(const ExperimentConfig& c, Session& s) {
    std::mt19937_64 rng(c.seed.value_or(0));
    const auto cost = build_config_cost(c);
    const MeasureFamily mu(build_marginals(c, c.marginals, rng));
    SolveOptions opt;
    opt.tol = c.tolerances.solver;
    const auto rep = solve(cost, mu, opt);
    const auto lip = potential_lipschitz_check(rep, cost);
    const double gap = std::abs(rep.primal_value - rep.dual_value);
    s.at_most("solver_residual", rep.final_residual, c.ceilings.residual);
    s.at_most("duality_gap", gap, c.ceilings.duality_gap);
    s.at_most("marginal_error", rep.marginal_error, c.ceilings.marginal_error);
    for (std::size_t i = 0; i < lip.slopes.size(); ++i) {
        s.at_most("potential_lipschitz", lip.slopes[i], lip.bounds[i] * (1.0 + 1e-9) + 1e-9,
                  "marginal " + std::to_string(i));
    }
    {
        auto os = s.open("potentials.csv");
        write_csv(os, rep.potentials);
    }
    s.write_json("potentials.json", sidecar_json(rep.potentials));
    return {{"iterations", rep.iterations},     {"final_residual", rep.final_residual},
            {"primal_value", rep.primal_value}, {"dual_value", rep.dual_value},
            {"duality_gap", gap},               {"marginal_error", rep.marginal_error},
            {"lipschitz_ok", lip.ok ? 1 : 0}};
}

inline nlohmann::json run_stability(const ExperimentConfig& c, Session& s, nlohmann::json& extra) {
    std::mt19937_64 rng(c.seed.value_or(0));
    const auto cost = build_config_cost(c);
    const MeasureFamily mu(build_marginals(c, c.marginals, rng));
    std::vector<double> t(c.stability.samples);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<double>(k) / static_cast<double>(t.size() - 1);
    auto os = s.open("ratios.csv");
    os << "path,t,s,ratio\n";
    nlohmann::json paths = nlohmann::json::array();
    double worst_spread = 0.0, worst_ratio = 0.0;
    for (std::size_t p = 0; p < c.stability.paths.size(); ++p) {
        const auto& spec = c.stability.paths[p];
        std::vector<TransportPlan> plans;
        if (spec.kind == "translation") {
            for (std::size_t i = 0; i < mu.size(); ++i) plans.push_back(translation_plan(mu[i], spec.cells[i]));
        } else {
            const auto nu = build_marginals(c, spec.targets, rng);
            for (std::size_t i = 0; i < mu.size(); ++i) plans.push_back(optimal_plan_1d(mu[i], nu[i]));
        }
        const auto probe = probe_path(cost, PlanFamily(std::move(plans)), t, c.tolerances.solver);
        const auto stats = lipschitz_ratio_ck(probe, c.stability.k);
        const auto spread = ratio_spread_by_step(stats, c.stability.steps);
        for (const auto& r : stats.samples) os << p << ',' << r.t << ',' << r.s << ',' << r.ratio << '\n';
        const std::string tag = "path " + std::to_string(p);
        s.at_most("ratio_spread", spread.spread, c.ceilings.ratio_spread, tag);
        if (!std::isfinite(stats.max)) s.at_most("ratio_finite", stats.max, 0.0, tag);
        worst_spread = std::max(worst_spread, spread.spread);
        worst_ratio = std::max(worst_ratio, stats.max);
        paths.push_back({{"kind", spec.kind},
                         {"plan_cost", probe.plan_cost},
                         {"max_ratio", stats.max},
                         {"median_ratio", stats.median},
                         {"steps", spread.steps},
                         {"max_ratio_per_step", spread.max_ratio},
                         {"spread", spread.spread}});
    }
    extra["paths"] = paths;
    return {{"paths", c.stability.paths.size()}, {"max_spread", worst_spread}, {"max_ratio", worst_ratio}};
}

inline double species_mean(const DiscreteMeasure& m) {
    double s = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) s += m.weight(k) * m.grid().node(k);
    return s;
}

inline double species_variance(const DiscreteMeasure& m) {
    const double mean = species_mean(m);
    double s = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) s += m.weight(k) * (m.grid().node(k) - mean) * (m.grid().node(k) - mean);
    return s;
}

inline nlohmann::json run_flow_command(const ExperimentConfig& c, Session& s) {
    std::mt19937_64 rng(c.seed.value_or(0));
    const auto cost = build_config_cost(c);
    const auto init = build_marginals(c, c.marginals, rng);
    std::optional<DiscreteMeasure> target;
    if (c.flow.target) target = build_marginal(*c.flow.target, c.grids[1], rng, c.base_dir);
    auto spec = make_flow_spec(c.flow.preset, cost, target);
    spec.t_end = c.flow.t_end;
    spec.dt_max = c.flow.dt_max;
    spec.record_every = c.flow.record_every;
    spec.inner_tol = c.tolerances.inner;
    spec.abort_on_energy_increase = false;

    // Reference state the run is measured against, when one is known in closed form.
    std::optional<std::vector<DiscreteMeasure>> reference;
    bool equilibrium = false;
    if (c.flow.preset == FlowPreset::multi_species && std::abs(log_partition(cost)) <= 1e-10) {
        reference = equilibrium_multispecies(cost).members();
        equilibrium = true;
    } else if (c.flow.preset == FlowPreset::bridge_energy && c.cost.at("kind") == "separable") {
        const auto desc = std::get<SeparableCost>(cost_descriptor_from_json(c.cost, 2, "cost", &c.grids));
        std::vector<double> f(c.grids[0].n());
        for (std::size_t k = 0; k < f.size(); ++k) f[k] = desc.terms[0](c.grids[0].node(k));
        reference = std::vector<DiscreteMeasure>{gibbs_measure(c.grids[0], f)};
        equilibrium = true;
    } else if (c.flow.preset == FlowPreset::sinkhorn_divergence) {
        reference = std::vector<DiscreteMeasure>{*target};  // reported only
    }

    const auto run = run_flow(spec, init, reference);
    const auto& sum = run.summary;
    {
        auto os = s.open("trajectory.csv");
        os << "t";
        for (std::size_t i = 0; i < init.size(); ++i) os << ",mean_" << i << ",var_" << i;
        os << ",F,I,W2\n";
        for (const auto& st : run.trajectory) {
            os << st.time;
            for (const auto& m : st.measures) os << ',' << species_mean(m) << ',' << species_variance(m);
            os << ',' << st.energy << ',';
            if (st.fisher) os << *st.fisher;
            os << ',';
            if (st.w2_to_equilibrium) os << *st.w2_to_equilibrium;
            os << '\n';
        }
    }
    const auto& last = run.trajectory.back();
    for (std::size_t i = 0; i < last.measures.size(); ++i) {
        auto os = s.open("final_species_" + std::to_string(i) + ".csv");
        write_csv(os, last.measures[i]);
    }

    nlohmann::json m{{"steps", sum.steps},
                     {"t_final", sum.t_final},
                     {"clip_events", sum.clip_events},
                     {"max_mass_drift", sum.max_mass_drift},
                     {"max_energy_increase", sum.max_energy_increase},
                     {"energy_ok", sum.energy_ok ? 1 : 0},
                     {"dt_min", sum.dt_min},
                     {"dt_max", sum.dt_max},
                     {"energy_initial", sum.energies.front()},
                     {"energy_final", sum.energies.back()}};
    s.at_most("mass_conservation", sum.max_mass_drift, c.ceilings.mass_drift);
    s.at_most("energy_nonincreasing", sum.energy_ok ? 0.0 : sum.max_energy_increase, 0.0,
              "excess over the per-step slack 10 dt^2 + inner_tol");
    if (last.w2_to_equilibrium) m["w2_final"] = *last.w2_to_equilibrium;
    if (equilibrium) {
        const double fstar = flow_energy(spec, *reference);
        std::vector<double> gap;
        for (double e : sum.energies) gap.push_back(e - fstar);
        const auto fit = fit_decay_rate(sum.times, gap);
        m["energy_equilibrium"] = fstar;
        m["kappa_hat"] = fit.rate;
        m["r_squared"] = fit.r_squared;
        const std::size_t end = fit.last > fit.first ? fit.last - 1 : fit.first;
        m["fit_window"] = {sum.times[fit.first], sum.times[end]};
        m["fit_flagged"] = fit.flagged ? 1 : 0;
        s.at_most("w2_to_equilibrium", *last.w2_to_equilibrium, c.ceilings.w2_equilibrium);
        s.at_least("decay_rate_positive", fit.rate, std::numeric_limits<double>::min());
        s.at_least("decay_fit_r_squared", fit.r_squared, c.ceilings.r_squared_min);
    }
    return m;
}

inline nlohmann::json run_report(const ExperimentConfig& c, Session& s) {
    std::vector<std::pair<std::string, nlohmann::json>> rows;
    std::set<std::string> keys;
    for (const auto& in : c.report.inputs) {
        std::filesystem::path p(in);
        if (p.is_relative()) p = c.base_dir / p;
        if (std::filesystem::is_directory(p)) p /= "report.json";
        std::ifstream is(p);
        if (!is) throw ConfigError("report.inputs", "cannot open '" + p.string() + "'");
        nlohmann::json j;
        is >> j;
        if (!j.contains("metrics")) throw ConfigError("report.inputs", "'" + p.string() + "' has no metrics");
        for (const auto& item : j.at("metrics").items())
            if (item.value().is_number()) keys.insert(item.key());
        rows.emplace_back(in, j);
    }
    auto os = s.open("summary.csv");
    os << "input,command,status";
    for (const auto& k : keys) os << ',' << k;
    os << '\n';
    std::size_t failed = 0;
    for (const auto& [name, j] : rows) {
        const std::string status = j.value("status", "unknown");
        failed += status != "ok";
        os << name << ',' << j.value("command", "") << ',' << status;
        for (const auto& k : keys) {
            os << ',';
            const auto& mj = j.at("metrics");
            if (mj.contains(k) && mj.at(k).is_number()) os << mj.at(k).get<double>();
        }
        os << '\n';
    }
    return {{"inputs", rows.size()}, {"failed_inputs", failed}};
}

}  // namespace detail

/// Runs one command, writing report.json, command artifacts and manifest.json
/// to the output directory. Deterministic given (config, seed).
inline RunResult run(const ExperimentConfig& c) {
    detail::Session s(c.output_dir);
    nlohmann::json extra = nlohmann::json::object();
    nlohmann::json metrics;
    switch (c.command) {
        case Command::solve: metrics = detail::run_solve(c, s); break;
        case Command::stability: metrics = detail::run_stability(c, s, extra); break;
        case Command::flow: metrics = detail::run_flow_command(c, s); break;
        case Command::report: metrics = detail::run_report(c, s); break;
    }
    RunResult out;
    out.failures = s.failures();
    out.exit_code = out.failures.empty() ? 0 : 1;
    nlohmann::json fails = nlohmann::json::array();
    for (const auto& f : out.failures) fails.push_back(detail::failure_json(f));
    out.report = {{"schema_version", kSchemaVersion},
                  {"command", command_name(c.command)},
                  {"status", out.failures.empty() ? "ok" : "failed"},
                  {"metrics", metrics},
                  {"failures", fails}};
    for (const auto& item : extra.items()) out.report[item.key()] = item.value();
    s.write_json("report.json", out.report);

    nlohmann::json arts = nlohmann::json::array();
    for (const auto& a : s.artifacts()) {
        const auto p = s.dir() / a;
        arts.push_back({{"path", a}, {"sha256", detail::sha256_file(p)}, {"bytes", std::filesystem::file_size(p)}});
    }
    out.artifacts = s.artifacts();
    nlohmann::json manifest{{"schema_version", kSchemaVersion},
                            {"command", command_name(c.command)},
                            {"config", to_json(c)},
                            {"artifacts", arts},
                            {"failures", fails},
                            {"status", out.failures.empty() ? "ok" : "failed"}};
    std::ofstream(s.dir() / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
    out.artifacts.push_back("manifest.json");
    return out;
}

}  // namespace eotstab::cli
