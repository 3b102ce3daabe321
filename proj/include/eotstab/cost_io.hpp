#pragma once

#include <fstream>
#include <initializer_list>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eotstab/cost.hpp"

namespace eotstab {

namespace config {

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

/// Rejects keys of `j` not listed in `allowed`; `path` prefixes messages.
inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path.empty() ? "(root)" : path, "expected an object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || item.key() == a;
        if (!ok) throw ConfigError(join(path, item.key()), "unknown key");
    }
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& path) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(join(path, key), e.what());
    }
}

template <class T>
T require(const nlohmann::json& j, const char* key, const std::string& path) {
    if (!j.contains(key)) throw ConfigError(join(path, key), "missing required field");
    return get_or<T>(j, key, T{}, path);
}

}  // namespace config

/// Rows "i,j[,k],value" with zero-based node indices. Missing entries are an error.
inline TabulatedCost read_tabulated_csv(std::istream& is, const std::vector<Grid1D>& grids) {
    std::size_t total = 1;
    std::vector<std::size_t> strides(grids.size(), 1);
    for (std::size_t a = grids.size(); a-- > 0;) {
        strides[a] = total;
        total *= grids[a].n();
    }
    TabulatedCost out;
    out.values.assign(total, 0.0);
    std::vector<char> seen(total, 0);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line.front() == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != grids.size() + 1) throw InvariantError("tabulated cost csv: wrong column count");
        std::size_t flat = 0;
        try {
            for (std::size_t a = 0; a < grids.size(); ++a) {
                const auto idx = std::stoul(cells[a]);
                if (idx >= grids[a].n()) throw InvariantError("tabulated cost csv: index out of range");
                flat += idx * strides[a];
            }
            out.values[flat] = std::stod(cells.back());
        } catch (const std::invalid_argument&) {
            continue;  // header row
        }
        seen[flat] = 1;
    }
    for (char s : seen)
        if (!s) throw InvariantError("tabulated cost csv: missing entries");
    return out;
}

inline CostDescriptor cost_descriptor_from_json(const nlohmann::json& j, std::size_t n_marginals,
                                                const std::string& path = "cost",
                                                const std::vector<Grid1D>* grids = nullptr) {
    using config::check_keys;
    using config::get_or;
    if (!j.is_object()) throw ConfigError(path.empty() ? "(root)" : path, "expected an object");
    const auto kind = config::require<std::string>(j, "kind", path);
    if (kind == "zero") {
        check_keys(j, {"kind"}, path);
        return ZeroCost{};
    }
    if (kind == "quadratic") {
        check_keys(j, {"kind", "weight", "weights"}, path);
        if (j.contains("weights")) {
            QuadraticCost q;
            q.weights = get_or<std::vector<std::vector<double>>>(j, "weights", {}, path);
            if (q.weights.size() != n_marginals) throw ConfigError(path + ".weights", "need an N x N matrix");
            return q;
        }
        return QuadraticCost::pairwise(n_marginals, get_or<double>(j, "weight", 1.0, path));
    }
    if (kind == "separable") {
        check_keys(j, {"kind", "terms"}, path);
        const auto& terms = j.contains("terms") ? j.at("terms") : nlohmann::json::array();
        if (!terms.is_array() || terms.size() != n_marginals) {
            throw ConfigError(path + ".terms", "need one term per marginal");
        }
        SeparableCost s;
        for (std::size_t i = 0; i < terms.size(); ++i) {
            const std::string tp = path + ".terms[" + std::to_string(i) + "]";
            const auto& t = terms[i];
            check_keys(t, {"a", "omega", "theta", "b", "q", "constant"}, tp);
            s.terms.push_back({get_or<double>(t, "a", 0.0, tp), get_or<double>(t, "omega", 0.0, tp),
                               get_or<double>(t, "theta", 0.0, tp), get_or<double>(t, "b", 0.0, tp),
                               get_or<double>(t, "q", 0.0, tp), get_or<double>(t, "constant", 0.0, tp)});
        }
        return s;
    }
    if (kind == "cosine") {
        check_keys(j, {"kind", "amplitude", "omega"}, path);
        return CosineCost{get_or<double>(j, "amplitude", 1.0, path), get_or<double>(j, "omega", 1.0, path)};
    }
    if (kind == "gaussian") {
        check_keys(j, {"kind", "amplitude", "sigma"}, path);
        const double sigma = get_or<double>(j, "sigma", 1.0, path);
        if (!(sigma > 0.0)) throw ConfigError(path + ".sigma", "must be positive");
        return GaussianCost{get_or<double>(j, "amplitude", 1.0, path), sigma};
    }
    if (kind == "tabulated") {
        check_keys(j, {"kind", "values", "csv"}, path);
        if (j.contains("values")) return TabulatedCost{get_or<std::vector<double>>(j, "values", {}, path)};
        if (j.contains("csv")) {
            if (!grids) throw ConfigError(path + ".csv", "grids unknown while reading tabulated cost");
            const auto file = get_or<std::string>(j, "csv", "", path);
            std::ifstream in(file);
            if (!in) throw ConfigError(path + ".csv", "cannot open '" + file + "'");
            return read_tabulated_csv(in, *grids);
        }
        throw ConfigError(path, "tabulated cost needs 'values' or 'csv'");
    }
    throw ConfigError(path + ".kind", "unknown cost descriptor '" + kind + "'");
}

}  // namespace eotstab
