#pragma once

#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eotstab/measure.hpp"

namespace eotstab {

inline nlohmann::json to_json(const Grid1D& g) {
    return {{"lo", g.lo()}, {"hi", g.hi()}, {"n", g.n()}};
}

inline Grid1D grid_from_json(const nlohmann::json& j) {
    return Grid1D(j.at("lo").get<double>(), j.at("hi").get<double>(), j.at("n").get<std::size_t>());
}

inline nlohmann::json to_json(const DiscreteMeasure& mu) {
    return {{"grid", to_json(mu.grid())},
            {"weights", std::vector<double>(mu.weights().begin(), mu.weights().end())}};
}

inline DiscreteMeasure measure_from_json(const nlohmann::json& j) {
    return DiscreteMeasure(grid_from_json(j.at("grid")), j.at("weights").get<std::vector<double>>());
}

/// Two columns: node, weight. Round-trips doubles exactly.
inline void write_csv(std::ostream& os, const DiscreteMeasure& mu) {
    os << "node,weight\n" << std::setprecision(17);
    for (std::size_t j = 0; j < mu.size(); ++j) os << mu.grid().node(j) << ',' << mu.weight(j) << '\n';
}

/// Reads node/weight rows; the grid is recovered from the (uniform) nodes.
/// Weights are renormalized so that rounding in external files is tolerated.
inline DiscreteMeasure read_measure_csv(std::istream& is) {
    std::string line;
    std::vector<double> nodes, weights;
    while (std::getline(is, line)) {
        if (line.empty() || line.front() == '#') continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw InvariantError("measure csv: expected two columns");
        try {
            const double x = std::stod(line.substr(0, comma));
            const double w = std::stod(line.substr(comma + 1));
            nodes.push_back(x);
            weights.push_back(w);
        } catch (const std::invalid_argument&) {
            if (nodes.empty()) continue;  // header row
            throw InvariantError("measure csv: unparsable row '" + line + "'");
        }
    }
    if (nodes.size() < 2) throw InvariantError("measure csv: need at least two rows");
    const double h = (nodes.back() - nodes.front()) / static_cast<double>(nodes.size() - 1);
    for (std::size_t j = 1; j < nodes.size(); ++j) {
        if (std::abs(nodes[j] - nodes[j - 1] - h) > 1e-9 * std::max(1.0, std::abs(h))) {
            throw InvariantError("measure csv: nodes are not uniformly spaced");
        }
    }
    Grid1D g(nodes.front() - 0.5 * h, nodes.back() + 0.5 * h, nodes.size());
    return DiscreteMeasure::normalized(g, std::move(weights));
}

}  // namespace eotstab
