#pragma once

#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "eotstab/measure_io.hpp"
#include "eotstab/potential.hpp"

namespace eotstab {

/// Rows: marginal index, node, value.
inline void write_csv(std::ostream& os, const PotentialFamily& phi) {
    os << "marginal,node,value\n" << std::setprecision(17);
    for (std::size_t i = 0; i < phi.size(); ++i)
        for (std::size_t j = 0; j < phi[i].size(); ++j) os << i << ',' << phi.grids()[i].node(j) << ',' << phi[i][j] << '\n';
}

/// Sidecar carrying the grids and the gauge tag.
inline nlohmann::json sidecar_json(const PotentialFamily& phi) {
    nlohmann::json grids = nlohmann::json::array();
    for (const auto& g : phi.grids()) grids.push_back(to_json(g));
    return {{"gauge", gauge_name(phi.gauge())}, {"grids", grids}};
}

inline PotentialFamily read_potential_csv(std::istream& is, const nlohmann::json& sidecar) {
    std::vector<Grid1D> grids;
    for (const auto& g : sidecar.at("grids")) grids.push_back(grid_from_json(g));
    const Gauge gauge = sidecar.at("gauge").get<std::string>() == "canonical" ? Gauge::canonical : Gauge::unspecified;
    GridFunctions m;
    for (const auto& g : grids) m.emplace_back(g.n(), std::numeric_limits<double>::quiet_NaN());
    std::vector<std::size_t> counts(grids.size(), 0);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line.rfind("marginal", 0) == 0) continue;
        std::stringstream ss(line);
        std::string a, b, c;
        std::getline(ss, a, ',');
        std::getline(ss, b, ',');
        std::getline(ss, c, ',');
        const auto i = std::stoul(a);
        if (i >= grids.size()) throw InvariantError("potential csv: marginal index out of range");
        if (counts[i] >= grids[i].n()) throw InvariantError("potential csv: too many rows for a marginal");
        m[i][counts[i]++] = std::stod(c);
    }
    return PotentialFamily(grids, std::move(m), gauge);
}

}  // namespace eotstab
