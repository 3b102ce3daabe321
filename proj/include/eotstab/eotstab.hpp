#pragma once

// Library modules. The command-line layer (cli.hpp) is separate because it needs OpenSSL.

#include "eotstab/errors.hpp"
#include "eotstab/logsumexp.hpp"
#include "eotstab/measure.hpp"
#include "eotstab/measure_io.hpp"
#include "eotstab/cost.hpp"
#include "eotstab/cost_io.hpp"
#include "eotstab/potential.hpp"
#include "eotstab/potential_io.hpp"
#include "eotstab/solver.hpp"
#include "eotstab/analysis.hpp"
#include "eotstab/flow.hpp"
