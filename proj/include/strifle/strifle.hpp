#pragma once

#include <strifle/glm_core.hpp>
#include <strifle/penalty.hpp>
#include <strifle/solver.hpp>
#include <strifle/density_ratio.hpp>
#include <strifle/estimators.hpp>
#include <strifle/simulation.hpp>
#include <strifle/io.hpp>
#include <strifle/cli.hpp>
