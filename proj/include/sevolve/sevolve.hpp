#pragma once

#include "sevolve/cell.hpp"
#include "sevolve/checkpoint.hpp"
#include "sevolve/config.hpp"
#include "sevolve/data.hpp"
#include "sevolve/errors.hpp"
#include "sevolve/evolve.hpp"
#include "sevolve/graph.hpp"
#include "sevolve/network.hpp"
#include "sevolve/optim.hpp"
#include "sevolve/rng.hpp"
#include "sevolve/tensor.hpp"
