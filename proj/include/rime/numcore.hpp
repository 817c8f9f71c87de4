#pragma once

#include "rime/numcore/adam.hpp"
#include "rime/numcore/allocator.hpp"
#include "rime/numcore/discrete_mi.hpp"
#include "rime/numcore/errors.hpp"
#include "rime/numcore/gaussian.hpp"
#include "rime/numcore/mlp.hpp"
#include "rime/numcore/ops.hpp"
#include "rime/numcore/rng.hpp"
#include "rime/numcore/stats.hpp"
#include "rime/numcore/tensor.hpp"
