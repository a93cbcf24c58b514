#pragma once

#include "fixq/common.hpp"
#include "fixq/dataset.hpp"
#include "fixq/fixedpoint.hpp"
#include "fixq/inference.hpp"
#include "fixq/modelio.hpp"
#include "fixq/netdesc.hpp"
#include "fixq/profiler.hpp"
#include "fixq/rng.hpp"
#include "fixq/tensor.hpp"
#include "fixq/training.hpp"
