#pragma once

#include "promptrisk/numcore/graph.hpp"
#include "promptrisk/numcore/ops.hpp"
#include "promptrisk/numcore/params.hpp"
#include "promptrisk/numcore/tensor.hpp"
