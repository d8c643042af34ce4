#pragma once

// Everything except image/dataset I/O (udat/io.hpp), which needs OpenCV.

#include "udat/autograd.hpp"
#include "udat/core_types.hpp"
#include "udat/discovery.hpp"
#include "udat/evaluation.hpp"
#include "udat/losses.hpp"
#include "udat/model.hpp"
#include "udat/nn.hpp"
#include "udat/optim.hpp"
#include "udat/raster.hpp"
#include "udat/serialization.hpp"
#include "udat/synthetic.hpp"
#include "udat/tracker.hpp"
#include "udat/training.hpp"
