#pragma once

// Umbrella header for the whole library.

#include "cashewmap/common.hpp"
#include "cashewmap/rng.hpp"
#include "cashewmap/rstk.hpp"
#include "cashewmap/raster_ops.hpp"
#include "cashewmap/synth.hpp"
#include "cashewmap/tensor.hpp"
#include "cashewmap/nn_ops.hpp"
#include "cashewmap/params.hpp"
#include "cashewmap/lstm.hpp"
#include "cashewmap/stca.hpp"
#include "cashewmap/postprocess.hpp"
#include "cashewmap/castc.hpp"
#include "cashewmap/evaluation.hpp"
#include "cashewmap/config.hpp"
