#pragma once

#include "bandvq/config.hpp"
#include "bandvq/data/binary.hpp"
#include "bandvq/data/bvqt.hpp"
#include "bandvq/data/checkpoint.hpp"
#include "bandvq/data/eegb.hpp"
#include "bandvq/data/manifest.hpp"
#include "bandvq/data/model_io.hpp"
#include "bandvq/data/synth.hpp"
#include "bandvq/downstream.hpp"
#include "bandvq/encoder.hpp"
#include "bandvq/engine/ops.hpp"
#include "bandvq/engine/optim.hpp"
#include "bandvq/engine/tensor.hpp"
#include "bandvq/error.hpp"
#include "bandvq/fft.hpp"
#include "bandvq/masking.hpp"
#include "bandvq/rng.hpp"
#include "bandvq/signal.hpp"
#include "bandvq/tokens.hpp"
#include "bandvq/trial.hpp"
#include "bandvq/vq.hpp"
