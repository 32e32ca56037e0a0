#pragma once

#include "cdistill/alignment.hpp"
#include "cdistill/autodiff.hpp"
#include "cdistill/batch.hpp"
#include "cdistill/checkpoint.hpp"
#include "cdistill/data.hpp"
#include "cdistill/distiller.hpp"
#include "cdistill/encoder.hpp"
#include "cdistill/error.hpp"
#include "cdistill/intervention.hpp"
#include "cdistill/losses.hpp"
#include "cdistill/optim.hpp"
#include "cdistill/rng.hpp"
#include "cdistill/run_config.hpp"
#include "cdistill/selector.hpp"
#include "cdistill/sweep.hpp"
#include "cdistill/tensor.hpp"
