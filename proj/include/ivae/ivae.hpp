#pragma once

// Umbrella header.

#include "ivae/errors.hpp"
#include "ivae/rng.hpp"
#include "ivae/tensor.hpp"
#include "ivae/nets.hpp"
#include "ivae/priors.hpp"
#include "ivae/model.hpp"
#include "ivae/datagen.hpp"
#include "ivae/eval.hpp"
#include "ivae/causal.hpp"
#include "ivae/experiment.hpp"
