#pragma once

// Umbrella header for the watermarking laboratory.

#include "wmlab/autograd.hpp"
#include "wmlab/checkpoint_io.hpp"
#include "wmlab/dataset.hpp"
#include "wmlab/defaults.hpp"
#include "wmlab/error.hpp"
#include "wmlab/harness.hpp"
#include "wmlab/model.hpp"
#include "wmlab/param_vector.hpp"
#include "wmlab/removal.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"
#include "wmlab/train.hpp"
#include "wmlab/verify.hpp"
#include "wmlab/watermark.hpp"
#include "wmlab/watermark_set.hpp"
