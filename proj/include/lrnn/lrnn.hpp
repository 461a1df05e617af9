// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "lrnn/analysis.hpp"
#include "lrnn/config.hpp"
#include "lrnn/errors.hpp"
#include "lrnn/ops.hpp"
#include "lrnn/recurrence.hpp"
#include "lrnn/rng.hpp"
#include "lrnn/scan.hpp"
#include "lrnn/tape.hpp"
#include "lrnn/tasks.hpp"
#include "lrnn/tensor.hpp"
#include "lrnn/training.hpp"
