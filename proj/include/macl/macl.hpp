// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "macl/ablation.hpp"
#include "macl/augment.hpp"
#include "macl/autograd.hpp"
#include "macl/checkpoint.hpp"
#include "macl/config.hpp"
#include "macl/error.hpp"
#include "macl/losses.hpp"
#include "macl/metrics.hpp"
#include "macl/model.hpp"
#include "macl/nn.hpp"
#include "macl/optim.hpp"
#include "macl/oracle.hpp"
#include "macl/pipeline.hpp"
#include "macl/rng.hpp"
#include "macl/selftest.hpp"
#include "macl/synthdata.hpp"
#include "macl/train.hpp"
