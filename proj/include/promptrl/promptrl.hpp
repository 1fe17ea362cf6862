// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "promptrl/checkpoint.hpp"
#include "promptrl/config.hpp"
#include "promptrl/error.hpp"
#include "promptrl/experiment.hpp"
#include "promptrl/flowfm.hpp"
#include "promptrl/grpo.hpp"
#include "promptrl/lmpolicy.hpp"
#include "promptrl/metrics.hpp"
#include "promptrl/nn.hpp"
#include "promptrl/rewards.hpp"
#include "promptrl/selftest.hpp"
#include "promptrl/rng.hpp"
#include "promptrl/toyworld.hpp"
