// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cmiwae/tensor.hpp"
#include "cmiwae/random.hpp"
#include "cmiwae/layers.hpp"
#include "cmiwae/distributions.hpp"
#include "cmiwae/networks.hpp"
#include "cmiwae/objective.hpp"
#include "cmiwae/grid_format.hpp"
#include "cmiwae/dataset.hpp"
#include "cmiwae/scoring.hpp"
#include "cmiwae/model.hpp"
#include "cmiwae/inference.hpp"
#include "cmiwae/trainer.hpp"
#include "cmiwae/gradcheck.hpp"

namespace cmiwae {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace cmiwae
