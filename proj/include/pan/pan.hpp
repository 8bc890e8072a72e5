// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pan/checkpoint.hpp"
#include "pan/cim.hpp"
#include "pan/codebook.hpp"
#include "pan/corruption.hpp"
#include "pan/dataset.hpp"
#include "pan/errors.hpp"
#include "pan/eval.hpp"
#include "pan/layers.hpp"
#include "pan/model.hpp"
#include "pan/pipeline.hpp"
#include "pan/rng.hpp"
#include "pan/tensor.hpp"
#include "pan/train.hpp"
