// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include "hetloco/data.hpp"
#include "hetloco/error.hpp"
#include "hetloco/hetero.hpp"
#include "hetloco/linalg.hpp"
#include "hetloco/model.hpp"
#include "hetloco/perfmodel.hpp"
#include "hetloco/rng.hpp"
#include "hetloco/sparseloco.hpp"
#include "hetloco/subspace.hpp"
#include "hetloco/tensor.hpp"
#include "hetloco/topk.hpp"
#include "hetloco/wire.hpp"
