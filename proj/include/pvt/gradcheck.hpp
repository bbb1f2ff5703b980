// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

#include "pvt/tensor.hpp"

namespace pvt {

// Max over elements of |analytic - central difference| / (|analytic| + 1e-12)
// for a scalar function of one f64 tensor. `fn` must be pure.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double eps = 1e-6);

}  // namespace pvt
