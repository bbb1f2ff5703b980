// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference cases shared by the unit tests and the acceptance run.
// Each case draws its inputs from the seed and returns the worst relative
// error over every differentiable input.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace pvt::testing {

struct GradCase {
    std::string name;
    std::function<double(uint64_t seed)> run;
};

std::vector<GradCase> primitive_grad_cases();
std::vector<GradCase> intervention_grad_cases();

}  // namespace pvt::testing
