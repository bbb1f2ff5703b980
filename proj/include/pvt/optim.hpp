// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "pvt/tensor.hpp"

namespace pvt {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moments are keyed by position in the parameter list handed to step(); the
// list must keep the same order and shapes between calls.
struct OptimState {
    AdamConfig config;
    int64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

class Adam {
public:
    explicit Adam(AdamConfig config = {}) { state_.config = config; }

    // Applies one bias-corrected Adam update in place.
    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
    // Convenience overload that pulls gradients out of a backward() result.
    void step(std::vector<Tensor>& params, const GradMap& grads);

    const OptimState& state() const noexcept { return state_; }
    void set_lr(double lr) noexcept { state_.config.lr = lr; }

private:
    OptimState state_;
};

}  // namespace pvt
