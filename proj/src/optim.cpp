// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/optim.hpp"

#include <cmath>

namespace pvt {

void Adam::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) {
        fail(ErrorCode::ShapeMismatch, "adam: " + std::to_string(params.size()) + " params but " +
                                           std::to_string(grads.size()) + " grads");
    }
    if (state_.first_moment.empty()) {
        for (const Tensor& p : params) {
            state_.first_moment.emplace_back(static_cast<size_t>(p.numel()), 0.0);
            state_.second_moment.emplace_back(static_cast<size_t>(p.numel()), 0.0);
        }
    }
    if (state_.first_moment.size() != params.size()) {
        fail(ErrorCode::ShapeMismatch, "adam: parameter list changed between steps");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape() ||
            state_.first_moment[i].size() != static_cast<size_t>(params[i].numel())) {
            fail(ErrorCode::ShapeMismatch, "adam: shape mismatch for parameter " + std::to_string(i));
        }
    }

    state_.step += 1;
    const auto& c = state_.config;
    const double t = static_cast<double>(state_.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& m = state_.first_moment[i];
        auto& v = state_.second_moment[i];
        const auto g = grads[i].data();
        std::vector<double> updated(params[i].data().begin(), params[i].data().end());
        for (size_t j = 0; j < updated.size(); ++j) {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            updated[j] -= c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
        }
        params[i].assign(updated);
    }
}

void Adam::step(std::vector<Tensor>& params, const GradMap& grads) {
    std::vector<Tensor> gs;
    gs.reserve(params.size());
    for (const Tensor& p : params) {
        gs.push_back(grad_of(grads, p));
    }
    step(params, gs);
}

}  // namespace pvt
