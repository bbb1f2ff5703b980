// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include "pvt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace pvt {

double finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double eps) {
    Tensor leaf = x.to(DType::f64);
    leaf.set_requires_grad(true);
    Tensor analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = fn(leaf);
        if (loss.recorded()) {
            analytic = grad_of(backward(loss), leaf);
        } else {
            // Loss does not touch x at all.
            analytic = Tensor::zeros(leaf.shape(), DType::f64);
        }
    }

    std::vector<double> probe(leaf.data().begin(), leaf.data().end());
    double worst = 0.0;
    for (size_t i = 0; i < probe.size(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + eps;
        const double up = fn(Tensor::from(leaf.shape(), probe, DType::f64)).item();
        probe[i] = saved - eps;
        const double down = fn(Tensor::from(leaf.shape(), probe, DType::f64)).item();
        probe[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic[static_cast<int64_t>(i)];
        const double err = std::abs(a - numeric) / (std::abs(a) + 1e-12);
        if (std::isnan(err)) {
            return err;
        }
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace pvt
