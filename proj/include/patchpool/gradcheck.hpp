// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "patchpool/tensor.hpp"

namespace patchpool {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int64_t checked = 0;

    bool passed(double tol) const { return max_rel_error < tol; }
};

// Compares reverse-mode gradients of the scalar function `f` against central
// finite differences (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) for every
// element of every tensor in `params`. Relative error is
// |a-n| / (|a|+|n|+1e-12). `f` must be deterministic and must read the param
// tensors by handle (their storage is perturbed in place). Never mutates
// values on exit; gradients are left zeroed.
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& params, double eps = 1e-5);

// Single-tensor convenience form.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps = 1e-5);

}  // namespace patchpool
