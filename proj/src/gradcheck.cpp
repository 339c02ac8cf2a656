// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#include "patchpool/gradcheck.hpp"

#include <cmath>

namespace patchpool {

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& params, double eps) {
    GradCheckReport report;

    Tape::current().clear();
    std::vector<Tensor> ps = params;
    for (Tensor& p : ps) p.zero_grad();
    Tensor loss = f();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(ps.size());
    for (Tensor& p : ps) analytic.push_back(p.grad());

    NoGradGuard no_grad;
    for (size_t pi = 0; pi < ps.size(); ++pi) {
        Tensor& p = ps[pi];
        double* v = p.data();
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double orig = v[i];
            v[i] = orig + eps;
            const double fp = f().item();
            v[i] = orig - eps;
            const double fm = f().item();
            v[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi][static_cast<size_t>(i)];
            const double rel = std::fabs(a - numeric) /
                               (std::fabs(a) + std::fabs(numeric) + 1e-12);
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_tensor = p.name().empty() ? ("param" + std::to_string(pi)) : p.name();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    for (Tensor& p : ps) p.zero_grad();
    return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps) {
    Tensor xc = x;
    xc.set_requires_grad(true);
    return grad_check([&]() { return f(xc); }, {xc}, eps);
}

}  // namespace patchpool
