// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#include "patchpool/tensor.hpp"

#include <cmath>
#include <sstream>

namespace patchpool {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    for (int64_t d : shape) {
        if (d <= 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), 0.0);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& x : t.impl_->data) x = value;
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

int64_t Tensor::dim(int i) const {
    if (i < 0) i += static_cast<int>(impl_->shape.size());
    return impl_->shape.at(static_cast<size_t>(i));
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size()) {
        throw DimensionError("index rank mismatch for shape " + shape_str(s));
    }
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
        off = off * s[k] + i;
        ++k;
    }
    return impl_->data[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
}

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor& Tensor::set_name(std::string name) {
    impl_->name = std::move(name);
    return *this;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    t.impl_->name = impl_->name;
    return t;
}

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
}

void Tape::replay_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
}

void backward(Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() requires a scalar loss");
    }
    if (Tape::current().size() == 0) {
        throw ContractError("backward() called with an empty tape");
    }
    loss.grad()[0] += 1.0;
    Tape::current().replay_backward();
}

void check_finite(const Tensor& t, const char* op_name) {
#ifndef NDEBUG
    for (double x : t.vec()) {
        if (!std::isfinite(x)) {
            throw ContractError(std::string("non-finite value produced by ") + op_name);
        }
    }
#else
    (void)t;
    (void)op_name;
#endif
}

}  // namespace patchpool
