// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "patchpool/error.hpp"

namespace patchpool {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor of doubles with an optional gradient buffer.
// Copies are shallow: they share storage, like handles. Autodiff works by
// recording backward closures on the thread-local Tape (see below).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    int64_t dim(int i) const;

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double item() const;  // requires numel() == 1
    double at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool rg);

    // Gradient buffer, allocated zero-filled on first access.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad();

    const std::string& name() const { return impl_->name; }
    Tensor& set_name(std::string name);

    // Deep copy with fresh storage (gradient buffer not copied).
    Tensor clone() const;

    // True when both handles point at the same storage.
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
        std::string name;
    };
    std::shared_ptr<Impl> impl_;
};

// Ordered record of forward operations for one backward pass. Ops append a
// closure when gradients are being tracked; backward() replays them in
// reverse, visiting each node exactly once, then clears the tape.
class Tape {
public:
    static Tape& current();  // thread-local instance

    void record(std::function<void()> backward_fn);
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    bool recording() const { return pause_depth_ == 0; }

    void replay_backward();

private:
    friend class NoGradGuard;
    std::vector<std::function<void()>> nodes_;
    int pause_depth_ = 0;
};

// RAII scope that suspends tape recording (used for eval-mode forwards).
class NoGradGuard {
public:
    NoGradGuard() { ++Tape::current().pause_depth_; }
    ~NoGradGuard() { --Tape::current().pause_depth_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Whether an op with these inputs should be recorded on the tape.
inline bool grad_enabled_for(const Tensor& a) {
    return Tape::current().recording() && a.requires_grad();
}

// Seeds d(loss)/d(loss) = 1 and propagates through the tape in reverse
// topological order. The loss must be a scalar; the tape is consumed.
void backward(Tensor& loss);

// Debug-build guard: throws if a freshly produced tensor holds NaN/Inf.
void check_finite(const Tensor& t, const char* op_name);

}  // namespace patchpool
