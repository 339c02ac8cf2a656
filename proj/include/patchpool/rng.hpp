// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace patchpool {

// Deterministic random stream. All randomness in the library flows through
// one of these so that a fixed seed reproduces runs bit for bit.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }

    double normal(double mean = 0.0, double std = 1.0) {
        std::normal_distribution<double> d(mean, std);
        return d(engine_);
    }

    // Normal draw rejected outside two standard deviations.
    double trunc_normal(double std) {
        for (;;) {
            double z = normal(0.0, std);
            if (z >= -2.0 * std && z <= 2.0 * std) return z;
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n).
    int64_t index(int64_t n) {
        std::uniform_int_distribution<int64_t> d(0, n - 1);
        return d(engine_);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), engine_);
    }

    // Derive an independent stream; stable across runs for a fixed parent.
    Rng fork(uint64_t salt) {
        uint64_t s = engine_() ^ (salt * 0x9e3779b97f4a7c15ULL);
        return Rng(s);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace patchpool
