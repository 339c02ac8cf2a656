// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "patchpool/model.hpp"

namespace patchpool {

// Closed-form parameter / FLOP / activation-memory accounting for a config.
//
// Conventions (stated in every report): one multiply-add counts as one FLOP
// (MAC convention); normalization, GELU, softmax and pooling work is
// excluded as negligible; FLOPs are per image (batch 1); activation memory
// is the peak live-buffer footprint of a sequential inference pass with
// eager frees, excluding parameters and optimizer state.
struct CostBreakdown {
    int64_t stem = 0;
    int64_t trunk_per_block = 0;
    int64_t trunk = 0;  // all N blocks
    int64_t aggregation = 0;
    int64_t classifier = 0;

    int64_t total() const { return stem + trunk + aggregation + classifier; }
};

struct CostReport {
    ModelConfig config;
    int64_t resolution_h = 0, resolution_w = 0;
    int64_t batch = 1;
    int64_t bytes_per_elem = 8;

    int64_t params = 0;
    int64_t flops = 0;
    int64_t activation_bytes = 0;

    CostBreakdown param_breakdown;
    CostBreakdown flop_breakdown;
    // Aggregation FLOPs split into the patch-linear term (coefficient of n,
    // the single-query cross-attention cost) and the n-independent part.
    int64_t aggregation_flops_per_patch = 0;
    int64_t aggregation_flops_fixed = 0;
    // Trunk FLOPs likewise: the convolutions scale with the patch count,
    // while the SE bottleneck works on the pooled vector and does not.
    int64_t trunk_flops_per_patch = 0;  // coefficient of n, all N blocks
    int64_t trunk_flops_fixed = 0;      // SE vector work, all N blocks
};

int64_t count_params(const ModelConfig& config);
CostBreakdown param_breakdown(const ModelConfig& config);

int64_t count_flops(const ModelConfig& config, int64_t H, int64_t W);
CostBreakdown flop_breakdown(const ModelConfig& config, int64_t H, int64_t W);

// Live-buffer sets per stage, in elements. The peak over stages (times the
// element width) is the activation memory.
struct ActivationProfile {
    int64_t stem_peak = 0;      // widest consecutive map pair in the stem
    int64_t trunk_maps = 0;     // residual + intermediate + output map
    int64_t trunk_vectors = 0;  // SE pooled/gate vectors
    int64_t agg_peak = 0;       // patches, K, V, attention matrix, tokens

    int64_t peak() const {
        return std::max({stem_peak, trunk_maps + trunk_vectors, agg_peak});
    }
};

ActivationProfile activation_profile(const ModelConfig& config, int64_t H, int64_t W,
                                     int64_t batch);

int64_t activation_memory(const ModelConfig& config, int64_t H, int64_t W,
                          int64_t batch, int64_t bytes_per_elem);

CostReport analyze(const ModelConfig& config, int64_t H, int64_t W,
                   int64_t batch = 1, int64_t bytes_per_elem = 8);

struct ScalingRow {
    int64_t resolution;
    int64_t flops;
    int64_t activation_bytes;
};

struct ScalingReport {
    std::vector<ScalingRow> rows;
    // Coefficient of determination of the least-squares line
    // activation_bytes ~ a*(H*W) + b. 1.0 when under three rows.
    double r_squared = 1.0;
};

ScalingReport scaling_report(const ModelConfig& config,
                             const std::vector<int64_t>& resolutions,
                             int64_t batch = 1, int64_t bytes_per_elem = 8);

std::string cost_report_text(const CostReport& report);
std::string cost_report_csv(const CostReport& report);
std::string scaling_report_text(const ScalingReport& report);
std::string scaling_report_csv(const ScalingReport& report);

}  // namespace patchpool
