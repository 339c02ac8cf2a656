// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#include "patchpool/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace patchpool {

namespace {

// Shared by params and flops: the four stem convolutions as
// (cin, cout, spatial divisor of the output map).
struct StemConv {
    int64_t cin, cout, div;
};

std::vector<StemConv> stem_convs(const ModelConfig& c) {
    if (c.stem_kind == StemKind::kLinearProjection) {
        return {{3, c.width, ModelConfig::kPatchStride}};
    }
    std::vector<StemConv> out;
    auto ladder = stem_channel_ladder(c.width);
    int64_t cin = 3, div = 2;
    for (int64_t ch : ladder) {
        out.push_back({cin, ch, div});
        cin = ch;
        div *= 2;
    }
    return out;
}

}  // namespace

CostBreakdown param_breakdown(const ModelConfig& c) {
    c.validate();
    const int64_t d = c.width;
    const int64_t dr = d / c.se_reduction;
    const int64_t f = c.ffn_ratio * d;
    CostBreakdown b;

    if (c.stem_kind == StemKind::kLinearProjection) {
        const int64_t s = ModelConfig::kPatchStride;
        b.stem = d * 3 * s * s + d;
    } else {
        for (const StemConv& sc : stem_convs(c)) b.stem += sc.cout * sc.cin * 9 + sc.cout;
    }

    b.trunk_per_block = 2 * d                 // norm gamma/beta
                        + (d * d + d)         // 1x1 conv in
                        + (9 * d + d)         // depthwise 3x3
                        + (dr * d + dr) + (d * dr + d)  // SE pair
                        + (d * d + d)         // 1x1 conv out
                        + d;                  // layerscale
    b.trunk = b.trunk_per_block * c.depth;

    if (c.head_mode == HeadMode::kClassAttention) {
        const int64_t t = c.tokens();
        b.aggregation = t * d            // token(s)
                        + 4 * d          // patch + token norms
                        + 4 * (d * d + d)  // q,k,v,proj
                        + d              // layerscale (attention branch)
                        + 2 * d          // ffn norm
                        + (f * d + f) + (d * f + d)  // ffn pair
                        + d;             // layerscale (ffn branch)
    }
    b.classifier = c.num_classes * d + c.num_classes;
    return b;
}

int64_t count_params(const ModelConfig& c) { return param_breakdown(c).total(); }

CostBreakdown flop_breakdown(const ModelConfig& c, int64_t H, int64_t W) {
    c.validate();
    check_resolution(H, W);
    const int64_t d = c.width;
    const int64_t dr = d / c.se_reduction;
    const int64_t n = (H / ModelConfig::kPatchStride) * (W / ModelConfig::kPatchStride);
    CostBreakdown b;

    for (const StemConv& sc : stem_convs(c)) {
        const int64_t kh = c.stem_kind == StemKind::kLinearProjection
                               ? ModelConfig::kPatchStride
                               : 3;
        b.stem += (H / sc.div) * (W / sc.div) * sc.cout * sc.cin * kh * kh;
    }

    b.trunk_per_block = n * d * d      // 1x1 conv in
                        + n * 9 * d    // depthwise 3x3
                        + 2 * d * dr   // SE pair on pooled vector
                        + n * d * d;   // 1x1 conv out
    b.trunk = b.trunk_per_block * c.depth;

    if (c.head_mode == HeadMode::kClassAttention) {
        const int64_t t = c.tokens();
        const int64_t f = c.ffn_ratio * d;
        const int64_t per_patch = 2 * d * d   // key/value projections
                                  + 2 * t * d;  // scores + weighted sum
        const int64_t fixed = t * d * d       // query projection
                              + t * d * d     // output projection
                              + t * 2 * f * d;  // FFN
        b.aggregation = per_patch * n + fixed;
    }
    b.classifier = c.num_classes * d;
    return b;
}

int64_t count_flops(const ModelConfig& c, int64_t H, int64_t W) {
    return flop_breakdown(c, H, W).total();
}

ActivationProfile activation_profile(const ModelConfig& c, int64_t H, int64_t W,
                                     int64_t batch) {
    c.validate();
    check_resolution(H, W);
    const int64_t d = c.width;
    const int64_t n = (H / ModelConfig::kPatchStride) * (W / ModelConfig::kPatchStride);
    const int64_t B = batch;
    ActivationProfile p;

    // Stem: consecutive map pairs are live while one conv runs.
    int64_t prev = B * 3 * H * W;
    for (const StemConv& sc : stem_convs(c)) {
        const int64_t cur = B * sc.cout * (H / sc.div) * (W / sc.div);
        p.stem_peak = std::max(p.stem_peak, prev + cur);
        prev = cur;
    }

    // Trunk steady state: residual input, one full intermediate, the map
    // under construction, plus the SE pooled/gate vectors.
    const int64_t map = B * d * n;
    p.trunk_maps = 3 * map;
    p.trunk_vectors = 2 * B * d;

    // Aggregation: normed patches plus keys and values, the attention
    // matrix, and a handful of token-width vectors.
    if (c.head_mode == HeadMode::kClassAttention) {
        const int64_t t = c.tokens();
        p.agg_peak = 3 * map + B * c.attention_heads * t * n + 4 * B * t * d +
                     B * c.num_classes;
    } else {
        p.agg_peak = map + B * d + B * c.num_classes;
    }
    return p;
}

int64_t activation_memory(const ModelConfig& c, int64_t H, int64_t W, int64_t batch,
                          int64_t bytes_per_elem) {
    return activation_profile(c, H, W, batch).peak() * bytes_per_elem;
}

CostReport analyze(const ModelConfig& c, int64_t H, int64_t W, int64_t batch,
                   int64_t bytes_per_elem) {
    CostReport r;
    r.config = c;
    r.resolution_h = H;
    r.resolution_w = W;
    r.batch = batch;
    r.bytes_per_elem = bytes_per_elem;
    r.param_breakdown = param_breakdown(c);
    r.flop_breakdown = flop_breakdown(c, H, W);
    r.params = r.param_breakdown.total();
    r.flops = r.flop_breakdown.total();
    r.activation_bytes = activation_memory(c, H, W, batch, bytes_per_elem);
    if (c.head_mode == HeadMode::kClassAttention) {
        const int64_t d = c.width, t = c.tokens(), f = c.ffn_ratio * d;
        r.aggregation_flops_per_patch = 2 * d * d + 2 * t * d;
        r.aggregation_flops_fixed = 2 * t * d * d + t * 2 * f * d;
    }
    const int64_t d = c.width;
    r.trunk_flops_per_patch = (2 * d * d + 9 * d) * c.depth;
    r.trunk_flops_fixed = 2 * d * (d / c.se_reduction) * c.depth;
    return r;
}

ScalingReport scaling_report(const ModelConfig& c,
                             const std::vector<int64_t>& resolutions, int64_t batch,
                             int64_t bytes_per_elem) {
    ScalingReport rep;
    for (int64_t res : resolutions) {
        check_resolution(res, res);
        ScalingRow row;
        row.resolution = res;
        row.flops = count_flops(c, res, res);
        row.activation_bytes = activation_memory(c, res, res, batch, bytes_per_elem);
        rep.rows.push_back(row);
    }
    if (rep.rows.size() >= 3) {
        // Least squares of activation_bytes against the image surface H*W.
        const double m = static_cast<double>(rep.rows.size());
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (const ScalingRow& row : rep.rows) {
            const double x = static_cast<double>(row.resolution) * static_cast<double>(row.resolution);
            const double y = static_cast<double>(row.activation_bytes);
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        const double denom = m * sxx - sx * sx;
        const double a = (m * sxy - sx * sy) / denom;
        const double b = (sy - a * sx) / m;
        double ss_res = 0, ss_tot = 0;
        const double ymean = sy / m;
        for (const ScalingRow& row : rep.rows) {
            const double x = static_cast<double>(row.resolution) * static_cast<double>(row.resolution);
            const double y = static_cast<double>(row.activation_bytes);
            ss_res += (y - (a * x + b)) * (y - (a * x + b));
            ss_tot += (y - ymean) * (y - ymean);
        }
        rep.r_squared = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
    }
    return rep;
}

namespace {

std::string with_units(int64_t v) {
    char buf[64];
    if (v >= 1000000000) {
        std::snprintf(buf, sizeof(buf), "%.3fe9", static_cast<double>(v) / 1e9);
    } else if (v >= 1000000) {
        std::snprintf(buf, sizeof(buf), "%.3fe6", static_cast<double>(v) / 1e6);
    } else {
        std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(v));
    }
    return buf;
}

}  // namespace

std::string cost_report_text(const CostReport& r) {
    std::ostringstream os;
    char line[160];
    os << "cost report (MAC convention: 1 multiply-add = 1 FLOP; "
          "norm/GELU/softmax excluded)\n";
    os << "config: width=" << r.config.width << " depth=" << r.config.depth
       << " classes=" << r.config.num_classes
       << " head=" << to_string(r.config.head_mode)
       << " tokens=" << r.config.tokens() << "\n";
    os << "input: " << r.resolution_h << "x" << r.resolution_w
       << " batch=" << r.batch << "\n";
    std::snprintf(line, sizeof(line), "  %-12s %16s %16s\n", "stage", "params", "flops");
    os << line;
    auto row = [&](const char* name, int64_t p, int64_t f) {
        std::snprintf(line, sizeof(line), "  %-12s %16lld %16lld\n", name,
                      static_cast<long long>(p), static_cast<long long>(f));
        os << line;
    };
    row("stem", r.param_breakdown.stem, r.flop_breakdown.stem);
    row("trunk", r.param_breakdown.trunk, r.flop_breakdown.trunk);
    row("aggregation", r.param_breakdown.aggregation, r.flop_breakdown.aggregation);
    row("classifier", r.param_breakdown.classifier, r.flop_breakdown.classifier);
    row("total", r.params, r.flops);
    os << "params: " << with_units(r.params) << "  flops: " << with_units(r.flops)
       << " (per image)\n";
    os << "activation memory: " << r.activation_bytes << " bytes (batch " << r.batch
       << ", " << r.bytes_per_elem << " B/elem)\n";
    return os.str();
}

std::string cost_report_csv(const CostReport& r) {
    std::ostringstream os;
    os << "stage,params,flops\n";
    os << "stem," << r.param_breakdown.stem << "," << r.flop_breakdown.stem << "\n";
    os << "trunk," << r.param_breakdown.trunk << "," << r.flop_breakdown.trunk << "\n";
    os << "aggregation," << r.param_breakdown.aggregation << ","
       << r.flop_breakdown.aggregation << "\n";
    os << "classifier," << r.param_breakdown.classifier << ","
       << r.flop_breakdown.classifier << "\n";
    os << "total," << r.params << "," << r.flops << "\n";
    return os.str();
}

std::string scaling_report_text(const ScalingReport& rep) {
    std::ostringstream os;
    char line[120];
    std::snprintf(line, sizeof(line), "  %10s %18s %20s\n", "resolution", "flops",
                  "activation_bytes");
    os << line;
    for (const ScalingRow& row : rep.rows) {
        std::snprintf(line, sizeof(line), "  %10lld %18lld %20lld\n",
                      static_cast<long long>(row.resolution),
                      static_cast<long long>(row.flops),
                      static_cast<long long>(row.activation_bytes));
        os << line;
    }
    std::snprintf(line, sizeof(line), "linear fit of bytes vs surface: R^2 = %.6f\n",
                  rep.r_squared);
    os << line;
    return os.str();
}

std::string scaling_report_csv(const ScalingReport& rep) {
    std::ostringstream os;
    os << "resolution,flops,activation_bytes\n";
    for (const ScalingRow& row : rep.rows) {
        os << row.resolution << "," << row.flops << "," << row.activation_bytes << "\n";
    }
    return os.str();
}

}  // namespace patchpool
