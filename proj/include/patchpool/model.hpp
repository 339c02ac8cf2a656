// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patchpool/ops.hpp"
#include "patchpool/rng.hpp"
#include "patchpool/tensor.hpp"

namespace patchpool {

enum class TokenMode { kSingle, kPerClass };
enum class NormKind { kLayerNorm, kBatchNorm };
enum class StemKind { kConv, kLinearProjection };
enum class HeadMode { kClassAttention, kAveragePool };

std::string to_string(TokenMode m);
std::string to_string(NormKind m);
std::string to_string(StemKind m);
std::string to_string(HeadMode m);

TokenMode token_mode_from_string(const std::string& s);
NormKind norm_kind_from_string(const std::string& s);
StemKind stem_kind_from_string(const std::string& s);
HeadMode head_mode_from_string(const std::string& s);

// Full architectural description. Width d and depth N define the family;
// everything else selects ablation variants or regularization strengths.
struct ModelConfig {
    int64_t width = 384;         // embedding dimension d per patch
    int64_t depth = 60;          // number of trunk blocks N
    int64_t num_classes = 1000;  // k
    TokenMode token_mode = TokenMode::kSingle;
    NormKind norm_kind = NormKind::kLayerNorm;
    StemKind stem_kind = StemKind::kConv;
    HeadMode head_mode = HeadMode::kClassAttention;
    int64_t attention_heads = 1;
    double drop_path = 0.0;
    double layerscale_init = 1e-4;
    int64_t se_reduction = 4;
    int64_t ffn_ratio = 4;
    double ln_eps = 1e-6;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    static constexpr int64_t kPatchStride = 16;

    int64_t tokens() const {
        return head_mode == HeadMode::kAveragePool ? 1
               : token_mode == TokenMode::kPerClass ? num_classes
                                                    : 1;
    }

    void validate() const;  // throws ConfigError naming the violated field

    // Named sizes: S/B/L width 384/768/1024, digits give the depth (S60),
    // plus the small test configs desk8 (d=8, N=2) and desk32 (d=32, N=4).
    static ModelConfig preset(const std::string& name);
    static std::vector<std::string> preset_names();
};

// Stem channel ladder d/8 -> d/4 -> d/2 -> d, floored at one channel.
std::vector<int64_t> stem_channel_ladder(int64_t width);

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool trainable = true;  // false for batch-norm running statistics
};

struct ForwardResult {
    Tensor logits;  // [B, k]
    // Aggregation weights, one probability row per token: [B, tokens, n].
    // Uniform when the head is average pooling.
    Tensor attn;
    int64_t map_h = 0, map_w = 0;
    // Interpretability trace: per-head value vectors [B, heads, n, dh] and
    // their attention-weighted sum [B, heads, tokens, dh] (before the output
    // projection). Empty for the average-pooling head.
    Tensor values;
    Tensor pooled_pre;
};

struct AttentionPoolResult {
    Tensor pooled;  // [B, tokens, d] token stream after attention + FFN
    Tensor attn;    // [B, tokens, n]
    Tensor values;
    Tensor pooled_pre;
};

// The assembled model: stem, N identical residual trunk blocks, attention
// aggregation (or average pooling) and classifier. Parameters live in a
// named registry with a deterministic order, which fixes both the seeded
// initialization sequence and the checkpoint layout.
class PatchConvNet {
public:
    PatchConvNet(ModelConfig config, uint64_t seed);

    const ModelConfig& config() const { return config_; }

    // Train-mode forward needs an rng when drop_path > 0; batch-norm models
    // update running statistics in train mode.
    ForwardResult forward(const Tensor& x, bool train = false, Rng* rng = nullptr);

    // Stage entry points (also used by the unit tests).
    Tensor stem(const Tensor& x);
    Tensor trunk_block(int index, const Tensor& x, bool train, Rng* rng);
    Tensor squeeze_excitation(int index, const Tensor& x);
    AttentionPoolResult attention_pool(const Tensor& patches, bool train, Rng* rng);

    std::vector<NamedParam>& params() { return params_; }
    const std::vector<NamedParam>& params() const { return params_; }
    std::vector<Tensor> trainable_tensors() const;
    int64_t num_params(bool trainable_only = true) const;
    Tensor& param(const std::string& name);

    void zero_grads();

private:
    struct Block {
        Tensor norm_g, norm_b;
        Tensor bn_mean, bn_var;  // batch norm only
        Tensor conv1_w, conv1_b;
        Tensor dw_w, dw_b;
        Tensor se_w1, se_b1, se_w2, se_b2;
        Tensor conv2_w, conv2_b;
        Tensor layerscale;
    };
    struct Aggregation {
        Tensor token;
        Tensor norm_patch_g, norm_patch_b;
        Tensor norm_token_g, norm_token_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ls_attn;
        Tensor norm_ffn_g, norm_ffn_b;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
        Tensor ls_ffn;
    };

    Tensor register_param(const std::string& name, Shape shape, bool trainable = true);
    Tensor apply_norm(const Tensor& x, const Tensor& g, const Tensor& b,
                      Tensor& bn_mean, Tensor& bn_var, bool train, int axis);
    void init_all(uint64_t seed);

    ModelConfig config_;
    std::vector<Tensor> stem_w_, stem_b_;
    std::vector<Block> blocks_;
    Aggregation agg_;
    Tensor head_w_, head_b_;
    std::vector<NamedParam> params_;
};

// Validates the resolution contract (divisible by the patch stride) and
// throws a ResolutionError suggesting the nearest valid sizes otherwise.
void check_resolution(int64_t h, int64_t w);

}  // namespace patchpool
