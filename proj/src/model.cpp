// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#include "patchpool/model.hpp"

#include <cmath>
#include <sstream>

namespace patchpool {

std::string to_string(TokenMode m) {
    return m == TokenMode::kSingle ? "single" : "per_class";
}
std::string to_string(NormKind m) {
    return m == NormKind::kLayerNorm ? "layer_norm" : "batch_norm";
}
std::string to_string(StemKind m) {
    return m == StemKind::kConv ? "conv" : "linear_projection";
}
std::string to_string(HeadMode m) {
    return m == HeadMode::kClassAttention ? "class_attention" : "average_pool";
}

TokenMode token_mode_from_string(const std::string& s) {
    if (s == "single") return TokenMode::kSingle;
    if (s == "per_class") return TokenMode::kPerClass;
    throw ConfigError("token_mode must be 'single' or 'per_class', got '" + s + "'");
}

NormKind norm_kind_from_string(const std::string& s) {
    if (s == "layer_norm") return NormKind::kLayerNorm;
    if (s == "batch_norm") return NormKind::kBatchNorm;
    throw ConfigError("norm_kind must be 'layer_norm' or 'batch_norm', got '" + s + "'");
}

StemKind stem_kind_from_string(const std::string& s) {
    if (s == "conv") return StemKind::kConv;
    if (s == "linear_projection") return StemKind::kLinearProjection;
    throw ConfigError("stem_kind must be 'conv' or 'linear_projection', got '" + s + "'");
}

HeadMode head_mode_from_string(const std::string& s) {
    if (s == "class_attention") return HeadMode::kClassAttention;
    if (s == "average_pool") return HeadMode::kAveragePool;
    throw ConfigError("head_mode must be 'class_attention' or 'average_pool', got '" + s + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("invalid config field '" + field + "': " + why);
    };
    if (width < 1) fail("width", "must be positive");
    if (depth < 1) fail("depth", "must be positive");
    if (num_classes < 1) fail("num_classes", "must be positive");
    if (attention_heads < 1) fail("attention_heads", "must be positive");
    if (width % attention_heads != 0) {
        fail("attention_heads", "width " + std::to_string(width) +
                                    " not divisible by " + std::to_string(attention_heads));
    }
    if (drop_path < 0.0 || drop_path >= 1.0) fail("drop_path", "must be in [0,1)");
    if (layerscale_init <= 0.0) fail("layerscale_init", "must be positive");
    if (se_reduction < 1) fail("se_reduction", "must be positive");
    if (width % se_reduction != 0) {
        fail("se_reduction", "width " + std::to_string(width) + " not divisible by " +
                                 std::to_string(se_reduction));
    }
    if (ffn_ratio < 1) fail("ffn_ratio", "must be positive");
    if (ln_eps <= 0.0) fail("ln_eps", "must be positive");
    if (bn_eps <= 0.0) fail("bn_eps", "must be positive");
    if (bn_momentum <= 0.0 || bn_momentum > 1.0) fail("bn_momentum", "must be in (0,1]");
}

ModelConfig ModelConfig::preset(const std::string& name) {
    ModelConfig c;
    if (name == "desk8") {
        c.width = 8;
        c.depth = 2;
        c.num_classes = 3;
        return c;
    }
    if (name == "desk32") {
        c.width = 32;
        c.depth = 4;
        c.num_classes = 3;
        return c;
    }
    if (name.size() >= 2 && (name[0] == 'S' || name[0] == 'B' || name[0] == 'L')) {
        int64_t depth = 0;
        for (size_t i = 1; i < name.size(); ++i) {
            if (name[i] < '0' || name[i] > '9') {
                throw ConfigError("unknown preset '" + name + "'");
            }
            depth = depth * 10 + (name[i] - '0');
        }
        if (depth < 1) throw ConfigError("unknown preset '" + name + "'");
        c.width = name[0] == 'S' ? 384 : name[0] == 'B' ? 768 : 1024;
        c.depth = depth;
        c.num_classes = 1000;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "'");
}

std::vector<std::string> ModelConfig::preset_names() {
    return {"S20", "S36", "S60", "S120", "B36", "B60", "B120", "L60", "L120",
            "desk8", "desk32"};
}

std::vector<int64_t> stem_channel_ladder(int64_t width) {
    auto at_least_one = [](int64_t v) { return v < 1 ? int64_t{1} : v; };
    return {at_least_one(width / 8), at_least_one(width / 4), at_least_one(width / 2),
            width};
}

void check_resolution(int64_t h, int64_t w) {
    const int64_t s = ModelConfig::kPatchStride;
    if (h % s == 0 && w % s == 0 && h > 0 && w > 0) return;
    auto nearest = [s](int64_t v) {
        int64_t lo = (v / s) * s, hi = lo + s;
        if (lo < s) return hi;
        return (v - lo <= hi - v) ? lo : hi;
    };
    std::ostringstream os;
    os << "resolution " << h << "x" << w << " is not divisible by " << s
       << "; nearest valid sizes: " << nearest(h) << "x" << nearest(w);
    throw ResolutionError(os.str());
}

PatchConvNet::PatchConvNet(ModelConfig config, uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const int64_t d = config_.width;

    if (config_.stem_kind == StemKind::kConv) {
        auto ladder = stem_channel_ladder(d);
        int64_t cin = 3;
        for (size_t i = 0; i < ladder.size(); ++i) {
            const std::string base = "stem.conv" + std::to_string(i);
            stem_w_.push_back(register_param(base + ".weight", {ladder[i], cin, 3, 3}));
            stem_b_.push_back(register_param(base + ".bias", {ladder[i]}));
            cin = ladder[i];
        }
    } else {
        const int64_t s = ModelConfig::kPatchStride;
        stem_w_.push_back(register_param("stem.proj.weight", {d, 3, s, s}));
        stem_b_.push_back(register_param("stem.proj.bias", {d}));
    }

    const int64_t dr = d / config_.se_reduction;
    blocks_.resize(static_cast<size_t>(config_.depth));
    for (int64_t i = 0; i < config_.depth; ++i) {
        Block& blk = blocks_[static_cast<size_t>(i)];
        const std::string base = "trunk" + std::to_string(i);
        blk.norm_g = register_param(base + ".norm.gamma", {d});
        blk.norm_b = register_param(base + ".norm.beta", {d});
        if (config_.norm_kind == NormKind::kBatchNorm) {
            blk.bn_mean = register_param(base + ".norm.running_mean", {d}, false);
            blk.bn_var = register_param(base + ".norm.running_var", {d}, false);
        }
        blk.conv1_w = register_param(base + ".conv1.weight", {d, d, 1, 1});
        blk.conv1_b = register_param(base + ".conv1.bias", {d});
        blk.dw_w = register_param(base + ".dwconv.weight", {d, 1, 3, 3});
        blk.dw_b = register_param(base + ".dwconv.bias", {d});
        blk.se_w1 = register_param(base + ".se.fc1.weight", {dr, d});
        blk.se_b1 = register_param(base + ".se.fc1.bias", {dr});
        blk.se_w2 = register_param(base + ".se.fc2.weight", {d, dr});
        blk.se_b2 = register_param(base + ".se.fc2.bias", {d});
        blk.conv2_w = register_param(base + ".conv2.weight", {d, d, 1, 1});
        blk.conv2_b = register_param(base + ".conv2.bias", {d});
        blk.layerscale = register_param(base + ".layerscale", {d});
    }

    if (config_.head_mode == HeadMode::kClassAttention) {
        const int64_t t = config_.tokens();
        const int64_t f = config_.ffn_ratio * d;
        agg_.token = register_param("agg.token", {t, d});
        agg_.norm_patch_g = register_param("agg.norm_patch.gamma", {d});
        agg_.norm_patch_b = register_param("agg.norm_patch.beta", {d});
        agg_.norm_token_g = register_param("agg.norm_token.gamma", {d});
        agg_.norm_token_b = register_param("agg.norm_token.beta", {d});
        agg_.wq = register_param("agg.q.weight", {d, d});
        agg_.bq = register_param("agg.q.bias", {d});
        agg_.wk = register_param("agg.k.weight", {d, d});
        agg_.bk = register_param("agg.k.bias", {d});
        agg_.wv = register_param("agg.v.weight", {d, d});
        agg_.bv = register_param("agg.v.bias", {d});
        agg_.wo = register_param("agg.proj.weight", {d, d});
        agg_.bo = register_param("agg.proj.bias", {d});
        agg_.ls_attn = register_param("agg.layerscale_attn", {d});
        agg_.norm_ffn_g = register_param("agg.norm_ffn.gamma", {d});
        agg_.norm_ffn_b = register_param("agg.norm_ffn.beta", {d});
        agg_.ffn_w1 = register_param("agg.ffn.fc1.weight", {f, d});
        agg_.ffn_b1 = register_param("agg.ffn.fc1.bias", {f});
        agg_.ffn_w2 = register_param("agg.ffn.fc2.weight", {d, f});
        agg_.ffn_b2 = register_param("agg.ffn.fc2.bias", {d});
        agg_.ls_ffn = register_param("agg.layerscale_ffn", {d});
    }

    head_w_ = register_param("head.weight", {config_.num_classes, d});
    head_b_ = register_param("head.bias", {config_.num_classes});

    init_all(seed);
}

Tensor PatchConvNet::register_param(const std::string& name, Shape shape, bool trainable) {
    Tensor t = Tensor::zeros(std::move(shape), trainable);
    t.set_name(name);
    params_.push_back({name, t, trainable});
    return t;
}

void PatchConvNet::init_all(uint64_t seed) {
    Rng rng(seed);
    auto ends_with = [](const std::string& s, const std::string& suffix) {
        return s.size() >= suffix.size() &&
               s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (NamedParam& p : params_) {
        Tensor& t = p.tensor;
        if (ends_with(p.name, ".gamma") || ends_with(p.name, ".running_var")) {
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = 1.0;
        } else if (ends_with(p.name, ".beta") || ends_with(p.name, ".bias") ||
                   ends_with(p.name, ".running_mean")) {
            // zero already
        } else if (p.name.find("layerscale") != std::string::npos) {
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = config_.layerscale_init;
        } else {
            // projections, convolutions and token(s): truncated normal
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.trunc_normal(0.02);
        }
    }
}

std::vector<Tensor> PatchConvNet::trainable_tensors() const {
    std::vector<Tensor> out;
    for (const NamedParam& p : params_) {
        if (p.trainable) out.push_back(p.tensor);
    }
    return out;
}

int64_t PatchConvNet::num_params(bool trainable_only) const {
    int64_t n = 0;
    for (const NamedParam& p : params_) {
        if (!trainable_only || p.trainable) n += p.tensor.numel();
    }
    return n;
}

Tensor& PatchConvNet::param(const std::string& name) {
    for (NamedParam& p : params_) {
        if (p.name == name) return p.tensor;
    }
    throw ContractError("no parameter named '" + name + "'");
}

void PatchConvNet::zero_grads() {
    for (NamedParam& p : params_) {
        if (p.trainable) p.tensor.zero_grad();
    }
}

Tensor PatchConvNet::apply_norm(const Tensor& x, const Tensor& g, const Tensor& b,
                                Tensor& bn_mean, Tensor& bn_var, bool train, int axis) {
    if (config_.norm_kind == NormKind::kLayerNorm) {
        return layer_norm(x, g, b, config_.ln_eps, axis);
    }
    return batch_norm(x, g, b, bn_mean, bn_var, train, config_.bn_momentum,
                      config_.bn_eps);
}

Tensor PatchConvNet::stem(const Tensor& x) {
    if (x.shape().size() != 4 || x.dim(1) != 3) {
        throw DimensionError("stem expects [B,3,H,W], got " + shape_str(x.shape()));
    }
    check_resolution(x.dim(2), x.dim(3));
    if (config_.stem_kind == StemKind::kLinearProjection) {
        return add_channel_bias(
            conv2d(x, stem_w_[0], static_cast<int>(ModelConfig::kPatchStride), 0, 1),
            stem_b_[0]);
    }
    Tensor y = x;
    for (size_t i = 0; i < stem_w_.size(); ++i) {
        y = add_channel_bias(conv2d(y, stem_w_[i], 2, 1, 1), stem_b_[i]);
        if (i + 1 < stem_w_.size()) y = gelu(y);
    }
    return y;
}

Tensor PatchConvNet::squeeze_excitation(int index, const Tensor& x) {
    Block& blk = blocks_.at(static_cast<size_t>(index));
    Tensor s = global_avg_pool(x);
    Tensor hidden = gelu(linear(s, blk.se_w1, blk.se_b1));
    Tensor gate = sigmoid(linear(hidden, blk.se_w2, blk.se_b2));
    return channel_gate(x, gate);
}

namespace {
Tensor maybe_drop(const Tensor& branch, double p, bool train, Rng* rng) {
    if (!train || p == 0.0) return branch;
    if (rng == nullptr) {
        throw ContractError("train-mode forward with drop_path > 0 requires an rng");
    }
    return drop_path(branch, p, true, *rng);
}
}  // namespace

Tensor PatchConvNet::trunk_block(int index, const Tensor& x, bool train, Rng* rng) {
    if (x.shape().size() != 4 || x.dim(1) != config_.width) {
        throw DimensionError("trunk block expects channel dim " +
                             std::to_string(config_.width) + ", got " +
                             shape_str(x.shape()));
    }
    Block& blk = blocks_.at(static_cast<size_t>(index));
    Tensor y = apply_norm(x, blk.norm_g, blk.norm_b, blk.bn_mean, blk.bn_var, train, 1);
    y = add_channel_bias(conv2d(y, blk.conv1_w, 1, 0, 1), blk.conv1_b);
    y = gelu(y);
    y = add_channel_bias(conv2d(y, blk.dw_w, 1, 1, static_cast<int>(config_.width)),
                         blk.dw_b);
    y = gelu(y);
    y = squeeze_excitation(index, y);
    y = add_channel_bias(conv2d(y, blk.conv2_w, 1, 0, 1), blk.conv2_b);
    y = scale_by_vector(y, blk.layerscale, 1);
    y = maybe_drop(y, config_.drop_path, train, rng);
    return add(x, y);
}

AttentionPoolResult PatchConvNet::attention_pool(const Tensor& patches, bool train,
                                                 Rng* rng) {
    if (patches.shape().size() != 3 || patches.dim(2) != config_.width) {
        throw DimensionError("attention_pool expects [B,n," +
                             std::to_string(config_.width) + "], got " +
                             shape_str(patches.shape()));
    }
    const int64_t B = patches.dim(0), n = patches.dim(1);
    const int64_t d = config_.width, t = config_.tokens();
    const int64_t heads = config_.attention_heads, dh = d / heads;

    Tensor pn = layer_norm(patches, agg_.norm_patch_g, agg_.norm_patch_b,
                           config_.ln_eps, -1);
    Tensor K = permute(reshape(linear(pn, agg_.wk, agg_.bk), {B, n, heads, dh}),
                       {0, 2, 1, 3});
    Tensor V = permute(reshape(linear(pn, agg_.wv, agg_.bv), {B, n, heads, dh}),
                       {0, 2, 1, 3});
    Tensor tn = layer_norm(agg_.token, agg_.norm_token_g, agg_.norm_token_b,
                           config_.ln_eps, -1);
    Tensor q = permute(reshape(linear(tn, agg_.wq, agg_.bq), {t, heads, dh}),
                       {1, 0, 2});
    Tensor S = attn_scores(q, K, 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor A = softmax_lastdim(S);   // [B,heads,t,n]
    Tensor Z = attn_apply(A, V);     // [B,heads,t,dh]
    Tensor Zm = reshape(permute(Z, {0, 2, 1, 3}), {B, t, d});
    Tensor z = linear(Zm, agg_.wo, agg_.bo);

    Tensor u = add(expand0(agg_.token, B),
                   maybe_drop(scale_by_vector(z, agg_.ls_attn, 2), config_.drop_path,
                              train, rng));
    Tensor un = layer_norm(u, agg_.norm_ffn_g, agg_.norm_ffn_b, config_.ln_eps, -1);
    Tensor f = linear(gelu(linear(un, agg_.ffn_w1, agg_.ffn_b1)), agg_.ffn_w2,
                      agg_.ffn_b2);
    Tensor out = add(u, maybe_drop(scale_by_vector(f, agg_.ls_ffn, 2),
                                   config_.drop_path, train, rng));

    AttentionPoolResult res;
    res.pooled = out;
    res.attn = heads == 1 ? reshape(A, {B, t, n}) : mean_axis(A, 1);
    res.values = V;
    res.pooled_pre = Z;
    return res;
}

ForwardResult PatchConvNet::forward(const Tensor& x, bool train, Rng* rng) {
    Tensor cur = stem(x);
    for (int i = 0; i < static_cast<int>(blocks_.size()); ++i) {
        cur = trunk_block(i, cur, train, rng);
    }
    const int64_t B = cur.dim(0), h = cur.dim(2), w = cur.dim(3);
    const int64_t n = h * w, d = config_.width;
    Tensor patches = reshape(permute(cur, {0, 2, 3, 1}), {B, n, d});

    ForwardResult res;
    res.map_h = h;
    res.map_w = w;
    if (config_.head_mode == HeadMode::kAveragePool) {
        Tensor pooled = mean_axis(patches, 1);  // [B,d]
        res.logits = linear(pooled, head_w_, head_b_);
        res.attn = Tensor::full({B, 1, n}, 1.0 / static_cast<double>(n));
        return res;
    }
    AttentionPoolResult ap = attention_pool(patches, train, rng);
    res.attn = ap.attn;
    res.values = ap.values;
    res.pooled_pre = ap.pooled_pre;
    if (config_.token_mode == TokenMode::kPerClass) {
        res.logits = per_class_logits(ap.pooled, head_w_, head_b_);
    } else {
        res.logits = linear(reshape(ap.pooled, {B, d}), head_w_, head_b_);
    }
    return res;
}

}  // namespace patchpool
