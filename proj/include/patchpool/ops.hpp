// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "patchpool/rng.hpp"
#include "patchpool/tensor.hpp"

namespace patchpool {

// Multiply-accumulate counter, incremented by every contraction kernel
// (linear, conv2d, attention products, per-class logits) during forward.
// Elementwise ops, norms, softmax and pooling contribute no MACs. Used to
// cross-check the analytical cost model against executed work.
void mac_counter_reset();
uint64_t mac_counter();

// --- elementwise / broadcast ---------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // same shape
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// Replicates x along a new leading axis of length n; backward sums over it.
Tensor expand0(const Tensor& x, int64_t n);

// y[b,c,...] = x[b,c,...] + bias[c] over an NC.. layout.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// y[..., axis] = x * v[axis participating dim], broadcast over the rest.
// Realizes LayerScale (axis 1 on NCHW, last axis on token layouts).
Tensor scale_by_vector(const Tensor& x, const Tensor& v, int axis);

// y[b,c,h,w] = x[b,c,h,w] * g[b,c]  (squeeze-and-excitation gating).
Tensor channel_gate(const Tensor& x, const Tensor& g);

// --- contractions ----------------------------------------------------------

// x: [.., in], W: [out, in], optional bias [out] -> [.., out]
Tensor linear(const Tensor& x, const Tensor& W, const Tensor& bias = Tensor());

// x: [B,Cin,H,W], k: [Cout,Cin/g,kh,kw]; cross-correlation, no kernel flip.
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding,
              int groups = 1);

// q: [h,t,dh], K: [B,h,n,dh] -> scores [B,h,t,n], scaled by `scale`.
Tensor attn_scores(const Tensor& q, const Tensor& K, double scale);

// A: [B,h,t,n], V: [B,h,n,dh] -> [B,h,t,dh]
Tensor attn_apply(const Tensor& A, const Tensor& V);

// u: [B,k,d], W: [k,d], b: [k] -> logits [B,k]; class c reads only token c.
Tensor per_class_logits(const Tensor& u, const Tensor& W, const Tensor& b);

// --- activations -----------------------------------------------------------

Tensor gelu(const Tensor& x);     // exact erf form
Tensor sigmoid(const Tensor& x);

// --- normalization ---------------------------------------------------------

// Normalizes along `axis` to zero mean / unit variance per remaining index,
// then applies gamma/beta (both sized like that axis).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, int axis = -1);

// NCHW batch norm. Train mode uses batch statistics and updates the running
// buffers in place (biased variance for normalization, unbiased stored);
// eval mode reads the buffers. Single process, no cross-device sync.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool train,
                  double momentum, double eps);

// --- reductions / shape ----------------------------------------------------

Tensor softmax_lastdim(const Tensor& x);  // max-subtracted, rows sum to 1
Tensor global_avg_pool(const Tensor& x);  // [B,C,H,W] -> [B,C]
Tensor mean_axis(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);

// --- regularization / loss -------------------------------------------------

// Stochastic depth over axis 0. Eval is the identity; train zeroes each
// sample's slice with probability p and rescales survivors by 1/(1-p).
Tensor drop_path(const Tensor& x, double p, bool train, Rng& rng);

// Cross-entropy against (1-eps)*onehot + eps/k, mean over batch, computed
// through a max-subtracted log-softmax.
Tensor label_smoothing_ce(const Tensor& logits, const std::vector<int>& labels,
                          double eps);

}  // namespace patchpool
