// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#include "patchpool/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace patchpool {

namespace {

uint64_t g_mac_count = 0;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

bool track(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::current().recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// Splits a shape around `axis` into (outer, m, inner) extents so that the
// flat offset of element (o, i, r) is (o*m + i)*inner + r.
struct AxisSplit {
    int64_t outer, m, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw DimensionError("axis out of range for shape " + shape_str(s));
    }
    AxisSplit sp{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

}  // namespace

void mac_counter_reset() { g_mac_count = 0; }
uint64_t mac_counter() { return g_mac_count; }

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor y = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* py = y.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    if (track({&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        Tape::current().record([ac, bc, yc]() mutable {
            const auto& gy = yc.grad();
            if (ac.requires_grad()) {
                auto& ga = ac.grad();
                for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
            }
        });
    }
    check_finite(y, "add");
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor y = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* py = y.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
    if (track({&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        Tape::current().record([ac, bc, yc]() mutable {
            const auto& gy = yc.grad();
            if (ac.requires_grad()) {
                auto& ga = ac.grad();
                for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
            }
        });
    }
    check_finite(y, "sub");
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor y = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* py = y.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
    if (track({&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        Tape::current().record([ac, bc, yc]() mutable {
            const auto& gy = yc.grad();
            if (ac.requires_grad()) {
                auto& ga = ac.grad();
                const double* vb = bc.data();
                for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * vb[i];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                const double* va = ac.data();
                for (size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * va[i];
            }
        });
    }
    check_finite(y, "mul");
    return y;
}

Tensor scale(const Tensor& a, double s) {
    Tensor y = Tensor::zeros(a.shape());
    const double* pa = a.data();
    double* py = y.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * s;
    if (track({&a})) {
        y.set_requires_grad(true);
        Tensor ac = a, yc = y;
        Tape::current().record([ac, yc, s]() mutable {
            const auto& gy = yc.grad();
            auto& ga = ac.grad();
            for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * s;
        });
    }
    check_finite(y, "scale");
    return y;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor y = Tensor::zeros(a.shape());
    const double* pa = a.data();
    double* py = y.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + s;
    if (track({&a})) {
        y.set_requires_grad(true);
        Tensor ac = a, yc = y;
        Tape::current().record([ac, yc]() mutable {
            const auto& gy = yc.grad();
            auto& ga = ac.grad();
            for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        });
    }
    check_finite(y, "add_scalar");
    return y;
}

Tensor expand0(const Tensor& x, int64_t n) {
    if (n <= 0) throw DimensionError("expand0: n must be positive");
    Shape out_shape;
    out_shape.push_back(n);
    for (int64_t d : x.shape()) out_shape.push_back(d);
    Tensor y = Tensor::zeros(out_shape);
    const int64_t m = x.numel();
    const double* px = x.data();
    double* py = y.data();
    for (int64_t b = 0; b < n; ++b) {
        std::copy(px, px + m, py + b * m);
    }
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc, n, m]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int64_t b = 0; b < n; ++b) {
                for (int64_t i = 0; i < m; ++i) gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(b * m + i)];
            }
        });
    }
    return y;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.shape().size() < 2 || bias.shape().size() != 1 || bias.dim(0) != x.dim(1)) {
        throw DimensionError("add_channel_bias: x " + shape_str(x.shape()) +
                             " vs bias " + shape_str(bias.shape()));
    }
    const int64_t B = x.dim(0), C = x.dim(1);
    const int64_t spatial = x.numel() / (B * C);
    Tensor y = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pb = bias.data();
    double* py = y.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const int64_t base = (b * C + c) * spatial;
            const double bv = pb[c];
            for (int64_t s = 0; s < spatial; ++s) py[base + s] = px[base + s] + bv;
        }
    }
    if (track({&x, &bias})) {
        y.set_requires_grad(true);
        Tensor xc = x, bc = bias, yc = y;
        Tape::current().record([xc, bc, yc, B, C, spatial]() mutable {
            const auto& gy = yc.grad();
            if (xc.requires_grad()) {
                auto& gx = xc.grad();
                for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (b * C + c) * spatial;
                        double acc = 0.0;
                        for (int64_t s = 0; s < spatial; ++s) acc += gy[static_cast<size_t>(base + s)];
                        gb[static_cast<size_t>(c)] += acc;
                    }
                }
            }
        });
    }
    check_finite(y, "add_channel_bias");
    return y;
}

Tensor scale_by_vector(const Tensor& x, const Tensor& v, int axis) {
    AxisSplit sp = split_axis(x.shape(), axis);
    if (v.shape().size() != 1 || v.dim(0) != sp.m) {
        throw DimensionError("scale_by_vector: x " + shape_str(x.shape()) +
                             " axis size " + std::to_string(sp.m) + " vs v " +
                             shape_str(v.shape()));
    }
    Tensor y = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pv = v.data();
    double* py = y.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.m; ++i) {
            const int64_t base = (o * sp.m + i) * sp.inner;
            const double vi = pv[i];
            for (int64_t r = 0; r < sp.inner; ++r) py[base + r] = px[base + r] * vi;
        }
    }
    if (track({&x, &v})) {
        y.set_requires_grad(true);
        Tensor xc = x, vc = v, yc = y;
        Tape::current().record([xc, vc, yc, sp]() mutable {
            const auto& gy = yc.grad();
            const double* pxv = xc.data();
            const double* pvv = vc.data();
            if (xc.requires_grad()) {
                auto& gx = xc.grad();
                for (int64_t o = 0; o < sp.outer; ++o) {
                    for (int64_t i = 0; i < sp.m; ++i) {
                        const int64_t base = (o * sp.m + i) * sp.inner;
                        for (int64_t r = 0; r < sp.inner; ++r) {
                            gx[static_cast<size_t>(base + r)] += gy[static_cast<size_t>(base + r)] * pvv[i];
                        }
                    }
                }
            }
            if (vc.requires_grad()) {
                auto& gv = vc.grad();
                for (int64_t o = 0; o < sp.outer; ++o) {
                    for (int64_t i = 0; i < sp.m; ++i) {
                        const int64_t base = (o * sp.m + i) * sp.inner;
                        double acc = 0.0;
                        for (int64_t r = 0; r < sp.inner; ++r) {
                            acc += gy[static_cast<size_t>(base + r)] * pxv[base + r];
                        }
                        gv[static_cast<size_t>(i)] += acc;
                    }
                }
            }
        });
    }
    check_finite(y, "scale_by_vector");
    return y;
}

Tensor channel_gate(const Tensor& x, const Tensor& g) {
    if (x.shape().size() != 4 || g.shape().size() != 2 || g.dim(0) != x.dim(0) ||
        g.dim(1) != x.dim(1)) {
        throw DimensionError("channel_gate: x " + shape_str(x.shape()) + " vs g " +
                             shape_str(g.shape()));
    }
    const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor y = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pg = g.data();
    double* py = y.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const int64_t base = (b * C + c) * HW;
            const double gv = pg[b * C + c];
            for (int64_t s = 0; s < HW; ++s) py[base + s] = px[base + s] * gv;
        }
    }
    if (track({&x, &g})) {
        y.set_requires_grad(true);
        Tensor xc = x, gc = g, yc = y;
        Tape::current().record([xc, gc, yc, B, C, HW]() mutable {
            const auto& gy = yc.grad();
            const double* pxv = xc.data();
            const double* pgv = gc.data();
            if (xc.requires_grad()) {
                auto& gx = xc.grad();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (b * C + c) * HW;
                        const double gv = pgv[b * C + c];
                        for (int64_t s = 0; s < HW; ++s) gx[static_cast<size_t>(base + s)] += gy[static_cast<size_t>(base + s)] * gv;
                    }
                }
            }
            if (gc.requires_grad()) {
                auto& gg = gc.grad();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (b * C + c) * HW;
                        double acc = 0.0;
                        for (int64_t s = 0; s < HW; ++s) acc += gy[static_cast<size_t>(base + s)] * pxv[base + s];
                        gg[static_cast<size_t>(b * C + c)] += acc;
                    }
                }
            }
        });
    }
    check_finite(y, "channel_gate");
    return y;
}

Tensor linear(const Tensor& x, const Tensor& W, const Tensor& bias) {
    if (x.shape().empty() || W.shape().size() != 2 || x.dim(-1) != W.dim(1)) {
        throw DimensionError("linear: x " + shape_str(x.shape()) + " vs W " +
                             shape_str(W.shape()));
    }
    const int64_t in = W.dim(1), out = W.dim(0);
    if (bias.defined() && (bias.shape().size() != 1 || bias.dim(0) != out)) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) +
                             " vs W " + shape_str(W.shape()));
    }
    const int64_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out;
    Tensor y = Tensor::zeros(out_shape);
    const double* px = x.data();
    const double* pw = W.data();
    const double* pb = bias.defined() ? bias.data() : nullptr;
    double* py = y.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * in;
        double* yr = py + r * out;
        for (int64_t o = 0; o < out; ++o) {
            const double* wr = pw + o * in;
            double acc = pb ? pb[o] : 0.0;
            for (int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
    g_mac_count += static_cast<uint64_t>(rows) * static_cast<uint64_t>(out) *
                   static_cast<uint64_t>(in);
    if (track({&x, &W, &bias})) {
        y.set_requires_grad(true);
        Tensor xc = x, wc = W, bc = bias, yc = y;
        Tape::current().record([xc, wc, bc, yc, rows, in, out]() mutable {
            const auto& gy = yc.grad();
            const double* pxv = xc.data();
            const double* pwv = wc.data();
            if (xc.requires_grad()) {
                auto& gx = xc.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    for (int64_t o = 0; o < out; ++o) {
                        const double gyo = gy[static_cast<size_t>(r * out + o)];
                        const double* wr = pwv + o * in;
                        double* gxr = gx.data() + r * in;
                        for (int64_t i = 0; i < in; ++i) gxr[i] += gyo * wr[i];
                    }
                }
            }
            if (wc.requires_grad()) {
                auto& gw = wc.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = pxv + r * in;
                    for (int64_t o = 0; o < out; ++o) {
                        const double gyo = gy[static_cast<size_t>(r * out + o)];
                        double* gwr = gw.data() + o * in;
                        for (int64_t i = 0; i < in; ++i) gwr[i] += gyo * xr[i];
                    }
                }
            }
            if (bc.defined() && bc.requires_grad()) {
                auto& gb = bc.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    for (int64_t o = 0; o < out; ++o) gb[static_cast<size_t>(o)] += gy[static_cast<size_t>(r * out + o)];
                }
            }
        });
    }
    check_finite(y, "linear");
    return y;
}

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding, int groups) {
    if (x.shape().size() != 4 || k.shape().size() != 4) {
        throw DimensionError("conv2d: expected 4-d input and kernel, got x " +
                             shape_str(x.shape()) + ", k " + shape_str(k.shape()));
    }
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0) {
        throw ConfigError("conv2d: channel counts Cin=" + std::to_string(Cin) +
                          " Cout=" + std::to_string(Cout) +
                          " not divisible by groups=" + std::to_string(groups));
    }
    const int64_t cig = Cin / groups;
    if (k.dim(1) != cig) {
        throw DimensionError("conv2d: kernel " + shape_str(k.shape()) +
                             " incompatible with input " + shape_str(x.shape()) +
                             " and groups=" + std::to_string(groups));
    }
    if (H + 2 * padding < kh || W + 2 * padding < kw) {
        throw DimensionError("conv2d: kernel " + shape_str(k.shape()) +
                             " larger than padded input " + shape_str(x.shape()));
    }
    const int64_t Ho = (H + 2 * padding - kh) / stride + 1;
    const int64_t Wo = (W + 2 * padding - kw) / stride + 1;
    const int64_t cog = Cout / groups;
    Tensor y = Tensor::zeros({B, Cout, Ho, Wo});
    const double* px = x.data();
    const double* pk = k.data();
    double* py = y.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t co = 0; co < Cout; ++co) {
            const int64_t g = co / cog;
            const int64_t ci0 = g * cig;
            for (int64_t oh = 0; oh < Ho; ++oh) {
                for (int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = 0.0;
                    for (int64_t ci = 0; ci < cig; ++ci) {
                        const double* xplane = px + ((b * Cin + ci0 + ci) * H) * W;
                        const double* kplane = pk + ((co * cig + ci) * kh) * kw;
                        for (int64_t r = 0; r < kh; ++r) {
                            const int64_t ih = oh * stride - padding + r;
                            if (ih < 0 || ih >= H) continue;
                            for (int64_t c = 0; c < kw; ++c) {
                                const int64_t iw = ow * stride - padding + c;
                                if (iw < 0 || iw >= W) continue;
                                acc += xplane[ih * W + iw] * kplane[r * kw + c];
                            }
                        }
                    }
                    py[((b * Cout + co) * Ho + oh) * Wo + ow] = acc;
                }
            }
        }
    }
    g_mac_count += static_cast<uint64_t>(B * Cout * Ho * Wo) *
                   static_cast<uint64_t>(cig * kh * kw);
    if (track({&x, &k})) {
        y.set_requires_grad(true);
        Tensor xc = x, kc = k, yc = y;
        const int s = stride, p = padding;
        Tape::current().record([xc, kc, yc, B, Cin, H, W, Cout, kh, kw, cig, cog, Ho, Wo, s, p]() mutable {
            const auto& gy = yc.grad();
            const double* pxv = xc.data();
            const double* pkv = kc.data();
            double* gx = xc.requires_grad() ? xc.grad().data() : nullptr;
            double* gk = kc.requires_grad() ? kc.grad().data() : nullptr;
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t co = 0; co < Cout; ++co) {
                    const int64_t g = co / cog;
                    const int64_t ci0 = g * cig;
                    for (int64_t oh = 0; oh < Ho; ++oh) {
                        for (int64_t ow = 0; ow < Wo; ++ow) {
                            const double go = gy[static_cast<size_t>(((b * Cout + co) * Ho + oh) * Wo + ow)];
                            if (go == 0.0) continue;
                            for (int64_t ci = 0; ci < cig; ++ci) {
                                const int64_t xbase = ((b * Cin + ci0 + ci) * H) * W;
                                const int64_t kbase = ((co * cig + ci) * kh) * kw;
                                for (int64_t r = 0; r < kh; ++r) {
                                    const int64_t ih = oh * s - p + r;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int64_t c = 0; c < kw; ++c) {
                                        const int64_t iw = ow * s - p + c;
                                        if (iw < 0 || iw >= W) continue;
                                        if (gx) gx[xbase + ih * W + iw] += go * pkv[kbase + r * kw + c];
                                        if (gk) gk[kbase + r * kw + c] += go * pxv[xbase + ih * W + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    check_finite(y, "conv2d");
    return y;
}

Tensor attn_scores(const Tensor& q, const Tensor& K, double sc) {
    if (q.shape().size() != 3 || K.shape().size() != 4 || q.dim(0) != K.dim(1) ||
        q.dim(2) != K.dim(3)) {
        throw DimensionError("attn_scores: q " + shape_str(q.shape()) + " vs K " +
                             shape_str(K.shape()));
    }
    const int64_t h = q.dim(0), t = q.dim(1), dh = q.dim(2);
    const int64_t B = K.dim(0), n = K.dim(2);
    Tensor S = Tensor::zeros({B, h, t, n});
    const double* pq = q.data();
    const double* pk = K.data();
    double* ps = S.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t hd = 0; hd < h; ++hd) {
            for (int64_t ti = 0; ti < t; ++ti) {
                const double* qv = pq + (hd * t + ti) * dh;
                for (int64_t ni = 0; ni < n; ++ni) {
                    const double* kv = pk + ((b * h + hd) * n + ni) * dh;
                    double acc = 0.0;
                    for (int64_t d = 0; d < dh; ++d) acc += qv[d] * kv[d];
                    ps[((b * h + hd) * t + ti) * n + ni] = acc * sc;
                }
            }
        }
    }
    g_mac_count += static_cast<uint64_t>(B * h * t * n) * static_cast<uint64_t>(dh);
    if (track({&q, &K})) {
        S.set_requires_grad(true);
        Tensor qc = q, kc = K, sc_t = S;
        Tape::current().record([qc, kc, sc_t, B, h, t, n, dh, sc]() mutable {
            const auto& gs = sc_t.grad();
            const double* pqv = qc.data();
            const double* pkv = kc.data();
            double* gq = qc.requires_grad() ? qc.grad().data() : nullptr;
            double* gk = kc.requires_grad() ? kc.grad().data() : nullptr;
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t hd = 0; hd < h; ++hd) {
                    for (int64_t ti = 0; ti < t; ++ti) {
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const double go = gs[static_cast<size_t>(((b * h + hd) * t + ti) * n + ni)] * sc;
                            if (go == 0.0) continue;
                            const int64_t qb = (hd * t + ti) * dh;
                            const int64_t kb = ((b * h + hd) * n + ni) * dh;
                            if (gq) {
                                for (int64_t d = 0; d < dh; ++d) gq[qb + d] += go * pkv[kb + d];
                            }
                            if (gk) {
                                for (int64_t d = 0; d < dh; ++d) gk[kb + d] += go * pqv[qb + d];
                            }
                        }
                    }
                }
            }
        });
    }
    check_finite(S, "attn_scores");
    return S;
}

Tensor attn_apply(const Tensor& A, const Tensor& V) {
    if (A.shape().size() != 4 || V.shape().size() != 4 || A.dim(0) != V.dim(0) ||
        A.dim(1) != V.dim(1) || A.dim(3) != V.dim(2)) {
        throw DimensionError("attn_apply: A " + shape_str(A.shape()) + " vs V " +
                             shape_str(V.shape()));
    }
    const int64_t B = A.dim(0), h = A.dim(1), t = A.dim(2), n = A.dim(3);
    const int64_t dh = V.dim(3);
    Tensor Z = Tensor::zeros({B, h, t, dh});
    const double* pa = A.data();
    const double* pv = V.data();
    double* pz = Z.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t hd = 0; hd < h; ++hd) {
            for (int64_t ti = 0; ti < t; ++ti) {
                const double* av = pa + ((b * h + hd) * t + ti) * n;
                double* zv = pz + ((b * h + hd) * t + ti) * dh;
                for (int64_t ni = 0; ni < n; ++ni) {
                    const double a = av[ni];
                    const double* vv = pv + ((b * h + hd) * n + ni) * dh;
                    for (int64_t d = 0; d < dh; ++d) zv[d] += a * vv[d];
                }
            }
        }
    }
    g_mac_count += static_cast<uint64_t>(B * h * t * n) * static_cast<uint64_t>(dh);
    if (track({&A, &V})) {
        Z.set_requires_grad(true);
        Tensor ac = A, vc = V, zc = Z;
        Tape::current().record([ac, vc, zc, B, h, t, n, dh]() mutable {
            const auto& gz = zc.grad();
            const double* pav = ac.data();
            const double* pvv = vc.data();
            double* ga = ac.requires_grad() ? ac.grad().data() : nullptr;
            double* gv = vc.requires_grad() ? vc.grad().data() : nullptr;
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t hd = 0; hd < h; ++hd) {
                    for (int64_t ti = 0; ti < t; ++ti) {
                        const int64_t zb = ((b * h + hd) * t + ti) * dh;
                        const int64_t ab = ((b * h + hd) * t + ti) * n;
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const int64_t vb = ((b * h + hd) * n + ni) * dh;
                            if (ga) {
                                double acc = 0.0;
                                for (int64_t d = 0; d < dh; ++d) acc += gz[static_cast<size_t>(zb + d)] * pvv[vb + d];
                                ga[ab + ni] += acc;
                            }
                            if (gv) {
                                const double a = pav[ab + ni];
                                for (int64_t d = 0; d < dh; ++d) gv[vb + d] += a * gz[static_cast<size_t>(zb + d)];
                            }
                        }
                    }
                }
            }
        });
    }
    check_finite(Z, "attn_apply");
    return Z;
}

Tensor per_class_logits(const Tensor& u, const Tensor& W, const Tensor& b) {
    if (u.shape().size() != 3 || W.shape().size() != 2 || u.dim(1) != W.dim(0) ||
        u.dim(2) != W.dim(1) || b.shape().size() != 1 || b.dim(0) != W.dim(0)) {
        throw DimensionError("per_class_logits: u " + shape_str(u.shape()) +
                             " vs W " + shape_str(W.shape()));
    }
    const int64_t B = u.dim(0), k = u.dim(1), d = u.dim(2);
    Tensor y = Tensor::zeros({B, k});
    const double* pu = u.data();
    const double* pw = W.data();
    const double* pb = b.data();
    double* py = y.data();
    for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t c = 0; c < k; ++c) {
            const double* uv = pu + (bi * k + c) * d;
            const double* wv = pw + c * d;
            double acc = pb[c];
            for (int64_t i = 0; i < d; ++i) acc += uv[i] * wv[i];
            py[bi * k + c] = acc;
        }
    }
    g_mac_count += static_cast<uint64_t>(B * k) * static_cast<uint64_t>(d);
    if (track({&u, &W, &b})) {
        y.set_requires_grad(true);
        Tensor uc = u, wc = W, bc = b, yc = y;
        Tape::current().record([uc, wc, bc, yc, B, k, d]() mutable {
            const auto& gy = yc.grad();
            const double* puv = uc.data();
            const double* pwv = wc.data();
            for (int64_t bi = 0; bi < B; ++bi) {
                for (int64_t c = 0; c < k; ++c) {
                    const double go = gy[static_cast<size_t>(bi * k + c)];
                    if (go == 0.0) continue;
                    if (uc.requires_grad()) {
                        auto& gu = uc.grad();
                        for (int64_t i = 0; i < d; ++i) gu[static_cast<size_t>((bi * k + c) * d + i)] += go * pwv[c * d + i];
                    }
                    if (wc.requires_grad()) {
                        auto& gw = wc.grad();
                        for (int64_t i = 0; i < d; ++i) gw[static_cast<size_t>(c * d + i)] += go * puv[(bi * k + c) * d + i];
                    }
                    if (bc.requires_grad()) bc.grad()[static_cast<size_t>(c)] += go;
                }
            }
        });
    }
    check_finite(y, "per_class_logits");
    return y;
}

Tensor gelu(const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* py = y.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        py[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * kInvSqrt2));
    }
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            const double* pxv = xc.data();
            for (size_t i = 0; i < gy.size(); ++i) {
                const double v = pxv[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                gx[i] += gy[i] * (cdf + v * pdf);
            }
        });
    }
    check_finite(y, "gelu");
    return y;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* py = y.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = 1.0 / (1.0 + std::exp(-px[i]));
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            const double* pyv = yc.data();
            for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * pyv[i] * (1.0 - pyv[i]);
        });
    }
    check_finite(y, "sigmoid");
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, int axis) {
    if (eps < 0.0) throw ConfigError("layer_norm: eps must be non-negative");
    AxisSplit sp = split_axis(x.shape(), axis);
    if (gamma.shape().size() != 1 || gamma.dim(0) != sp.m || beta.shape().size() != 1 ||
        beta.dim(0) != sp.m) {
        throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) +
                             " vs axis size " + std::to_string(sp.m));
    }
    Tensor y = Tensor::zeros(x.shape());
    // Saved normalized values and inverse stddevs for the backward pass.
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
    auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(sp.outer * sp.inner));
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pbt = beta.data();
    double* py = y.data();
    const int64_t m = sp.m;
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t r = 0; r < sp.inner; ++r) {
            double mean = 0.0;
            for (int64_t i = 0; i < m; ++i) mean += px[(o * m + i) * sp.inner + r];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                const double dlt = px[(o * m + i) * sp.inner + r] - mean;
                var += dlt * dlt;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            (*istd)[static_cast<size_t>(o * sp.inner + r)] = is;
            for (int64_t i = 0; i < m; ++i) {
                const int64_t off = (o * m + i) * sp.inner + r;
                const double xh = (px[off] - mean) * is;
                (*xhat)[static_cast<size_t>(off)] = xh;
                py[off] = pg[i] * xh + pbt[i];
            }
        }
    }
    if (track({&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        Tensor xc = x, gc = gamma, bc = beta, yc = y;
        Tape::current().record([xc, gc, bc, yc, xhat, istd, sp]() mutable {
            const auto& gy = yc.grad();
            const double* pgv = gc.data();
            const int64_t m = sp.m;
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t r = 0; r < sp.inner; ++r) {
                    const double is = (*istd)[static_cast<size_t>(o * sp.inner + r)];
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int64_t i = 0; i < m; ++i) {
                        const int64_t off = (o * m + i) * sp.inner + r;
                        const double dxh = gy[static_cast<size_t>(off)] * pgv[i];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * (*xhat)[static_cast<size_t>(off)];
                    }
                    if (xc.requires_grad()) {
                        auto& gx = xc.grad();
                        for (int64_t i = 0; i < m; ++i) {
                            const int64_t off = (o * m + i) * sp.inner + r;
                            const double dxh = gy[static_cast<size_t>(off)] * pgv[i];
                            const double xh = (*xhat)[static_cast<size_t>(off)];
                            gx[static_cast<size_t>(off)] +=
                                is * (dxh - sum_dxh / m - xh * sum_dxh_xh / m);
                        }
                    }
                }
            }
            if (gc.requires_grad() || bc.requires_grad()) {
                for (int64_t o = 0; o < sp.outer; ++o) {
                    for (int64_t i = 0; i < m; ++i) {
                        for (int64_t r = 0; r < sp.inner; ++r) {
                            const int64_t off = (o * m + i) * sp.inner + r;
                            const double g = gy[static_cast<size_t>(off)];
                            if (gc.requires_grad()) gc.grad()[static_cast<size_t>(i)] += g * (*xhat)[static_cast<size_t>(off)];
                            if (bc.requires_grad()) bc.grad()[static_cast<size_t>(i)] += g;
                        }
                    }
                }
            }
        });
    }
    check_finite(y, "layer_norm");
    return y;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool train,
                  double momentum, double eps) {
    if (x.shape().size() != 4) {
        throw DimensionError("batch_norm: expected NCHW input, got " + shape_str(x.shape()));
    }
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t cnt = B * H * W;
    if (gamma.dim(0) != C || beta.dim(0) != C || running_mean.dim(0) != C ||
        running_var.dim(0) != C) {
        throw DimensionError("batch_norm: parameter size mismatch for C=" + std::to_string(C));
    }
    if (train && cnt < 2) {
        throw StatisticsError("batch_norm: train mode requires B*H*W >= 2, got " +
                              std::to_string(cnt));
    }
    Tensor y = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pbt = beta.data();
    double* py = y.data();

    std::vector<double> mean(static_cast<size_t>(C)), istd(static_cast<size_t>(C));
    if (train) {
        for (int64_t c = 0; c < C; ++c) {
            double mu = 0.0;
            for (int64_t b = 0; b < B; ++b) {
                const double* plane = px + ((b * C + c) * H) * W;
                for (int64_t s = 0; s < H * W; ++s) mu += plane[s];
            }
            mu /= static_cast<double>(cnt);
            double var = 0.0;
            for (int64_t b = 0; b < B; ++b) {
                const double* plane = px + ((b * C + c) * H) * W;
                for (int64_t s = 0; s < H * W; ++s) {
                    const double dlt = plane[s] - mu;
                    var += dlt * dlt;
                }
            }
            var /= static_cast<double>(cnt);
            mean[static_cast<size_t>(c)] = mu;
            istd[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
            const double unbiased = var * static_cast<double>(cnt) / static_cast<double>(cnt - 1);
            running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * mu;
            running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * unbiased;
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean[static_cast<size_t>(c)] = running_mean.data()[c];
            istd[static_cast<size_t>(c)] = 1.0 / std::sqrt(running_var.data()[c] + eps);
        }
    }
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const int64_t base = ((b * C + c) * H) * W;
            const double mu = mean[static_cast<size_t>(c)];
            const double is = istd[static_cast<size_t>(c)];
            for (int64_t s = 0; s < H * W; ++s) {
                const double xh = (px[base + s] - mu) * is;
                (*xhat)[static_cast<size_t>(base + s)] = xh;
                py[base + s] = pg[c] * xh + pbt[c];
            }
        }
    }
    if (track({&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        Tensor xc = x, gc = gamma, bc = beta, yc = y;
        auto istd_sp = std::make_shared<std::vector<double>>(istd);
        Tape::current().record([xc, gc, bc, yc, xhat, istd_sp, B, C, H, W, cnt, train]() mutable {
            const auto& gy = yc.grad();
            const double* pgv = gc.data();
            const int64_t HW = H * W;
            for (int64_t c = 0; c < C; ++c) {
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int64_t b = 0; b < B; ++b) {
                    const int64_t base = ((b * C + c) * H) * W;
                    for (int64_t s = 0; s < HW; ++s) {
                        const double dxh = gy[static_cast<size_t>(base + s)] * pgv[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * (*xhat)[static_cast<size_t>(base + s)];
                    }
                }
                if (xc.requires_grad()) {
                    auto& gx = xc.grad();
                    const double is = (*istd_sp)[static_cast<size_t>(c)];
                    for (int64_t b = 0; b < B; ++b) {
                        const int64_t base = ((b * C + c) * H) * W;
                        for (int64_t s = 0; s < HW; ++s) {
                            const double dxh = gy[static_cast<size_t>(base + s)] * pgv[c];
                            if (train) {
                                const double xh = (*xhat)[static_cast<size_t>(base + s)];
                                gx[static_cast<size_t>(base + s)] +=
                                    is * (dxh - sum_dxh / cnt - xh * sum_dxh_xh / cnt);
                            } else {
                                gx[static_cast<size_t>(base + s)] += is * dxh;
                            }
                        }
                    }
                }
                if (gc.requires_grad() || bc.requires_grad()) {
                    for (int64_t b = 0; b < B; ++b) {
                        const int64_t base = ((b * C + c) * H) * W;
                        for (int64_t s = 0; s < HW; ++s) {
                            const double g = gy[static_cast<size_t>(base + s)];
                            if (gc.requires_grad()) gc.grad()[static_cast<size_t>(c)] += g * (*xhat)[static_cast<size_t>(base + s)];
                            if (bc.requires_grad()) bc.grad()[static_cast<size_t>(c)] += g;
                        }
                    }
                }
            }
        });
    }
    check_finite(y, "batch_norm");
    return y;
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.shape().empty()) throw DimensionError("softmax: scalar input");
    const int64_t n = x.dim(-1);
    const int64_t rows = x.numel() / n;
    Tensor y = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* py = y.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double* yr = py + r * n;
        double mx = xr[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            denom += yr[i];
        }
        for (int64_t i = 0; i < n; ++i) yr[i] /= denom;
    }
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc, rows, n]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            const double* pyv = yc.data();
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int64_t i = 0; i < n; ++i) dot += gy[static_cast<size_t>(r * n + i)] * pyv[r * n + i];
                for (int64_t i = 0; i < n; ++i) {
                    gx[static_cast<size_t>(r * n + i)] +=
                        pyv[r * n + i] * (gy[static_cast<size_t>(r * n + i)] - dot);
                }
            }
        });
    }
    check_finite(y, "softmax");
    return y;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.shape().size() != 4) {
        throw DimensionError("global_avg_pool: expected NCHW, got " + shape_str(x.shape()));
    }
    const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor y = Tensor::zeros({B, C});
    const double* px = x.data();
    double* py = y.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const double* plane = px + (b * C + c) * HW;
            double acc = 0.0;
            for (int64_t s = 0; s < HW; ++s) acc += plane[s];
            py[b * C + c] = acc / static_cast<double>(HW);
        }
    }
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc, B, C, HW]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t c = 0; c < C; ++c) {
                    const double g = gy[static_cast<size_t>(b * C + c)] / static_cast<double>(HW);
                    double* slot = gx.data() + (b * C + c) * HW;
                    for (int64_t s = 0; s < HW; ++s) slot[s] += g;
                }
            }
        });
    }
    check_finite(y, "global_avg_pool");
    return y;
}

Tensor mean_axis(const Tensor& x, int axis) {
    AxisSplit sp = split_axis(x.shape(), axis);
    Shape out_shape;
    if (axis < 0) axis += static_cast<int>(x.shape().size());
    for (size_t i = 0; i < x.shape().size(); ++i) {
        if (static_cast<int>(i) != axis) out_shape.push_back(x.shape()[i]);
    }
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor y = Tensor::zeros(out_shape);
    const double* px = x.data();
    double* py = y.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t r = 0; r < sp.inner; ++r) {
            double acc = 0.0;
            for (int64_t i = 0; i < sp.m; ++i) acc += px[(o * sp.m + i) * sp.inner + r];
            py[o * sp.inner + r] = acc / static_cast<double>(sp.m);
        }
    }
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc, sp]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t r = 0; r < sp.inner; ++r) {
                    const double g = gy[static_cast<size_t>(o * sp.inner + r)] / static_cast<double>(sp.m);
                    for (int64_t i = 0; i < sp.m; ++i) gx[static_cast<size_t>((o * sp.m + i) * sp.inner + r)] += g;
                }
            }
        });
    }
    check_finite(y, "mean_axis");
    return y;
}

Tensor sum_all(const Tensor& x) {
    Tensor y = Tensor::zeros({1});
    const double* px = x.data();
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    y.data()[0] = acc;
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc]() mutable {
            const double g = yc.grad()[0];
            auto& gx = xc.grad();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return y;
}

Tensor mean_all(const Tensor& x) {
    Tensor y = sum_all(x);
    return scale(y, 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " +
                             shape_str(new_shape) + " changes element count");
    }
    Tensor y = Tensor::from_data(new_shape, x.vec());
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        });
    }
    return y;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    const size_t rank = x.shape().size();
    if (axes.size() != rank) {
        throw DimensionError("permute: axes rank mismatch for " + shape_str(x.shape()));
    }
    std::vector<bool> seen(rank, false);
    Shape out_shape(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int a = axes[i];
        if (a < 0 || a >= static_cast<int>(rank) || seen[static_cast<size_t>(a)]) {
            throw DimensionError("permute: invalid axis list");
        }
        seen[static_cast<size_t>(a)] = true;
        out_shape[i] = x.shape()[static_cast<size_t>(a)];
    }
    // out[i0,..] = in at permuted multi-index; build the flat mapping once.
    std::vector<int64_t> in_strides(rank, 1), out_strides(rank, 1);
    for (int i = static_cast<int>(rank) - 2; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.shape()[static_cast<size_t>(i + 1)];
        out_strides[static_cast<size_t>(i)] = out_strides[static_cast<size_t>(i + 1)] * out_shape[static_cast<size_t>(i + 1)];
    }
    const int64_t n = x.numel();
    auto mapping = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n));
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t rem = flat;
        int64_t src = 0;
        for (size_t i = 0; i < rank; ++i) {
            const int64_t ci = rem / out_strides[i];
            rem %= out_strides[i];
            src += ci * in_strides[static_cast<size_t>(axes[i])];
        }
        (*mapping)[static_cast<size_t>(flat)] = src;
    }
    Tensor y = Tensor::zeros(out_shape);
    const double* px = x.data();
    double* py = y.data();
    for (int64_t i = 0; i < n; ++i) py[i] = px[(*mapping)[static_cast<size_t>(i)]];
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc, mapping]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (size_t i = 0; i < gy.size(); ++i) gx[static_cast<size_t>((*mapping)[i])] += gy[i];
        });
    }
    return y;
}

Tensor drop_path(const Tensor& x, double p, bool train, Rng& rng) {
    if (p < 0.0 || p >= 1.0) {
        throw ConfigError("drop_path: probability must be in [0,1), got " + std::to_string(p));
    }
    if (!train || p == 0.0) return x;
    const int64_t B = x.dim(0);
    const int64_t m = x.numel() / B;
    auto keep = std::make_shared<std::vector<double>>(static_cast<size_t>(B));
    const double inv = 1.0 / (1.0 - p);
    for (int64_t b = 0; b < B; ++b) {
        (*keep)[static_cast<size_t>(b)] = rng.bernoulli(p) ? 0.0 : inv;
    }
    Tensor y = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* py = y.data();
    for (int64_t b = 0; b < B; ++b) {
        const double kv = (*keep)[static_cast<size_t>(b)];
        for (int64_t i = 0; i < m; ++i) py[b * m + i] = px[b * m + i] * kv;
    }
    if (track({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current().record([xc, yc, keep, B, m]() mutable {
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int64_t b = 0; b < B; ++b) {
                const double kv = (*keep)[static_cast<size_t>(b)];
                if (kv == 0.0) continue;
                for (int64_t i = 0; i < m; ++i) gx[static_cast<size_t>(b * m + i)] += gy[static_cast<size_t>(b * m + i)] * kv;
            }
        });
    }
    return y;
}

Tensor label_smoothing_ce(const Tensor& logits, const std::vector<int>& labels,
                          double eps) {
    if (logits.shape().size() != 2) {
        throw DimensionError("label_smoothing_ce: logits must be [B,k], got " +
                             shape_str(logits.shape()));
    }
    if (eps < 0.0 || eps >= 1.0) {
        throw ConfigError("label_smoothing_ce: smoothing must be in [0,1)");
    }
    const int64_t B = logits.dim(0), k = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != B) {
        throw DimensionError("label_smoothing_ce: batch size mismatch");
    }
    for (int lab : labels) {
        if (lab < 0 || lab >= k) {
            throw DataError("label_smoothing_ce: label " + std::to_string(lab) +
                            " outside [0," + std::to_string(k) + ")");
        }
    }
    const double* px = logits.data();
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(B * k));
    double loss = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const double* xr = px + b * k;
        double mx = xr[0];
        for (int64_t i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < k; ++i) denom += std::exp(xr[i] - mx);
        const double lse = mx + std::log(denom);
        for (int64_t i = 0; i < k; ++i) {
            const double logp = xr[i] - lse;
            (*probs)[static_cast<size_t>(b * k + i)] = std::exp(logp);
            const double target = eps / static_cast<double>(k) +
                                  (i == labels[b] ? 1.0 - eps : 0.0);
            loss -= target * logp;
        }
    }
    loss /= static_cast<double>(B);
    Tensor y = Tensor::scalar(loss);
    if (track({&logits})) {
        y.set_requires_grad(true);
        Tensor lc = logits, yc = y;
        auto labs = std::make_shared<std::vector<int>>(labels);
        Tape::current().record([lc, yc, probs, labs, B, k, eps]() mutable {
            const double g = yc.grad()[0] / static_cast<double>(B);
            auto& gx = lc.grad();
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t i = 0; i < k; ++i) {
                    const double target = eps / static_cast<double>(k) +
                                          (i == (*labs)[static_cast<size_t>(b)] ? 1.0 - eps : 0.0);
                    gx[static_cast<size_t>(b * k + i)] +=
                        g * ((*probs)[static_cast<size_t>(b * k + i)] - target);
                }
            }
        });
    }
    return y;
}

}  // namespace patchpool
