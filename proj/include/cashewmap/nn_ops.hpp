#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "cashewmap/common.hpp"
#include "cashewmap/rng.hpp"
#include "cashewmap/tensor.hpp"

namespace cashewmap {

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!same_shape(a.shape(), b.shape())) throw Error("add: shape mismatch");
    Tensor out = detail::make_op(a.shape(), {a, b}, [a, b](TensorNode& self) {
        detail::accumulate(*a.node(), self.grad.data(), self.size());
        detail::accumulate(*b.node(), self.grad.data(), self.size());
    });
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!same_shape(a.shape(), b.shape())) throw Error("sub: shape mismatch");
    Tensor out = detail::make_op(a.shape(), {a, b}, [a, b](TensorNode& self) {
        detail::accumulate(*a.node(), self.grad.data(), self.size());
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            float* gb = b.node()->grad.data();
            for (std::size_t i = 0; i < self.size(); ++i) gb[i] -= self.grad[i];
        }
    });
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (!same_shape(a.shape(), b.shape())) throw Error("mul: shape mismatch");
    Tensor out = detail::make_op(a.shape(), {a, b}, [a, b](TensorNode& self) {
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            float* ga = a.node()->grad.data();
            const float* pb = b.data();
            for (std::size_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i] * pb[i];
        }
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            float* gb = b.node()->grad.data();
            const float* pa = a.data();
            for (std::size_t i = 0; i < self.size(); ++i) gb[i] += self.grad[i] * pa[i];
        }
    });
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
    return out;
}

inline Tensor scale(const Tensor& a, float c) {
    Tensor out = detail::make_op(a.shape(), {a}, [a, c](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        float* ga = a.node()->grad.data();
        for (std::size_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i] * c;
    });
    const float* pa = a.data();
    float* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * c;
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = detail::make_op(a.shape(), {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        float* ga = a.node()->grad.data();
        const float* y = self.data();
        for (std::size_t i = 0; i < self.size(); ++i)
            if (y[i] > 0.0f) ga[i] += self.grad[i];
    });
    const float* pa = a.data();
    float* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] > 0.0f ? pa[i] : 0.0f;
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out = detail::make_op(a.shape(), {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        float* ga = a.node()->grad.data();
        const float* y = self.data();
        for (std::size_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i] * y[i] * (1.0f - y[i]);
    });
    const float* pa = a.data();
    float* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = 1.0f / (1.0f + std::exp(-pa[i]));
    return out;
}

inline Tensor tanh_op(const Tensor& a) {
    Tensor out = detail::make_op(a.shape(), {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        float* ga = a.node()->grad.data();
        const float* y = self.data();
        for (std::size_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i] * (1.0f - y[i] * y[i]);
    });
    const float* pa = a.data();
    float* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = std::tanh(pa[i]);
    return out;
}

// Same storage order, new shape.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) throw Error("reshape: element count mismatch");
    Tensor out = detail::make_op(shape, {x}, [x](TensorNode& self) {
        detail::accumulate(*x.node(), self.grad.data(), self.size());
    });
    std::copy(x.data(), x.data() + x.size(), out.data());
    return out;
}

// Mean of same-shaped tensors (time aggregation of skip features).
inline Tensor mean_tensors(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw Error("mean_tensors: empty input");
    for (const auto& x : xs)
        if (!same_shape(x.shape(), xs[0].shape())) throw Error("mean_tensors: shape mismatch");
    const float inv = 1.0f / static_cast<float>(xs.size());
    Tensor out = detail::make_op(xs[0].shape(), xs, [xs, inv](TensorNode& self) {
        for (const auto& x : xs) {
            if (!x.requires_grad()) continue;
            x.node()->ensure_grad();
            float* gx = x.node()->grad.data();
            for (std::size_t i = 0; i < self.size(); ++i) gx[i] += self.grad[i] * inv;
        }
    });
    float* po = out.data();
    for (const auto& x : xs) {
        const float* px = x.data();
        for (std::size_t i = 0; i < out.size(); ++i) po[i] += px[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) po[i] *= inv;
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops ([M,N] row-major)
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw Error("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out = detail::make_op({m, n}, {a, b}, [a, b, m, k, n](TensorNode& self) {
        const float* g = self.grad.data();
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            float* ga = a.node()->grad.data();
            const float* pb = b.data();
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    const float* grow = g + static_cast<std::size_t>(i) * n;
                    const float* brow = pb + static_cast<std::size_t>(kk) * n;
                    float acc = 0.0f;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[static_cast<std::size_t>(i) * k + kk] += acc;
                }
        }
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            float* gb = b.node()->grad.data();
            const float* pa = a.data();
            for (int kk = 0; kk < k; ++kk)
                for (int i = 0; i < m; ++i) {
                    const float av = pa[static_cast<std::size_t>(i) * k + kk];
                    if (av == 0.0f) continue;
                    const float* grow = g + static_cast<std::size_t>(i) * n;
                    float* gbrow = gb + static_cast<std::size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
        }
    });
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const float av = pa[static_cast<std::size_t>(i) * k + kk];
            if (av == 0.0f) continue;
            const float* brow = pb + static_cast<std::size_t>(kk) * n;
            float* orow = po + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return out;
}

inline Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
    if (x.shape().size() != 2 || bias.shape() != Shape{x.shape()[1]})
        throw Error("add_bias_rows: shape mismatch");
    const int m = x.shape()[0], n = x.shape()[1];
    Tensor out = detail::make_op(x.shape(), {x, bias}, [x, bias, m, n](TensorNode& self) {
        detail::accumulate(*x.node(), self.grad.data(), self.size());
        if (bias.requires_grad()) {
            bias.node()->ensure_grad();
            float* gb = bias.node()->grad.data();
            const float* g = self.grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[j] += g[static_cast<std::size_t>(i) * n + j];
        }
    });
    const float* px = x.data();
    const float* pb = bias.data();
    float* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            po[static_cast<std::size_t>(i) * n + j] = px[static_cast<std::size_t>(i) * n + j] + pb[j];
    return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0])
        throw Error("concat_cols: shape mismatch");
    const int m = a.shape()[0], na = a.shape()[1], nb = b.shape()[1];
    Tensor out = detail::make_op({m, na + nb}, {a, b}, [a, b, m, na, nb](TensorNode& self) {
        const float* g = self.grad.data();
        const int n = na + nb;
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            float* ga = a.node()->grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < na; ++j)
                    ga[static_cast<std::size_t>(i) * na + j] += g[static_cast<std::size_t>(i) * n + j];
        }
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            float* gb = b.node()->grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < nb; ++j)
                    gb[static_cast<std::size_t>(i) * nb + j] += g[static_cast<std::size_t>(i) * n + na + j];
        }
    });
    float* po = out.data();
    const float* pa = a.data();
    const float* pg = b.data();
    for (int i = 0; i < m; ++i) {
        std::copy(pa + static_cast<std::size_t>(i) * na, pa + static_cast<std::size_t>(i + 1) * na,
                  po + static_cast<std::size_t>(i) * (na + nb));
        std::copy(pg + static_cast<std::size_t>(i) * nb, pg + static_cast<std::size_t>(i + 1) * nb,
                  po + static_cast<std::size_t>(i) * (na + nb) + na);
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, int lo, int hi) {
    if (x.shape().size() != 2 || lo < 0 || hi > x.shape()[1] || lo >= hi)
        throw Error("slice_cols: bad range");
    const int m = x.shape()[0], n = x.shape()[1], w = hi - lo;
    Tensor out = detail::make_op({m, w}, {x}, [x, lo, m, n, w](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float* gx = x.node()->grad.data();
        const float* g = self.grad.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                gx[static_cast<std::size_t>(i) * n + lo + j] += g[static_cast<std::size_t>(i) * w + j];
    });
    float* po = out.data();
    const float* px = x.data();
    for (int i = 0; i < m; ++i)
        std::copy(px + static_cast<std::size_t>(i) * n + lo, px + static_cast<std::size_t>(i) * n + hi,
                  po + static_cast<std::size_t>(i) * w);
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw Error("concat_rows: empty input");
    const int n = xs[0].shape()[1];
    int m = 0;
    for (const auto& x : xs) {
        if (x.shape().size() != 2 || x.shape()[1] != n) throw Error("concat_rows: shape mismatch");
        m += x.shape()[0];
    }
    Tensor out = detail::make_op({m, n}, xs, [xs, n](TensorNode& self) {
        const float* g = self.grad.data();
        std::size_t off = 0;
        for (const auto& x : xs) {
            const std::size_t cnt = x.size();
            detail::accumulate(*x.node(), g + off, cnt);
            off += cnt;
        }
    });
    float* po = out.data();
    for (const auto& x : xs) {
        std::copy(x.data(), x.data() + x.size(), po);
        po += x.size();
    }
    return out;
}

// x [M,N] scaled per row by column vector s [M,1].
inline Tensor mul_colvec(const Tensor& x, const Tensor& s) {
    if (x.shape().size() != 2 || s.shape() != Shape{x.shape()[0], 1})
        throw Error("mul_colvec: shape mismatch");
    const int m = x.shape()[0], n = x.shape()[1];
    Tensor out = detail::make_op(x.shape(), {x, s}, [x, s, m, n](TensorNode& self) {
        const float* g = self.grad.data();
        if (x.requires_grad()) {
            x.node()->ensure_grad();
            float* gx = x.node()->grad.data();
            const float* ps = s.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gx[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(i) * n + j] * ps[i];
        }
        if (s.requires_grad()) {
            s.node()->ensure_grad();
            float* gs = s.node()->grad.data();
            const float* px = x.data();
            for (int i = 0; i < m; ++i) {
                float acc = 0.0f;
                for (int j = 0; j < n; ++j)
                    acc += g[static_cast<std::size_t>(i) * n + j] * px[static_cast<std::size_t>(i) * n + j];
                gs[i] += acc;
            }
        }
    });
    float* po = out.data();
    const float* px = x.data();
    const float* ps = s.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            po[static_cast<std::size_t>(i) * n + j] = px[static_cast<std::size_t>(i) * n + j] * ps[i];
    return out;
}

// Row-wise softmax with the usual stabilizing max shift.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.shape().size() != 2) throw Error("softmax_rows: expected matrix");
    const int m = x.shape()[0], n = x.shape()[1];
    Tensor out = detail::make_op(x.shape(), {x}, [x, m, n](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float* gx = x.node()->grad.data();
        const float* g = self.grad.data();
        const float* y = self.data();
        for (int i = 0; i < m; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += static_cast<double>(g[off + j]) * y[off + j];
            for (int j = 0; j < n; ++j)
                gx[off + j] += y[off + j] * (g[off + j] - static_cast<float>(dot));
        }
    });
    float* po = out.data();
    const float* px = x.data();
    for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * n;
        float mx = px[off];
        for (int j = 1; j < n; ++j) mx = std::max(mx, px[off + j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            po[off + j] = std::exp(px[off + j] - mx);
            sum += po[off + j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < n; ++j) po[off + j] *= inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layout ops between [C,H,W] planes and [H*W,C] row matrices
// ---------------------------------------------------------------------------

inline Tensor chw_to_rows(const Tensor& x) {
    if (x.shape().size() != 3) throw Error("chw_to_rows: expected [C,H,W]");
    const int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
    Tensor out = detail::make_op({hw, c}, {x}, [x, c, hw](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float* gx = x.node()->grad.data();
        const float* g = self.grad.data();
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < hw; ++i)
                gx[static_cast<std::size_t>(ch) * hw + i] += g[static_cast<std::size_t>(i) * c + ch];
    });
    float* po = out.data();
    const float* px = x.data();
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < hw; ++i)
            po[static_cast<std::size_t>(i) * c + ch] = px[static_cast<std::size_t>(ch) * hw + i];
    return out;
}

inline Tensor rows_to_chw(const Tensor& x, int h, int w) {
    if (x.shape().size() != 2 || x.shape()[0] != h * w) throw Error("rows_to_chw: shape mismatch");
    const int c = x.shape()[1], hw = h * w;
    Tensor out = detail::make_op({c, h, w}, {x}, [x, c, hw](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float* gx = x.node()->grad.data();
        const float* g = self.grad.data();
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < hw; ++i)
                gx[static_cast<std::size_t>(i) * c + ch] += g[static_cast<std::size_t>(ch) * hw + i];
    });
    float* po = out.data();
    const float* px = x.data();
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < hw; ++i)
            po[static_cast<std::size_t>(ch) * hw + i] = px[static_cast<std::size_t>(i) * c + ch];
    return out;
}

inline Tensor concat_chw(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[1] != b.shape()[1] ||
        a.shape()[2] != b.shape()[2])
        throw Error("concat_chw: shape mismatch");
    Tensor out = detail::make_op({a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]}, {a, b},
                                 [a, b](TensorNode& self) {
                                     detail::accumulate(*a.node(), self.grad.data(), a.size());
                                     detail::accumulate(*b.node(), self.grad.data() + a.size(), b.size());
                                 });
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

// [C,H,W] -> [1,C] spatial mean.
inline Tensor spatial_mean(const Tensor& x) {
    if (x.shape().size() != 3) throw Error("spatial_mean: expected [C,H,W]");
    const int c = x.shape()[0];
    const int hw = x.shape()[1] * x.shape()[2];
    const float inv = 1.0f / static_cast<float>(hw);
    Tensor out = detail::make_op({1, c}, {x}, [x, c, hw, inv](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float* gx = x.node()->grad.data();
        const float* g = self.grad.data();
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < hw; ++i) gx[static_cast<std::size_t>(ch) * hw + i] += g[ch] * inv;
    });
    float* po = out.data();
    const float* px = x.data();
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += px[static_cast<std::size_t>(ch) * hw + i];
        po[ch] = static_cast<float>(acc / hw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution family ([C,H,W], odd square kernels, same padding)
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.shape().size() != 3 || weight.shape().size() != 4)
        throw Error("conv2d: expected [C,H,W] input and [OC,IC,k,k] weight");
    const int ic = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    const int oc = weight.shape()[0], k = weight.shape()[2];
    if (weight.shape()[1] != ic || weight.shape()[3] != k || k % 2 == 0)
        throw Error("conv2d: weight shape mismatch " + shape_str(weight.shape()));
    if (bias.defined() && bias.shape() != Shape{oc}) throw Error("conv2d: bias shape mismatch");
    const int pad = k / 2;

    std::vector<Tensor> parents = {input, weight};
    if (bias.defined()) parents.push_back(bias);
    Tensor out = detail::make_op({oc, h, w}, parents, [input, weight, bias, ic, oc, h, w, k, pad](TensorNode& self) {
        const float* g = self.grad.data();
        const float* pw = weight.data();
        const float* pin = input.data();
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        if (input.requires_grad()) {
            input.node()->ensure_grad();
            float* gin = input.node()->grad.data();
            for (int o = 0; o < oc; ++o)
                for (int c = 0; c < ic; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const float wv = pw[((static_cast<std::size_t>(o) * ic + c) * k + ky) * k + kx];
                            if (wv == 0.0f) continue;
                            const int dy = ky - pad, dx = kx - pad;
                            const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                            const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                            for (int y = ylo; y < yhi; ++y) {
                                float* grow = gin + static_cast<std::size_t>(c) * plane +
                                              static_cast<std::size_t>(y + dy) * w + dx;
                                const float* orow = g + static_cast<std::size_t>(o) * plane +
                                                    static_cast<std::size_t>(y) * w;
                                for (int x = xlo; x < xhi; ++x) grow[x] += wv * orow[x];
                            }
                        }
        }
        if (weight.requires_grad()) {
            weight.node()->ensure_grad();
            float* gw = weight.node()->grad.data();
            for (int o = 0; o < oc; ++o)
                for (int c = 0; c < ic; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int dy = ky - pad, dx = kx - pad;
                            const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                            const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                            double acc = 0.0;
                            for (int y = ylo; y < yhi; ++y) {
                                const float* irow = pin + static_cast<std::size_t>(c) * plane +
                                                    static_cast<std::size_t>(y + dy) * w + dx;
                                const float* orow = g + static_cast<std::size_t>(o) * plane +
                                                    static_cast<std::size_t>(y) * w;
                                float racc = 0.0f;
                                for (int x = xlo; x < xhi; ++x) racc += irow[x] * orow[x];
                                acc += racc;
                            }
                            gw[((static_cast<std::size_t>(o) * ic + c) * k + ky) * k + kx] +=
                                static_cast<float>(acc);
                        }
        }
        if (bias.defined() && bias.requires_grad()) {
            bias.node()->ensure_grad();
            float* gb = bias.node()->grad.data();
            for (int o = 0; o < oc; ++o) {
                double acc = 0.0;
                const float* orow = g + static_cast<std::size_t>(o) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += orow[i];
                gb[o] += static_cast<float>(acc);
            }
        }
    });

    const float* pin = input.data();
    const float* pw = weight.data();
    float* po = out.data();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (bias.defined()) {
        const float* pb = bias.data();
        for (int o = 0; o < oc; ++o)
            std::fill(po + static_cast<std::size_t>(o) * plane, po + static_cast<std::size_t>(o + 1) * plane,
                      pb[o]);
    }
    for (int o = 0; o < oc; ++o)
        for (int c = 0; c < ic; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const float wv = pw[((static_cast<std::size_t>(o) * ic + c) * k + ky) * k + kx];
                    if (wv == 0.0f) continue;
                    const int dy = ky - pad, dx = kx - pad;
                    const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                    const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                    for (int y = ylo; y < yhi; ++y) {
                        const float* irow = pin + static_cast<std::size_t>(c) * plane +
                                            static_cast<std::size_t>(y + dy) * w + dx;
                        float* orow = po + static_cast<std::size_t>(o) * plane + static_cast<std::size_t>(y) * w;
                        for (int x = xlo; x < xhi; ++x) orow[x] += wv * irow[x];
                    }
                }
    return out;
}

// 2x2 max pooling; even extents required. Gradient routes to the argmax
// (first in scan order on ties).
inline Tensor maxpool2(const Tensor& input) {
    if (input.shape().size() != 3) throw Error("maxpool2: expected [C,H,W]");
    const int c = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    if (h % 2 != 0 || w % 2 != 0) throw InputError("maxpool2: odd extents");
    const int oh = h / 2, ow = w / 2;
    auto argmax = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(c) * oh * ow);

    Tensor out = detail::make_op({c, oh, ow}, {input}, [input, argmax](TensorNode& self) {
        if (!input.requires_grad()) return;
        input.node()->ensure_grad();
        float* gin = input.node()->grad.data();
        const float* g = self.grad.data();
        for (std::size_t i = 0; i < self.size(); ++i) gin[(*argmax)[i]] += g[i];
    });
    const float* pin = input.data();
    float* po = out.data();
    std::size_t oi = 0;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x, ++oi) {
                const std::size_t base =
                    (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * x;
                std::size_t best = base;
                float bv = pin[base];
                const std::size_t cand[3] = {base + 1, base + static_cast<std::size_t>(w),
                                             base + static_cast<std::size_t>(w) + 1};
                for (std::size_t cc : cand)
                    if (pin[cc] > bv) {
                        bv = pin[cc];
                        best = cc;
                    }
                po[oi] = bv;
                (*argmax)[oi] = static_cast<std::int32_t>(best);
            }
    return out;
}

// 2x2 stride-2 transposed convolution; doubles H and W. Weight is [IC,OC,2,2].
inline Tensor transposed_conv2(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.shape().size() != 3 || weight.shape().size() != 4)
        throw Error("transposed_conv2: expected [C,H,W] input and [IC,OC,2,2] weight");
    const int ic = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    const int oc = weight.shape()[1];
    if (weight.shape()[0] != ic || weight.shape()[2] != 2 || weight.shape()[3] != 2)
        throw Error("transposed_conv2: weight shape mismatch");
    if (bias.defined() && bias.shape() != Shape{oc}) throw Error("transposed_conv2: bias shape mismatch");
    const int oh = 2 * h, ow = 2 * w;

    std::vector<Tensor> parents = {input, weight};
    if (bias.defined()) parents.push_back(bias);
    Tensor out = detail::make_op({oc, oh, ow}, parents, [input, weight, bias, ic, oc, h, w, oh, ow](TensorNode& self) {
        const float* g = self.grad.data();
        const float* pw = weight.data();
        const float* pin = input.data();
        const std::size_t iplane = static_cast<std::size_t>(h) * w;
        const std::size_t oplane = static_cast<std::size_t>(oh) * ow;
        if (input.requires_grad()) {
            input.node()->ensure_grad();
            float* gin = input.node()->grad.data();
            for (int c = 0; c < ic; ++c)
                for (int o = 0; o < oc; ++o)
                    for (int ky = 0; ky < 2; ++ky)
                        for (int kx = 0; kx < 2; ++kx) {
                            const float wv = pw[((static_cast<std::size_t>(c) * oc + o) * 2 + ky) * 2 + kx];
                            for (int y = 0; y < h; ++y) {
                                float* grow = gin + static_cast<std::size_t>(c) * iplane +
                                              static_cast<std::size_t>(y) * w;
                                const float* orow = g + static_cast<std::size_t>(o) * oplane +
                                                    (static_cast<std::size_t>(2 * y + ky)) * ow + kx;
                                for (int x = 0; x < w; ++x) grow[x] += wv * orow[2 * x];
                            }
                        }
        }
        if (weight.requires_grad()) {
            weight.node()->ensure_grad();
            float* gw = weight.node()->grad.data();
            for (int c = 0; c < ic; ++c)
                for (int o = 0; o < oc; ++o)
                    for (int ky = 0; ky < 2; ++ky)
                        for (int kx = 0; kx < 2; ++kx) {
                            double acc = 0.0;
                            for (int y = 0; y < h; ++y) {
                                const float* irow = pin + static_cast<std::size_t>(c) * iplane +
                                                    static_cast<std::size_t>(y) * w;
                                const float* orow = g + static_cast<std::size_t>(o) * oplane +
                                                    (static_cast<std::size_t>(2 * y + ky)) * ow + kx;
                                float racc = 0.0f;
                                for (int x = 0; x < w; ++x) racc += irow[x] * orow[2 * x];
                                acc += racc;
                            }
                            gw[((static_cast<std::size_t>(c) * oc + o) * 2 + ky) * 2 + kx] +=
                                static_cast<float>(acc);
                        }
        }
        if (bias.defined() && bias.requires_grad()) {
            bias.node()->ensure_grad();
            float* gb = bias.node()->grad.data();
            for (int o = 0; o < oc; ++o) {
                double acc = 0.0;
                const float* orow = g + static_cast<std::size_t>(o) * oplane;
                for (std::size_t i = 0; i < oplane; ++i) acc += orow[i];
                gb[o] += static_cast<float>(acc);
            }
        }
    });

    const float* pin = input.data();
    const float* pw = weight.data();
    float* po = out.data();
    const std::size_t iplane = static_cast<std::size_t>(h) * w;
    const std::size_t oplane = static_cast<std::size_t>(oh) * ow;
    if (bias.defined()) {
        const float* pb = bias.data();
        for (int o = 0; o < oc; ++o)
            std::fill(po + static_cast<std::size_t>(o) * oplane,
                      po + static_cast<std::size_t>(o + 1) * oplane, pb[o]);
    }
    for (int c = 0; c < ic; ++c)
        for (int o = 0; o < oc; ++o)
            for (int ky = 0; ky < 2; ++ky)
                for (int kx = 0; kx < 2; ++kx) {
                    const float wv = pw[((static_cast<std::size_t>(c) * oc + o) * 2 + ky) * 2 + kx];
                    if (wv == 0.0f) continue;
                    for (int y = 0; y < h; ++y) {
                        const float* irow = pin + static_cast<std::size_t>(c) * iplane +
                                            static_cast<std::size_t>(y) * w;
                        float* orow = po + static_cast<std::size_t>(o) * oplane +
                                      (static_cast<std::size_t>(2 * y + ky)) * ow + kx;
                        for (int x = 0; x < w; ++x) orow[2 * x] += wv * irow[x];
                    }
                }
    return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted: kept activations scale by 1/(1-p))
// ---------------------------------------------------------------------------

enum class DropoutMode { Off, Train, Mc };

inline Tensor dropout(const Tensor& x, double p, DropoutMode mode, std::uint64_t seed) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
    if (mode == DropoutMode::Off || p == 0.0) return x;
    auto mask = std::make_shared<std::vector<float>>(x.size());
    Rng rng(seed);
    const float keep_scale = static_cast<float>(1.0 / (1.0 - p));
    for (auto& mv : *mask) mv = rng.uniform() < p ? 0.0f : keep_scale;

    Tensor out = detail::make_op(x.shape(), {x}, [x, mask](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float* gx = x.node()->grad.data();
        for (std::size_t i = 0; i < self.size(); ++i) gx[i] += self.grad[i] * (*mask)[i];
    });
    const float* px = x.data();
    float* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] * (*mask)[i];
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Pixel-wise cross entropy over class logits [K,H,W]; labels are class codes
// with 255 excluded from the mean. The mean accumulates in float64.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::uint8_t>& labels) {
    if (logits.shape().size() != 3) throw Error("softmax_cross_entropy: expected [K,H,W]");
    const int k = logits.shape()[0];
    const std::size_t npx = static_cast<std::size_t>(logits.shape()[1]) * logits.shape()[2];
    if (labels.size() != npx) throw Error("softmax_cross_entropy: label size mismatch");

    auto probs = std::make_shared<std::vector<float>>(logits.size());
    const float* pl = logits.data();
    double loss = 0.0;
    std::int64_t valid = 0;
    for (std::size_t i = 0; i < npx; ++i) {
        float mx = pl[i];
        for (int c = 1; c < k; ++c) mx = std::max(mx, pl[static_cast<std::size_t>(c) * npx + i]);
        double sum = 0.0;
        for (int c = 0; c < k; ++c)
            sum += std::exp(static_cast<double>(pl[static_cast<std::size_t>(c) * npx + i]) - mx);
        const double lse = std::log(sum) + mx;
        for (int c = 0; c < k; ++c) {
            const std::size_t idx = static_cast<std::size_t>(c) * npx + i;
            (*probs)[idx] = static_cast<float>(std::exp(static_cast<double>(pl[idx]) - lse));
        }
        const std::uint8_t lab = labels[i];
        if (lab == 255) continue;
        if (lab >= k) throw Error("softmax_cross_entropy: label out of range");
        loss -= static_cast<double>(pl[static_cast<std::size_t>(lab) * npx + i]) - lse;
        ++valid;
    }
    if (valid == 0) throw InputError("softmax_cross_entropy: all pixels nodata");
    loss /= static_cast<double>(valid);

    const float inv_valid = static_cast<float>(1.0 / static_cast<double>(valid));
    Tensor out = detail::make_op({1}, {logits}, [logits, probs, labels, k, npx, inv_valid](TensorNode& self) {
        if (!logits.requires_grad()) return;
        logits.node()->ensure_grad();
        float* gx = logits.node()->grad.data();
        const float gscale = self.grad[0] * inv_valid;
        for (std::size_t i = 0; i < npx; ++i) {
            const std::uint8_t lab = labels[i];
            if (lab == 255) continue;
            for (int c = 0; c < k; ++c) {
                const std::size_t idx = static_cast<std::size_t>(c) * npx + i;
                const float ind = c == lab ? 1.0f : 0.0f;
                gx[idx] += gscale * ((*probs)[idx] - ind);
            }
        }
    });
    out.data()[0] = static_cast<float>(loss);
    out.node()->has_scalar64 = true;
    out.node()->scalar64 = loss;
    return out;
}

// Mean squared error against a constant target.
inline Tensor mse_loss(const Tensor& pred, const std::vector<float>& target) {
    if (pred.size() != target.size()) throw Error("mse_loss: size mismatch");
    const std::size_t n = pred.size();
    const float* pp = pred.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pp[i]) - target[i];
        loss += d * d;
    }
    loss /= static_cast<double>(n);

    auto tgt = std::make_shared<std::vector<float>>(target);
    Tensor out = detail::make_op({1}, {pred}, [pred, tgt, n](TensorNode& self) {
        if (!pred.requires_grad()) return;
        pred.node()->ensure_grad();
        float* gx = pred.node()->grad.data();
        const float* pp = pred.data();
        const float gscale = self.grad[0] * 2.0f / static_cast<float>(n);
        for (std::size_t i = 0; i < n; ++i) gx[i] += gscale * (pp[i] - (*tgt)[i]);
    });
    out.data()[0] = static_cast<float>(loss);
    out.node()->has_scalar64 = true;
    out.node()->scalar64 = loss;
    return out;
}

// Weighted sum reduction; the finite-difference harness uses it to build
// scalar objectives with O(1) gradients.
inline Tensor weighted_sum(const Tensor& x, const std::vector<float>& weights) {
    if (x.size() != weights.size()) throw Error("weighted_sum: size mismatch");
    const std::size_t n = x.size();
    double acc = 0.0;
    const float* px = x.data();
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(px[i]) * weights[i];

    auto wts = std::make_shared<std::vector<float>>(weights);
    Tensor out = detail::make_op({1}, {x}, [x, wts, n](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float* gx = x.node()->grad.data();
        for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0] * (*wts)[i];
    });
    out.data()[0] = static_cast<float>(acc);
    out.node()->has_scalar64 = true;
    out.node()->scalar64 = acc;
    return out;
}

}  // namespace cashewmap
