#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dfd/autograd.hpp"
#include "dfd/rng.hpp"
#include "dfd/serialize.hpp"
#include "dfd/tensor.hpp"

namespace dfd {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM). Activations are (C,H,W); weights (OC,C,kh,kw).
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int oh, int ow,
                   std::vector<float>& col) {
    const int c_in = static_cast<int>(x.dim(0));
    const int h = static_cast<int>(x.dim(1));
    const int w = static_cast<int>(x.dim(2));
    const std::int64_t patch = static_cast<std::int64_t>(c_in) * kh * kw;
    const std::int64_t cols = static_cast<std::int64_t>(oh) * ow;
    col.assign(static_cast<std::size_t>(patch * cols), 0.0f);
    float* dst = col.data();
    for (int c = 0; c < c_in; ++c) {
        const float* plane = x.ptr() + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx, dst += cols) {
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const float* src_row = plane + static_cast<std::int64_t>(iy) * w;
                    float* out_row = dst + static_cast<std::int64_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) out_row[ox] = src_row[ix];
                    }
                }
            }
        }
    }
}

inline void col2im_add(const std::vector<float>& col, int c_in, int h, int w, int kh, int kw,
                       int stride, int pad, int oh, int ow, Tensor& x_grad) {
    const std::int64_t cols = static_cast<std::int64_t>(oh) * ow;
    const float* src = col.data();
    for (int c = 0; c < c_in; ++c) {
        float* plane = x_grad.ptr() + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx, src += cols) {
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    float* dst_row = plane + static_cast<std::int64_t>(iy) * w;
                    const float* src_row = src + static_cast<std::int64_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst_row[ix] += src_row[ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

/// 2-D convolution. `b` may be an empty Var-less bias by passing nullptr.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = 1) {
    if (x->value.rank() != 3 || w->value.rank() != 4)
        throw shape_error("conv2d: expected x (C,H,W), w (OC,C,kh,kw)");
    const int c_in = static_cast<int>(x->value.dim(0));
    const int h = static_cast<int>(x->value.dim(1));
    const int wd = static_cast<int>(x->value.dim(2));
    const int oc = static_cast<int>(w->value.dim(0));
    const int kh = static_cast<int>(w->value.dim(2));
    const int kw = static_cast<int>(w->value.dim(3));
    if (w->value.dim(1) != c_in)
        throw shape_error("conv2d: weight expects " + std::to_string(w->value.dim(1)) +
                          " input channels, got " + std::to_string(c_in));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw shape_error("conv2d: output would be empty");

    const std::int64_t patch = static_cast<std::int64_t>(c_in) * kh * kw;
    const std::int64_t cols = static_cast<std::int64_t>(oh) * ow;

    std::vector<float> col;
    detail::im2col(x->value, kh, kw, stride, pad, oh, ow, col);

    Tensor out({oc, oh, ow});
    {
        ConstRowMap wm(w->value.ptr(), oc, patch);
        ConstRowMap cm(col.data(), patch, cols);
        RowMap om(out.ptr(), oc, cols);
        om.noalias() = wm * cm;
    }
    if (b && b->value.numel()) {
        for (int o = 0; o < oc; ++o) {
            float* row = out.ptr() + static_cast<std::int64_t>(o) * cols;
            const float bv = b->value[o];
            for (std::int64_t i = 0; i < cols; ++i) row[i] += bv;
        }
    }

    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(std::move(out), std::move(parents),
                   [x, w, b, stride, pad, oh, ow, kh, kw, c_in, h, wd, oc, patch, cols](Node& n) {
                       ConstRowMap dym(n.grad.ptr(), oc, cols);
                       // im2col is recomputed here rather than cached: the GEMMs dominate.
                       std::vector<float> col;
                       detail::im2col(x->value, kh, kw, stride, pad, oh, ow, col);
                       ConstRowMap cm(col.data(), patch, cols);
                       if (w->requires_grad) {
                           w->ensure_grad();
                           RowMap dwm(w->grad.ptr(), oc, patch);
                           dwm.noalias() += dym * cm.transpose();
                       }
                       if (b && b->requires_grad) {
                           b->ensure_grad();
                           for (int o = 0; o < oc; ++o) {
                               double s = 0.0;
                               const float* row = n.grad.ptr() + static_cast<std::int64_t>(o) * cols;
                               for (std::int64_t i = 0; i < cols; ++i) s += row[i];
                               b->grad[o] += static_cast<float>(s);
                           }
                       }
                       if (x->requires_grad) {
                           x->ensure_grad();
                           std::vector<float> dcol(static_cast<std::size_t>(patch * cols));
                           ConstRowMap wm(w->value.ptr(), oc, patch);
                           RowMap dcm(dcol.data(), patch, cols);
                           dcm.noalias() = wm.transpose() * dym;
                           detail::col2im_add(dcol, c_in, h, wd, kh, kw, stride, pad, oh, ow,
                                              x->grad);
                       }
                   });
}

/// Graph-free convolution for frozen forward passes.
inline Tensor conv2d_plain(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1,
                           int pad = 1) {
    if (x.rank() != 3 || w.rank() != 4) throw shape_error("conv2d_plain: expected (C,H,W)/(OC,C,kh,kw)");
    if (w.dim(1) != x.dim(0)) throw shape_error("conv2d_plain: channel mismatch");
    const int c_in = static_cast<int>(x.dim(0));
    const int h = static_cast<int>(x.dim(1));
    const int wd = static_cast<int>(x.dim(2));
    const int oc = static_cast<int>(w.dim(0));
    const int kh = static_cast<int>(w.dim(2));
    const int kw = static_cast<int>(w.dim(3));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    const std::int64_t patch = static_cast<std::int64_t>(c_in) * kh * kw;
    const std::int64_t cols = static_cast<std::int64_t>(oh) * ow;
    std::vector<float> col;
    detail::im2col(x, kh, kw, stride, pad, oh, ow, col);
    Tensor out({oc, oh, ow});
    ConstRowMap wm(w.ptr(), oc, patch);
    ConstRowMap cm(col.data(), patch, cols);
    RowMap om(out.ptr(), oc, cols);
    om.noalias() = wm * cm;
    if (b.numel())
        for (int o = 0; o < oc; ++o) {
            float* row = out.ptr() + static_cast<std::int64_t>(o) * cols;
            for (std::int64_t i = 0; i < cols; ++i) row[i] += b[o];
        }
    return out;
}

inline Tensor leaky_relu_plain(Tensor x, float slope = 0.2f) {
    for (auto& v : x.data)
        if (v < 0.0f) v *= slope;
    return x;
}

inline Tensor avg_pool2_plain(const Tensor& x) {
    const int c = static_cast<int>(x.dim(0));
    const int h = static_cast<int>(x.dim(1));
    const int w = static_cast<int>(x.dim(2));
    if (h % 2 || w % 2) throw shape_error("avg_pool2_plain: odd spatial size");
    Tensor out({c, h / 2, w / 2});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h / 2; ++y)
            for (int xx = 0; xx < w / 2; ++xx)
                out.at3(ch, y, xx) =
                    0.25f * (x.at3(ch, 2 * y, 2 * xx) + x.at3(ch, 2 * y, 2 * xx + 1) +
                             x.at3(ch, 2 * y + 1, 2 * xx) + x.at3(ch, 2 * y + 1, 2 * xx + 1));
    return out;
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------

inline Var avg_pool2(const Var& x) {
    const int c = static_cast<int>(x->value.dim(0));
    const int h = static_cast<int>(x->value.dim(1));
    const int w = static_cast<int>(x->value.dim(2));
    if (h % 2 || w % 2) throw shape_error("avg_pool2: odd spatial size");
    Tensor out({c, h / 2, w / 2});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h / 2; ++y)
            for (int xx = 0; xx < w / 2; ++xx)
                out.at3(ch, y, xx) =
                    0.25f * (x->value.at3(ch, 2 * y, 2 * xx) + x->value.at3(ch, 2 * y, 2 * xx + 1) +
                             x->value.at3(ch, 2 * y + 1, 2 * xx) +
                             x->value.at3(ch, 2 * y + 1, 2 * xx + 1));
    return make_op(std::move(out), {x}, [x, c, h, w](Node& n) {
        x->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h / 2; ++y)
                for (int xx = 0; xx < w / 2; ++xx) {
                    const float g = 0.25f * n.grad.at3(ch, y, xx);
                    x->grad.at3(ch, 2 * y, 2 * xx) += g;
                    x->grad.at3(ch, 2 * y, 2 * xx + 1) += g;
                    x->grad.at3(ch, 2 * y + 1, 2 * xx) += g;
                    x->grad.at3(ch, 2 * y + 1, 2 * xx + 1) += g;
                }
    });
}

inline Var upsample_nearest2(const Var& x) {
    const int c = static_cast<int>(x->value.dim(0));
    const int h = static_cast<int>(x->value.dim(1));
    const int w = static_cast<int>(x->value.dim(2));
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out.at3(ch, y, xx) = x->value.at3(ch, y / 2, xx / 2);
    return make_op(std::move(out), {x}, [x, c, h, w](Node& n) {
        x->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    x->grad.at3(ch, y / 2, xx / 2) += n.grad.at3(ch, y, xx);
    });
}

// ---------------------------------------------------------------------------
// Bicubic resampling (Keys kernel, a = -0.5), separable, optional antialias.
// Linear in the input, so the backward pass is the exact adjoint.
// ---------------------------------------------------------------------------

namespace detail {

inline double cubic_keys(double t) {
    constexpr double a = -0.5;
    t = std::fabs(t);
    if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
    if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
    return 0.0;
}

struct ResampleTable {
    int in_size = 0, out_size = 0;
    std::vector<int> start;            // first tap index per output element
    std::vector<int> count;            // tap count per output element
    std::vector<int> index;            // flattened clamped source indices
    std::vector<float> weight;         // flattened normalized weights
};

inline ResampleTable make_resample_table(int in_size, int out_size, bool antialias) {
    if (in_size < 1 || out_size < 1) throw shape_error("resize: empty size");
    ResampleTable t;
    t.in_size = in_size;
    t.out_size = out_size;
    const double scale = static_cast<double>(in_size) / out_size;
    const double support = (antialias && scale > 1.0) ? scale : 1.0;
    const double radius = 2.0 * support;
    t.start.resize(static_cast<std::size_t>(out_size));
    t.count.resize(static_cast<std::size_t>(out_size));
    for (int o = 0; o < out_size; ++o) {
        const double center = (o + 0.5) * scale - 0.5;
        const int lo = static_cast<int>(std::ceil(center - radius));
        const int hi = static_cast<int>(std::floor(center + radius));
        t.start[static_cast<std::size_t>(o)] = static_cast<int>(t.index.size());
        double sum = 0.0;
        std::vector<double> ws;
        for (int i = lo; i <= hi; ++i) {
            const double w = cubic_keys((i - center) / support);
            ws.push_back(w);
            sum += w;
        }
        if (sum == 0.0) sum = 1.0;
        for (int i = lo, j = 0; i <= hi; ++i, ++j) {
            t.index.push_back(std::clamp(i, 0, in_size - 1));
            t.weight.push_back(static_cast<float>(ws[static_cast<std::size_t>(j)] / sum));
        }
        t.count[static_cast<std::size_t>(o)] =
            static_cast<int>(t.index.size()) - t.start[static_cast<std::size_t>(o)];
    }
    return t;
}

// out[o] = sum_i w(o,i) * in[idx(o,i)] along one axis of a plane.
inline void resample_rows(const float* in, int h, int w, const ResampleTable& tx, float* out) {
    for (int y = 0; y < h; ++y) {
        const float* src = in + static_cast<std::int64_t>(y) * w;
        float* dst = out + static_cast<std::int64_t>(y) * tx.out_size;
        for (int o = 0; o < tx.out_size; ++o) {
            const int s = tx.start[static_cast<std::size_t>(o)];
            const int c = tx.count[static_cast<std::size_t>(o)];
            double acc = 0.0;
            for (int j = 0; j < c; ++j) acc += static_cast<double>(tx.weight[s + j]) * src[tx.index[s + j]];
            dst[o] = static_cast<float>(acc);
        }
    }
}

inline void resample_cols(const float* in, int h, int w, const ResampleTable& ty, float* out) {
    for (int o = 0; o < ty.out_size; ++o) {
        const int s = ty.start[static_cast<std::size_t>(o)];
        const int c = ty.count[static_cast<std::size_t>(o)];
        float* dst = out + static_cast<std::int64_t>(o) * w;
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int j = 0; j < c; ++j)
                acc += static_cast<double>(ty.weight[s + j]) *
                       in[static_cast<std::int64_t>(ty.index[s + j]) * w + x];
            dst[x] = static_cast<float>(acc);
        }
    }
}

// Adjoint scatter of resample_rows / resample_cols.
inline void resample_rows_adjoint(const float* gout, int h, const ResampleTable& tx, float* gin) {
    for (int y = 0; y < h; ++y) {
        const float* src = gout + static_cast<std::int64_t>(y) * tx.out_size;
        float* dst = gin + static_cast<std::int64_t>(y) * tx.in_size;
        for (int o = 0; o < tx.out_size; ++o) {
            const int s = tx.start[static_cast<std::size_t>(o)];
            const int c = tx.count[static_cast<std::size_t>(o)];
            for (int j = 0; j < c; ++j) dst[tx.index[s + j]] += tx.weight[s + j] * src[o];
        }
    }
}

inline void resample_cols_adjoint(const float* gout, int w, const ResampleTable& ty, float* gin) {
    for (int o = 0; o < ty.out_size; ++o) {
        const float* src = gout + static_cast<std::int64_t>(o) * w;
        for (int j = ty.start[static_cast<std::size_t>(o)];
             j < ty.start[static_cast<std::size_t>(o)] + ty.count[static_cast<std::size_t>(o)]; ++j)
            for (int x = 0; x < w; ++x)
                gin[static_cast<std::int64_t>(ty.index[j]) * w + x] += ty.weight[j] * src[x];
    }
}

} // namespace detail

/// Bicubic resize of a (C,H,W) tensor. Antialiased when downscaling.
inline Tensor resize_bicubic(const Tensor& x, int oh, int ow, bool antialias = true) {
    if (x.rank() != 3) throw shape_error("resize_bicubic: expected (C,H,W)");
    const int c = static_cast<int>(x.dim(0));
    const int h = static_cast<int>(x.dim(1));
    const int w = static_cast<int>(x.dim(2));
    if (oh == h && ow == w) return x;
    const auto tx = detail::make_resample_table(w, ow, antialias);
    const auto ty = detail::make_resample_table(h, oh, antialias);
    Tensor out({c, oh, ow});
    std::vector<float> tmp(static_cast<std::size_t>(h) * ow);
    for (int ch = 0; ch < c; ++ch) {
        detail::resample_rows(x.ptr() + static_cast<std::int64_t>(ch) * h * w, h, w, tx, tmp.data());
        detail::resample_cols(tmp.data(), h, ow, ty, out.ptr() + static_cast<std::int64_t>(ch) * oh * ow);
    }
    return out;
}

/// Autograd wrapper around resize_bicubic.
inline Var resize_bicubic_op(const Var& x, int oh, int ow, bool antialias = true) {
    const int c = static_cast<int>(x->value.dim(0));
    const int h = static_cast<int>(x->value.dim(1));
    const int w = static_cast<int>(x->value.dim(2));
    Tensor out = resize_bicubic(x->value, oh, ow, antialias);
    return make_op(std::move(out), {x}, [x, c, h, w, oh, ow, antialias](Node& n) {
        x->ensure_grad();
        if (oh == h && ow == w) {
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i];
            return;
        }
        const auto tx = detail::make_resample_table(w, ow, antialias);
        const auto ty = detail::make_resample_table(h, oh, antialias);
        std::vector<float> tmp(static_cast<std::size_t>(h) * ow);
        for (int ch = 0; ch < c; ++ch) {
            std::fill(tmp.begin(), tmp.end(), 0.0f);
            detail::resample_cols_adjoint(n.grad.ptr() + static_cast<std::int64_t>(ch) * oh * ow, ow,
                                          ty, tmp.data());
            detail::resample_rows_adjoint(tmp.data(), h, tx,
                                          x->grad.ptr() + static_cast<std::int64_t>(ch) * h * w);
        }
    });
}

// ---------------------------------------------------------------------------
// Channel concat / slice
// ---------------------------------------------------------------------------

inline Var concat_ch(const Var& a, const Var& b) {
    if (a->value.dim(1) != b->value.dim(1) || a->value.dim(2) != b->value.dim(2))
        throw shape_error("concat_ch: spatial mismatch");
    const std::int64_t ca = a->value.dim(0), cb = b->value.dim(0);
    const std::int64_t plane = a->value.dim(1) * a->value.dim(2);
    Tensor out({ca + cb, a->value.dim(1), a->value.dim(2)});
    std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
    std::copy(b->value.data.begin(), b->value.data.end(), out.data.begin() + ca * plane);
    return make_op(std::move(out), {a, b}, [a, b, ca, cb, plane](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::int64_t i = 0; i < ca * plane; ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::int64_t i = 0; i < cb * plane; ++i) b->grad[i] += n.grad[ca * plane + i];
        }
    });
}

inline Var slice_ch(const Var& x, int c0, int c1) {
    if (c0 < 0 || c1 > x->value.dim(0) || c0 >= c1) throw shape_error("slice_ch: bad range");
    const std::int64_t plane = x->value.dim(1) * x->value.dim(2);
    Tensor out({c1 - c0, x->value.dim(1), x->value.dim(2)});
    std::copy(x->value.data.begin() + c0 * plane, x->value.data.begin() + c1 * plane,
              out.data.begin());
    return make_op(std::move(out), {x}, [x, c0, plane](Node& n) {
        x->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) x->grad[c0 * plane + i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Layers and the optimizer
// ---------------------------------------------------------------------------

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 1;

    static Conv2d make(int in_c, int out_c, int k, int stride, Rng& rng, const std::string& name) {
        Conv2d c;
        Tensor wt({out_c, in_c, k, k});
        wt.fill_normal(rng, std::sqrt(2.0f / static_cast<float>(in_c * k * k)));
        c.w = make_param(std::move(wt), name + ".w");
        c.b = make_param(Tensor({out_c}), name + ".b");
        c.stride = stride;
        c.pad = k / 2;
        return c;
    }

    Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(std::vector<Var>& out) const {
        out.push_back(w);
        out.push_back(b);
    }
};

inline void zero_fill(const Var& p) { std::fill(p->value.data.begin(), p->value.data.end(), 0.0f); }

/// Adam with bias correction (lr schedule is owned by the caller).
struct Adam {
    float lr = 2e-4f, beta1 = 0.5f, beta2 = 0.999f, eps = 1e-8f;
    std::int64_t t = 0;
    std::vector<Var> params;
    std::vector<Tensor> m, v;

    Adam() = default;
    Adam(std::vector<Var> ps, float lr_, float b1, float b2) : lr(lr_), beta1(b1), beta2(b2), params(std::move(ps)) {
        for (const auto& p : params) {
            m.push_back(Tensor::zeros(p->value.dims));
            v.push_back(Tensor::zeros(p->value.dims));
        }
    }

    void step() {
        ++t;
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            const bool has_grad = !p->grad.data.empty();
            for (std::int64_t j = 0; j < p->value.numel(); ++j) {
                const float g = has_grad ? p->grad[j] : 0.0f;
                m[i][j] = beta1 * m[i][j] + (1.0f - beta1) * g;
                v[i][j] = beta2 * v[i][j] + (1.0f - beta2) * g * g;
                const double mh = m[i][j] / bc1;
                const double vh = v[i][j] / bc2;
                p->value[j] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps));
            }
        }
    }

    void save_state(BlobArchive& a, const std::string& prefix) const {
        a.add_scalar(prefix + ".t", static_cast<double>(t));
        a.add_scalar(prefix + ".lr", lr);
        for (std::size_t i = 0; i < params.size(); ++i) {
            a.add(prefix + ".m." + params[i]->name, m[i]);
            a.add(prefix + ".v." + params[i]->name, v[i]);
        }
    }
    void load_state(const BlobArchive& a, const std::string& prefix) {
        t = static_cast<std::int64_t>(a.scalar(prefix + ".t"));
        lr = static_cast<float>(a.scalar(prefix + ".lr"));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = a.get(prefix + ".m." + params[i]->name);
            v[i] = a.get(prefix + ".v." + params[i]->name);
        }
    }
};

// ---------------------------------------------------------------------------
// Spectral normalization (power iteration on the out x rest matricization)
// ---------------------------------------------------------------------------

namespace detail {
inline void normalize_vec(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-12) n = 1e-12;
    for (double& x : v) x /= n;
}
} // namespace detail

/// One (or more) power-iteration steps; returns {W/sigma, sigma} and updates u.
inline std::pair<Tensor, double> spectral_normalize(const Tensor& w2d, Tensor& u, int iters = 1) {
    if (w2d.rank() != 2) throw shape_error("spectral_normalize: expected 2-D weight");
    const int rows = static_cast<int>(w2d.dim(0));
    const int cols = static_cast<int>(w2d.dim(1));
    if (u.numel() != rows) throw shape_error("spectral_normalize: u size mismatch");

    std::vector<double> uv(u.data.begin(), u.data.end());
    std::vector<double> vv(static_cast<std::size_t>(cols), 0.0);
    for (int it = 0; it < iters; ++it) {
        // v = normalize(W^T u)
        std::fill(vv.begin(), vv.end(), 0.0);
        for (int r = 0; r < rows; ++r) {
            const float* row = w2d.ptr() + static_cast<std::int64_t>(r) * cols;
            for (int c = 0; c < cols; ++c) vv[static_cast<std::size_t>(c)] += row[c] * uv[static_cast<std::size_t>(r)];
        }
        detail::normalize_vec(vv);
        // u = normalize(W v)
        for (int r = 0; r < rows; ++r) {
            const float* row = w2d.ptr() + static_cast<std::int64_t>(r) * cols;
            double acc = 0.0;
            for (int c = 0; c < cols; ++c) acc += row[c] * vv[static_cast<std::size_t>(c)];
            uv[static_cast<std::size_t>(r)] = acc;
        }
        detail::normalize_vec(uv);
    }
    // sigma = u^T W v
    double sigma = 0.0;
    for (int r = 0; r < rows; ++r) {
        const float* row = w2d.ptr() + static_cast<std::int64_t>(r) * cols;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += row[c] * vv[static_cast<std::size_t>(c)];
        sigma += uv[static_cast<std::size_t>(r)] * acc;
    }
    if (std::fabs(sigma) < 1e-12) sigma = 1e-12;

    for (int r = 0; r < rows; ++r) u[r] = static_cast<float>(uv[static_cast<std::size_t>(r)]);
    Tensor out = w2d;
    for (auto& x : out.data) x = static_cast<float>(x / sigma);
    return {std::move(out), sigma};
}

namespace detail {
/// sigma estimate with u,v fixed (u is not updated). Returns {sigma, v}.
inline std::pair<double, std::vector<double>> sn_sigma_fixed_u(const Tensor& w2d, const Tensor& u) {
    const int rows = static_cast<int>(w2d.dim(0));
    const int cols = static_cast<int>(w2d.dim(1));
    std::vector<double> uv(u.data.begin(), u.data.end());
    std::vector<double> vv(static_cast<std::size_t>(cols), 0.0);
    for (int r = 0; r < rows; ++r) {
        const float* row = w2d.ptr() + static_cast<std::int64_t>(r) * cols;
        for (int c = 0; c < cols; ++c) vv[static_cast<std::size_t>(c)] += row[c] * uv[static_cast<std::size_t>(r)];
    }
    normalize_vec(vv);
    double sigma = 0.0;
    for (int r = 0; r < rows; ++r) {
        const float* row = w2d.ptr() + static_cast<std::int64_t>(r) * cols;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += row[c] * vv[static_cast<std::size_t>(c)];
        sigma += uv[static_cast<std::size_t>(r)] * acc;
    }
    if (std::fabs(sigma) < 1e-12) sigma = 1e-12;
    return {sigma, vv};
}
} // namespace detail

/// Spectrally normalized view of a conv weight for the forward pass.
/// u is updated only when `update_u` (training-mode discriminator forward).
/// Backward treats u and v as constants, differentiating W/(u^T W v).
inline Var sn_weight(const Var& w, Tensor& u, bool update_u) {
    const std::int64_t oc = w->value.dim(0);
    const std::int64_t rest = w->value.numel() / oc;
    Tensor w2d = w->value.reshaped({oc, rest});
    if (update_u) {
        auto [wn, sigma] = spectral_normalize(w2d, u, 1);
        (void)wn;
    }
    auto [sigma, vv] = detail::sn_sigma_fixed_u(w2d, u);
    Tensor out = w->value;
    for (auto& x : out.data) x = static_cast<float>(x / sigma);
    Tensor u_snapshot = u;
    return make_op(std::move(out), {w},
                   [w, sigma, vv, u_snapshot, oc, rest](Node& n) {
                       w->ensure_grad();
                       // d(W/sigma)/dW with sigma = u^T W v, u/v constant:
                       // G/sigma - (sum G.*W / sigma^2) u v^T
                       double gdotw = 0.0;
                       for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                           gdotw += static_cast<double>(n.grad[i]) * w->value[i];
                       const double coef = gdotw / (sigma * sigma);
                       for (std::int64_t r = 0; r < oc; ++r)
                           for (std::int64_t c = 0; c < rest; ++c) {
                               const std::int64_t i = r * rest + c;
                               w->grad[i] += static_cast<float>(
                                   n.grad[i] / sigma -
                                   coef * u_snapshot[r] * vv[static_cast<std::size_t>(c)]);
                           }
                   });
}

struct SNConv2d {
    Var w, b;
    Tensor u;
    int stride = 1, pad = 1;

    static SNConv2d make(int in_c, int out_c, int k, int stride, Rng& rng, const std::string& name) {
        SNConv2d c;
        Tensor wt({out_c, in_c, k, k});
        wt.fill_normal(rng, std::sqrt(2.0f / static_cast<float>(in_c * k * k)));
        c.w = make_param(std::move(wt), name + ".w");
        c.b = make_param(Tensor({out_c}), name + ".b");
        c.u = Tensor({out_c});
        Rng urng(derive_seed(0x5eed5eedull, static_cast<std::uint64_t>(out_c) * 7919 + static_cast<std::uint64_t>(in_c)));
        c.u.fill_normal(urng);
        c.stride = stride;
        c.pad = k / 2;
        return c;
    }

    Var operator()(const Var& x, bool update_u) {
        return conv2d(x, sn_weight(w, u, update_u), b, stride, pad);
    }

    void collect(std::vector<Var>& out) const {
        out.push_back(w);
        out.push_back(b);
    }
};

} // namespace dfd
