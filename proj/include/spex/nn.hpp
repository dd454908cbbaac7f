// Convolution, upsampling and small layer wrappers on top of the tensor core.
// Convolutions lower to im2col + GEMM (Eigen) in both directions; the
// scatter/gather bookkeeping around the GEMM stays explicit so gradients are
// exact and deterministic.

#pragma once

#include <Eigen/Core>

#include "spex/tensor.hpp"

namespace spex {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace detail {

// Reused im2col scratch; contents are always fully overwritten before use.
inline std::vector<double>& conv_scratch(int which, size_t n) {
    thread_local std::vector<double> buf[2];
    if (buf[which].size() < n) buf[which].resize(n);
    return buf[which];
}

inline int conv_out_dim(int in, int k, int stride, int pad, const char* what) {
    if (k > in + 2 * pad)
        throw std::invalid_argument(std::string(what) + ": kernel " + std::to_string(k) +
                                    " exceeds padded input " + std::to_string(in + 2 * pad));
    int out = (in + 2 * pad - k) / stride + 1;
    if (out <= 0) throw std::invalid_argument(std::string(what) + ": degenerate output size");
    return out;
}

// (C,H,W) -> (C*k*k, Ho*Wo)
inline void im2col2d(const double* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                     double* col) {
    long long M = static_cast<long long>(Ho) * Wo;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* row = col + ((static_cast<long long>(c) * k + ky) * k + kx) * M;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::fill(row + static_cast<long long>(oy) * Wo, row + static_cast<long long>(oy + 1) * Wo, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<long long>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        row[static_cast<long long>(oy) * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
                    }
                }
            }
}

inline void col2im2d(const double* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                     double* gx) {
    long long M = static_cast<long long>(Ho) * Wo;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* row = col + ((static_cast<long long>(c) * k + ky) * k + kx) * M;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    double* dst = gx + (static_cast<long long>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += row[static_cast<long long>(oy) * Wo + ox];
                    }
                }
            }
}

// (C,D,H,W) -> (C*k^3, Do*Ho*Wo)
inline void im2col3d(const double* x, int C, int D, int H, int W, int k, int stride, int pad, int Do, int Ho,
                     int Wo, double* col) {
    long long M = static_cast<long long>(Do) * Ho * Wo;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c)
        for (int kd = 0; kd < k; ++kd)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    double* row = col + (((static_cast<long long>(c) * k + kd) * k + ky) * k + kx) * M;
                    for (int od = 0; od < Do; ++od) {
                        int id = od * stride - pad + kd;
                        for (int oy = 0; oy < Ho; ++oy) {
                            int iy = oy * stride - pad + ky;
                            double* out = row + (static_cast<long long>(od) * Ho + oy) * Wo;
                            if (id < 0 || id >= D || iy < 0 || iy >= H) {
                                std::fill(out, out + Wo, 0.0);
                                continue;
                            }
                            const double* src = x + ((static_cast<long long>(c) * D + id) * H + iy) * W;
                            for (int ox = 0; ox < Wo; ++ox) {
                                int ix = ox * stride - pad + kx;
                                out[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
                            }
                        }
                    }
                }
}

inline void col2im3d(const double* col, int C, int D, int H, int W, int k, int stride, int pad, int Do, int Ho,
                     int Wo, double* gx) {
    long long M = static_cast<long long>(Do) * Ho * Wo;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c)
        for (int kd = 0; kd < k; ++kd)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double* row = col + (((static_cast<long long>(c) * k + kd) * k + ky) * k + kx) * M;
                    for (int od = 0; od < Do; ++od) {
                        int id = od * stride - pad + kd;
                        if (id < 0 || id >= D) continue;
                        for (int oy = 0; oy < Ho; ++oy) {
                            int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            const double* src = row + (static_cast<long long>(od) * Ho + oy) * Wo;
                            double* dst = gx + ((static_cast<long long>(c) * D + id) * H + iy) * W;
                            for (int ox = 0; ox < Wo; ++ox) {
                                int ix = ox * stride - pad + kx;
                                if (ix >= 0 && ix < W) dst[ix] += src[ox];
                            }
                        }
                    }
                }
}

}  // namespace detail

// x: (C_in,H,W), w: (C_out,C_in,k,k), optional bias (C_out).
inline TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride, int pad) {
    if (x->rank() != 3) throw std::invalid_argument("conv2d: input must be (C,H,W)");
    if (w->rank() != 4 || w->shape[2] != w->shape[3]) throw std::invalid_argument("conv2d: kernel must be (Co,Ci,k,k)");
    if (w->shape[1] != x->shape[0])
        throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(x->shape) + " kernel " +
                                    shape_str(w->shape));
    if (b && (b->rank() != 1 || b->shape[0] != w->shape[0])) throw std::invalid_argument("conv2d: bad bias shape");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");

    const int Ci = x->shape[0], H = x->shape[1], W = x->shape[2];
    const int Co = w->shape[0], k = w->shape[2];
    const int Ho = detail::conv_out_dim(H, k, stride, pad, "conv2d");
    const int Wo = detail::conv_out_dim(W, k, stride, pad, "conv2d");
    const long long K = static_cast<long long>(Ci) * k * k;
    const long long M = static_cast<long long>(Ho) * Wo;
    // 1x1/stride-1 kernels need no im2col: the input already is the column matrix
    const bool direct = (k == 1 && stride == 1 && pad == 0);

    const double* colp = x->data.data();
    if (!direct) {
        auto& col = detail::conv_scratch(0, K * M);
        detail::im2col2d(x->data.data(), Ci, H, W, k, stride, pad, Ho, Wo, col.data());
        colp = col.data();
    }

    std::vector<double> out(static_cast<long long>(Co) * M);
    {
        CMapRM Wm(w->data.data(), Co, K);
        CMapRM Cm(colp, K, M);
        MapRM Om(out.data(), Co, M);
        Om.noalias() = Wm * Cm;
        if (b)
            for (int co = 0; co < Co; ++co) Om.row(co).array() += b->data[co];
    }

    std::vector<TensorPtr> parents = b ? std::vector<TensorPtr>{x, w, b} : std::vector<TensorPtr>{x, w};
    return make_node(Shape{Co, Ho, Wo}, std::move(out), std::move(parents),
                     [x, w, b, stride, pad, Ci, H, W, Co, k, Ho, Wo, K, M, direct](Tensor& o) {
                         CMapRM Gm(o.grad.data(), Co, M);
                         if (w->requires_grad || x->requires_grad) {
                             const double* colp = x->data.data();
                             if (!direct) {
                                 auto& col = detail::conv_scratch(0, K * M);
                                 detail::im2col2d(x->data.data(), Ci, H, W, k, stride, pad, Ho, Wo, col.data());
                                 colp = col.data();
                             }
                             if (w->requires_grad) {
                                 w->ensure_grad();
                                 MapRM Gw(w->grad.data(), Co, K);
                                 CMapRM Cm(colp, K, M);
                                 Gw.noalias() += Gm * Cm.transpose();
                             }
                             if (x->requires_grad) {
                                 x->ensure_grad();
                                 CMapRM Wm(w->data.data(), Co, K);
                                 if (direct) {
                                     MapRM Gx(x->grad.data(), K, M);
                                     Gx.noalias() += Wm.transpose() * Gm;
                                 } else {
                                     auto& gcol = detail::conv_scratch(1, K * M);
                                     MapRM Gc(gcol.data(), K, M);
                                     Gc.noalias() = Wm.transpose() * Gm;
                                     detail::col2im2d(gcol.data(), Ci, H, W, k, stride, pad, Ho, Wo, x->grad.data());
                                 }
                             }
                         }
                         if (b && b->requires_grad) {
                             b->ensure_grad();
                             // fixed-order accumulation; Eigen's redux reassociates by alignment
                             for (int co = 0; co < Co; ++co) {
                                 double s = 0.0;
                                 const double* g = o.grad.data() + co * M;
                                 for (long long m = 0; m < M; ++m) s += g[m];
                                 b->grad[co] += s;
                             }
                         }
                     });
}

// x: (C_in,D,H,W), w: (C_out,C_in,k,k,k), optional bias (C_out).
inline TensorPtr conv3d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride, int pad) {
    if (x->rank() != 4) throw std::invalid_argument("conv3d: input must be (C,D,H,W)");
    if (w->rank() != 5 || w->shape[2] != w->shape[3] || w->shape[3] != w->shape[4])
        throw std::invalid_argument("conv3d: kernel must be (Co,Ci,k,k,k)");
    if (w->shape[1] != x->shape[0]) throw std::invalid_argument("conv3d: channel mismatch");
    if (b && (b->rank() != 1 || b->shape[0] != w->shape[0])) throw std::invalid_argument("conv3d: bad bias shape");
    if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");

    const int Ci = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Co = w->shape[0], k = w->shape[2];
    const int Do = detail::conv_out_dim(D, k, stride, pad, "conv3d");
    const int Ho = detail::conv_out_dim(H, k, stride, pad, "conv3d");
    const int Wo = detail::conv_out_dim(W, k, stride, pad, "conv3d");
    const long long K = static_cast<long long>(Ci) * k * k * k;
    const long long M = static_cast<long long>(Do) * Ho * Wo;

    auto& col = detail::conv_scratch(0, K * M);
    detail::im2col3d(x->data.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo, col.data());

    std::vector<double> out(static_cast<long long>(Co) * M);
    {
        CMapRM Wm(w->data.data(), Co, K);
        CMapRM Cm(col.data(), K, M);
        MapRM Om(out.data(), Co, M);
        Om.noalias() = Wm * Cm;
        if (b)
            for (int co = 0; co < Co; ++co) Om.row(co).array() += b->data[co];
    }

    std::vector<TensorPtr> parents = b ? std::vector<TensorPtr>{x, w, b} : std::vector<TensorPtr>{x, w};
    return make_node(Shape{Co, Do, Ho, Wo}, std::move(out), std::move(parents),
                     [x, w, b, stride, pad, Ci, D, H, W, Co, k, Do, Ho, Wo, K, M](Tensor& o) {
                         CMapRM Gm(o.grad.data(), Co, M);
                         if (w->requires_grad || x->requires_grad) {
                             auto& col = detail::conv_scratch(0, K * M);
                             detail::im2col3d(x->data.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo, col.data());
                             if (w->requires_grad) {
                                 w->ensure_grad();
                                 MapRM Gw(w->grad.data(), Co, K);
                                 CMapRM Cm(col.data(), K, M);
                                 Gw.noalias() += Gm * Cm.transpose();
                             }
                             if (x->requires_grad) {
                                 auto& gcol = detail::conv_scratch(1, K * M);
                                 MapRM Gc(gcol.data(), K, M);
                                 CMapRM Wm(w->data.data(), Co, K);
                                 Gc.noalias() = Wm.transpose() * Gm;
                                 x->ensure_grad();
                                 detail::col2im3d(gcol.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo,
                                                  x->grad.data());
                             }
                         }
                         if (b && b->requires_grad) {
                             b->ensure_grad();
                             // fixed-order accumulation; Eigen's redux reassociates by alignment
                             for (int co = 0; co < Co; ++co) {
                                 double s = 0.0;
                                 const double* g = o.grad.data() + co * M;
                                 for (long long m = 0; m < M; ++m) s += g[m];
                                 b->grad[co] += s;
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Upsampling (half-pixel-center source mapping; preserves constants).
// ---------------------------------------------------------------------------

namespace detail {
struct Lerp1D {
    std::vector<int> i0, i1;
    std::vector<double> w0, w1;
};

inline Lerp1D lerp_taps(int in, int out, int scale) {
    Lerp1D t;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w0.resize(out);
    t.w1.resize(out);
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) / scale - 0.5;
        double f = std::floor(src);
        double frac = src - f;
        int a = static_cast<int>(f);
        t.i0[o] = std::min(std::max(a, 0), in - 1);
        t.i1[o] = std::min(std::max(a + 1, 0), in - 1);
        t.w1[o] = frac;
        t.w0[o] = 1.0 - frac;
    }
    return t;
}
}  // namespace detail

// x: (C,H,W) -> (C, H*scale, W*scale)
inline TensorPtr upsample_bilinear(const TensorPtr& x, int scale) {
    if (x->rank() != 3) throw std::invalid_argument("upsample_bilinear: input must be (C,H,W)");
    if (scale < 1) throw std::invalid_argument("upsample_bilinear: scale must be >= 1");
    if (scale == 1) return reshape(x, x->shape);
    const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    const int Ho = H * scale, Wo = W * scale;
    auto ty = detail::lerp_taps(H, Ho, scale);
    auto tx = detail::lerp_taps(W, Wo, scale);
    std::vector<double> out(static_cast<long long>(C) * Ho * Wo);
    for (int c = 0; c < C; ++c) {
        const double* src = x->data.data() + static_cast<long long>(c) * H * W;
        double* dst = out.data() + static_cast<long long>(c) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox)
                dst[static_cast<long long>(oy) * Wo + ox] =
                    ty.w0[oy] * (tx.w0[ox] * src[ty.i0[oy] * W + tx.i0[ox]] + tx.w1[ox] * src[ty.i0[oy] * W + tx.i1[ox]]) +
                    ty.w1[oy] * (tx.w0[ox] * src[ty.i1[oy] * W + tx.i0[ox]] + tx.w1[ox] * src[ty.i1[oy] * W + tx.i1[ox]]);
    }
    return make_node(Shape{C, Ho, Wo}, std::move(out), {x}, [x, C, H, W, Ho, Wo, ty, tx](Tensor& o) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int c = 0; c < C; ++c) {
            double* gx = x->grad.data() + static_cast<long long>(c) * H * W;
            const double* go = o.grad.data() + static_cast<long long>(c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double g = go[static_cast<long long>(oy) * Wo + ox];
                    gx[ty.i0[oy] * W + tx.i0[ox]] += ty.w0[oy] * tx.w0[ox] * g;
                    gx[ty.i0[oy] * W + tx.i1[ox]] += ty.w0[oy] * tx.w1[ox] * g;
                    gx[ty.i1[oy] * W + tx.i0[ox]] += ty.w1[oy] * tx.w0[ox] * g;
                    gx[ty.i1[oy] * W + tx.i1[ox]] += ty.w1[oy] * tx.w1[ox] * g;
                }
        }
    });
}

// x: (C,D,H,W) -> (C, D*scale, H*scale, W*scale)
inline TensorPtr upsample_trilinear(const TensorPtr& x, int scale) {
    if (x->rank() != 4) throw std::invalid_argument("upsample_trilinear: input must be (C,D,H,W)");
    if (scale < 1) throw std::invalid_argument("upsample_trilinear: scale must be >= 1");
    if (scale == 1) return reshape(x, x->shape);
    const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Do = D * scale, Ho = H * scale, Wo = W * scale;
    auto td = detail::lerp_taps(D, Do, scale);
    auto ty = detail::lerp_taps(H, Ho, scale);
    auto tx = detail::lerp_taps(W, Wo, scale);
    std::vector<double> out(static_cast<long long>(C) * Do * Ho * Wo);
    for (int c = 0; c < C; ++c) {
        const double* src = x->data.data() + static_cast<long long>(c) * D * H * W;
        double* dst = out.data() + static_cast<long long>(c) * Do * Ho * Wo;
        for (int od = 0; od < Do; ++od)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double v = 0.0;
                    for (int dd = 0; dd < 2; ++dd) {
                        int id = dd ? td.i1[od] : td.i0[od];
                        double wd = dd ? td.w1[od] : td.w0[od];
                        for (int yy = 0; yy < 2; ++yy) {
                            int iy = yy ? ty.i1[oy] : ty.i0[oy];
                            double wy = yy ? ty.w1[oy] : ty.w0[oy];
                            double wdy = wd * wy;
                            v += wdy * (tx.w0[ox] * src[(static_cast<long long>(id) * H + iy) * W + tx.i0[ox]] +
                                        tx.w1[ox] * src[(static_cast<long long>(id) * H + iy) * W + tx.i1[ox]]);
                        }
                    }
                    dst[(static_cast<long long>(od) * Ho + oy) * Wo + ox] = v;
                }
    }
    return make_node(Shape{C, Do, Ho, Wo}, std::move(out), {x}, [x, C, D, H, W, Do, Ho, Wo, td, ty, tx](Tensor& o) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int c = 0; c < C; ++c) {
            double* gx = x->grad.data() + static_cast<long long>(c) * D * H * W;
            const double* go = o.grad.data() + static_cast<long long>(c) * Do * Ho * Wo;
            for (int od = 0; od < Do; ++od)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        double g = go[(static_cast<long long>(od) * Ho + oy) * Wo + ox];
                        for (int dd = 0; dd < 2; ++dd) {
                            int id = dd ? td.i1[od] : td.i0[od];
                            double wd = dd ? td.w1[od] : td.w0[od];
                            for (int yy = 0; yy < 2; ++yy) {
                                int iy = yy ? ty.i1[oy] : ty.i0[oy];
                                double wy = yy ? ty.w1[oy] : ty.w0[oy];
                                double wdy = wd * wy * g;
                                gx[(static_cast<long long>(id) * H + iy) * W + tx.i0[ox]] += wdy * tx.w0[ox];
                                gx[(static_cast<long long>(id) * H + iy) * W + tx.i1[ox]] += wdy * tx.w1[ox];
                            }
                        }
                    }
        }
    });
}

// ---------------------------------------------------------------------------
// Layers. Parameters are registered into a flat named list so the optimizer,
// checkpointing and gradcheck all walk the same fixed order.
// ---------------------------------------------------------------------------

struct NamedParam {
    std::string name;
    TensorPtr value;
};

using ParamList = std::vector<NamedParam>;

struct Conv2dLayer {
    TensorPtr w, b;
    int stride = 1, pad = 1;

    Conv2dLayer() = default;
    // He fan-in init.
    Conv2dLayer(int c_in, int c_out, int k, int stride_, int pad_, std::mt19937_64& rng)
        : stride(stride_), pad(pad_) {
        double std = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
        w = randn({c_out, c_in, k, k}, rng, 0.0, std, true);
        b = zeros({c_out}, true);
    }

    TensorPtr operator()(const TensorPtr& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }
};

struct Conv3dLayer {
    TensorPtr w, b;
    int stride = 1, pad = 1;

    Conv3dLayer() = default;
    Conv3dLayer(int c_in, int c_out, int k, int stride_, int pad_, std::mt19937_64& rng)
        : stride(stride_), pad(pad_) {
        double std = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k * k));
        w = randn({c_out, c_in, k, k, k}, rng, 0.0, std, true);
        b = zeros({c_out}, true);
    }

    TensorPtr operator()(const TensorPtr& x) const { return conv3d(x, w, b, stride, pad); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }
};

// y = relu(conv2(relu(conv1(x))) + x)
struct ResBlock2d {
    Conv2dLayer c1, c2;

    ResBlock2d() = default;
    ResBlock2d(int ch, std::mt19937_64& rng) : c1(ch, ch, 3, 1, 1, rng), c2(ch, ch, 3, 1, 1, rng) {}

    TensorPtr operator()(const TensorPtr& x) const { return relu(add(c2(relu(c1(x))), x)); }

    void collect(const std::string& prefix, ParamList& out) const {
        c1.collect(prefix + ".c1", out);
        c2.collect(prefix + ".c2", out);
    }
};

struct ResBlock3d {
    Conv3dLayer c1, c2;

    ResBlock3d() = default;
    ResBlock3d(int ch, std::mt19937_64& rng) : c1(ch, ch, 3, 1, 1, rng), c2(ch, ch, 3, 1, 1, rng) {}

    TensorPtr operator()(const TensorPtr& x) const { return relu(add(c2(relu(c1(x))), x)); }

    void collect(const std::string& prefix, ParamList& out) const {
        c1.collect(prefix + ".c1", out);
        c2.collect(prefix + ".c2", out);
    }
};

}  // namespace spex
