// Superpixel branch: soft 9-candidate association prediction over a regular
// grid, hard labelings, sparse association-weighted reconstruction and the
// disparity reconstruction loss.

#pragma once

#include "spex/nn.hpp"

namespace spex {

// Regular seed grid; each pixel's candidate superpixels are the 3x3 cell
// neighborhood of the cell containing it.
struct SuperpixelGrid {
    int cell_size = 16;
    int grid_h = 0, grid_w = 0;
    int image_h = 0, image_w = 0;

    SuperpixelGrid() = default;
    SuperpixelGrid(int s, int h, int w) : cell_size(s), image_h(h), image_w(w) {
        if (s < 1) throw std::invalid_argument("SuperpixelGrid: cell size must be >= 1");
        grid_h = (h + s - 1) / s;
        grid_w = (w + s - 1) / s;
    }

    int num_superpixels() const { return grid_h * grid_w; }

    // Global cell index for candidate c in [0,9) of pixel (y,x); -1 if the
    // neighbor cell falls outside the grid.
    int candidate_cell(int y, int x, int c) const {
        int cy = y / cell_size + c / 3 - 1;
        int cx = x / cell_size + c % 3 - 1;
        if (cy < 0 || cy >= grid_h || cx < 0 || cx >= grid_w) return -1;
        return cy * grid_w + cx;
    }
};

// Soft per-pixel probabilities over the 9 surrounding cells. Invalid
// candidates carry exactly zero probability.
struct AssociationMap {
    TensorPtr Q;  // (9, H, W)
    SuperpixelGrid grid;
};

struct SuperpixelLabeling {
    std::vector<int> m;                   // H*W hard labels
    std::vector<std::vector<int>> inv;    // per-label pixel indices (inverse map)
    std::vector<int> n;                   // per-label pixel counts
};

// Large negative logit for out-of-grid candidates; exp underflows to exact 0
// under max subtraction.
inline constexpr double kMaskedLogit = -1e30;

inline TensorPtr candidate_mask(const SuperpixelGrid& g) {
    std::vector<double> m(9LL * g.image_h * g.image_w, 0.0);
    long long hw = static_cast<long long>(g.image_h) * g.image_w;
    for (int y = 0; y < g.image_h; ++y)
        for (int x = 0; x < g.image_w; ++x)
            for (int c = 0; c < 9; ++c)
                if (g.candidate_cell(y, x, c) < 0) m[c * hw + static_cast<long long>(y) * g.image_w + x] = kMaskedLogit;
    return tensor({9, g.image_h, g.image_w}, std::move(m), false);
}

// ---------------------------------------------------------------------------
// Association network: 4 stride-2 encoder stages {16,32,32,32} with a
// mirrored skip-connected decoder; 9-candidate logits at full resolution.
// Encoder taps at 1/4, 1/8 and 1/16 form the guidance pyramid.
// ---------------------------------------------------------------------------

struct FeaturePyramid {
    TensorPtr phi4, phi8, phi16;  // (N_c, H/k, W/k), N_c identical across scales
};

struct AssociationResult {
    AssociationMap assoc;
    FeaturePyramid pyramid;
    TensorPtr logits;  // pre-mask head output, (9, H, W)
};

struct SuperpixelNet {
    Conv2dLayer enc1, enc2, enc3, enc4;  // strides 2, widths 16/32/32/32
    Conv2dLayer dec3, dec2, dec1;        // after upsample+skip concat
    Conv2dLayer head;                    // 9 logits at full resolution

    SuperpixelNet() = default;
    explicit SuperpixelNet(std::mt19937_64& rng)
        : enc1(3, 16, 3, 2, 1, rng),
          enc2(16, 32, 3, 2, 1, rng),
          enc3(32, 32, 3, 2, 1, rng),
          enc4(32, 32, 3, 2, 1, rng),
          dec3(64, 32, 3, 1, 1, rng),
          dec2(64, 32, 3, 1, 1, rng),
          dec1(48, 16, 3, 1, 1, rng),
          head(16, 9, 1, 1, 0, rng) {}

    void collect(const std::string& prefix, ParamList& out) const {
        enc1.collect(prefix + ".enc1", out);
        enc2.collect(prefix + ".enc2", out);
        enc3.collect(prefix + ".enc3", out);
        enc4.collect(prefix + ".enc4", out);
        dec3.collect(prefix + ".dec3", out);
        dec2.collect(prefix + ".dec2", out);
        dec1.collect(prefix + ".dec1", out);
        head.collect(prefix + ".head", out);
    }

    AssociationResult operator()(const TensorPtr& left, int cell_size) const {
        if (left->rank() != 3 || left->shape[0] != 3)
            throw std::invalid_argument("predict_association: input must be (3,H,W)");
        int h = left->shape[1], w = left->shape[2];
        if (h % 16 != 0 || w % 16 != 0)
            throw std::invalid_argument("predict_association: H and W must be divisible by 16, got " +
                                        shape_str(left->shape));

        auto e1 = relu(enc1(left));   // 16 @ 1/2
        auto e2 = relu(enc2(e1));     // 32 @ 1/4
        auto e3 = relu(enc3(e2));     // 32 @ 1/8
        auto e4 = relu(enc4(e3));     // 32 @ 1/16

        auto d3 = relu(dec3(concat({upsample_bilinear(e4, 2), e3}, 0)));  // 32 @ 1/8
        auto d2 = relu(dec2(concat({upsample_bilinear(d3, 2), e2}, 0)));  // 32 @ 1/4
        auto d1 = relu(dec1(concat({upsample_bilinear(d2, 2), e1}, 0)));  // 16 @ 1/2
        auto logits = head(upsample_bilinear(d1, 2));                     // 9 @ full

        SuperpixelGrid grid(cell_size, h, w);
        auto q = softmax_axis(add(logits, candidate_mask(grid)), 0);
        return {{q, grid}, {e2, e3, e4}, logits};
    }
};

// ---------------------------------------------------------------------------
// Hard labeling: argmax candidate per pixel (ties -> lowest candidate index).
// ---------------------------------------------------------------------------

inline SuperpixelLabeling hard_assign(const AssociationMap& a) {
    const auto& g = a.grid;
    long long hw = static_cast<long long>(g.image_h) * g.image_w;
    SuperpixelLabeling lab;
    lab.m.resize(hw);
    lab.n.assign(g.num_superpixels(), 0);
    lab.inv.assign(g.num_superpixels(), {});
    const double* q = a.Q->data.data();
    for (int y = 0; y < g.image_h; ++y)
        for (int x = 0; x < g.image_w; ++x) {
            long long p = static_cast<long long>(y) * g.image_w + x;
            double best = -1.0;
            int best_c = 4;  // own cell; always a valid candidate
            for (int c = 0; c < 9; ++c) {
                if (g.candidate_cell(y, x, c) < 0) continue;
                double v = q[c * hw + p];
                if (v > best) {
                    best = v;
                    best_c = c;
                }
            }
            int s = g.candidate_cell(y, x, best_c);
            lab.m[p] = s;
            lab.n[s]++;
            lab.inv[s].push_back(static_cast<int>(p));
        }
    return lab;
}

// One-hot association at each pixel's own cell; handy for tests and oracles.
inline AssociationMap hard_association(const SuperpixelGrid& g) {
    auto q = zeros({9, g.image_h, g.image_w}, false);
    long long hw = static_cast<long long>(g.image_h) * g.image_w;
    for (long long p = 0; p < hw; ++p) q->data[4 * hw + p] = 1.0;
    return {q, g};
}

// ---------------------------------------------------------------------------
// Reconstruction through the association map: per-superpixel centroids under
// column-normalized weights, then per-pixel mixing under row-normalized
// weights. Sparse over the 9 candidates; zero-mass superpixels are skipped
// and the pixel mixture renormalized over the survivors.
// ---------------------------------------------------------------------------

inline TensorPtr reconstruct(const AssociationMap& a, const TensorPtr& signal) {
    const auto& g = a.grid;
    if (signal->rank() != 3 || signal->shape[1] != g.image_h || signal->shape[2] != g.image_w)
        throw std::invalid_argument("reconstruct: signal must be (F,H,W) matching the grid");
    const int F = signal->shape[0];
    const int S = g.num_superpixels();
    const long long hw = static_cast<long long>(g.image_h) * g.image_w;
    const TensorPtr Q = a.Q;

    auto run_forward = [g, F, S, hw](const double* q, const double* x, std::vector<double>& mass,
                                     std::vector<double>& cent, std::vector<double>& denom, std::vector<double>& y) {
        mass.assign(S, 0.0);
        cent.assign(static_cast<size_t>(S) * F, 0.0);
        denom.assign(hw, 0.0);
        y.assign(static_cast<size_t>(F) * hw, 0.0);
        for (int yy = 0; yy < g.image_h; ++yy)
            for (int xx = 0; xx < g.image_w; ++xx) {
                long long p = static_cast<long long>(yy) * g.image_w + xx;
                for (int c = 0; c < 9; ++c) {
                    int s = g.candidate_cell(yy, xx, c);
                    if (s < 0) continue;
                    double qv = q[c * hw + p];
                    mass[s] += qv;
                    for (int f = 0; f < F; ++f) cent[static_cast<size_t>(s) * F + f] += qv * x[f * hw + p];
                }
            }
        for (int s = 0; s < S; ++s) {
            if (mass[s] > 0.0)
                for (int f = 0; f < F; ++f) cent[static_cast<size_t>(s) * F + f] /= mass[s];
            else
                for (int f = 0; f < F; ++f) cent[static_cast<size_t>(s) * F + f] = 0.0;
        }
        for (int yy = 0; yy < g.image_h; ++yy)
            for (int xx = 0; xx < g.image_w; ++xx) {
                long long p = static_cast<long long>(yy) * g.image_w + xx;
                for (int c = 0; c < 9; ++c) {
                    int s = g.candidate_cell(yy, xx, c);
                    if (s < 0 || mass[s] <= 0.0) continue;
                    denom[p] += q[c * hw + p];
                }
                if (denom[p] <= 0.0) continue;
                for (int c = 0; c < 9; ++c) {
                    int s = g.candidate_cell(yy, xx, c);
                    if (s < 0 || mass[s] <= 0.0) continue;
                    double wq = q[c * hw + p] / denom[p];
                    for (int f = 0; f < F; ++f) y[f * hw + p] += wq * cent[static_cast<size_t>(s) * F + f];
                }
            }
    };

    std::vector<double> mass, cent, denom, y;
    run_forward(Q->data.data(), signal->data.data(), mass, cent, denom, y);

    return make_node(signal->shape, std::move(y), {Q, signal}, [Q, signal, g, F, S, hw, run_forward](Tensor& o) {
        const double* q = Q->data.data();
        const double* x = signal->data.data();
        std::vector<double> mass, cent, denom, y;
        run_forward(q, x, mass, cent, denom, y);

        // chat(s,f) = sum_p (q_{s,p}/denom_p) * gout(f,p)
        std::vector<double> chat(static_cast<size_t>(S) * F, 0.0);
        for (int yy = 0; yy < g.image_h; ++yy)
            for (int xx = 0; xx < g.image_w; ++xx) {
                long long p = static_cast<long long>(yy) * g.image_w + xx;
                if (denom[p] <= 0.0) continue;
                for (int c = 0; c < 9; ++c) {
                    int s = g.candidate_cell(yy, xx, c);
                    if (s < 0 || mass[s] <= 0.0) continue;
                    double wq = q[c * hw + p] / denom[p];
                    for (int f = 0; f < F; ++f) chat[static_cast<size_t>(s) * F + f] += wq * o.grad[f * hw + p];
                }
            }

        std::vector<double> gq(Q->requires_grad ? Q->data.size() : 0, 0.0);
        std::vector<double> gx(signal->requires_grad ? signal->data.size() : 0, 0.0);
        for (int yy = 0; yy < g.image_h; ++yy)
            for (int xx = 0; xx < g.image_w; ++xx) {
                long long p = static_cast<long long>(yy) * g.image_w + xx;
                for (int c = 0; c < 9; ++c) {
                    int s = g.candidate_cell(yy, xx, c);
                    if (s < 0 || mass[s] <= 0.0) continue;
                    if (signal->requires_grad) {
                        double w = q[c * hw + p] / mass[s];
                        for (int f = 0; f < F; ++f) gx[f * hw + p] += w * chat[static_cast<size_t>(s) * F + f];
                    }
                    if (Q->requires_grad) {
                        double acc = 0.0;
                        // mixing step: (c_s - y_p) . gout_p / denom_p
                        if (denom[p] > 0.0)
                            for (int f = 0; f < F; ++f)
                                acc += (cent[static_cast<size_t>(s) * F + f] - y[f * hw + p]) * o.grad[f * hw + p] /
                                       denom[p];
                        // centroid step: (x_p - c_s) . chat_s / mass_s
                        for (int f = 0; f < F; ++f)
                            acc += (x[f * hw + p] - cent[static_cast<size_t>(s) * F + f]) *
                                   chat[static_cast<size_t>(s) * F + f] / mass[s];
                        gq[c * hw + p] += acc;
                    }
                }
            }
        if (Q->requires_grad) Q->accumulate_grad(gq);
        if (signal->requires_grad) signal->accumulate_grad(gx);
    });
}

// Per-pixel (row, col) coordinates as a constant (2,H,W) tensor.
inline TensorPtr position_grid(int h, int w) {
    std::vector<double> d(2LL * h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            d[static_cast<long long>(y) * w + x] = y;
            d[static_cast<long long>(h) * w + static_cast<long long>(y) * w + x] = x;
        }
    return tensor({2, h, w}, std::move(d), false);
}

// L1 data term plus w-weighted L2 positional compactness, averaged over valid
// pixels. `signal` defaults to the ground-truth disparity; pass the left
// image instead for the color variant.
inline TensorPtr recon_loss(const TensorPtr& signal, const TensorPtr& pos, const AssociationMap& a, double w,
                            const std::vector<uint8_t>& valid) {
    const auto& g = a.grid;
    long long hw = static_cast<long long>(g.image_h) * g.image_w;
    if (static_cast<long long>(valid.size()) != hw) throw std::invalid_argument("recon_loss: mask size mismatch");
    if (w < 0) throw std::invalid_argument("recon_loss: w must be >= 0");
    long long n_valid = 0;
    std::vector<double> maskd(hw);
    for (long long p = 0; p < hw; ++p) {
        maskd[p] = valid[p] ? 1.0 : 0.0;
        n_valid += valid[p] ? 1 : 0;
    }
    if (n_valid == 0) throw std::invalid_argument("recon_loss: no valid pixels");
    auto mask = tensor({g.image_h, g.image_w}, std::move(maskd), false);

    auto sig3 = signal->rank() == 2 ? reshape(signal, {1, g.image_h, g.image_w}) : signal;
    auto data_term = reduce_sum(vabs(sub(sig3, reconstruct(a, sig3))), 0);          // (H,W)
    auto pdiff = sub(pos, reconstruct(a, pos));
    auto dist = vsqrt(reduce_sum(mul(pdiff, pdiff), 0));                            // (H,W)
    auto per_pixel = add(data_term, mul_scalar(dist, w));
    return mul_scalar(sum_all(mul(per_pixel, mask)), 1.0 / static_cast<double>(n_valid));
}

}  // namespace spex
