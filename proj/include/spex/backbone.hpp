// Stereo branch: siamese feature extraction, 4D cost volume construction,
// multi-scale guidance fusion, superpixel-guided channel excitation and
// 3D aggregation to full-resolution raw score volumes.

#pragma once

#include "spex/superpixel.hpp"

namespace spex {

enum class CostMode { concat, group_corr };

inline CostMode cost_mode_from_string(const std::string& s) {
    if (s == "concat") return CostMode::concat;
    if (s == "gwc" || s == "group_corr") return CostMode::group_corr;
    throw std::invalid_argument("unknown cost mode '" + s + "' (expected concat|gwc)");
}

struct CostVolume {
    TensorPtr values;  // (C, D', H', W') at quarter resolution
    CostMode mode = CostMode::group_corr;
    int groups = 0;    // for group_corr

    int channels() const { return values->shape[0]; }
};

// ---------------------------------------------------------------------------
// Shared-weight feature extractor: two stride-2 convolutions followed by two
// stride-1 residual blocks; 32 channels at quarter resolution.
// ---------------------------------------------------------------------------

struct FeatureNet {
    Conv2dLayer c1, c2;
    ResBlock2d r1, r2;

    FeatureNet() = default;
    explicit FeatureNet(std::mt19937_64& rng)
        : c1(3, 16, 3, 2, 1, rng), c2(16, 32, 3, 2, 1, rng), r1(32, rng), r2(32, rng) {}

    TensorPtr operator()(const TensorPtr& img) const {
        if (img->rank() != 3 || img->shape[0] != 3)
            throw std::invalid_argument("extract_features: input must be (3,H,W)");
        if (img->shape[1] % 4 != 0 || img->shape[2] % 4 != 0)
            throw std::invalid_argument("extract_features: H and W must be divisible by 4");
        return r2(r1(relu(c2(relu(c1(img))))));
    }

    void collect(const std::string& prefix, ParamList& out) const {
        c1.collect(prefix + ".c1", out);
        c2.collect(prefix + ".c2", out);
        r1.collect(prefix + ".r1", out);
        r2.collect(prefix + ".r2", out);
    }
};

// ---------------------------------------------------------------------------
// Cost volume: concat stacks left/right features per disparity (C = 2*C_f);
// group correlation stores per-group mean dot products (C = G). Out-of-frame
// matches contribute zeros.
// ---------------------------------------------------------------------------

inline CostVolume build_cost_volume(const TensorPtr& f_l, const TensorPtr& f_r, int d_max, CostMode mode,
                                    int groups = 8) {
    if (f_l->shape != f_r->shape || f_l->rank() != 3)
        throw std::invalid_argument("build_cost_volume: feature shapes must match and be (C,H,W)");
    if (d_max % 4 != 0) throw std::invalid_argument("build_cost_volume: D_max must be divisible by 4");
    const int cf = f_l->shape[0], hq = f_l->shape[1], wq = f_l->shape[2];
    const int dq = d_max / 4;
    if (dq < 1) throw std::invalid_argument("build_cost_volume: D_max/4 must be >= 1");
    const long long hw = static_cast<long long>(hq) * wq;

    if (mode == CostMode::concat) {
        const int C = 2 * cf;
        std::vector<double> out(static_cast<long long>(C) * dq * hw, 0.0);
        const double* l = f_l->data.data();
        const double* r = f_r->data.data();
        for (int c = 0; c < cf; ++c)
            for (int d = 0; d < dq; ++d)
                for (int y = 0; y < hq; ++y)
                    for (int x = 0; x < wq; ++x) {
                        long long o = ((static_cast<long long>(c) * dq + d) * hq + y) * wq + x;
                        out[o] = l[(static_cast<long long>(c) * hq + y) * wq + x];
                        long long o2 = ((static_cast<long long>(cf + c) * dq + d) * hq + y) * wq + x;
                        if (x - d >= 0) out[o2] = r[(static_cast<long long>(c) * hq + y) * wq + x - d];
                    }
        auto node = make_node(Shape{C, dq, hq, wq}, std::move(out), {f_l, f_r}, [f_l, f_r, cf, dq, hq, wq](Tensor& o) {
            if (f_l->requires_grad) {
                std::vector<double> g(f_l->data.size(), 0.0);
                for (int c = 0; c < cf; ++c)
                    for (int d = 0; d < dq; ++d)
                        for (int y = 0; y < hq; ++y)
                            for (int x = 0; x < wq; ++x)
                                g[(static_cast<long long>(c) * hq + y) * wq + x] +=
                                    o.grad[((static_cast<long long>(c) * dq + d) * hq + y) * wq + x];
                f_l->accumulate_grad(g);
            }
            if (f_r->requires_grad) {
                std::vector<double> g(f_r->data.size(), 0.0);
                for (int c = 0; c < cf; ++c)
                    for (int d = 0; d < dq; ++d)
                        for (int y = 0; y < hq; ++y)
                            for (int x = d; x < wq; ++x)
                                g[(static_cast<long long>(c) * hq + y) * wq + x - d] +=
                                    o.grad[((static_cast<long long>(cf + c) * dq + d) * hq + y) * wq + x];
                f_r->accumulate_grad(g);
            }
        });
        return {node, mode, 0};
    }

    if (groups < 1 || cf % groups != 0)
        throw std::invalid_argument("build_cost_volume: groups must divide feature channels (" + std::to_string(cf) +
                                    " % " + std::to_string(groups) + " != 0)");
    const int cpg = cf / groups;
    std::vector<double> out(static_cast<long long>(groups) * dq * hw, 0.0);
    const double* l = f_l->data.data();
    const double* r = f_r->data.data();
    for (int g = 0; g < groups; ++g)
        for (int d = 0; d < dq; ++d)
            for (int y = 0; y < hq; ++y)
                for (int x = d; x < wq; ++x) {
                    double acc = 0.0;
                    for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                        acc += l[(static_cast<long long>(c) * hq + y) * wq + x] *
                               r[(static_cast<long long>(c) * hq + y) * wq + x - d];
                    out[((static_cast<long long>(g) * dq + d) * hq + y) * wq + x] = acc / cpg;
                }
    auto node = make_node(Shape{groups, dq, hq, wq}, std::move(out), {f_l, f_r},
                          [f_l, f_r, cf, groups, cpg, dq, hq, wq](Tensor& o) {
                              const double* l = f_l->data.data();
                              const double* r = f_r->data.data();
                              std::vector<double> gl(f_l->requires_grad ? f_l->data.size() : 0, 0.0);
                              std::vector<double> gr(f_r->requires_grad ? f_r->data.size() : 0, 0.0);
                              for (int g = 0; g < groups; ++g)
                                  for (int d = 0; d < dq; ++d)
                                      for (int y = 0; y < hq; ++y)
                                          for (int x = d; x < wq; ++x) {
                                              double go =
                                                  o.grad[((static_cast<long long>(g) * dq + d) * hq + y) * wq + x] /
                                                  cpg;
                                              for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
                                                  long long il = (static_cast<long long>(c) * hq + y) * wq + x;
                                                  long long ir = il - d;
                                                  if (!gl.empty()) gl[il] += go * r[ir];
                                                  if (!gr.empty()) gr[ir] += go * l[il];
                                              }
                                          }
                              if (f_l->requires_grad) f_l->accumulate_grad(gl);
                              if (f_r->requires_grad) f_r->accumulate_grad(gr);
                          });
    return {node, mode, groups};
}

// ---------------------------------------------------------------------------
// Multi-scale guidance fusion: per-scale 1x1 projections to the cost volume
// channel count, bilinear upsampling to quarter resolution, a summed merge
// and one 3x3 convolution. Output is pre-sigmoid logits.
// ---------------------------------------------------------------------------

struct GuidanceFusion {
    Conv2dLayer proj4, proj8, proj16;  // 1x1
    Conv2dLayer fuse;                  // 3x3

    GuidanceFusion() = default;
    GuidanceFusion(int n_c, int c_out, std::mt19937_64& rng)
        : proj4(n_c, c_out, 1, 1, 0, rng),
          proj8(n_c, c_out, 1, 1, 0, rng),
          proj16(n_c, c_out, 1, 1, 0, rng),
          fuse(c_out, c_out, 3, 1, 1, rng) {}

    TensorPtr operator()(const FeaturePyramid& pyr) const {
        auto sum = add(add(proj4(pyr.phi4), upsample_bilinear(proj8(pyr.phi8), 2)),
                       upsample_bilinear(proj16(pyr.phi16), 4));
        return fuse(sum);
    }

    void collect(const std::string& prefix, ParamList& out) const {
        proj4.collect(prefix + ".proj4", out);
        proj8.collect(prefix + ".proj8", out);
        proj16.collect(prefix + ".proj16", out);
        fuse.collect(prefix + ".fuse", out);
    }
};

// Channel excitation: attention = sigmoid(logits), broadcast across the
// disparity axis and multiplied into the volume.
inline CostVolume excite(const CostVolume& cost, const TensorPtr& logits) {
    const auto& s = cost.values->shape;
    if (logits->rank() != 3 || logits->shape[0] != s[0] || logits->shape[1] != s[2] || logits->shape[2] != s[3])
        throw std::invalid_argument("excite: guidance logits " + shape_str(logits->shape) +
                                    " do not match cost volume " + shape_str(s));
    auto attention = reshape(sigmoid(logits), {s[0], 1, s[2], s[3]});
    return {mul(cost.values, attention), cost.mode, cost.groups};
}

// ---------------------------------------------------------------------------
// Aggregation: per stage, excite then one residual pair of 3x3x3 convolutions;
// each stage head projects to a single channel and trilinearly upsamples x4 to
// a full-resolution raw score volume. Later stages consume the excited,
// aggregated volume of the previous stage.
// ---------------------------------------------------------------------------

struct AggregationStage {
    ResBlock3d block;
    Conv3dLayer head;

    AggregationStage() = default;
    AggregationStage(int ch, std::mt19937_64& rng) : block(ch, rng), head(ch, 1, 3, 1, 1, rng) {}

    void collect(const std::string& prefix, ParamList& out) const {
        block.collect(prefix + ".block", out);
        head.collect(prefix + ".head", out);
    }
};

struct Aggregation {
    std::vector<AggregationStage> stages;

    Aggregation() = default;
    Aggregation(int ch, int n_stages, std::mt19937_64& rng) {
        if (n_stages < 1) throw std::invalid_argument("aggregate: stage count must be >= 1");
        for (int i = 0; i < n_stages; ++i) stages.emplace_back(ch, rng);
    }

    // Returns one raw score volume (D_max, H, W) per stage.
    std::vector<TensorPtr> operator()(const CostVolume& cost, const TensorPtr& guidance_logits) const {
        std::vector<TensorPtr> outs;
        CostVolume vol = cost;
        for (const auto& st : stages) {
            vol = excite(vol, guidance_logits);
            vol.values = st.block(vol.values);
            auto scores = upsample_trilinear(st.head(vol.values), 4);  // (1, D, H, W)
            outs.push_back(reshape(scores, {scores->shape[1], scores->shape[2], scores->shape[3]}));
        }
        return outs;
    }

    void collect(const std::string& prefix, ParamList& out) const {
        for (size_t i = 0; i < stages.size(); ++i) stages[i].collect(prefix + ".stage" + std::to_string(i), out);
    }
};

}  // namespace spex
