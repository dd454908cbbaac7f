// Probability head: per-pixel disparity distributions, the distribution
// variance estimate that adapts the unimodal targets, and top-k soft-argmin
// disparity regression.

#pragma once

#include "spex/tensor.hpp"

namespace spex {

// Softmax over the disparity axis.
inline TensorPtr to_probability(const TensorPtr& scores) {
    if (scores->rank() != 3) throw std::invalid_argument("to_probability: expected (D,H,W) scores");
    for (double v : scores->data)
        if (!std::isfinite(v)) throw std::invalid_argument("to_probability: non-finite score");
    return softmax_axis(scores, 0);
}

// Per-pixel standard deviation of the disparity distribution, clamped to
// [v_min, v_max]. Stop-gradient boundary: the result never carries a graph,
// so target construction cannot flatten itself through the loss.
struct VarianceMap {
    TensorPtr v;  // (H,W), detached
    double v_min = 1.0, v_max = 0.0;
};

inline VarianceMap estimate_variance(const TensorPtr& prob, double v_min, double v_max) {
    if (prob->rank() != 3) throw std::invalid_argument("estimate_variance: expected (D,H,W)");
    if (!(v_min > 0) || v_max < v_min) throw std::invalid_argument("estimate_variance: bad clamp range");
    const int D = prob->shape[0];
    const long long hw = static_cast<long long>(prob->shape[1]) * prob->shape[2];
    std::vector<double> out(hw);
    const double* p = prob->data.data();
    for (long long i = 0; i < hw; ++i) {
        double e = 0.0, e2 = 0.0;
        for (int d = 0; d < D; ++d) {
            double pv = p[d * hw + i];
            e += d * pv;
            e2 += static_cast<double>(d) * d * pv;
        }
        double var = std::max(e2 - e * e, 0.0);
        out[i] = std::min(std::max(std::sqrt(var), v_min), v_max);
    }
    return {tensor({prob->shape[1], prob->shape[2]}, std::move(out), false), v_min, v_max};
}

// Adaptive unimodal ground-truth distribution, P_gt(d) = softmax(-|d-d_gt|/v).
// Masked pixels are filled uniformly and must be excluded downstream.
struct UnimodalTarget {
    TensorPtr p_gt;              // (D,H,W), detached
    std::vector<double> d_gt;    // retained for audit
    std::vector<double> v;
};

inline UnimodalTarget unimodal_target(const std::vector<double>& d_gt, const VarianceMap& vm, int d_max,
                                      const std::vector<uint8_t>& mask) {
    const int H = vm.v->shape[0], W = vm.v->shape[1];
    const long long hw = static_cast<long long>(H) * W;
    if (static_cast<long long>(d_gt.size()) != hw || static_cast<long long>(mask.size()) != hw)
        throw std::invalid_argument("unimodal_target: size mismatch");
    std::vector<double> out(static_cast<long long>(d_max) * hw);
    for (long long i = 0; i < hw; ++i) {
        if (!mask[i]) {
            for (int d = 0; d < d_max; ++d) out[d * hw + i] = 1.0 / d_max;
            continue;
        }
        double dg = d_gt[i];
        if (!(dg >= 0.0) || dg >= d_max)
            throw std::invalid_argument("unimodal_target: unmasked ground truth " + std::to_string(dg) +
                                        " outside [0," + std::to_string(d_max) + ") — mask construction bug");
        double v = vm.v->data[i];
        // stable softmax; the max logit is 0 at the nearest disparity bin
        double sum = 0.0;
        double m = -std::fabs(std::round(dg) - dg) / v;
        for (int d = 0; d < d_max; ++d) {
            double e = std::exp(-std::fabs(d - dg) / v - m);
            out[d * hw + i] = e;
            sum += e;
        }
        for (int d = 0; d < d_max; ++d) out[d * hw + i] /= sum;
    }
    return {tensor({d_max, H, W}, std::move(out), false), d_gt, vm.v->data};
}

// ---------------------------------------------------------------------------
// Top-k disparity regression. Per pixel the k largest probabilities are
// selected (ties -> lower disparity); the estimate is the weighted mean of
// their disparities. Selection indices are constants of the forward pass.
// Weights: selected probabilities renormalized by their sum, or (behind
// `literal_softmax`) a softmax over the selected probability values.
// ---------------------------------------------------------------------------

// Per-pixel indices of the k largest probabilities, ties toward lower
// disparity. Flat layout: k entries per pixel.
inline std::vector<int> topk_select(const TensorPtr& prob, int k) {
    if (prob->rank() != 3) throw std::invalid_argument("regress_topk: expected (D,H,W)");
    const int D = prob->shape[0];
    if (k < 1 || k > D) throw std::invalid_argument("regress_topk: k must be in [1, D]");
    const long long hw = static_cast<long long>(prob->shape[1]) * prob->shape[2];
    std::vector<int> sel(static_cast<size_t>(k) * hw);
    std::vector<int> order(D);
    const double* p = prob->data.data();
    for (long long i = 0; i < hw; ++i) {
        for (int d = 0; d < D; ++d) order[d] = d;
        std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
            double va = p[i + a * hw], vb = p[i + b * hw];
            return va > vb || (va == vb && a < b);
        });
        std::copy(order.begin(), order.begin() + k, sel.begin() + static_cast<size_t>(i) * k);
    }
    return sel;
}

// Weighted estimate over an externally fixed selection (used both by
// regress_topk and by gradient checks that freeze the selection).
inline TensorPtr regress_topk_given(const TensorPtr& prob, std::vector<int> sel, int k,
                                    bool literal_softmax = false) {
    if (prob->rank() != 3) throw std::invalid_argument("regress_topk: expected (D,H,W)");
    const int H = prob->shape[1], W = prob->shape[2];
    const long long hw = static_cast<long long>(H) * W;
    if (static_cast<long long>(sel.size()) != k * hw) throw std::invalid_argument("regress_topk: bad selection size");

    std::vector<double> out(hw);
    const double* p = prob->data.data();
    for (long long i = 0; i < hw; ++i) {
        const int* idx = sel.data() + static_cast<size_t>(i) * k;
        double est = 0.0;
        if (literal_softmax) {
            double m = p[static_cast<long long>(idx[0]) * hw + i];
            double sum = 0.0;
            for (int j = 0; j < k; ++j) sum += std::exp(p[static_cast<long long>(idx[j]) * hw + i] - m);
            for (int j = 0; j < k; ++j)
                est += idx[j] * std::exp(p[static_cast<long long>(idx[j]) * hw + i] - m) / sum;
        } else {
            double sum = 0.0;
            for (int j = 0; j < k; ++j) sum += p[static_cast<long long>(idx[j]) * hw + i];
            for (int j = 0; j < k; ++j) est += idx[j] * p[static_cast<long long>(idx[j]) * hw + i];
            est = sum > 0 ? est / sum : 0.0;
        }
        out[i] = est;
    }

    return make_node(Shape{H, W}, std::move(out), {prob},
                     [prob, sel = std::move(sel), k, hw, literal_softmax](Tensor& o) {
                         if (!prob->requires_grad) return;
                         std::vector<double> g(prob->data.size(), 0.0);
                         const double* p = prob->data.data();
                         for (long long i = 0; i < hw; ++i) {
                             const int* idx = sel.data() + static_cast<size_t>(i) * k;
                             double go = o.grad[i];
                             if (literal_softmax) {
                                 double m = p[static_cast<long long>(idx[0]) * hw + i];
                                 double sum = 0.0;
                                 for (int j = 0; j < k; ++j)
                                     sum += std::exp(p[static_cast<long long>(idx[j]) * hw + i] - m);
                                 for (int j = 0; j < k; ++j) {
                                     double w = std::exp(p[static_cast<long long>(idx[j]) * hw + i] - m) / sum;
                                     g[static_cast<long long>(idx[j]) * hw + i] += go * w * (idx[j] - o.data[i]);
                                 }
                             } else {
                                 double sum = 0.0;
                                 for (int j = 0; j < k; ++j) sum += p[static_cast<long long>(idx[j]) * hw + i];
                                 if (sum <= 0) continue;
                                 for (int j = 0; j < k; ++j)
                                     g[static_cast<long long>(idx[j]) * hw + i] += go * (idx[j] - o.data[i]) / sum;
                             }
                         }
                         prob->accumulate_grad(g);
                     });
}

inline TensorPtr regress_topk(const TensorPtr& prob, int k, bool literal_softmax = false) {
    return regress_topk_given(prob, topk_select(prob, k), k, literal_softmax);
}

}  // namespace spex
