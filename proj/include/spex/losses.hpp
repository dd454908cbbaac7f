// Training losses: superpixel geometric-mean pooling of probability volumes,
// superpixel cross-entropy, multi-stage smooth-L1 regression and the combined
// objective.

#pragma once

#include "spex/probhead.hpp"
#include "spex/superpixel.hpp"

namespace spex {

// Per-superpixel disparity distribution. Rows of empty superpixels are
// flagged and must be excluded downstream; non-empty rows sum to 1.
struct SuperpixelDistribution {
    TensorPtr dist;               // (S, D)
    std::vector<uint8_t> empty;   // per superpixel
    std::vector<int> counts;
};

// Geometric-mean pooling in log space, then per-row renormalization so the
// pooled rows are comparable as distributions. Optionally restricted to
// pixels allowed by `pixel_mask`; superpixels with no admitted pixels are
// flagged empty.
inline SuperpixelDistribution pool_superpixels(const TensorPtr& prob, const SuperpixelLabeling& lab,
                                               int num_superpixels,
                                               const std::vector<uint8_t>* pixel_mask = nullptr) {
    auto lm = segment_log_mean(prob, lab.m, num_superpixels, pixel_mask);
    auto rows = vexp(lm.rows);
    auto row_sum = reduce_sum(rows, 1, /*keepdim=*/true);
    return {div(rows, row_sum), std::move(lm.empty), std::move(lm.counts)};
}

// L_sce: cross-entropy between pooled target and pooled prediction, averaged
// over non-empty superpixels.
inline TensorPtr sce_loss(const SuperpixelDistribution& pred, const SuperpixelDistribution& target) {
    if (pred.dist->shape != target.dist->shape)
        throw std::invalid_argument("sce_loss: distribution shapes differ");
    if (pred.empty != target.empty)
        throw std::invalid_argument("sce_loss: prediction and target disagree on empty superpixels");
    const int S = pred.dist->shape[0];
    long long n_s = 0;
    std::vector<double> keep(S);
    for (int s = 0; s < S; ++s) {
        keep[s] = pred.empty[s] ? 0.0 : 1.0;
        n_s += pred.empty[s] ? 0 : 1;
    }
    if (n_s == 0) throw std::invalid_argument("sce_loss: all superpixels are empty");
    auto row_mask = tensor({S, 1}, std::move(keep), false);
    auto ce = neg(mul(target.dist, vlog(pred.dist)));  // (S,D)
    return mul_scalar(sum_all(mul(ce, row_mask)), 1.0 / static_cast<double>(n_s));
}

// Ablation baseline: plain per-pixel cross-entropy against the unimodal
// target, averaged over valid pixels.
inline TensorPtr pixel_ce_loss(const TensorPtr& prob, const TensorPtr& target, const std::vector<uint8_t>& valid) {
    if (prob->shape != target->shape) throw std::invalid_argument("pixel_ce_loss: shape mismatch");
    const long long hw = static_cast<long long>(prob->shape[1]) * prob->shape[2];
    if (static_cast<long long>(valid.size()) != hw) throw std::invalid_argument("pixel_ce_loss: mask size mismatch");
    long long n = 0;
    std::vector<double> m(hw);
    for (long long i = 0; i < hw; ++i) {
        m[i] = valid[i] ? 1.0 : 0.0;
        n += valid[i] ? 1 : 0;
    }
    if (n == 0) throw std::invalid_argument("pixel_ce_loss: no valid pixels");
    auto mask = tensor({1, prob->shape[1], prob->shape[2]}, std::move(m), false);
    auto ce = neg(mul(target, vlog(prob)));
    return mul_scalar(sum_all(mul(ce, mask)), 1.0 / static_cast<double>(n));
}

// Per-stage masked smooth-L1 against ground truth, combined with fixed stage
// weights. Stage values are recorded for the loss report.
struct RegressionLoss {
    TensorPtr value;
    std::vector<double> per_stage;
};

inline RegressionLoss regression_loss(const std::vector<TensorPtr>& d_hats, const TensorPtr& d_gt,
                                      const std::vector<uint8_t>& valid, const std::vector<double>& stage_weights) {
    if (d_hats.empty()) throw std::invalid_argument("regression_loss: no stages");
    if (d_hats.size() != stage_weights.size())
        throw std::invalid_argument("regression_loss: " + std::to_string(d_hats.size()) + " stages but " +
                                    std::to_string(stage_weights.size()) + " weights");
    const long long n_px = d_gt->numel();
    if (static_cast<long long>(valid.size()) != n_px) throw std::invalid_argument("regression_loss: mask size mismatch");
    long long n = 0;
    std::vector<double> m(n_px);
    for (long long i = 0; i < n_px; ++i) {
        m[i] = valid[i] ? 1.0 : 0.0;
        n += valid[i] ? 1 : 0;
    }
    if (n == 0) throw std::invalid_argument("regression_loss: no valid pixels");
    auto mask = tensor(d_gt->shape, std::move(m), false);

    RegressionLoss out;
    TensorPtr total;
    for (size_t i = 0; i < d_hats.size(); ++i) {
        if (d_hats[i]->shape != d_gt->shape)
            throw std::invalid_argument("regression_loss: stage " + std::to_string(i) + " shape mismatch");
        auto stage = mul_scalar(sum_all(mul(smooth_l1(sub(d_hats[i], d_gt)), mask)), 1.0 / static_cast<double>(n));
        out.per_stage.push_back(stage->item());
        auto weighted = mul_scalar(stage, stage_weights[i]);
        total = total ? add(total, weighted) : weighted;
    }
    out.value = total;
    return out;
}

// True where the ground truth is finite and inside [0, D_max).
inline std::vector<uint8_t> valid_mask(const std::vector<double>& d_gt, int d_max) {
    std::vector<uint8_t> out(d_gt.size());
    for (size_t i = 0; i < d_gt.size(); ++i)
        out[i] = (std::isfinite(d_gt[i]) && d_gt[i] >= 0.0 && d_gt[i] < d_max) ? 1 : 0;
    return out;
}

// ---------------------------------------------------------------------------
// Combined objective. Accumulation order is fixed:
//   l_total = l_reg + (lambda*l_sce + mu*l_recon)
// and the reported scalars come from the same graph values, so the report
// identity holds bitwise.
// ---------------------------------------------------------------------------

struct LossReport {
    double l_regression = 0, l_sce = 0, l_recon = 0, l_total = 0;
    std::vector<double> per_stage;
    TensorPtr total;  // graph scalar for backward()
};

inline LossReport total_loss(const RegressionLoss& reg, const TensorPtr& l_sce, const TensorPtr& l_recon,
                             double lambda, double mu) {
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v)) throw std::runtime_error(std::string("total_loss: non-finite component ") + name);
    };
    LossReport r;
    r.per_stage = reg.per_stage;
    r.l_regression = reg.value->item();
    check(r.l_regression, "l_regression");
    TensorPtr sce = l_sce ? l_sce : scalar(0.0);
    TensorPtr rec = l_recon ? l_recon : scalar(0.0);
    r.l_sce = sce->item();
    check(r.l_sce, "l_sce");
    r.l_recon = rec->item();
    check(r.l_recon, "l_recon");
    r.total = add(reg.value, add(mul_scalar(sce, lambda), mul_scalar(rec, mu)));
    r.l_total = r.total->item();
    check(r.l_total, "l_total");
    return r;
}

inline std::string loss_csv_header() { return "step,l_regression,l_sce,l_recon,l_total"; }

inline std::string loss_csv_row(long long step, const LossReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g", step, r.l_regression, r.l_sce, r.l_recon,
                  r.l_total);
    return buf;
}

}  // namespace spex
