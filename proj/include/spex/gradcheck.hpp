// Finite-difference gradient verification. Each suite builds small random
// instances, runs the recorded backward once and compares every (or a
// subsampled set of) input gradient entries against central differences.
//
// Discrete choices of a forward pass (top-k selections, hard labelings,
// stop-gradient variance targets) are frozen across the probe evaluations so
// the differences probe exactly the function the backward pass differentiates.

#pragma once

#include <chrono>

#include "spex/trainer.hpp"

namespace spex {

inline double rel_err(double a, double n) {
    return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-2});
}

// Central differences of a rebuildable scalar graph w.r.t. the given leaves.
// `max_per_leaf` == 0 checks every element.
inline double fd_check(const std::function<TensorPtr()>& build_loss, const std::vector<TensorPtr>& leaves,
                       double h = 1e-5, int max_per_leaf = 0, uint64_t subsample_seed = 17) {
    for (auto& l : leaves) l->zero_grad();
    auto loss = build_loss();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves) {
        l->ensure_grad();
        analytic.push_back(l->grad);
    }
    double worst = 0.0;
    std::mt19937_64 rng(subsample_seed);
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& x = leaves[li]->data;
        std::vector<size_t> idx(x.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        if (max_per_leaf > 0 && static_cast<int>(idx.size()) > max_per_leaf) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(max_per_leaf);
        }
        for (size_t i : idx) {
            double orig = x[i];
            double lp, lm;
            {
                NoGradGuard ng;
                x[i] = orig + h;
                lp = build_loss()->item();
                x[i] = orig - h;
                lm = build_loss()->item();
            }
            x[i] = orig;
            worst = std::max(worst, rel_err(analytic[li][i], (lp - lm) / (2.0 * h)));
        }
    }
    return worst;
}

namespace gc {

// Scalar probe with weights fixed at construction, so rebuilt graphs see the
// same function.
inline std::function<TensorPtr(const TensorPtr&)> make_probe(const Shape& shape, std::mt19937_64& rng) {
    auto w = rand_uniform(shape, rng, -1.0, 1.0, false);
    return [w](const TensorPtr& t) { return sum_all(mul(t, w)); };
}

// Nudge values away from a non-differentiable point.
inline void keep_away(std::vector<double>& v, double point, double margin) {
    for (auto& x : v)
        if (std::fabs(x - point) < margin) x = point + (x >= point ? margin : -margin) * 2.0;
}

inline double suite_elementwise(uint64_t seed) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    auto a = rand_uniform({2, 3}, rng, -1.0, 1.0, true);
    auto b = rand_uniform({2, 3}, rng, -1.0, 1.0, true);
    auto brow = rand_uniform({1, 3}, rng, -1.0, 1.0, true);  // broadcast along rows
    auto bvec = rand_uniform({3}, rng, -1.0, 1.0, true);     // leading-axis promotion
    for (auto& v : b->data) v = (v >= 0 ? 1.0 : -1.0) * (0.5 + std::fabs(v));  // away from 0 for div
    auto probe = make_probe({2, 3}, rng);

    worst = std::max(worst, fd_check([&] { return probe(add(a, b)); }, {a, b}));
    worst = std::max(worst, fd_check([&] { return probe(sub(a, b)); }, {a, b}));
    worst = std::max(worst, fd_check([&] { return probe(mul(a, brow)); }, {a, brow}));
    worst = std::max(worst, fd_check([&] { return probe(div(a, b)); }, {a, b}));
    worst = std::max(worst, fd_check([&] { return probe(add(a, bvec)); }, {a, bvec}));
    worst = std::max(worst, fd_check([&] { return probe(neg(a)); }, {a}));
    worst = std::max(worst, fd_check([&] { return probe(vexp(a)); }, {a}));
    worst = std::max(worst, fd_check([&] { return probe(sigmoid(a)); }, {a}));
    worst = std::max(worst, fd_check([&] { return probe(mul_scalar(add_scalar(a, 0.7), -1.3)); }, {a}));

    auto pos = rand_uniform({2, 3}, rng, 0.2, 2.0, true);
    worst = std::max(worst, fd_check([&] { return probe(vlog(pos)); }, {pos}));
    worst = std::max(worst, fd_check([&] { return probe(vsqrt(pos)); }, {pos}));

    auto c = rand_uniform({2, 3}, rng, -1.0, 1.0, true);
    keep_away(c->data, 0.0, 0.05);
    worst = std::max(worst, fd_check([&] { return probe(vabs(c)); }, {c}));

    auto d = rand_uniform({2, 3}, rng, -1.0, 1.0, true);
    keep_away(d->data, -0.5, 0.05);
    keep_away(d->data, 0.5, 0.05);
    worst = std::max(worst, fd_check([&] { return probe(clamp(d, -0.5, 0.5)); }, {d}));
    keep_away(d->data, 0.0, 0.05);
    worst = std::max(worst, fd_check([&] { return probe(relu(d)); }, {d}));

    auto e = rand_uniform({2, 3}, rng, -2.0, 2.0, true);
    keep_away(e->data, 1.0, 0.05);
    keep_away(e->data, -1.0, 0.05);
    worst = std::max(worst, fd_check([&] { return probe(smooth_l1(e)); }, {e}));
    return worst;
}

inline double suite_softmax(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = rand_uniform({3, 4, 2}, rng, -2.0, 2.0, true);
    double worst = 0.0;
    for (int axis = 0; axis < 3; ++axis) {
        auto probe = make_probe({3, 4, 2}, rng);
        worst = std::max(worst, fd_check([&, axis] { return probe(softmax_axis(x, axis)); }, {x}));
    }
    return worst;
}

inline double suite_reduce_shape(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = rand_uniform({3, 4}, rng, -1.0, 1.0, true);
    auto y = rand_uniform({2, 4}, rng, -1.0, 1.0, true);
    double worst = 0.0;
    auto p0 = make_probe({4}, rng);
    auto p1 = make_probe({3}, rng);
    auto pk = make_probe({3, 1}, rng);
    auto pr = make_probe({2, 6}, rng);
    auto pc = make_probe({5, 4}, rng);
    worst = std::max(worst, fd_check([&] { return p0(reduce_sum(x, 0)); }, {x}));
    worst = std::max(worst, fd_check([&] { return p1(reduce_mean(x, 1)); }, {x}));
    worst = std::max(worst, fd_check([&] { return pk(reduce_sum(x, 1, true)); }, {x}));
    worst = std::max(worst, fd_check([&] { return sum_all(x); }, {x}));
    worst = std::max(worst, fd_check([&] { return mean_all(x); }, {x}));
    worst = std::max(worst, fd_check([&] { return pr(reshape(x, {2, 6})); }, {x}));
    worst = std::max(worst, fd_check([&] { return pc(concat({x, y}, 0)); }, {x, y}));
    return worst;
}

inline double suite_conv2d(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = rand_uniform({2, 6, 7}, rng, -1.0, 1.0, true);
    auto w = rand_uniform({3, 2, 3, 3}, rng, -0.5, 0.5, true);
    auto b = rand_uniform({3}, rng, -0.5, 0.5, true);
    auto w1 = rand_uniform({2, 2, 1, 1}, rng, -0.5, 0.5, true);
    double worst = 0.0;
    auto p1 = make_probe({3, 6, 7}, rng);
    worst = std::max(worst, fd_check([&] { return p1(conv2d(x, w, b, 1, 1)); }, {x, w, b}));
    auto p2 = make_probe({3, 3, 4}, rng);
    worst = std::max(worst, fd_check([&] { return p2(conv2d(x, w, b, 2, 1)); }, {x, w, b}));
    auto p3 = make_probe({2, 6, 7}, rng);
    worst = std::max(worst, fd_check([&] { return p3(conv2d(x, w1, nullptr, 1, 0)); }, {x, w1}));
    return worst;
}

inline double suite_conv3d(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = rand_uniform({2, 3, 4, 5}, rng, -1.0, 1.0, true);
    auto w = rand_uniform({2, 2, 3, 3, 3}, rng, -0.5, 0.5, true);
    auto b = rand_uniform({2}, rng, -0.5, 0.5, true);
    double worst = 0.0;
    auto p1 = make_probe({2, 3, 4, 5}, rng);
    worst = std::max(worst, fd_check([&] { return p1(conv3d(x, w, b, 1, 1)); }, {x, w, b}));
    auto p2 = make_probe({2, 2, 2, 3}, rng);
    worst = std::max(worst, fd_check([&] { return p2(conv3d(x, w, b, 2, 1)); }, {x, w, b}));
    return worst;
}

inline double suite_upsample(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = rand_uniform({2, 3, 4}, rng, -1.0, 1.0, true);
    auto v = rand_uniform({1, 2, 3, 2}, rng, -1.0, 1.0, true);
    double worst = 0.0;
    auto p1 = make_probe({2, 6, 8}, rng);
    worst = std::max(worst, fd_check([&] { return p1(upsample_bilinear(x, 2)); }, {x}));
    auto p2 = make_probe({1, 8, 12, 8}, rng);
    worst = std::max(worst, fd_check([&] { return p2(upsample_trilinear(v, 4)); }, {v}));
    return worst;
}

inline double suite_segment(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto p = rand_uniform({3, 4, 4}, rng, 0.1, 1.0, true);
    std::uniform_int_distribution<int> lab(0, 2);
    std::vector<int> labels(16);
    for (auto& l : labels) l = lab(rng);
    auto probe = make_probe({3, 3}, rng);
    return fd_check([&] { return probe(segment_log_mean(p, labels, 3).rows); }, {p});
}

inline double suite_cost_volume(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto fl = rand_uniform({4, 3, 6}, rng, -1.0, 1.0, true);
    auto fr = rand_uniform({4, 3, 6}, rng, -1.0, 1.0, true);
    double worst = 0.0;
    auto pg = make_probe({2, 2, 3, 6}, rng);
    worst = std::max(worst,
                     fd_check([&] { return pg(build_cost_volume(fl, fr, 8, CostMode::group_corr, 2).values); },
                              {fl, fr}));
    auto pc = make_probe({8, 2, 3, 6}, rng);
    worst = std::max(
        worst, fd_check([&] { return pc(build_cost_volume(fl, fr, 8, CostMode::concat).values); }, {fl, fr}));
    return worst;
}

inline double suite_excite(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto vol = rand_uniform({3, 2, 4, 4}, rng, -1.0, 1.0, true);
    auto logits = rand_uniform({3, 4, 4}, rng, -2.0, 2.0, true);
    auto probe = make_probe({3, 2, 4, 4}, rng);
    return fd_check([&] { return probe(excite({vol, CostMode::group_corr, 3}, logits).values); }, {vol, logits});
}

inline double suite_reconstruct(uint64_t seed) {
    std::mt19937_64 rng(seed);
    SuperpixelGrid grid(3, 6, 6);
    auto logits = rand_uniform({9, 6, 6}, rng, -1.0, 1.0, true);
    auto signal = rand_uniform({2, 6, 6}, rng, -1.0, 1.0, true);
    auto mask = candidate_mask(grid);
    auto probe = make_probe({2, 6, 6}, rng);
    return fd_check(
        [&] {
            AssociationMap a{softmax_axis(add(logits, mask), 0), grid};
            return probe(reconstruct(a, signal));
        },
        {logits, signal});
}

inline double suite_topk(uint64_t seed) {
    std::mt19937_64 rng(seed);
    // spaced logits keep the top-k probability margin >= 0.05
    std::vector<double> base = {2.0, 1.4, 0.8, 0.2, -0.4};
    std::vector<double> data(5 * 4);
    std::uniform_real_distribution<double> jit(-0.04, 0.04);
    std::vector<int> perm = {0, 1, 2, 3, 4};
    for (int px = 0; px < 4; ++px) {
        std::shuffle(perm.begin(), perm.end(), rng);
        for (int d = 0; d < 5; ++d) data[perm[d] * 4 + px] = base[d] + jit(rng);
    }
    auto logits = tensor({5, 2, 2}, std::move(data), true);
    double worst = 0.0;
    for (bool literal : {false, true}) {
        std::vector<int> sel;
        {
            NoGradGuard ng;
            sel = topk_select(softmax_axis(logits, 0), 3);
        }
        auto probe = make_probe({2, 2}, rng);
        worst = std::max(worst, fd_check([&, sel, literal] {
                             return probe(regress_topk_given(softmax_axis(logits, 0), sel, 3, literal));
                         },
                                         {logits}));
    }
    return worst;
}

inline double suite_pool_sce(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto logits = rand_uniform({4, 3, 3}, rng, -1.0, 1.0, true);
    SuperpixelLabeling lab;
    std::uniform_int_distribution<int> li(0, 2);
    lab.m.resize(9);
    for (auto& m : lab.m) m = li(rng);
    auto target_src = rand_uniform({4, 3, 3}, rng, 0.1, 1.0, false);
    return fd_check(
        [&] {
            auto pred = pool_superpixels(softmax_axis(logits, 0), lab, 3);
            auto tgt = pool_superpixels(softmax_axis(target_src, 0), lab, 3);
            return sce_loss(pred, tgt);
        },
        {logits});
}

inline double suite_recon_loss(uint64_t seed) {
    std::mt19937_64 rng(seed);
    SuperpixelGrid grid(4, 8, 8);
    auto logits = rand_uniform({9, 8, 8}, rng, -1.0, 1.0, true);
    auto mask = candidate_mask(grid);
    auto d_gt = rand_uniform({8, 8}, rng, 0.0, 6.0, false);
    auto pos = position_grid(8, 8);
    std::vector<uint8_t> valid(64, 1);
    return fd_check(
        [&] {
            AssociationMap a{softmax_axis(add(logits, mask), 0), grid};
            return recon_loss(d_gt, pos, a, 5e-3, valid);
        },
        {logits});
}

inline double suite_end_to_end(uint64_t seed, int indices_per_param) {
    Config cfg;
    cfg.crop_h = 32;
    cfg.crop_w = 48;
    cfg.d_max = 8;
    cfg.cell_size = 8;
    cfg.k = 4;
    cfg.gen_dmax = 6.0;
    cfg.gen_regions = 3;
    cfg.validate();
    StereoModel model(cfg.model_spec(), splitmix64(seed));
    StereoSample sample = gen_stereogram(cfg.crop_h, cfg.crop_w, cfg.gen_dmax, cfg.gen_regions, seed ^ 0xBEEF,
                                         cfg.gen_options());
    FrozenAux aux;
    auto build = [&] {
        auto f = forward_sample_ex(model, cfg, sample, &aux);
        return total_loss(f.reg, f.sce, f.recon, cfg.lambda, cfg.mu).total;
    };
    std::vector<TensorPtr> leaves;
    for (auto& p : model.params()) leaves.push_back(p.value);
    return fd_check(build, leaves, 1e-5, indices_per_param, seed);
}

}  // namespace gc

struct GradcheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradcheckReport {
    std::vector<GradcheckGroup> groups;
    double tolerance = 1e-4;
    double seconds = 0.0;
    bool all_pass = false;
};

inline GradcheckReport run_gradcheck(int op_seeds = 20, int e2e_seeds = 2, int e2e_indices_per_param = 2,
                                     double tol = 1e-4) {
    auto t0 = std::chrono::steady_clock::now();
    GradcheckReport rep;
    rep.tolerance = tol;
    using Suite = double (*)(uint64_t);
    std::vector<std::pair<std::string, Suite>> suites = {
        {"elementwise", gc::suite_elementwise},
        {"softmax", gc::suite_softmax},
        {"reduce/shape", gc::suite_reduce_shape},
        {"conv2d", gc::suite_conv2d},
        {"conv3d", gc::suite_conv3d},
        {"upsample", gc::suite_upsample},
        {"segment_log_mean", gc::suite_segment},
        {"cost_volume", gc::suite_cost_volume},
        {"excite", gc::suite_excite},
        {"reconstruct", gc::suite_reconstruct},
        {"regress_topk", gc::suite_topk},
        {"pool+sce", gc::suite_pool_sce},
        {"recon_loss", gc::suite_recon_loss},
    };
    for (auto& [name, fn] : suites) {
        GradcheckGroup g;
        g.name = name;
        for (int s = 0; s < op_seeds; ++s) g.max_rel_err = std::max(g.max_rel_err, fn(1000 + 77 * s));
        g.pass = g.max_rel_err <= tol;
        rep.groups.push_back(g);
    }
    {
        GradcheckGroup g;
        g.name = "end_to_end_loss";
        for (int s = 0; s < e2e_seeds; ++s)
            g.max_rel_err = std::max(g.max_rel_err, gc::suite_end_to_end(5000 + 31 * s, e2e_indices_per_param));
        g.pass = g.max_rel_err <= tol;
        rep.groups.push_back(g);
    }
    rep.all_pass = true;
    for (auto& g : rep.groups) rep.all_pass = rep.all_pass && g.pass;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace spex
