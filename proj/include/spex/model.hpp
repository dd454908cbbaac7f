// Two-branch stereo model: the superpixel association branch guides the cost
// volume branch through channel excitation; both feed the training head.

#pragma once

#include "spex/backbone.hpp"
#include "spex/losses.hpp"

namespace spex {

struct ModelSpec {
    int d_max = 16;
    int cell_size = 16;
    CostMode cost_mode = CostMode::group_corr;
    int groups = 8;
    int stages = 2;

    int cost_channels() const { return cost_mode == CostMode::concat ? 64 : groups; }
};

struct StereoModel {
    ModelSpec spec;
    SuperpixelNet spnet;
    FeatureNet features;
    GuidanceFusion fusion;
    Aggregation agg;

    StereoModel() = default;
    StereoModel(const ModelSpec& ms, uint64_t init_seed) : spec(ms) {
        std::mt19937_64 rng(init_seed);
        spnet = SuperpixelNet(rng);
        features = FeatureNet(rng);
        fusion = GuidanceFusion(32, ms.cost_channels(), rng);
        agg = Aggregation(ms.cost_channels(), ms.stages, rng);
    }

    ParamList params() const {
        ParamList out;
        spnet.collect("spnet", out);
        features.collect("features", out);
        fusion.collect("fusion", out);
        agg.collect("agg", out);
        return out;
    }

    struct Forward {
        AssociationResult assoc;
        TensorPtr guidance_logits;
        CostVolume cost;
        std::vector<TensorPtr> scores;  // per stage, (D_max, H, W)
    };

    Forward operator()(const TensorPtr& left, const TensorPtr& right) const {
        Forward f;
        f.assoc = spnet(left, spec.cell_size);
        auto f_l = features(left);
        auto f_r = features(right);
        f.cost = build_cost_volume(f_l, f_r, spec.d_max, spec.cost_mode, spec.groups);
        f.guidance_logits = fusion(f.assoc.pyramid);
        f.scores = agg(f.cost, f.guidance_logits);
        return f;
    }
};

}  // namespace spex
