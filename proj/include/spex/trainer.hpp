// Training loop, configuration, checkpointing and evaluation.

#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "spex/data.hpp"
#include "spex/model.hpp"

namespace spex {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
    return splitmix64(splitmix64(splitmix64(seed) + a) + b);
}

// Raised when training hits a numeric failure (CLI exit code 2).
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration: UTF-8 key=value file, every key overridable on the command
// line. Unknown keys and out-of-range values are hard errors.
// ---------------------------------------------------------------------------

struct Config {
    int d_max = 16;          // full-scale reference: 192
    int crop_h = 64;         // paper reference: 256
    int crop_w = 96;         // paper reference: 512
    int cell_size = 16;      // superpixel grid cell S
    int k = 6;               // top-k regression
    double lambda = 1.0;     // L_sce weight
    double mu = 0.1;         // L_recon weight
    double w = 5e-3;         // compactness weight inside L_recon
    std::string cost_mode = "gwc";
    int groups = 8;
    int stages = 2;
    std::string stage_weights = "0.5,1.0";
    double lr = 1e-3;
    std::string lr_decay_steps = "auto";  // halve at these steps; auto = 60/75/90% of iters
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch = 4;
    int iters = 500;
    uint64_t seed = 1;
    double v_min = 1.0;
    double v_max = 0.0;      // 0 = auto (d_max / 2)
    bool use_sce = true;
    bool use_ce_pixelwise = false;
    std::string recon_signal = "disparity";  // or "color"
    bool topk_literal_softmax = false;
    int checkpoint_every = 0;  // 0 = final only
    int fixed_set = 0;         // freeze this many samples; 0 = fresh per step
    int gen_regions = 4;
    double gen_dmax = 12.0;
    bool gen_half = true;
    bool gen_planar = false;

    double v_max_resolved() const { return v_max > 0 ? v_max : d_max / 2.0; }

    std::vector<double> stage_weights_resolved() const {
        std::vector<double> out;
        std::stringstream ss(stage_weights);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            out.push_back(std::stod(tok));
        }
        return out;
    }

    std::vector<long long> lr_milestones() const {
        std::vector<long long> out;
        if (lr_decay_steps == "auto") {
            out = {static_cast<long long>(std::ceil(0.60 * iters)), static_cast<long long>(std::ceil(0.75 * iters)),
                   static_cast<long long>(std::ceil(0.90 * iters))};
        } else {
            std::stringstream ss(lr_decay_steps);
            std::string tok;
            while (std::getline(ss, tok, ',')) {
                if (tok.empty()) continue;
                out.push_back(std::stoll(tok));
            }
        }
        return out;
    }

    double lr_at(long long step) const {
        double cur = lr;
        for (long long m : lr_milestones())
            if (step >= m) cur *= 0.5;
        return cur;
    }

    ModelSpec model_spec() const {
        ModelSpec ms;
        ms.d_max = d_max;
        ms.cell_size = cell_size;
        ms.cost_mode = cost_mode_from_string(cost_mode);
        ms.groups = groups;
        ms.stages = stages;
        return ms;
    }

    GenOptions gen_options() const { return {gen_half, gen_planar}; }

    void set(const std::string& key, const std::string& value);
    void validate() const;
    std::string canonical() const;   // hashed subset, fixed order
    uint64_t hash() const {
        // FNV-1a 64
        uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }
};

namespace detail {

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos;
        int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw std::invalid_argument("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos;
        unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

}  // namespace detail

inline void Config::set(const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "d_max") d_max = parse_int(key, value);
    else if (key == "crop_h") crop_h = parse_int(key, value);
    else if (key == "crop_w") crop_w = parse_int(key, value);
    else if (key == "cell_size") cell_size = parse_int(key, value);
    else if (key == "k") k = parse_int(key, value);
    else if (key == "lambda") lambda = parse_double(key, value);
    else if (key == "mu") mu = parse_double(key, value);
    else if (key == "w") w = parse_double(key, value);
    else if (key == "cost_mode") cost_mode = value;
    else if (key == "groups") groups = parse_int(key, value);
    else if (key == "stages") stages = parse_int(key, value);
    else if (key == "stage_weights") stage_weights = value;
    else if (key == "lr") lr = parse_double(key, value);
    else if (key == "lr_decay_steps") lr_decay_steps = value;
    else if (key == "beta1") beta1 = parse_double(key, value);
    else if (key == "beta2") beta2 = parse_double(key, value);
    else if (key == "batch") batch = parse_int(key, value);
    else if (key == "iters") iters = parse_int(key, value);
    else if (key == "seed") seed = parse_u64(key, value);
    else if (key == "v_min") v_min = parse_double(key, value);
    else if (key == "v_max") v_max = parse_double(key, value);
    else if (key == "use_sce") use_sce = parse_bool(key, value);
    else if (key == "use_ce_pixelwise") use_ce_pixelwise = parse_bool(key, value);
    else if (key == "recon_signal") recon_signal = value;
    else if (key == "topk_literal_softmax") topk_literal_softmax = parse_bool(key, value);
    else if (key == "checkpoint_every") checkpoint_every = parse_int(key, value);
    else if (key == "fixed_set") fixed_set = parse_int(key, value);
    else if (key == "gen_regions") gen_regions = parse_int(key, value);
    else if (key == "gen_dmax") gen_dmax = parse_double(key, value);
    else if (key == "gen_half") gen_half = parse_bool(key, value);
    else if (key == "gen_planar") gen_planar = parse_bool(key, value);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline void Config::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
    if (d_max < 4 || d_max % 4 != 0) fail("d_max must be a positive multiple of 4");
    if (crop_h < 16 || crop_h % 16 != 0) fail("crop_h must be a positive multiple of 16");
    if (crop_w < 16 || crop_w % 16 != 0) fail("crop_w must be a positive multiple of 16");
    if (cell_size < 1) fail("cell_size must be >= 1");
    if (k < 1 || k > d_max) fail("k must be in [1, d_max]");
    if (lambda < 0) fail("lambda must be >= 0");
    if (mu < 0) fail("mu must be >= 0");
    if (w < 0) fail("w must be >= 0");
    cost_mode_from_string(cost_mode);  // throws on bad value
    if (groups < 1 || 32 % groups != 0) fail("groups must divide the 32 feature channels");
    if (stages < 1) fail("stages must be >= 1");
    auto sw = stage_weights_resolved();
    if (static_cast<int>(sw.size()) != stages) fail("stage_weights must list exactly 'stages' values");
    for (double v : sw)
        if (v < 0) fail("stage weights must be >= 0");
    if (!(lr > 0)) fail("lr must be > 0");
    if (lr_decay_steps != "auto") {
        for (long long m : lr_milestones())
            if (m < 1) fail("lr_decay_steps must be positive step indices");
    }
    if (!(beta1 > 0 && beta1 < 1)) fail("beta1 must be in (0,1)");
    if (!(beta2 > 0 && beta2 < 1)) fail("beta2 must be in (0,1)");
    if (batch < 1) fail("batch must be >= 1");
    if (iters < 1) fail("iters must be >= 1");
    if (!(v_min > 0)) fail("v_min must be > 0");
    if (v_max > 0 && v_max < v_min) fail("v_max must be >= v_min (or 0 for auto)");
    if (use_sce && use_ce_pixelwise) fail("use_sce and use_ce_pixelwise are mutually exclusive");
    if (recon_signal != "disparity" && recon_signal != "color") fail("recon_signal must be disparity|color");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
    if (fixed_set < 0) fail("fixed_set must be >= 0");
    if (gen_regions < 1) fail("gen_regions must be >= 1");
    if (!(gen_dmax > 0) || gen_dmax >= d_max) fail("gen_dmax must be in (0, d_max)");
    if (!(gen_dmax < crop_w / 4.0)) fail("gen_dmax must be < crop_w/4");
}

inline std::string Config::canonical() const {
    char buf[64];
    std::string s;
    auto add = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
    auto dbl = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    // iters and checkpoint_every are runtime knobs and stay out of the hash
    add("d_max", std::to_string(d_max));
    add("crop_h", std::to_string(crop_h));
    add("crop_w", std::to_string(crop_w));
    add("cell_size", std::to_string(cell_size));
    add("k", std::to_string(k));
    add("lambda", dbl(lambda));
    add("mu", dbl(mu));
    add("w", dbl(w));
    add("cost_mode", cost_mode);
    add("groups", std::to_string(groups));
    add("stages", std::to_string(stages));
    add("stage_weights", stage_weights);
    add("lr", dbl(lr));
    add("lr_decay_steps", lr_decay_steps);
    add("beta1", dbl(beta1));
    add("beta2", dbl(beta2));
    add("batch", std::to_string(batch));
    add("seed", std::to_string(seed));
    add("v_min", dbl(v_min));
    add("v_max", dbl(v_max));
    add("use_sce", use_sce ? "1" : "0");
    add("use_ce_pixelwise", use_ce_pixelwise ? "1" : "0");
    add("recon_signal", recon_signal);
    add("topk_literal_softmax", topk_literal_softmax ? "1" : "0");
    add("fixed_set", std::to_string(fixed_set));
    add("gen_regions", std::to_string(gen_regions));
    add("gen_dmax", dbl(gen_dmax));
    add("gen_half", gen_half ? "1" : "0");
    add("gen_planar", gen_planar ? "1" : "0");
    return s;
}

inline Config load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
    Config cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r\n");
            size_t b = s.find_last_not_of(" \t\r\n");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key=value: '" + t + "'");
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Adam with bias correction.
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<double>> m, v;
    long long t = 0;
};

inline void adam_step(const ParamList& params, AdamState& st, double lr, double beta1, double beta2,
                      double eps = 1e-8) {
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(params[i].value->data.size(), 0.0);
            st.v[i].assign(params[i].value->data.size(), 0.0);
        }
    }
    if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state/parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i].value;
        p.ensure_grad();
        for (double g : p.grad)
            if (!std::isfinite(g))
                throw NumericError("adam_step: non-finite gradient in parameter '" + params[i].name + "'");
    }
    st.t += 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i].value;
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (size_t j = 0; j < p.data.size(); ++j) {
            double g = p.grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            p.data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary container of named tensors plus optimizer
// moments, little-endian 64-bit floats. save -> load -> save is byte stable.
// ---------------------------------------------------------------------------

inline constexpr char kCkptMagic[8] = {'S', 'P', 'E', 'X', 'C', 'K', 'P', '1'};

namespace detail {
template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& in, const char* what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
    return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamList& params, const AdamState& st, long long step,
                            uint64_t config_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out.write(kCkptMagic, 8);
    detail::put<uint64_t>(out, config_hash);
    detail::put<int64_t>(out, step);
    detail::put<int64_t>(out, st.t);
    detail::put<uint32_t>(out, static_cast<uint32_t>(params.size()));
    bool has_moments = !st.m.empty();
    detail::put<uint8_t>(out, has_moments ? 1 : 0);
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& nm = params[i].name;
        const auto& t = *params[i].value;
        detail::put<uint32_t>(out, static_cast<uint32_t>(nm.size()));
        out.write(nm.data(), static_cast<std::streamsize>(nm.size()));
        detail::put<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::put<uint32_t>(out, static_cast<uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
        if (has_moments) {
            out.write(reinterpret_cast<const char*>(st.m[i].data()), static_cast<std::streamsize>(st.m[i].size() * 8));
            out.write(reinterpret_cast<const char*>(st.v[i].data()), static_cast<std::streamsize>(st.v[i].size() * 8));
        }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

// Loads into an existing parameter list; names and shapes must match exactly.
inline long long load_checkpoint(const std::string& path, const ParamList& params, AdamState& st,
                                 uint64_t expected_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    uint64_t hash = detail::get<uint64_t>(in, "config hash");
    if (hash != expected_hash)
        throw std::runtime_error("checkpoint: config hash mismatch (checkpoint " + std::to_string(hash) +
                                 ", current config " + std::to_string(expected_hash) + "); refusing to resume");
    long long step = detail::get<int64_t>(in, "step");
    st.t = detail::get<int64_t>(in, "adam t");
    uint32_t n = detail::get<uint32_t>(in, "parameter count");
    if (n != params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    bool has_moments = detail::get<uint8_t>(in, "moment flag") != 0;
    st.m.assign(params.size(), {});
    st.v.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); ++i) {
        uint32_t len = detail::get<uint32_t>(in, "name length");
        std::string nm(len, '\0');
        in.read(nm.data(), len);
        if (!in || nm != params[i].name)
            throw std::runtime_error("checkpoint: parameter name mismatch at index " + std::to_string(i) + " ('" +
                                     nm + "' vs '" + params[i].name + "')");
        uint32_t rank = detail::get<uint32_t>(in, "rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::get<uint32_t>(in, "dim"));
        if (shape != params[i].value->shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + nm + "': file " + shape_str(shape) +
                                     " vs model " + shape_str(params[i].value->shape));
        auto& t = *params[i].value;
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
        if (!in) throw std::runtime_error("checkpoint: truncated tensor data for '" + nm + "'");
        if (has_moments) {
            st.m[i].resize(t.data.size());
            st.v[i].resize(t.data.size());
            in.read(reinterpret_cast<char*>(st.m[i].data()), static_cast<std::streamsize>(st.m[i].size() * 8));
            in.read(reinterpret_cast<char*>(st.v[i].data()), static_cast<std::streamsize>(st.v[i].size() * 8));
            if (!in) throw std::runtime_error("checkpoint: truncated moments for '" + nm + "'");
        }
    }
    if (!has_moments) st = AdamState{};
    return step;
}

// ---------------------------------------------------------------------------
// Sample stream and the per-sample training head.
// ---------------------------------------------------------------------------

inline StereoSample training_sample(const Config& cfg, long long step, int i) {
    uint64_t s;
    if (cfg.fixed_set > 0) {
        long long idx = ((step - 1) * cfg.batch + i) % cfg.fixed_set;
        s = mix_seed(cfg.seed, 0x5e7, static_cast<uint64_t>(idx));
    } else {
        s = mix_seed(cfg.seed, static_cast<uint64_t>(step), static_cast<uint64_t>(i));
    }
    return gen_stereogram(cfg.crop_h, cfg.crop_w, cfg.gen_dmax, cfg.gen_regions, s, cfg.gen_options());
}

inline StereoSample heldout_sample(const Config& cfg, int i) {
    uint64_t s = mix_seed(cfg.seed, 0xE7A1u, static_cast<uint64_t>(i));
    return gen_stereogram(cfg.crop_h, cfg.crop_w, cfg.gen_dmax, cfg.gen_regions, s, cfg.gen_options());
}

inline TensorPtr image_tensor(const std::vector<double>& img, int h, int w) {
    return tensor({3, h, w}, img, false);
}

struct SampleForward {
    StereoModel::Forward net;
    std::vector<TensorPtr> probs, d_hats;
    VarianceMap vm;
    UnimodalTarget target;
    SuperpixelLabeling labeling;
    SuperpixelDistribution pooled_pred, pooled_tgt;
    std::vector<uint8_t> mask;
    RegressionLoss reg;
    TensorPtr sce;    // null when neither cross-entropy flavor is enabled
    TensorPtr recon;
};

// Discrete/stop-gradient quantities of one forward pass. Gradient checks
// freeze these so finite differences probe the same function the backward
// pass differentiates (selections and targets are constants of the pass).
struct FrozenAux {
    bool valid = false;
    VarianceMap vm;
    UnimodalTarget target;
    SuperpixelLabeling labeling;
    std::vector<std::vector<int>> topk_sel;  // per stage
};

inline SampleForward forward_sample_ex(const StereoModel& model, const Config& cfg, const StereoSample& sample,
                                       FrozenAux* aux) {
    const bool frozen = aux && aux->valid;
    SampleForward f;
    auto left = image_tensor(sample.left, sample.h, sample.w);
    auto right = image_tensor(sample.right, sample.h, sample.w);
    f.net = model(left, right);

    f.mask = valid_mask(sample.d_gt, cfg.d_max);
    for (size_t i = 0; i < f.mask.size(); ++i) f.mask[i] = f.mask[i] && sample.valid[i];

    for (size_t si = 0; si < f.net.scores.size(); ++si) {
        auto p = to_probability(f.net.scores[si]);
        auto sel = frozen ? aux->topk_sel[si] : topk_select(p, cfg.k);
        f.d_hats.push_back(regress_topk_given(p, sel, cfg.k, cfg.topk_literal_softmax));
        if (aux && !frozen) aux->topk_sel.push_back(std::move(sel));
        f.probs.push_back(std::move(p));
    }
    auto d_gt_t = tensor({sample.h, sample.w}, sample.d_gt, false);
    f.reg = regression_loss(f.d_hats, d_gt_t, f.mask, cfg.stage_weights_resolved());

    const auto& p_final = f.probs.back();
    if (frozen) {
        f.vm = aux->vm;
        f.target = aux->target;
        f.labeling = aux->labeling;
    } else {
        f.vm = estimate_variance(detach(p_final), cfg.v_min, cfg.v_max_resolved());
        f.target = unimodal_target(sample.d_gt, f.vm, cfg.d_max, f.mask);
        f.labeling = hard_assign(f.net.assoc.assoc);
        if (aux) {
            aux->vm = f.vm;
            aux->target = f.target;
            aux->labeling = f.labeling;
            aux->valid = true;
        }
    }

    if (cfg.use_ce_pixelwise) {
        f.sce = pixel_ce_loss(p_final, f.target.p_gt, f.mask);
    } else if (cfg.use_sce) {
        int S = f.net.assoc.assoc.grid.num_superpixels();
        f.pooled_pred = pool_superpixels(p_final, f.labeling, S, &f.mask);
        f.pooled_tgt = pool_superpixels(f.target.p_gt, f.labeling, S, &f.mask);
        f.sce = sce_loss(f.pooled_pred, f.pooled_tgt);
    }

    auto pos = position_grid(sample.h, sample.w);
    auto signal = cfg.recon_signal == "color" ? left : reshape(d_gt_t, {1, sample.h, sample.w});
    f.recon = recon_loss(signal, pos, f.net.assoc.assoc, cfg.w, f.mask);
    return f;
}

inline SampleForward forward_sample(const StereoModel& model, const Config& cfg, const StereoSample& sample) {
    return forward_sample_ex(model, cfg, sample, nullptr);
}

// Final-stage disparity map, inference only.
inline std::vector<double> predict_disparity(const StereoModel& model, const Config& cfg,
                                             const StereoSample& sample) {
    NoGradGuard ng;
    auto fwd = model(image_tensor(sample.left, sample.h, sample.w), image_tensor(sample.right, sample.h, sample.w));
    auto d = regress_topk(to_probability(fwd.scores.back()), cfg.k, cfg.topk_literal_softmax);
    return d->data;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainSummary {
    std::vector<LossReport> reports;  // one per step run in this invocation
    std::string csv_path;
    std::string final_checkpoint;
    long long start_step = 0;
};

// Deep copy used by the batch workers; each worker accumulates gradients into
// its own clone and the clones are merged in a fixed order, so the step is
// bitwise reproducible regardless of thread timing.
inline StereoModel clone_model(const StereoModel& src) {
    StereoModel dst(src.spec, 0);
    ParamList sp = src.params(), dp = dst.params();
    for (size_t i = 0; i < sp.size(); ++i) dp[i].value->data = sp[i].value->data;
    return dst;
}

inline void dump_diagnostic_sample(const std::string& dir, const StereoSample& sample) {
    std::filesystem::create_directories(dir);
    PfmImage dmap{sample.w, sample.h, 1, {}};
    dmap.data.assign(sample.d_gt.begin(), sample.d_gt.end());
    write_pfm(dir + "/d_gt.pfm", dmap);
    const long long hw = static_cast<long long>(sample.h) * sample.w;
    for (const char* nm : {"left", "right"}) {
        const auto& img = std::string(nm) == "left" ? sample.left : sample.right;
        PfmImage pf{sample.w, sample.h, 3, std::vector<float>(3 * hw)};
        for (long long p = 0; p < hw; ++p)
            for (int ch = 0; ch < 3; ++ch) pf.data[p * 3 + ch] = static_cast<float>(img[ch * hw + p]);
        write_pfm(dir + "/" + nm + ".pfm", pf);
    }
}

inline TrainSummary train(const Config& cfg, const std::string& out_dir, const std::string& resume_path = {},
                          std::ostream* log = nullptr) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    StereoModel model(cfg.model_spec(), mix_seed(cfg.seed, 0x1717, 0));
    ParamList params = model.params();
    AdamState adam;
    long long start_step = 0;
    if (!resume_path.empty()) start_step = load_checkpoint(resume_path, params, adam, cfg.hash());

    TrainSummary summary;
    summary.start_step = start_step;
    summary.csv_path = out_dir + "/loss.csv";
    std::ofstream csv;
    if (start_step == 0) {
        csv.open(summary.csv_path, std::ios::trunc);
        csv << loss_csv_header() << "\n";
    } else {
        csv.open(summary.csv_path, std::ios::app);
    }
    if (!csv) throw std::runtime_error("train: cannot open '" + summary.csv_path + "'");

    const int n_threads =
        std::max(1, std::min<int>(cfg.batch, static_cast<int>(std::thread::hardware_concurrency())));
    std::vector<StereoModel> clones;
    std::vector<ParamList> clone_params;
    for (int t = 0; t < n_threads; ++t) {
        clones.push_back(clone_model(model));
        clone_params.push_back(clones.back().params());
    }

    auto sw = cfg.stage_weights_resolved();
    const double inv_b = 1.0 / cfg.batch;
    for (long long step = start_step + 1; step <= cfg.iters; ++step) {
        for (auto& p : params) p.value->zero_grad();
        for (int t = 0; t < n_threads; ++t)
            for (size_t j = 0; j < params.size(); ++j) {
                clone_params[t][j].value->data = params[j].value->data;
                clone_params[t][j].value->zero_grad();
            }

        // worker t owns samples i with i % n_threads == t
        std::vector<double> reg_items(cfg.batch), sce_items(cfg.batch, 0.0), rec_items(cfg.batch);
        std::vector<std::vector<double>> stage_items(cfg.batch);
        std::vector<int> bad_sample(n_threads, -1);
        std::vector<std::string> worker_error(n_threads);
        auto worker = [&](int t) {
            for (int i = t; i < cfg.batch; i += n_threads) {
                try {
                    StereoSample sample = training_sample(cfg, step, i);
                    SampleForward f = forward_sample(clones[t], cfg, sample);
                    LossReport rep = total_loss(f.reg, f.sce, f.recon, cfg.lambda, cfg.mu);
                    reg_items[i] = rep.l_regression;
                    sce_items[i] = rep.l_sce;
                    rec_items[i] = rep.l_recon;
                    stage_items[i] = rep.per_stage;
                    backward(mul_scalar(rep.total, inv_b));
                } catch (const std::exception& e) {
                    bad_sample[t] = i;
                    worker_error[t] = e.what();
                    return;
                }
            }
        };
        if (n_threads == 1) {
            worker(0);
        } else {
            // one core per worker; no nested op-level teams
            std::vector<std::thread> pool;
            for (int t = 0; t < n_threads; ++t)
                pool.emplace_back([&worker, t] {
#ifdef _OPENMP
                    omp_set_num_threads(1);
#endif
                    worker(t);
                });
            for (auto& th : pool) th.join();
        }
        for (int t = 0; t < n_threads; ++t) {
            if (bad_sample[t] < 0) continue;
            int i = bad_sample[t];
            std::string dir = out_dir + "/diagnostic_step" + std::to_string(step) + "_sample" + std::to_string(i);
            dump_diagnostic_sample(dir, training_sample(cfg, step, i));
            throw NumericError("train: failure at step " + std::to_string(step) + " (" + worker_error[t] +
                               "); sample dumped to " + dir);
        }

        // fixed-order gradient merge
        for (int t = 0; t < n_threads; ++t)
            for (size_t j = 0; j < params.size(); ++j) {
                auto& cp = *clone_params[t][j].value;
                if (cp.grad.empty()) continue;
                params[j].value->ensure_grad();
                auto& g = params[j].value->grad;
                for (size_t e = 0; e < g.size(); ++e) g[e] += cp.grad[e];
            }

        LossReport report;
        for (int i = 0; i < cfg.batch; ++i) {
            report.l_regression += reg_items[i] * inv_b;
            report.l_sce += sce_items[i] * inv_b;
            report.l_recon += rec_items[i] * inv_b;
        }
        report.per_stage.assign(sw.size(), 0.0);
        for (int i = 0; i < cfg.batch; ++i)
            for (size_t j = 0; j < sw.size(); ++j) report.per_stage[j] += stage_items[i][j] * inv_b;
        report.l_total = report.l_regression + (cfg.lambda * report.l_sce + cfg.mu * report.l_recon);

        adam_step(params, adam, cfg.lr_at(step), cfg.beta1, cfg.beta2);

        csv << loss_csv_row(step, report) << "\n";
        summary.reports.push_back(report);
        if (log && (step % 50 == 0 || step == 1))
            (*log) << "step " << step << " l_total " << report.l_total << "\n";

        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.iters) {
            save_checkpoint(out_dir + "/ckpt_" + std::to_string(step) + ".bin", params, adam, step, cfg.hash());
        }
    }
    csv.flush();
    summary.final_checkpoint = out_dir + "/ckpt_final.bin";
    save_checkpoint(summary.final_checkpoint, params, adam, cfg.iters, cfg.hash());
    return summary;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalRow {
    std::string id;
    Metrics metrics;
};

struct EvalSummary {
    std::vector<EvalRow> rows;
    Metrics aggregate;
};

inline EvalSummary evaluate(const Config& cfg, const StereoModel& model, const std::vector<StereoSample>& samples,
                            const std::string& dump_dir = {}) {
    if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
    namespace fs = std::filesystem;
    if (!dump_dir.empty()) fs::create_directories(dump_dir);
    EvalSummary out;
    Metrics agg;
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        auto d_hat = predict_disparity(model, cfg, s);
        auto vm = valid_mask(s.d_gt, cfg.d_max);
        for (size_t j = 0; j < vm.size(); ++j) vm[j] = vm[j] && s.valid[j];
        auto band = boundary_band(s.d_gt, s.h, s.w);
        Metrics m = compute_metrics(d_hat, s.d_gt, vm, band);
        agg.epe += m.epe;
        agg.rate_1px += m.rate_1px;
        agg.rate_2px += m.rate_2px;
        agg.rate_3px += m.rate_3px;
        agg.d1 += m.d1;
        agg.see += m.see;
        std::string id = "sample" + std::to_string(i);
        out.rows.push_back({id, m});
        if (!dump_dir.empty()) {
            PfmImage img{s.w, s.h, 1, std::vector<float>(d_hat.begin(), d_hat.end())};
            write_pfm(dump_dir + "/" + id + "_dhat.pfm", img);
            write_pgm_vis(dump_dir + "/" + id + "_dhat.pgm", d_hat, s.h, s.w, 255.0 / cfg.d_max);
        }
    }
    double n = static_cast<double>(samples.size());
    agg.epe /= n;
    agg.rate_1px /= n;
    agg.rate_2px /= n;
    agg.rate_3px /= n;
    agg.d1 /= n;
    agg.see /= n;
    out.aggregate = agg;
    return out;
}

// Loads a checkpoint into a fresh model built from the config.
inline StereoModel model_from_checkpoint(const Config& cfg, const std::string& ckpt_path) {
    StereoModel model(cfg.model_spec(), mix_seed(cfg.seed, 0x1717, 0));
    ParamList params = model.params();
    AdamState adam;
    load_checkpoint(ckpt_path, params, adam, cfg.hash());
    return model;
}

// ---------------------------------------------------------------------------
// Distribution inspection: per-disparity predicted, target and pooled
// probability at one pixel.
// ---------------------------------------------------------------------------

struct DistributionDump {
    std::vector<double> predicted, target, pooled;  // each length D
    int label = -1;
    bool pixel_valid = true;
};

inline DistributionDump inspect_distribution(const StereoModel& model, const Config& cfg, const StereoSample& sample,
                                             int y, int x) {
    if (y < 0 || y >= sample.h || x < 0 || x >= sample.w)
        throw std::invalid_argument("inspect: pixel out of bounds");
    NoGradGuard ng;
    SampleForward f = forward_sample(model, cfg, sample);
    const long long hw = static_cast<long long>(sample.h) * sample.w;
    const long long p = static_cast<long long>(y) * sample.w + x;
    DistributionDump d;
    d.pixel_valid = f.mask[p] != 0;
    const auto& prob = f.probs.back();
    for (int k = 0; k < cfg.d_max; ++k) d.predicted.push_back(prob->data[k * hw + p]);
    for (int k = 0; k < cfg.d_max; ++k) d.target.push_back(f.target.p_gt->data[k * hw + p]);
    d.label = f.labeling.m[p];
    if (f.pooled_pred.dist) {
        for (int k = 0; k < cfg.d_max; ++k)
            d.pooled.push_back(f.pooled_pred.dist->data[static_cast<size_t>(d.label) * cfg.d_max + k]);
    } else {
        // pooled column is still reported when the sce flavor is disabled
        int S = f.net.assoc.assoc.grid.num_superpixels();
        auto pooled = pool_superpixels(prob, f.labeling, S, &f.mask);
        for (int k = 0; k < cfg.d_max; ++k)
            d.pooled.push_back(pooled.dist->data[static_cast<size_t>(d.label) * cfg.d_max + k]);
    }
    return d;
}

}  // namespace spex
