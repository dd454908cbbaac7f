// spex CLI: synthetic data generation, training, evaluation, distribution
// inspection and gradient checking.

#include <CLI11.hpp>

#include <iostream>
#include <map>

#include "spex/gradcheck.hpp"

namespace {

const std::vector<std::string> kConfigKeys = {
    "d_max", "crop_h", "crop_w", "cell_size", "k", "lambda", "mu", "w", "cost_mode", "groups", "stages",
    "stage_weights", "lr", "lr_decay_steps", "beta1", "beta2", "batch", "iters", "seed", "v_min", "v_max",
    "use_sce", "use_ce_pixelwise", "recon_signal", "topk_literal_softmax", "checkpoint_every", "fixed_set",
    "gen_regions", "gen_dmax", "gen_half", "gen_planar"};

struct ConfigCli {
    std::string config_path;
    std::map<std::string, std::string> overrides;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "key=value configuration file");
        for (const auto& key : kConfigKeys) {
            app->add_option_function<std::string>(
                "--" + key, [this, key](const std::string& v) { overrides[key] = v; }, "override config key " + key);
        }
    }

    spex::Config build() const {
        spex::Config cfg = config_path.empty() ? spex::Config{} : spex::load_config_file(config_path);
        for (const auto& [k, v] : overrides) cfg.set(k, v);
        cfg.validate();
        return cfg;
    }
};

void write_sample_files(const spex::StereoSample& s, const std::string& stem, double vis_scale) {
    const long long hw = static_cast<long long>(s.h) * s.w;
    auto pack3 = [&](const std::vector<double>& img) {
        spex::PfmImage pf{s.w, s.h, 3, std::vector<float>(3 * hw)};
        for (long long p = 0; p < hw; ++p)
            for (int ch = 0; ch < 3; ++ch) pf.data[p * 3 + ch] = static_cast<float>(img[ch * hw + p]);
        return pf;
    };
    spex::write_pfm(stem + "_left.pfm", pack3(s.left));
    spex::write_pfm(stem + "_right.pfm", pack3(s.right));
    spex::PfmImage d{s.w, s.h, 1, std::vector<float>(s.d_gt.begin(), s.d_gt.end())};
    spex::write_pfm(stem + "_dgt.pfm", d);
    spex::write_pgm_vis(stem + "_dgt.pgm", s.d_gt, s.h, s.w, vis_scale);
    std::vector<double> occ(s.occlusion.begin(), s.occlusion.end());
    spex::write_pgm_vis(stem + "_occlusion.pgm", occ, s.h, s.w, 255.0);
}

int run_gen(const ConfigCli& cc, const std::string& out_dir, int count) {
    spex::Config cfg = cc.build();
    std::filesystem::create_directories(out_dir);
    for (int i = 0; i < count; ++i) {
        auto s = spex::gen_stereogram(cfg.crop_h, cfg.crop_w, cfg.gen_dmax, cfg.gen_regions,
                                      spex::mix_seed(cfg.seed, 0x9E9, static_cast<uint64_t>(i)), cfg.gen_options());
        write_sample_files(s, out_dir + "/sample" + std::to_string(i), 255.0 / cfg.d_max);
    }
    std::cout << "wrote " << count << " samples to " << out_dir << "\n";
    return 0;
}

int run_train(const ConfigCli& cc, const std::string& out_dir, const std::string& resume) {
    spex::Config cfg = cc.build();
    auto summary = spex::train(cfg, out_dir, resume, &std::cout);
    std::cout << "loss csv: " << summary.csv_path << "\n"
              << "checkpoint: " << summary.final_checkpoint << "\n";
    return 0;
}

int run_eval(const ConfigCli& cc, const std::string& ckpt, int n_samples, const std::string& out_csv,
             const std::string& dump_dir) {
    spex::Config cfg = cc.build();
    auto model = spex::model_from_checkpoint(cfg, ckpt);
    std::vector<spex::StereoSample> samples;
    for (int i = 0; i < n_samples; ++i) samples.push_back(spex::heldout_sample(cfg, i));
    auto res = spex::evaluate(cfg, model, samples, dump_dir);

    std::ostream* out = &std::cout;
    std::ofstream f;
    if (!out_csv.empty()) {
        f.open(out_csv);
        if (!f) throw std::invalid_argument("eval: cannot open '" + out_csv + "'");
        out = &f;
    }
    (*out) << spex::metrics_csv_header() << "\n";
    for (const auto& row : res.rows) (*out) << spex::metrics_csv_row(row.id, row.metrics) << "\n";
    (*out) << spex::metrics_csv_row("aggregate", res.aggregate) << "\n";
    return 0;
}

int run_inspect(const ConfigCli& cc, const std::string& ckpt, uint64_t sample_seed, int y, int x,
                const std::string& out_path) {
    spex::Config cfg = cc.build();
    auto model = spex::model_from_checkpoint(cfg, ckpt);
    auto sample = spex::gen_stereogram(cfg.crop_h, cfg.crop_w, cfg.gen_dmax, cfg.gen_regions, sample_seed,
                                       cfg.gen_options());
    auto dump = spex::inspect_distribution(model, cfg, sample, y, x);
    if (!dump.pixel_valid)
        std::cerr << "warning: pixel (" << y << "," << x << ") is masked; dump still includes the prediction\n";

    std::ostream* out = &std::cout;
    std::ofstream f;
    if (!out_path.empty()) {
        f.open(out_path);
        if (!f) throw std::invalid_argument("inspect: cannot open '" + out_path + "'");
        out = &f;
    }
    (*out) << "# superpixel label " << dump.label << "\n";
    (*out) << "d,predicted,target,pooled\n";
    char buf[128];
    for (int d = 0; d < cfg.d_max; ++d) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g", d, dump.predicted[d], dump.target[d], dump.pooled[d]);
        (*out) << buf << "\n";
    }
    return 0;
}

int run_gradcheck(int seeds, int e2e_seeds, int indices, double tol) {
    auto rep = spex::run_gradcheck(seeds, e2e_seeds, indices, tol);
    for (const auto& g : rep.groups) {
        std::printf("group %-18s max rel err %10.3e  %s\n", g.name.c_str(), g.max_rel_err,
                    g.pass ? "PASS" : "FAIL");
    }
    std::printf("gradcheck %s in %.1f s (tolerance %g)\n", rep.all_pass ? "passed" : "FAILED", rep.seconds,
                rep.tolerance);
    return rep.all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"superpixel-guided stereo matching trainer"};
    app.require_subcommand(1);

    ConfigCli cc;

    auto* gen = app.add_subcommand("gen", "write synthetic stereo samples as PFM + PGM");
    std::string gen_out = "samples";
    int gen_count = 4;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--count", gen_count, "number of samples");
    cc.attach(gen);

    auto* train = app.add_subcommand("train", "train the model");
    std::string train_out = "run";
    std::string resume;
    train->add_option("--out", train_out, "output directory (loss.csv, checkpoints)");
    train->add_option("--resume", resume, "checkpoint to resume from");
    cc.attach(train);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out synthetic samples");
    std::string eval_ckpt, eval_csv, eval_dump;
    int eval_samples = 16;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--samples", eval_samples, "number of held-out samples");
    eval->add_option("--out", eval_csv, "metrics CSV path (default stdout)");
    eval->add_option("--dump-dir", eval_dump, "write per-sample PFM/PGM disparity dumps here");
    cc.attach(eval);

    auto* inspect = app.add_subcommand("inspect", "dump per-disparity distributions at one pixel");
    std::string ins_ckpt, ins_out;
    uint64_t ins_seed = 0;
    int ins_y = 0, ins_x = 0;
    inspect->add_option("--ckpt", ins_ckpt, "checkpoint file")->required();
    inspect->add_option("--sample-seed", ins_seed, "seed for the generated sample");
    inspect->add_option("--y", ins_y, "pixel row")->required();
    inspect->add_option("--x", ins_x, "pixel column")->required();
    inspect->add_option("--out", ins_out, "output path (default stdout)");
    cc.attach(inspect);

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks for every operation group");
    int gc_seeds = 20, gc_e2e = 2, gc_idx = 2;
    double gc_tol = 1e-4;
    gradcheck->add_option("--seeds", gc_seeds, "random seeds per operation suite");
    gradcheck->add_option("--e2e-seeds", gc_e2e, "seeds for the end-to-end loss check");
    gradcheck->add_option("--indices", gc_idx, "probed entries per parameter tensor");
    gradcheck->add_option("--tol", gc_tol, "relative error tolerance");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return run_gen(cc, gen_out, gen_count);
        if (train->parsed()) return run_train(cc, train_out, resume);
        if (eval->parsed()) return run_eval(cc, eval_ckpt, eval_samples, eval_csv, eval_dump);
        if (inspect->parsed()) return run_inspect(cc, ins_ckpt, ins_seed, ins_y, ins_x, ins_out);
        if (gradcheck->parsed()) return run_gradcheck(gc_seeds, gc_e2e, gc_idx, gc_tol);
    } catch (const spex::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
