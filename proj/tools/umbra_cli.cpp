// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.
//
// Command-line front end for the full pipeline: data synthesis, the three
// training stages, single-image inference and directory evaluation.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "umbra/train.hpp"

namespace {

namespace fs = std::filesystem;

/// Options shared by every subcommand. Precedence, weakest first: preset,
/// config file, explicit flags.
struct Common {
    std::string preset;
    std::string config_path;
    std::uint64_t seed = 0;
    std::string variant;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* variant_opt = nullptr;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--preset", c.preset, "Configuration preset (desk, paper)")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--config", c.config_path, "Flat key=value configuration file")
        ->check(CLI::ExistingFile);
    c.seed_opt = cmd->add_option("--seed", c.seed, "Master seed override");
    c.variant_opt = cmd->add_option("--variant", c.variant,
                                    "Restoration variant (full, igtr-l, igtr-g, sa, cat-i, "
                                    "cat-f, multiply)");
}

umbra::TrainConfig resolve(const Common& c) {
    umbra::TrainConfig cfg;
    if (!c.preset.empty()) cfg = umbra::TrainConfig::preset(c.preset);
    if (!c.config_path.empty())
        cfg = umbra::apply_config(cfg, umbra::parse_config_file(c.config_path));
    if (c.seed_opt->count() > 0) cfg.seed = c.seed;
    if (c.variant_opt->count() > 0) cfg.variant = c.variant;
    cfg.validate();
    return cfg;
}

void report_stage(const umbra::StageResult& r) {
    std::cout << "steps " << r.losses.size();
    if (!r.losses.empty())
        std::cout << "  loss " << r.losses.front() << " -> " << r.losses.back();
    std::cout << "\n checkpoint " << r.checkpoint_path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"umbra: two-stage shadow removal pipeline"};
    app.require_subcommand(1);

    Common c_gen, c_dec, c_dif, c_res, c_inf, c_eval;

    auto* gen = app.add_subcommand("gen-data", "Synthesize a paired shadow dataset");
    std::string gen_out;
    gen->add_option("--out", gen_out, "Dataset root directory")->required();
    add_common(gen, c_gen);

    std::string data_dir, out_dir, resume, decomp_ckpt, diffusion_ckpt;
    auto add_train_io = [&](CLI::App* cmd) {
        cmd->add_option("--data", data_dir, "Dataset root directory")->required();
        cmd->add_option("--out", out_dir, "Run output directory")->required();
        cmd->add_option("--resume", resume, "Checkpoint to continue from")
            ->check(CLI::ExistingFile);
    };

    auto* dec = app.add_subcommand("train-decomp", "Train the decomposition stage");
    add_train_io(dec);
    add_common(dec, c_dec);

    auto* dif = app.add_subcommand("train-diffusion", "Train the lighting correction stage");
    add_train_io(dif);
    dif->add_option("--decomp", decomp_ckpt, "Decomposition checkpoint (default <out>/decomp.ckpt)");
    add_common(dif, c_dif);

    auto* res = app.add_subcommand("train-restore", "Train the restoration stage");
    add_train_io(res);
    res->add_option("--decomp", decomp_ckpt, "Decomposition checkpoint (default <out>/decomp.ckpt)");
    res->add_option("--diffusion", diffusion_ckpt,
                    "Lighting correction checkpoint (default <out>/diffusion.ckpt)");
    add_common(res, c_res);

    auto* inf = app.add_subcommand("infer", "Remove the shadow from one image");
    std::string run_dir, image_path, mask_path, out_path;
    bool dump = false;
    inf->add_option("--run", run_dir, "Directory holding the three stage checkpoints")
        ->required();
    inf->add_option("--image", image_path, "Shadow image (PNG)")->required();
    inf->add_option("--mask", mask_path, "Shadow mask (PNG)")->required();
    inf->add_option("--out", out_path, "Output image path")->required();
    inf->add_flag("--dump-intermediates", dump,
                  "Also write reflectance and both illumination fields");
    add_common(inf, c_inf);

    auto* eva = app.add_subcommand("eval", "Score predictions against ground truth");
    std::string pred_dir, gt_dir, mask_dir, report_path = "report.tsv";
    eva->add_option("--pred", pred_dir, "Predicted images directory")->required();
    eva->add_option("--gt", gt_dir, "Ground-truth images directory")->required();
    eva->add_option("--mask", mask_dir, "Shadow masks directory")->required();
    eva->add_option("--report", report_path, "Output table path");
    add_common(eva, c_eval);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const umbra::TrainConfig cfg = resolve(c_gen);
            const auto stems =
                umbra::generate_dataset(gen_out, cfg.count, cfg.image_size, cfg.seed);
            std::cout << "wrote " << stems.size() << " samples to " << gen_out << "\n";
        } else if (dec->parsed()) {
            const umbra::TrainConfig cfg = resolve(c_dec);
            const auto data = umbra::load_train_set(data_dir);
            report_stage(umbra::train_decomposition(cfg, data, out_dir, resume));
        } else if (dif->parsed()) {
            const umbra::TrainConfig cfg = resolve(c_dif);
            const auto data = umbra::load_train_set(data_dir);
            if (decomp_ckpt.empty())
                decomp_ckpt = (fs::path(out_dir) / "decomp.ckpt").string();
            report_stage(umbra::train_diffusion(cfg, data, out_dir, decomp_ckpt, resume));
        } else if (res->parsed()) {
            const umbra::TrainConfig cfg = resolve(c_res);
            const auto data = umbra::load_train_set(data_dir);
            if (decomp_ckpt.empty())
                decomp_ckpt = (fs::path(out_dir) / "decomp.ckpt").string();
            if (diffusion_ckpt.empty())
                diffusion_ckpt = (fs::path(out_dir) / "diffusion.ckpt").string();
            report_stage(
                umbra::train_restore(cfg, data, out_dir, decomp_ckpt, diffusion_ckpt, resume));
        } else if (inf->parsed()) {
            const umbra::TrainConfig cfg = resolve(c_inf);
            const umbra::Image shadow = umbra::load_png(image_path);
            const umbra::Image mask = umbra::load_png(mask_path, 1);
            const umbra::InferResult r =
                umbra::run_infer(run_dir, shadow, mask, cfg.image_size, cfg.seed);
            umbra::save_png(out_path, r.output);
            if (dump) {
                const fs::path base = fs::path(out_path).parent_path() /
                                      fs::path(out_path).stem();
                umbra::save_png(base.string() + ".rs.png", r.r_s);
                umbra::save_png(base.string() + ".ls.png", r.l_s);
                umbra::save_png(base.string() + ".lhat.png", r.l_hat);
            }
            std::cout << "wrote " << out_path << "\n";
        } else if (eva->parsed()) {
            const umbra::EvalOutcome out = umbra::run_eval(pred_dir, gt_dir, mask_dir);
            for (const auto& [id, row] : out.rows)
                std::cout << umbra::report_line(id, row) << "\n";
            umbra::write_report_table(report_path, out.rows);
            std::cout << "report written to " << report_path << "\n";
            if (!out.unmatched.empty()) {
                for (const auto& msg : out.unmatched)
                    std::cerr << "unmatched: " << msg << "\n";
                return 1;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
