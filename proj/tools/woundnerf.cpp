#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "woundnerf/experiment.hpp"

namespace {

// Exit codes: 0 success, 2 config error, 3 missing dependency artifact,
// 4 numerical divergence.
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitDiverged = 4;

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::string scene;
    std::optional<uint64_t> seed;
};

wnf::ExperimentConfig resolve_config(const CommonOpts& opts) {
    wnf::ExperimentConfig cfg;
    if (!opts.config_path.empty()) {
        if (opts.config_path == "ci-small")
            cfg = wnf::ci_experiment_config();
        else
            cfg = wnf::load_experiment_config(opts.config_path);
    }
    if (opts.seed) cfg.seed = *opts.seed;
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    if (!opts.scene.empty()) cfg.scenes = {opts.scene};
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path,
                    "experiment config JSON ('ci-small' selects the reduced built-in)");
    cmd->add_option("--seed", opts.seed, "global seed (overrides config)");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--scene", opts.scene, "restrict to one suite scene");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"woundnerf: synthetic multi-view wound segmentation experiments"};
    app.require_subcommand(1);
    CommonOpts opts;
    std::string train_stage = "all";

    CLI::App* gen = app.add_subcommand("gen", "generate scene assets and corrupted masks");
    CLI::App* perturb = app.add_subcommand("perturb", "write perturbed mask variants");
    CLI::App* train = app.add_subcommand("train", "two-stage field training per mask variant");
    train->add_option("--stage", train_stage, "all | 1 | 2")
        ->check(CLI::IsMember({"all", "1", "2"}));
    CLI::App* render = app.add_subcommand("render", "render held-out predictions");
    CLI::App* fuse = app.add_subcommand("fuse", "rasterization fusion baseline");
    CLI::App* mesh = app.add_subcommand("mesh", "extract labeled meshes from trained fields");
    CLI::App* eval = app.add_subcommand("eval", "metric tables and consistency report");
    CLI::App* report = app.add_subcommand("report", "montage panels and text summary");
    CLI::App* all = app.add_subcommand("all", "full pipeline");
    for (CLI::App* cmd : {gen, perturb, train, render, fuse, mesh, eval, report, all})
        add_common(cmd, opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        wnf::ExperimentConfig cfg = resolve_config(opts);
        if (gen->parsed()) wnf::cmd_gen(cfg);
        if (perturb->parsed()) wnf::cmd_perturb(cfg);
        if (train->parsed()) {
            wnf::TrainStages stages = wnf::TrainStages::both;
            if (train_stage == "1") stages = wnf::TrainStages::stage1_only;
            if (train_stage == "2") stages = wnf::TrainStages::stage2_only;
            wnf::cmd_train(cfg, stages);
        }
        if (render->parsed()) wnf::cmd_render(cfg);
        if (fuse->parsed()) wnf::cmd_fuse(cfg);
        if (mesh->parsed()) wnf::cmd_mesh(cfg);
        if (eval->parsed()) wnf::cmd_eval(cfg);
        if (report->parsed()) wnf::cmd_report(cfg);
        if (all->parsed()) wnf::cmd_all(cfg);
    } catch (const wnf::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const wnf::MissingArtifact& e) {
        std::fprintf(stderr, "missing artifact: %s\n", e.what());
        return kExitMissing;
    } catch (const wnf::NumericalDivergence& e) {
        std::fprintf(stderr, "numerical divergence: %s\n", e.what());
        return kExitDiverged;
    } catch (const wnf::EmptyLevelSet& e) {
        std::fprintf(stderr, "numerical divergence: %s\n", e.what());
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
