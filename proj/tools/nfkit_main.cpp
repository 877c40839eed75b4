// nfkit: conditional flow matching over attributed 2D point clouds.
// Verbs: synth | preprocess | train | generate | evaluate | plot.
// Exit codes: 0 ok, 2 usage/config error, 3 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "nfkit/pipeline.hpp"

using namespace nfkit;

namespace {

struct GlobalArgs {
    std::uint64_t seed = 0;
    bool verbose = false;
};

void vlog(const GlobalArgs& g, const std::string& msg) {
    if (g.verbose) std::fprintf(stderr, "[nfkit] %s\n", msg.c_str());
}

int run_synth(const GlobalArgs& g, const data::SynthConfig& cfg, const std::string& out) {
    auto ds = data::synth_generate(cfg, g.seed);
    data::save_dataset(out, ds);
    for (const auto& s : ds.slides)
        std::printf("slide %d: %zu cells\n", s.time_index, s.cells.size());
    vlog(g, "wrote " + out);
    return 0;
}

int run_plot(const GlobalArgs& g, const std::vector<std::string>& tables, const std::string& out,
             const svg::PlotOptions& options) {
    if (tables.empty()) throw param_error("plot: need at least one cell table");
    std::vector<svg::PlotCell> cells;
    for (const auto& path : tables) {
        auto slides = data::load_slides(path);
        // sample_id column, when present, colors samples.
        std::vector<int> sample_ids;
        if (options.color_by == "sample") {
            std::ifstream is(path);
            std::string line;
            int col = -1;
            while (std::getline(is, line)) {
                if (line.empty() || line[0] == '#') continue;
                std::stringstream ss(line);
                std::string field;
                int idx = 0;
                while (std::getline(ss, field, ',')) {
                    if (field == "sample_id") col = idx;
                    ++idx;
                }
                break;
            }
            if (col >= 0) {
                while (std::getline(is, line)) {
                    if (line.empty() || line[0] == '#') continue;
                    std::stringstream ss(line);
                    std::string field;
                    for (int i = 0; i <= col; ++i) std::getline(ss, field, ',');
                    sample_ids.push_back(std::atoi(field.c_str()));
                }
            }
        }
        std::size_t idx = 0;
        for (const auto& s : slides)
            for (const auto& c : s.cells) {
                svg::PlotCell pc;
                pc.x = c.coords[0];
                pc.y = c.coords[1];
                pc.time_index = s.time_index;
                pc.color_key = options.color_by == "sample" && idx < sample_ids.size()
                                   ? sample_ids[idx]
                                   : std::max(0, c.type_label);
                cells.push_back(pc);
                ++idx;
            }
    }
    auto text = svg::render(cells, options);
    std::ofstream os(out);
    if (!os) throw format_error("plot: cannot write " + out);
    os << text;
    vlog(g, "wrote " + out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nfkit: flow-matching over attributed 2D point clouds"};
    app.require_subcommand(1);

    GlobalArgs global;
    app.add_option("--seed", global.seed, "global rng seed")->capture_default_str();
    app.add_flag("--verbose", global.verbose, "chatty progress on stderr");
    app.set_config("--config", "", "structured-text config file; flags win");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic time-resolved dataset");
    data::SynthConfig scfg;
    std::string synth_out;
    synth->add_option("--out", synth_out, "output cell-table path")->required();
    synth->add_option("--types", scfg.num_types, "number of cell types")->capture_default_str();
    synth->add_option("--timepoints", scfg.num_timepoints, "number of time points")->capture_default_str();
    synth->add_option("--cells-per-type", scfg.cells_per_type, "cell counts at t=0, one per type");
    synth->add_option("--growth", scfg.growth, "per-type population factor per step");
    synth->add_option("--spatial-radius", scfg.spatial_radius, "circle radius for type centers")->capture_default_str();
    synth->add_option("--blob-sigma", scfg.blob_sigma, "spatial blob standard deviation")->capture_default_str();
    synth->add_option("--drift-x", scfg.drift[0], "x drift per time step")->capture_default_str();
    synth->add_option("--drift-y", scfg.drift[1], "y drift per time step")->capture_default_str();
    synth->add_option("--feature-dim", scfg.feature_dim, "raw feature dimension")->capture_default_str();
    synth->add_option("--feature-separation", scfg.feature_separation, "distance between type feature means")
        ->capture_default_str();

    // preprocess
    auto* prep = app.add_subcommand("preprocess", "normalize/log1p/pca/standardize a dataset");
    std::string prep_in, prep_out;
    pipeline::PreprocessConfig pcfg;
    bool skip_normalize = false, skip_log = false, skip_pca = false, skip_standardize = false;
    prep->add_option("--in", prep_in, "input cell-table path")->required();
    prep->add_option("--out", prep_out, "output cell-table path")->required();
    prep->add_flag("--skip-normalize", skip_normalize, "skip total-count normalization");
    prep->add_flag("--skip-log", skip_log, "skip log1p");
    prep->add_flag("--skip-pca", skip_pca, "skip PCA");
    prep->add_flag("--skip-standardize", skip_standardize, "skip feature/coordinate standardization");
    prep->add_option("--pca-components", pcfg.pca_components, "PCA dimensionality")->capture_default_str();
    prep->add_option("--subsample", pcfg.subsample, "keep fraction of cells per slide")->capture_default_str();

    // train
    auto* train = app.add_subcommand("train", "train a flow model");
    std::string train_dataset, run_dir, resume, objective = "glvfm", conditioning = "niche";
    pipeline::TrainConfig tcfg;
    train->add_option("--dataset", train_dataset, "processed cell-table path")->required();
    train->add_option("--run-dir", run_dir, "output run directory")->required();
    train->add_option("--objective", objective, "cfm|gvfm|glvfm")->capture_default_str();
    train->add_option("--conditioning", conditioning, "niche|random-cloud|per-cell")->capture_default_str();
    train->add_option("--resume", resume, "checkpoint to continue from");
    train->add_option("--steps", tcfg.max_steps, "training step budget")->capture_default_str();
    train->add_option("--radius", tcfg.radius, "microenvironment radius")->capture_default_str();
    train->add_option("--k-regions", tcfg.k_regions, "K-Means spatial regions")->capture_default_str();
    train->add_option("--lambda", tcfg.lambda, "OT feature weight in [0,1]")->capture_default_str();
    train->add_option("--epsilon", tcfg.epsilon, "sinkhorn epsilon (<=0: 0.05 x mean cost)")->capture_default_str();
    train->add_option("--pool", tcfg.pool_size, "envs sampled per slide (M)")->capture_default_str();
    train->add_option("--pairs", tcfg.pairs, "coupled pairs per instance (n)")->capture_default_str();
    train->add_option("--instances", tcfg.instances_per_batch, "instances per batch")->capture_default_str();
    train->add_option("--lr", tcfg.learning_rate, "AdamW learning rate")->capture_default_str();
    train->add_option("--weight-decay", tcfg.weight_decay, "AdamW weight decay")->capture_default_str();
    train->add_option("--embed", tcfg.model.embed_dim, "embedding width")->capture_default_str();
    train->add_option("--mlp-hidden", tcfg.model.mlp_hidden, "feedforward width")->capture_default_str();
    train->add_option("--heads", tcfg.model.heads, "attention heads")->capture_default_str();
    train->add_option("--encoder-layers", tcfg.model.encoder_layers, "encoder depth")->capture_default_str();
    train->add_option("--decoder-layers", tcfg.model.decoder_layers, "decoder depth")->capture_default_str();
    train->add_option("--dropout", tcfg.model.dropout, "dropout rate")->capture_default_str();
    train->add_option("--checkpoint-every", tcfg.checkpoint_every, "checkpoint cadence")->capture_default_str();

    // generate
    auto* gen = app.add_subcommand("generate", "push source environments through a trained flow");
    std::string gen_ckpt, gen_dataset, gen_out;
    pipeline::GenerateConfig gcfg;
    gen->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
    gen->add_option("--dataset", gen_dataset, "processed cell-table path")->required();
    gen->add_option("--out", gen_out, "output cell-table path")->required();
    gen->add_option("--source-time", gcfg.source_time, "source time index")->capture_default_str();
    gen->add_option("--select", gcfg.selection, "grid|centers|all")->capture_default_str();
    gen->add_option("--centers", gcfg.centers, "center cell indices for --select centers");
    gen->add_option("--grid-step", gcfg.grid_step, "grid spacing for --select grid")->capture_default_str();
    gen->add_option("--target-count", gcfg.target_count, "minimum env count for --select grid")->capture_default_str();
    gen->add_option("--samples", gcfg.samples, "independent generations per source env")->capture_default_str();
    gen->add_option("--chain", gcfg.chain, "successive push-forward steps")->capture_default_str();
    gen->add_option("--euler-steps", gcfg.generation.euler_steps, "ODE steps")->capture_default_str();

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "metrics report against the true next slides");
    std::string eval_ckpt, eval_dataset, eval_out;
    metrics::EvalConfig ecfg;
    bool oracle = false;
    eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval->add_option("--dataset", eval_dataset, "processed cell-table path")->required();
    eval->add_option("--out", eval_out, "report output path")->required();
    eval->add_option("--grid-step", ecfg.grid_step, "evaluation grid spacing")->capture_default_str();
    eval->add_option("--target-count", ecfg.target_count, "minimum env count per slide")->capture_default_str();
    eval->add_option("--samples", ecfg.samples_per_env, "generations per source env")->capture_default_str();
    eval->add_option("--euler-steps", ecfg.generation.euler_steps, "ODE steps")->capture_default_str();
    eval->add_flag("--oracle", oracle, "test hook: passthrough of true target envs");

    // plot
    auto* plot = app.add_subcommand("plot", "scatter SVG, one panel per time index");
    std::vector<std::string> plot_tables;
    std::string plot_out;
    svg::PlotOptions popt;
    plot->add_option("--in", plot_tables, "cell tables")->required();
    plot->add_option("--out", plot_out, "output svg path")->required();
    plot->add_option("--color-by", popt.color_by, "type|sample")->capture_default_str();
    plot->add_flag("--kde", popt.kde_overlay, "overlay a KDE density grid");
    plot->add_option("--kde-sigma", popt.kde_sigma, "KDE bandwidth")->capture_default_str();
    plot->add_option("--kde-grid", popt.kde_grid, "KDE cells per axis")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) return run_synth(global, scfg, synth_out);
        if (*prep) {
            pcfg.normalize = !skip_normalize;
            pcfg.log1p = !skip_log;
            pcfg.run_pca = !skip_pca;
            pcfg.standardize = !skip_standardize;
            pcfg.seed = global.seed;
            auto ds = data::load_dataset(prep_in);
            auto out = pipeline::preprocess(ds, pcfg);
            data::save_dataset(prep_out, out);
            std::printf("preprocessed %zu slides, feature dim %d\n", out.slides.size(), out.meta.feature_dim);
            return 0;
        }
        if (*train) {
            tcfg.model.objective = flow::objective_from_string(objective);
            tcfg.model.conditioning = flow::conditioning_from_string(conditioning);
            tcfg.seed = global.seed;
            auto ds = data::load_dataset(train_dataset);
            auto result = pipeline::train_into_run_dir(ds, tcfg, run_dir, resume);
            double last = result.trace.empty() ? 0.0 : result.trace.back().loss;
            std::printf("trained %zu steps, final loss %.6f, run dir %s\n", result.trace.size(), last,
                        run_dir.c_str());
            return 0;
        }
        if (*gen) {
            gcfg.seed = global.seed;
            gcfg.generation.seed = global.seed;
            auto lm = pipeline::load_model(gen_ckpt);
            auto ds = data::load_dataset(gen_dataset);
            auto cells = pipeline::generate(lm, ds, gcfg);
            data::save_generated(gen_out, cells.slides, cells.sample_ids);
            std::size_t total = 0;
            for (const auto& s : cells.slides) total += s.cells.size();
            std::printf("generated %zu cells into %s\n", total, gen_out.c_str());
            return 0;
        }
        if (*eval) {
            auto lm = pipeline::load_model(eval_ckpt);
            auto ds = data::load_dataset(eval_dataset);
            auto report = pipeline::evaluate_model(lm, ds, ecfg, global.seed, oracle);
            std::ofstream os(eval_out);
            if (!os) throw format_error("evaluate: cannot write " + eval_out);
            os << report.serialize();
            std::printf("%s", report.serialize().c_str());
            return 0;
        }
        if (*plot) return run_plot(global, plot_tables, plot_out, popt);
    } catch (const param_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const format_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const contract_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return 3;
    }
    return 2;
}
