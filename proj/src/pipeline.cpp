#include "nfkit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace nfkit::pipeline {

namespace fs = std::filesystem;

data::Dataset preprocess(const data::Dataset& input, const PreprocessConfig& config) {
    const auto& meta = input.meta;
    if (config.normalize && meta.normalized) throw param_error("preprocess: dataset already normalized");
    if (config.log1p && meta.log1p) throw param_error("preprocess: dataset already log-transformed");
    if (config.run_pca && meta.pca) throw param_error("preprocess: dataset already reduced with PCA");
    if (config.standardize && (meta.std_features || meta.std_coords))
        throw param_error("preprocess: dataset already standardized");

    data::Dataset ds = input;
    Rng rng(config.seed);

    if (config.subsample < 1.0) {
        if (config.subsample <= 0.0) throw param_error("preprocess: subsample must be in (0, 1]");
        for (auto& slide : ds.slides) {
            auto n = slide.cells.size();
            auto keep = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(n * config.subsample)));
            if (keep >= n) continue;
            auto perm = rng.permutation(n);
            perm.resize(keep);
            std::sort(perm.begin(), perm.end());
            std::vector<data::Cell> kept;
            kept.reserve(keep);
            for (auto i : perm) kept.push_back(slide.cells[i]);
            slide.cells = std::move(kept);
        }
    }

    // Pooled feature matrix in slide order.
    std::size_t n_cells = 0;
    for (const auto& s : ds.slides) n_cells += s.cells.size();
    data::Matrix mat;
    mat.rows = static_cast<std::int64_t>(n_cells);
    mat.cols = ds.meta.feature_dim;
    mat.v.resize(n_cells * static_cast<std::size_t>(mat.cols));
    std::size_t row = 0;
    for (const auto& s : ds.slides)
        for (const auto& c : s.cells) {
            for (std::int64_t d = 0; d < mat.cols; ++d) mat.at(static_cast<std::int64_t>(row), d) = c.features[static_cast<std::size_t>(d)];
            ++row;
        }

    if (config.normalize) {
        mat = data::total_count_normalize(mat);
        ds.meta.normalized = true;
    }
    if (config.log1p) {
        mat = data::log1p_transform(mat);
        ds.meta.log1p = true;
    }
    if (config.run_pca) {
        auto res = data::pca(mat, config.pca_components);
        mat = std::move(res.embedding);
        ds.meta.pca = true;
        ds.meta.feature_dim = static_cast<int>(mat.cols);
    }
    if (config.standardize) {
        mat = data::standardize_features(mat);
        data::standardize_coords(ds.slides);
        ds.meta.std_features = true;
        ds.meta.std_coords = true;
    }

    row = 0;
    for (auto& s : ds.slides)
        for (auto& c : s.cells) {
            c.features.assign(static_cast<std::size_t>(mat.cols), 0.0);
            for (std::int64_t d = 0; d < mat.cols; ++d) c.features[static_cast<std::size_t>(d)] = mat.at(static_cast<std::int64_t>(row), d);
            ++row;
        }
    return ds;
}

model::TransformerConfig ModelConfig::transformer_config(int feature_dim, int num_timepoints) const {
    model::TransformerConfig t;
    t.feature_dim = feature_dim;
    t.num_timepoints = num_timepoints;
    t.embed_dim = embed_dim;
    t.mlp_hidden = mlp_hidden;
    t.heads = heads;
    t.encoder_layers = encoder_layers;
    t.decoder_layers = decoder_layers;
    t.dropout = dropout;
    t.time_freqs = time_freqs;
    return t;
}

flow::TrainLoopConfig TrainConfig::loop_config() const {
    flow::TrainLoopConfig loop;
    loop.max_steps = max_steps;
    loop.sampling.instances_per_batch = instances_per_batch;
    loop.sampling.coupling.lambda = lambda;
    loop.sampling.coupling.pool_size = pool_size;
    loop.sampling.coupling.pairs = pairs;
    loop.sampling.coupling.k_regions = k_regions;
    loop.sampling.coupling.sinkhorn.epsilon = epsilon;
    loop.sampling.coupling.sinkhorn.max_iter = 4000;
    loop.sampling.coupling.sinkhorn.tol = 1e-7;
    // Pair sampling only needs approximate plans; stalled-but-rounded
    // iterates up to this violation are fine.
    loop.sampling.coupling.sinkhorn.accept_violation = 1e-3;
    loop.checkpoint_every = checkpoint_every;
    loop.early_stop_window = early_stop_window;
    loop.early_stop_threshold = early_stop_threshold;
    loop.seed = seed;
    return loop;
}

namespace {

flow::FlowModel build_model(const TrainConfig& config, int feature_dim, int num_timepoints) {
    flow::FlowObjective obj;
    obj.kind = config.model.objective;
    obj.numeric_eps = config.model.numeric_eps;
    auto tcfg = config.model.transformer_config(feature_dim, num_timepoints);
    return flow::make_flow_model(obj, config.model.conditioning, tcfg, config.seed ^ 0x1217ULL);
}

}  // namespace

TrainResult train_model(const data::Dataset& ds, const TrainConfig& config, const std::string& resume_checkpoint,
                        const std::vector<flow::StepRecord>& prior_trace,
                        const std::function<void(const flow::StepRecord&)>& on_step,
                        const std::function<void(int, flow::FlowModel&, ad::OptimizerState&)>& on_checkpoint) {
    auto prepared = flow::prepare(ds, config.radius, config.k_regions, config.model.conditioning,
                                  config.seed ^ 0x9E9EULL);

    TrainResult result{build_model(config, prepared.feature_dim, prepared.num_timepoints), {}, {}};
    result.optimizer.learning_rate = config.learning_rate;
    result.optimizer.weight_decay = config.weight_decay;

    if (!resume_checkpoint.empty()) {
        auto ckpt = ad::load_checkpoint(resume_checkpoint);
        ad::restore(ckpt, result.model.params(), result.optimizer);
    }

    auto loop = config.loop_config();
    auto step_cb = on_step;
    std::function<void(int)> ckpt_cb = nullptr;
    if (on_checkpoint)
        ckpt_cb = [&](int step) { on_checkpoint(step, result.model, result.optimizer); };
    result.trace = flow::train(prepared, result.model, result.optimizer, loop, step_cb, ckpt_cb, prior_trace);
    return result;
}

namespace {

std::map<std::string, std::string> config_meta(const TrainConfig& config, int feature_dim, int num_timepoints) {
    std::map<std::string, std::string> m;
    char buf[40];
    auto put_num = [&](const char* key, double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        m[key] = buf;
    };
    m["objective"] = flow::to_string(config.model.objective);
    m["conditioning"] = flow::to_string(config.model.conditioning);
    m["feature_dim"] = std::to_string(feature_dim);
    m["num_timepoints"] = std::to_string(num_timepoints);
    m["embed_dim"] = std::to_string(config.model.embed_dim);
    m["mlp_hidden"] = std::to_string(config.model.mlp_hidden);
    m["heads"] = std::to_string(config.model.heads);
    m["encoder_layers"] = std::to_string(config.model.encoder_layers);
    m["decoder_layers"] = std::to_string(config.model.decoder_layers);
    put_num("dropout", config.model.dropout);
    m["time_freqs"] = std::to_string(config.model.time_freqs);
    put_num("numeric_eps", config.model.numeric_eps);
    put_num("radius", config.radius);
    m["k_regions"] = std::to_string(config.k_regions);
    put_num("lambda", config.lambda);
    put_num("epsilon", config.epsilon);
    m["pool_size"] = std::to_string(config.pool_size);
    m["pairs"] = std::to_string(config.pairs);
    m["instances_per_batch"] = std::to_string(config.instances_per_batch);
    m["max_steps"] = std::to_string(config.max_steps);
    put_num("learning_rate", config.learning_rate);
    put_num("weight_decay", config.weight_decay);
    m["checkpoint_every"] = std::to_string(config.checkpoint_every);
    m["early_stop_window"] = std::to_string(config.early_stop_window);
    put_num("early_stop_threshold", config.early_stop_threshold);
    m["seed"] = std::to_string(config.seed);
    return m;
}

TrainConfig config_from_meta(const std::map<std::string, std::string>& m) {
    TrainConfig c;
    auto get = [&](const char* key) -> const std::string& {
        auto it = m.find(key);
        if (it == m.end()) throw format_error(std::string("checkpoint: missing meta key ") + key);
        return it->second;
    };
    c.model.objective = flow::objective_from_string(get("objective"));
    c.model.conditioning = flow::conditioning_from_string(get("conditioning"));
    c.model.embed_dim = std::stoi(get("embed_dim"));
    c.model.mlp_hidden = std::stoi(get("mlp_hidden"));
    c.model.heads = std::stoi(get("heads"));
    c.model.encoder_layers = std::stoi(get("encoder_layers"));
    c.model.decoder_layers = std::stoi(get("decoder_layers"));
    c.model.dropout = std::stod(get("dropout"));
    c.model.time_freqs = std::stoi(get("time_freqs"));
    c.model.numeric_eps = std::stod(get("numeric_eps"));
    c.radius = std::stod(get("radius"));
    c.k_regions = std::stoi(get("k_regions"));
    c.lambda = std::stod(get("lambda"));
    c.epsilon = std::stod(get("epsilon"));
    c.pool_size = std::stoi(get("pool_size"));
    c.pairs = std::stoi(get("pairs"));
    c.instances_per_batch = std::stoi(get("instances_per_batch"));
    c.max_steps = std::stoi(get("max_steps"));
    c.learning_rate = std::stod(get("learning_rate"));
    c.weight_decay = std::stod(get("weight_decay"));
    c.checkpoint_every = std::stoi(get("checkpoint_every"));
    c.early_stop_window = std::stoi(get("early_stop_window"));
    c.early_stop_threshold = std::stod(get("early_stop_threshold"));
    c.seed = std::stoull(get("seed"));
    return c;
}

}  // namespace

void save_model(const std::string& path, const flow::FlowModel& model, const ad::OptimizerState& opt,
                const TrainConfig& config, int feature_dim, int num_timepoints) {
    ad::save_checkpoint(path, model.params(), opt, config_meta(config, feature_dim, num_timepoints));
}

LoadedModel load_model(const std::string& path) {
    auto ckpt = ad::load_checkpoint(path);
    auto config = config_from_meta(ckpt.meta);
    int feature_dim = std::stoi(ckpt.meta.at("feature_dim"));
    int num_timepoints = std::stoi(ckpt.meta.at("num_timepoints"));
    LoadedModel lm{build_model(config, feature_dim, num_timepoints), {}, config, feature_dim, num_timepoints};
    ad::restore(ckpt, lm.model.params(), lm.optimizer);
    return lm;
}

std::vector<flow::StepRecord> read_trace(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("cannot open loss trace: " + path);
    std::vector<flow::StepRecord> trace;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        flow::StepRecord rec;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf", &rec.step, &rec.loss, &rec.mean_t) != 3)
            throw format_error("loss trace: bad line '" + line + "'");
        trace.push_back(rec);
    }
    return trace;
}

void write_trace(const std::string& path, const std::vector<flow::StepRecord>& trace) {
    std::ofstream os(path);
    if (!os) throw format_error("cannot write loss trace: " + path);
    os << "step,loss,t\n";
    char buf[96];
    for (const auto& rec : trace) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", rec.step, rec.loss, rec.mean_t);
        os << buf;
    }
}

TrainResult train_into_run_dir(const data::Dataset& ds, const TrainConfig& config, const std::string& run_dir,
                               const std::string& resume_checkpoint) {
    fs::create_directories(run_dir);

    // Config snapshot.
    {
        std::ofstream os(run_dir + "/config.txt");
        for (const auto& [k, v] : config_meta(config, ds.meta.feature_dim, static_cast<int>(ds.slides.size())))
            os << k << '=' << v << '\n';
    }

    std::vector<flow::StepRecord> prior;
    if (!resume_checkpoint.empty()) {
        auto ckpt = ad::load_checkpoint(resume_checkpoint);
        auto all = read_trace(run_dir + "/loss_trace.csv");
        for (const auto& rec : all)
            if (rec.step < ckpt.step_count) prior.push_back(rec);
    }

    auto on_ckpt = [&](int step, flow::FlowModel& m, ad::OptimizerState& o) {
        save_model(run_dir + "/ckpt_" + std::to_string(step) + ".bin", m, o, config, ds.meta.feature_dim,
                   static_cast<int>(ds.slides.size()));
    };
    auto result = train_model(ds, config, resume_checkpoint, prior, nullptr, on_ckpt);

    std::vector<flow::StepRecord> full = prior;
    full.insert(full.end(), result.trace.begin(), result.trace.end());
    write_trace(run_dir + "/loss_trace.csv", full);
    save_model(run_dir + "/ckpt_final.bin", result.model, result.optimizer, config, ds.meta.feature_dim,
               static_cast<int>(ds.slides.size()));
    result.trace = std::move(full);
    return result;
}

namespace {

// Source environments for generation, shaped by the conditioning mode.
std::vector<data::Microenvironment> generation_sources(const LoadedModel& lm, const data::Dataset& ds,
                                                       const GenerateConfig& config) {
    const auto& slide = ds.slide_at(config.source_time);
    Rng rng = Rng(config.seed).child(0x5E1EC7);

    if (lm.model.conditioning == flow::ConditioningMode::PerCell) {
        std::vector<std::size_t> cell_ids;
        if (config.selection == "all" || config.selection == "grid") {
            cell_ids.resize(slide.cells.size());
            std::iota(cell_ids.begin(), cell_ids.end(), 0);
        } else if (config.selection == "centers") {
            for (int c : config.centers) cell_ids.push_back(static_cast<std::size_t>(c));
        } else {
            throw param_error("generate: unknown selection '" + config.selection + "'");
        }
        std::vector<data::Microenvironment> out;
        for (auto i : cell_ids) {
            if (i >= slide.cells.size()) throw param_error("generate: center index out of range");
            data::Microenvironment e;
            e.center_index = static_cast<int>(i);
            e.time_index = slide.time_index;
            e.member_indices = {static_cast<int>(i)};
            e.coords = {slide.cells[i].coords};
            e.features = {slide.cells[i].features};
            e.mask = {1};
            out.push_back(std::move(e));
        }
        return out;
    }

    auto all = data::extract_microenvironments(slide, lm.config.radius);
    int k = data::modal_env_size(all);
    if (config.selection == "grid") {
        auto envs = data::discretized_grid_envs(slide, config.grid_step, lm.config.radius, config.target_count,
                                                rng);
        Rng r2 = rng.child(1);
        return data::standardize_env_size_to(envs, k, r2);
    }
    if (config.selection == "all") {
        Rng r2 = rng.child(1);
        return data::standardize_env_size_to(all, k, r2);
    }
    if (config.selection == "centers") {
        std::vector<data::Microenvironment> picked;
        for (int c : config.centers) {
            if (c < 0 || static_cast<std::size_t>(c) >= all.size())
                throw param_error("generate: center index out of range");
            picked.push_back(all[static_cast<std::size_t>(c)]);
        }
        Rng r2 = rng.child(1);
        return data::standardize_env_size_to(picked, k, r2);
    }
    throw param_error("generate: unknown selection '" + config.selection + "'");
}

}  // namespace

GeneratedCells generate(const LoadedModel& lm, const data::Dataset& ds, const GenerateConfig& config) {
    if (config.samples < 1 || config.chain < 1) throw param_error("generate: samples and chain must be >= 1");
    int max_source = config.source_time + config.chain - 1;
    if (max_source + 1 >= static_cast<int>(ds.slides.size()))
        throw param_error("generate: chain runs past the last time point");
    if (lm.feature_dim != ds.meta.feature_dim)
        throw shape_error("generate: checkpoint feature dim " + std::to_string(lm.feature_dim) +
                          " != dataset " + std::to_string(ds.meta.feature_dim));
    if (lm.num_timepoints != static_cast<int>(ds.slides.size()))
        throw shape_error("generate: checkpoint expects " + std::to_string(lm.num_timepoints) + " time points");

    auto sources = generation_sources(lm, ds, config);
    std::int64_t B = static_cast<std::int64_t>(sources.size());
    std::int64_t state_dim = 2 + lm.feature_dim;

    // Per-slide env size for the generated clouds.
    std::vector<int> k_of_slide(ds.slides.size(), 1);
    if (lm.model.conditioning != flow::ConditioningMode::PerCell) {
        for (std::size_t i = 0; i < ds.slides.size(); ++i)
            k_of_slide[i] = data::modal_env_size(data::extract_microenvironments(ds.slides[i], lm.config.radius));
    }

    GeneratedCells out;
    out.slides.resize(static_cast<std::size_t>(config.chain));
    for (int step = 0; step < config.chain; ++step)
        out.slides[static_cast<std::size_t>(step)].time_index = config.source_time + step + 1;

    flow::GenerationConfig gen = config.generation;
    std::vector<int> ids(sources.size());
    std::iota(ids.begin(), ids.end(), 0);
    auto first_batch = model::make_env_batch(sources, ids, lm.feature_dim, lm.num_timepoints, config.source_time);

    for (int rep = 0; rep < config.samples; ++rep) {
        auto batch = first_batch;
        for (int step = 0; step < config.chain; ++step) {
            int s = config.source_time + step;
            std::int64_t k_tgt = lm.model.conditioning == flow::ConditioningMode::PerCell
                                     ? 1
                                     : k_of_slide[static_cast<std::size_t>(s + 1)];
            Rng rng = Rng(config.seed).child(0x6E0 ^ (static_cast<std::uint64_t>(rep) << 16) ^
                                             static_cast<std::uint64_t>(step));
            auto states = flow::generate_states(lm.model, batch, s, s + 1, k_tgt, gen, rng);

            auto& slide = out.slides[static_cast<std::size_t>(step)];
            for (std::int64_t row = 0; row < B * k_tgt; ++row) {
                const double* st = states.data() + row * state_dim;
                data::Cell cell;
                cell.time_index = s + 1;
                cell.coords = {st[0], st[1]};
                cell.features.assign(st + 2, st + state_dim);
                slide.cells.push_back(std::move(cell));
            }

            if (step + 1 < config.chain) {
                // Generated clouds become the next source.
                std::vector<double> mask(static_cast<std::size_t>(B * k_tgt), 1.0);
                batch = flow::env_batch_from_states(states, mask, B, k_tgt, lm.feature_dim, lm.num_timepoints,
                                                    s + 1);
            }
        }
    }

    // Rows sit rep-major within each slide; ids follow that layout.
    for (std::size_t step = 0; step < out.slides.size(); ++step) {
        std::size_t rows_per_rep = out.slides[step].cells.size() / static_cast<std::size_t>(config.samples);
        for (int rep = 0; rep < config.samples; ++rep)
            for (std::size_t r = 0; r < rows_per_rep; ++r) out.sample_ids.push_back(rep);
    }
    return out;
}

metrics::MetricsReport evaluate_model(const LoadedModel& lm, const data::Dataset& ds,
                                      const metrics::EvalConfig& config, std::uint64_t seed, bool oracle,
                                      const metrics::ClassifierResult* shared_classifier) {
    auto cfg = config;
    cfg.radius = lm.config.radius;  // environments must match training
    if (oracle) {
        auto hook = metrics::oracle_hook(ds, cfg, seed);
        auto report = metrics::evaluate_with_hook(ds, cfg, seed, hook, ds.meta.feature_dim, shared_classifier);
        report.meta["oracle"] = "1";
        return report;
    }
    if (lm.feature_dim != ds.meta.feature_dim)
        throw shape_error("evaluate: checkpoint feature dim mismatch");
    return metrics::evaluate(lm.model, ds, cfg, seed, shared_classifier);
}

}  // namespace nfkit::pipeline
