#include "nfkit/bench.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace nfkit::bench {

namespace fs = std::filesystem;

std::string Variant::name() const {
    if (oracle) return "oracle";
    return flow::to_string(objective) + ":" + flow::to_string(conditioning);
}

Variant Variant::parse(const std::string& text) {
    Variant v;
    if (text == "oracle") {
        v.oracle = true;
        return v;
    }
    auto colon = text.find(':');
    if (colon == std::string::npos)
        throw param_error("variant '" + text + "': expected <objective>:<conditioning> or 'oracle'");
    v.objective = flow::objective_from_string(text.substr(0, colon));
    v.conditioning = flow::conditioning_from_string(text.substr(colon + 1));
    return v;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    auto a = s.find_first_not_of(" \t");
    auto b = s.find_last_not_of(" \t");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

}  // namespace

ExperimentSpec ExperimentSpec::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("cannot open experiment spec: " + path);
    ExperimentSpec spec;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw format_error("experiment spec: bad line '" + line + "'");
        std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
        if (key == "name") spec.name = val;
        else if (key == "seeds") {
            for (const auto& s : split(val, ',')) spec.seeds.push_back(std::stoull(trim(s)));
        } else if (key == "variants") {
            for (const auto& s : split(val, ',')) spec.variants.push_back(Variant::parse(trim(s)));
        } else if (key == "dataset.types") spec.dataset.num_types = std::stoi(val);
        else if (key == "dataset.timepoints") spec.dataset.num_timepoints = std::stoi(val);
        else if (key == "dataset.cells") {
            spec.dataset.cells_per_type.clear();
            for (const auto& s : split(val, ',')) spec.dataset.cells_per_type.push_back(std::stoi(trim(s)));
        } else if (key == "dataset.growth") {
            spec.dataset.growth.clear();
            for (const auto& s : split(val, ',')) spec.dataset.growth.push_back(std::stod(trim(s)));
        } else if (key == "dataset.drift") {
            auto parts = split(val, ',');
            if (parts.size() != 2) throw format_error("experiment spec: drift needs two values");
            spec.dataset.drift = {std::stod(trim(parts[0])), std::stod(trim(parts[1]))};
        } else if (key == "dataset.blob_sigma") spec.dataset.blob_sigma = std::stod(val);
        else if (key == "dataset.spatial_radius") spec.dataset.spatial_radius = std::stod(val);
        else if (key == "dataset.feature_dim") spec.dataset.feature_dim = std::stoi(val);
        else if (key == "dataset.feature_separation") spec.dataset.feature_separation = std::stod(val);
        else if (key == "dataset.seed") spec.dataset_seed = std::stoll(val);
        else if (key == "preprocess.normalize") spec.preprocess.normalize = val == "1";
        else if (key == "preprocess.log1p") spec.preprocess.log1p = val == "1";
        else if (key == "preprocess.pca_components") spec.preprocess.pca_components = std::stoi(val);
        else if (key == "train.steps") spec.train.max_steps = std::stoi(val);
        else if (key == "train.radius") spec.train.radius = std::stod(val);
        else if (key == "train.k_regions") spec.train.k_regions = std::stoi(val);
        else if (key == "train.lambda") spec.train.lambda = std::stod(val);
        else if (key == "train.pool") spec.train.pool_size = std::stoi(val);
        else if (key == "train.pairs") spec.train.pairs = std::stoi(val);
        else if (key == "train.instances") spec.train.instances_per_batch = std::stoi(val);
        else if (key == "train.lr") spec.train.learning_rate = std::stod(val);
        else if (key == "train.embed") spec.train.model.embed_dim = std::stoi(val);
        else if (key == "train.mlp_hidden") spec.train.model.mlp_hidden = std::stoi(val);
        else if (key == "train.heads") spec.train.model.heads = std::stoi(val);
        else if (key == "train.early_stop_window") spec.train.early_stop_window = std::stoi(val);
        else if (key == "eval.grid_step") spec.eval.grid_step = std::stod(val);
        else if (key == "eval.target_count") spec.eval.target_count = std::stoi(val);
        else if (key == "eval.euler_steps") spec.eval.generation.euler_steps = std::stoi(val);
        else if (key == "eval.samples") spec.eval.samples_per_env = std::stoi(val);
        else if (key.rfind("threshold.", 0) == 0) spec.thresholds.push_back({key.substr(10), val});
        else throw format_error("experiment spec: unknown key '" + key + "'");
    }
    if (spec.variants.empty()) throw param_error("experiment spec: no variants");
    if (spec.seeds.empty()) throw param_error("experiment spec: no seeds");
    return spec;
}

namespace {

RunRow run_one(const ExperimentSpec& spec, const Variant& variant, std::uint64_t seed) {
    RunRow row;
    row.variant = variant;
    row.seed = seed;
    try {
        std::uint64_t data_seed = spec.dataset_seed >= 0 ? static_cast<std::uint64_t>(spec.dataset_seed) : seed;
        auto raw = data::synth_generate(spec.dataset, data_seed);
        auto pcfg = spec.preprocess;
        pcfg.seed = data_seed ^ 0x9A9AULL;
        auto ds = pipeline::preprocess(raw, pcfg);

        auto eval_cfg = spec.eval;
        eval_cfg.radius = spec.train.radius;

        // One classifier per run, shared by the trained and untrained evals.
        std::vector<std::vector<double>> all_features;
        std::vector<int> all_labels;
        for (const auto& s : ds.slides)
            for (const auto& c : s.cells) {
                all_features.push_back(c.features);
                all_labels.push_back(c.type_label);
            }
        auto clf = metrics::train_classifier(all_features, all_labels, ds.meta.num_types, seed ^ 0xC1F0ULL);

        if (variant.oracle) {
            auto hook = metrics::oracle_hook(ds, eval_cfg, seed);
            row.trained = metrics::evaluate_with_hook(ds, eval_cfg, seed, hook, ds.meta.feature_dim, &clf);
            row.untrained = row.trained;
            return row;
        }

        auto tcfg = spec.train;
        tcfg.model.objective = variant.objective;
        tcfg.model.conditioning = variant.conditioning;
        tcfg.seed = seed;
        tcfg.checkpoint_every = 0;

        // Untrained baseline: the same initialization, zero steps.
        auto t0 = std::chrono::steady_clock::now();
        auto init_cfg = tcfg;
        init_cfg.max_steps = 0;
        auto init_run = pipeline::train_model(ds, init_cfg);
        pipeline::LoadedModel init_lm{std::move(init_run.model), std::move(init_run.optimizer), init_cfg,
                                      ds.meta.feature_dim, static_cast<int>(ds.slides.size())};
        row.untrained = pipeline::evaluate_model(init_lm, ds, eval_cfg, seed, false, &clf);

        auto t1 = std::chrono::steady_clock::now();
        auto run = pipeline::train_model(ds, tcfg);
        row.trace = run.trace;
        row.steps_trained = static_cast<int>(run.trace.size());
        auto t2 = std::chrono::steady_clock::now();
        pipeline::LoadedModel lm{std::move(run.model), std::move(run.optimizer), tcfg, ds.meta.feature_dim,
                                 static_cast<int>(ds.slides.size())};
        row.trained = pipeline::evaluate_model(lm, ds, eval_cfg, seed, false, &clf);
        auto t3 = std::chrono::steady_clock::now();

        row.train_seconds = std::chrono::duration<double>(t2 - t1).count();
        row.eval_seconds = std::chrono::duration<double>(t3 - t2).count() +
                           std::chrono::duration<double>(t1 - t0).count();
    } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
    }
    return row;
}

double metric_of(const Aggregate& agg, const std::string& metric) {
    if (metric == "psd") return agg.psd_mean;
    if (metric == "spd") return agg.spd_mean;
    if (metric == "f1") return agg.f1_mean;
    if (metric == "psd_ratio") return agg.psd0_mean > 0 ? agg.psd_mean / agg.psd0_mean : HUGE_VAL;
    if (metric == "spd_ratio") return agg.spd0_mean > 0 ? agg.spd_mean / agg.spd0_mean : HUGE_VAL;
    if (metric == "classifier_f1") return agg.classifier_f1_mean;
    throw param_error("threshold: unknown metric '" + metric + "'");
}

bool check_threshold(const std::string& text, const std::map<std::string, Aggregate>& aggs) {
    // Tokens: <variant> <metric> <op> (<value> | <variant> <metric>)
    std::istringstream is(text);
    std::string lhs_variant, lhs_metric, op;
    if (!(is >> lhs_variant >> lhs_metric >> op)) throw param_error("threshold: bad expression '" + text + "'");
    auto lit = aggs.find(lhs_variant);
    if (lit == aggs.end()) throw param_error("threshold: unknown variant '" + lhs_variant + "'");
    double lhs = metric_of(lit->second, lhs_metric);

    std::string tok;
    if (!(is >> tok)) throw param_error("threshold: missing right-hand side in '" + text + "'");
    double rhs;
    std::string maybe_metric;
    if (is >> maybe_metric) {
        auto rit = aggs.find(tok);
        if (rit == aggs.end()) throw param_error("threshold: unknown variant '" + tok + "'");
        rhs = metric_of(rit->second, maybe_metric);
    } else {
        rhs = std::stod(tok);
    }
    if (op == "<=") return lhs <= rhs;
    if (op == ">=") return lhs >= rhs;
    throw param_error("threshold: unknown operator '" + op + "'");
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, const std::string& results_dir) {
    struct Task {
        Variant variant;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (const auto& v : spec.variants)
        for (auto s : spec.seeds) tasks.push_back({v, s});

    ExperimentResult result;
    result.rows.resize(tasks.size());

    std::size_t workers = std::min(worker_count(), tasks.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i)
            result.rows[i] = run_one(spec, tasks[i].variant, tasks[i].seed);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t i = next.fetch_add(1);
                    if (i >= tasks.size()) return;
                    result.rows[i] = run_one(spec, tasks[i].variant, tasks[i].seed);
                }
            });
        for (auto& t : pool) t.join();
    }

    for (const auto& row : result.rows) result.any_run_failed |= row.failed;

    // Aggregate per variant.
    for (const auto& v : spec.variants) {
        Aggregate agg;
        std::vector<double> psds, spds, f1s;
        for (const auto& row : result.rows) {
            if (row.failed || row.variant.name() != v.name()) continue;
            psds.push_back(row.trained.psd);
            spds.push_back(row.trained.spd);
            f1s.push_back(row.trained.one_nn_f1);
            agg.psd0_mean += row.untrained.psd;
            agg.spd0_mean += row.untrained.spd;
            agg.classifier_f1_mean += row.trained.classifier_f1;
            agg.runs += 1;
        }
        if (agg.runs > 0) {
            auto mean_std = [&](const std::vector<double>& xs, double& mean, double& sd) {
                mean = 0;
                for (double x : xs) mean += x;
                mean /= static_cast<double>(xs.size());
                sd = 0;
                if (xs.size() > 1) {
                    for (double x : xs) sd += (x - mean) * (x - mean);
                    sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
                }
            };
            mean_std(psds, agg.psd_mean, agg.psd_std);
            mean_std(spds, agg.spd_mean, agg.spd_std);
            mean_std(f1s, agg.f1_mean, agg.f1_std);
            agg.psd0_mean /= agg.runs;
            agg.spd0_mean /= agg.runs;
            agg.classifier_f1_mean /= agg.runs;
        }
        result.aggregates[v.name()] = agg;
    }

    result.all_passed = !result.any_run_failed;
    for (const auto& th : spec.thresholds) {
        bool ok = !result.any_run_failed && check_threshold(th.text, result.aggregates);
        result.criteria[th.id] = ok;
        result.all_passed &= ok;
    }

    // Markdown summary.
    {
        std::ostringstream md;
        md << "# " << spec.name << "\n\n";
        md << "| variant | psd | spd | 1nn-f1 | psd (init) | spd (init) | runs |\n";
        md << "|---|---|---|---|---|---|---|\n";
        char buf[64];
        auto fmt = [&](double v, double sd) {
            std::snprintf(buf, sizeof(buf), "%.4g +- %.2g", v, sd);
            return std::string(buf);
        };
        for (const auto& [name, agg] : result.aggregates) {
            md << "| " << name << " | " << fmt(agg.psd_mean, agg.psd_std) << " | " << fmt(agg.spd_mean, agg.spd_std)
               << " | " << fmt(agg.f1_mean, agg.f1_std) << " | ";
            std::snprintf(buf, sizeof(buf), "%.4g | ", agg.psd0_mean);
            md << buf;
            std::snprintf(buf, sizeof(buf), "%.4g | ", agg.spd0_mean);
            md << buf << agg.runs << " |\n";
        }
        md << "\n";
        for (const auto& th : spec.thresholds)
            md << "- criterion " << th.id << " (`" << th.text << "`): "
               << (result.criteria.at(th.id) ? "PASS" : "FAIL") << "\n";
        for (const auto& row : result.rows)
            if (row.failed)
                md << "- run " << row.variant.name() << " seed " << row.seed << " FAILED: " << row.error << "\n";
        result.markdown = md.str();
    }

    if (!results_dir.empty()) {
        auto dir = fs::path(results_dir) / spec.name;
        fs::create_directories(dir);
        std::ofstream md(dir / "results.md");
        md << result.markdown;
        std::ofstream tsv(dir / "results.tsv");
        tsv << "variant\tseed\tpsd\tspd\tone_nn_f1\tpsd_init\tspd_init\tsteps\ttrain_seconds\n";
        char buf[256];
        for (const auto& row : result.rows) {
            if (row.failed) {
                tsv << row.variant.name() << '\t' << row.seed << "\tFAILED: " << row.error << "\n";
                continue;
            }
            std::snprintf(buf, sizeof(buf), "%s\t%llu\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%d\t%.2f\n",
                          row.variant.name().c_str(), static_cast<unsigned long long>(row.seed), row.trained.psd,
                          row.trained.spd, row.trained.one_nn_f1, row.untrained.psd, row.untrained.spd,
                          row.steps_trained, row.train_seconds);
            tsv << buf;
        }
    }
    return result;
}

}  // namespace nfkit::bench
