#pragma once

#include <map>
#include <string>
#include <vector>

#include "nfkit/metrics.hpp"
#include "nfkit/pipeline.hpp"

// Reproducibility harness: a (objective x conditioning) matrix trained and
// evaluated over several seeds on a synthetic dataset, with named threshold
// checks. Results are a pure function of (spec, seeds, code version).

namespace nfkit::bench {

struct Variant {
    flow::ObjectiveKind objective = flow::ObjectiveKind::GLVFM;
    flow::ConditioningMode conditioning = flow::ConditioningMode::Niche;
    bool oracle = false;  // passthrough generator, no training

    std::string name() const;
    static Variant parse(const std::string& text);  // "glvfm:niche" | "oracle"
};

// Threshold forms:
//   "<variant> <metric> <= <value>"            (or >=)
//   "<variant> <metric> <= <variant> <metric>" (cross-variant ordering)
// Metrics: psd, spd, f1, psd_ratio, spd_ratio (trained/untrained means).
struct Threshold {
    std::string id;
    std::string text;
};

struct ExperimentSpec {
    std::string name = "experiment";
    data::SynthConfig dataset;
    pipeline::PreprocessConfig preprocess;
    pipeline::TrainConfig train;  // per-run seed is overwritten
    metrics::EvalConfig eval;
    std::vector<Variant> variants;
    std::vector<std::uint64_t> seeds;
    // <0: each run synthesizes its own dataset from the run seed; otherwise
    // one fixed dataset shared by every run (training/eval seeds still vary).
    long long dataset_seed = -1;
    std::vector<Threshold> thresholds;

    static ExperimentSpec parse_file(const std::string& path);
};

struct RunRow {
    Variant variant;
    std::uint64_t seed = 0;
    metrics::MetricsReport trained;
    metrics::MetricsReport untrained;
    std::vector<flow::StepRecord> trace;
    int steps_trained = 0;
    double train_seconds = 0;
    double eval_seconds = 0;
    bool failed = false;
    std::string error;
};

struct Aggregate {
    double psd_mean = 0, psd_std = 0;
    double spd_mean = 0, spd_std = 0;
    double f1_mean = 0, f1_std = 0;
    double psd0_mean = 0;  // untrained
    double spd0_mean = 0;
    double classifier_f1_mean = 0;
    int runs = 0;
};

struct ExperimentResult {
    std::vector<RunRow> rows;
    std::map<std::string, Aggregate> aggregates;      // by variant name
    std::map<std::string, bool> criteria;             // by threshold id
    bool all_passed = false;
    bool any_run_failed = false;
    std::string markdown;
};

// Runs the matrix (parallel up to NFKIT_THREADS) and writes results.md plus
// results.tsv under results_dir/<spec.name>/ when results_dir is nonempty.
ExperimentResult run_experiment(const ExperimentSpec& spec, const std::string& results_dir = {});

}  // namespace nfkit::bench
