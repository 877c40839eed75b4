#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nfkit/dataset.hpp"
#include "nfkit/flow.hpp"
#include "nfkit/metrics.hpp"
#include "nfkit/svg.hpp"

// Command implementations behind the CLI verbs. Everything here is a pure
// function of (inputs, seed) so runs reproduce bit-identically.

namespace nfkit::pipeline {

struct PreprocessConfig {
    bool normalize = true;
    bool log1p = true;
    bool run_pca = true;
    bool standardize = true;  // features and per-slide coords
    int pca_components = 50;
    double subsample = 1.0;  // keep fraction of cells per slide
    std::uint64_t seed = 0;
};

// Stages in fixed order: normalize -> log1p -> pca -> standardize.
// Re-applying a stage already recorded in the metadata is rejected.
data::Dataset preprocess(const data::Dataset& input, const PreprocessConfig& config);

struct ModelConfig {
    flow::ObjectiveKind objective = flow::ObjectiveKind::GLVFM;
    flow::ConditioningMode conditioning = flow::ConditioningMode::Niche;
    int embed_dim = 128;
    int mlp_hidden = 256;
    int heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    double dropout = 0.1;
    int time_freqs = 64;
    double numeric_eps = 1e-4;

    model::TransformerConfig transformer_config(int feature_dim, int num_timepoints) const;
};

struct TrainConfig {
    ModelConfig model;
    double radius = 0.1;
    int k_regions = 64;
    double lambda = 0.1;
    double epsilon = -1;  // sinkhorn default: 0.05 x mean cost
    int pool_size = 256;
    int pairs = 64;
    int instances_per_batch = 16;
    int max_steps = 2000;
    double learning_rate = 2e-4;
    double weight_decay = 1e-5;
    int checkpoint_every = 500;
    int early_stop_window = 200;
    double early_stop_threshold = 0.01;
    std::uint64_t seed = 0;

    flow::TrainLoopConfig loop_config() const;
};

struct TrainResult {
    flow::FlowModel model;
    ad::OptimizerState optimizer;
    std::vector<flow::StepRecord> trace;
};

// In-memory training entry (bench and tests). Model is freshly initialized
// from the seed unless a checkpoint is provided.
TrainResult train_model(const data::Dataset& ds, const TrainConfig& config,
                        const std::string& resume_checkpoint = {},
                        const std::vector<flow::StepRecord>& prior_trace = {},
                        const std::function<void(const flow::StepRecord&)>& on_step = nullptr,
                        const std::function<void(int, flow::FlowModel&, ad::OptimizerState&)>& on_checkpoint =
                            nullptr);

// Run-directory variant: writes config snapshot, loss_trace.csv and
// checkpoints under run_dir; honors --resume semantics.
TrainResult train_into_run_dir(const data::Dataset& ds, const TrainConfig& config, const std::string& run_dir,
                               const std::string& resume_checkpoint = {});

// Checkpoint (de)serialization of a flow model with its training config.
void save_model(const std::string& path, const flow::FlowModel& model, const ad::OptimizerState& opt,
                const TrainConfig& config, int feature_dim, int num_timepoints);
struct LoadedModel {
    flow::FlowModel model;
    ad::OptimizerState optimizer;
    TrainConfig config;
    int feature_dim = 0;
    int num_timepoints = 0;
};
LoadedModel load_model(const std::string& path);

std::vector<flow::StepRecord> read_trace(const std::string& path);
void write_trace(const std::string& path, const std::vector<flow::StepRecord>& trace);

struct GenerateConfig {
    int source_time = 0;
    std::string selection = "grid";  // grid | centers | all
    std::vector<int> centers;
    double grid_step = 0.35;
    int target_count = 64;
    int samples = 1;
    int chain = 1;  // successive push-forward steps
    flow::GenerationConfig generation;
    std::uint64_t seed = 0;
};

struct GeneratedCells {
    std::vector<data::Slide> slides;  // one slide per generated target time
    std::vector<int> sample_ids;
};

GeneratedCells generate(const LoadedModel& lm, const data::Dataset& ds, const GenerateConfig& config);

metrics::MetricsReport evaluate_model(const LoadedModel& lm, const data::Dataset& ds,
                                      const metrics::EvalConfig& config, std::uint64_t seed, bool oracle,
                                      const metrics::ClassifierResult* shared_classifier = nullptr);

}  // namespace nfkit::pipeline
