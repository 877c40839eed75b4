#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nfkit/common.hpp"
#include "nfkit/dataset.hpp"
#include "nfkit/flow.hpp"
#include "nfkit/tensor.hpp"

// Evaluation suite: spatial fidelity (PSD) and coverage (SPD), KDE spatial
// likelihood, per-cell-type Wasserstein distances, and the 1NN-F1 semantic
// score backed by a feature-space type classifier.

namespace nfkit::metrics {

// Exact 2D nearest neighbor; ties resolve to the lowest point index.
class KdTree2d {
  public:
    explicit KdTree2d(std::vector<std::array<double, 2>> points);
    int nearest(const std::array<double, 2>& query) const;
    double nearest_sq_dist(const std::array<double, 2>& query) const;
    std::size_t size() const { return pts_.size(); }

  private:
    struct Node {
        int point = -1;
        int left = -1, right = -1;
        int axis = 0;
    };
    std::vector<std::array<double, 2>> pts_;
    std::vector<Node> nodes_;
    int root_ = -1;

    int build(std::vector<int>& ids, int lo, int hi, int depth);
    void search(int node, const std::array<double, 2>& q, double& best_d2, int& best_idx) const;
};

using PointSets = std::vector<std::vector<std::array<double, 2>>>;  // one set per time

// Mean over all generated points (pooled across times) of the squared
// distance to the nearest reference point at the same time.
double psd(const PointSets& generated, const PointSets& reference);
// Mirror: mean over reference points of squared distance to nearest
// generated point.
double spd(const PointSets& generated, const PointSets& reference);

// (1/N) sum_i exp(-|c - c_i|^2 / (2 sigma^2)).
double kde_likelihood(const std::vector<std::array<double, 2>>& samples, const std::array<double, 2>& query,
                      double sigma);

// Debiased entropic W_p (Sinkhorn divergence with epsilon = 1e-3 x mean
// cost): W1 on the distance cost, W2 = sqrt of the divergence on the squared
// cost. Point sets are generic vectors (coords or features).
double wasserstein(const std::vector<std::vector<double>>& set_a, const std::vector<std::vector<double>>& set_b,
                   int order);

struct ClassifierOptions {
    int hidden = 256;
    double learning_rate = 1e-3;
    double weight_decay = 1e-5;
    int max_steps = 2000;
    int eval_every = 25;
    int patience = 10;  // evaluations without held-out improvement
};

// Two hidden ReLU layers and a linear projection to type logits.
class TypeClassifier {
  public:
    TypeClassifier(int input_dim, int num_types, int hidden, std::uint64_t init_seed);
    ad::Tensor logits(const ad::Tensor& features) const;
    std::vector<int> predict(const std::vector<std::vector<double>>& features) const;
    int num_types() const { return num_types_; }
    int input_dim() const { return input_dim_; }
    ad::ParamStore& params() { return params_; }

  private:
    int input_dim_, num_types_, hidden_;
    ad::ParamStore params_;
};

struct ClassifierResult {
    TypeClassifier classifier;
    double heldout_weighted_f1 = 0;
    int steps_trained = 0;
};

// 80/20 split; cross-entropy with AdamW; early stop on held-out loss.
// Throws param_error when a class is missing from the training split.
ClassifierResult train_classifier(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                                  int num_types, std::uint64_t split_seed, const ClassifierOptions& options = {});

double weighted_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred, int num_classes);

// Each generated cell is classified from its features and matched to its
// spatially nearest reference cell; weighted F1 of predicted vs matched true
// types.
double one_nn_f1(const std::vector<std::array<double, 2>>& gen_coords,
                 const std::vector<std::vector<double>>& gen_features,
                 const std::vector<std::array<double, 2>>& ref_coords, const std::vector<int>& ref_labels,
                 const TypeClassifier& classifier);

struct WassersteinEntry {
    double w1_coords = 0, w2_coords = 0, w1_features = 0, w2_features = 0;
    int samples = 0;  // (type, time) pairs averaged
};

struct MetricsReport {
    double psd = 0, spd = 0, one_nn_f1 = 0, classifier_f1 = 0;
    std::map<int, WassersteinEntry> wasserstein;  // per cell type
    std::map<std::string, std::string> meta;

    std::string serialize() const;  // stable key order
    static MetricsReport parse(const std::string& text);
};

struct EvalConfig {
    double grid_step = 0.35;
    double radius = 0.1;
    int target_count = 64;
    int samples_per_env = 1;
    int wasserstein_cap = 96;  // per-set subsample bound for the OT solves
    flow::GenerationConfig generation;
};

// Generation hook: returns packed states [B*k*(2+D)] plus the slot validity
// mask for a batch of source envs mapping time s -> s+1. The default hook
// wraps the flow model; tests substitute oracles.
struct GeneratedBatch {
    std::vector<double> states;
    std::vector<double> mask;
    std::int64_t slots = 0;
};
using GenerateHook =
    std::function<GeneratedBatch(const std::vector<data::Microenvironment>& sources, int source_time, Rng& rng)>;

// A pre-trained classifier (same dataset, same seed) can be shared across
// evaluations to avoid retraining per call.
MetricsReport evaluate(const flow::FlowModel& model, const data::Dataset& ds, const EvalConfig& config,
                       std::uint64_t seed, const ClassifierResult* shared_classifier = nullptr);
// Oracle and test entry: supply the generator directly.
MetricsReport evaluate_with_hook(const data::Dataset& ds, const EvalConfig& config, std::uint64_t seed,
                                 const GenerateHook& hook, int feature_dim,
                                 const ClassifierResult* shared_classifier = nullptr);
// The passthrough oracle: "generates" the true target-slide grid envs.
GenerateHook oracle_hook(const data::Dataset& ds, const EvalConfig& config, std::uint64_t seed);

}  // namespace nfkit::metrics
