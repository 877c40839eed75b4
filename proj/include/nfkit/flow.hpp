#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nfkit/common.hpp"
#include "nfkit/coupling.hpp"
#include "nfkit/dataset.hpp"
#include "nfkit/optim.hpp"
#include "nfkit/transformer.hpp"

// Training objectives and generation. States are packed per slot as
// [cx, cy, f0..f{D-1}] (coords first), matching the model head layout.

namespace nfkit::flow {

enum class ObjectiveKind { CFM, GVFM, GLVFM };
enum class ConditioningMode { Niche, RandomCloud, PerCell };

std::string to_string(ObjectiveKind k);
std::string to_string(ConditioningMode m);
ObjectiveKind objective_from_string(const std::string& s);
ConditioningMode conditioning_from_string(const std::string& s);

struct FlowObjective {
    ObjectiveKind kind = ObjectiveKind::GLVFM;
    double numeric_eps = 1e-4;  // VFM denominator 1/(1-t+eps)
};

// Per-cell velocity/mean MLP (the SPFlow backbone): two hidden layers on
// (state, t, source-time one-hot).
class PerCellMlp {
  public:
    PerCellMlp(int state_dim, int num_timepoints, int hidden, std::uint64_t init_seed);
    ad::Tensor forward(const ad::Tensor& input) const;  // [N, state_dim+1+|T|] -> [N, state_dim]
    int input_dim() const { return state_dim_ + 1 + num_timepoints_; }
    int state_dim() const { return state_dim_; }
    int num_timepoints() const { return num_timepoints_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

  private:
    int state_dim_, num_timepoints_, hidden_;
    ad::ParamStore params_;
};

struct FlowModel {
    FlowObjective objective;
    ConditioningMode conditioning = ConditioningMode::Niche;
    std::unique_ptr<model::MicroenvTransformer> transformer;  // niche / random-cloud
    std::unique_ptr<PerCellMlp> mlp;                          // per-cell

    ad::ParamStore& params();
    const ad::ParamStore& params() const;
    int feature_dim() const;
    int num_timepoints() const;
};

FlowModel make_flow_model(const FlowObjective& objective, ConditioningMode mode,
                          const model::TransformerConfig& tcfg, std::uint64_t init_seed);

// Dataset readied for training: standardized environments and region labels
// per slide, according to the conditioning mode.
struct PreparedSlide {
    int time_index = 0;
    std::vector<data::Microenvironment> envs;
    std::vector<int> regions;
    int env_size = 0;  // k slots
};

struct Prepared {
    std::vector<PreparedSlide> slides;
    int feature_dim = 0;
    int num_timepoints = 0;
    ConditioningMode mode = ConditioningMode::Niche;
};

Prepared prepare(const data::Dataset& ds, double radius, int k_regions, ConditioningMode mode,
                 std::uint64_t seed);

// One training instance: n coupled source-target env pairs sharing a single t.
struct TrainBatch {
    model::EnvBatch source;           // encoder input (source one-hot)
    model::EnvBatch noisy;            // decoder input: Mt + target one-hot + t
    std::vector<double> m1_state;     // B*k*(2+D)
    std::vector<double> mz_state;
    std::vector<double> mt_state;
    std::vector<double> mask;         // B*k (target-side slots)
    double t = 0;
    int source_time = 0;
    int target_time = 0;
};

// Elementwise convex combination on valid slots (masked slots stay zero).
std::vector<double> interpolate(const std::vector<double>& mz, const std::vector<double>& m1,
                                const std::vector<double>& mask, std::int64_t state_dim, double t);

// EnvBatch from packed states (appends the one-hot; no time channel).
model::EnvBatch env_batch_from_states(const std::vector<double>& states, const std::vector<double>& mask,
                                      std::int64_t batch, std::int64_t slots, int feature_dim,
                                      int num_timepoints, int onehot_index);

struct SampleConfig {
    ot::BatchCouplingConfig coupling;
    int instances_per_batch = 16;
};

// Algorithm: region-uniform sampling -> entropic coupling -> pair resampling
// -> Gaussian noise -> t ~ U[0,1] -> linear interpolation.
TrainBatch sample_and_interpolate(const Prepared& prepared, const ot::BatchCouplingConfig& coupling, Rng& rng);

// Losses: mean over environments, sum over valid slots and dimensions.
ad::Tensor loss_cfm(const TrainBatch& batch, const FlowModel& model, bool training = false, Rng* rng = nullptr);
ad::Tensor loss_gvfm(const TrainBatch& batch, const FlowModel& model, bool training = false, Rng* rng = nullptr);
ad::Tensor loss_glvfm(const TrainBatch& batch, const FlowModel& model, bool training = false, Rng* rng = nullptr);
ad::Tensor loss_for(const TrainBatch& batch, const FlowModel& model, bool training = false, Rng* rng = nullptr);

// Model prediction on packed states, dispatching on conditioning mode.
ad::Tensor predict_states(const TrainBatch& batch, const FlowModel& model, bool training, Rng* rng);

struct GenerationConfig {
    int euler_steps = 100;
    double numeric_eps = 1e-4;
    std::uint64_t seed = 0;
};

// Euler integration from t=0 to t=1 with uniform steps; the field is
// evaluated at the left endpoint. Throws numeric_error (with the step index)
// on a non-finite state.
using FieldFn = std::function<std::vector<double>(const std::vector<double>& state, double t)>;
std::vector<double> integrate_velocity(std::vector<double> state, int steps, const FieldFn& velocity);
// Regularized mean-difference field (mu(state,t) - state) / (1 - t + eps).
std::vector<double> integrate_vfm(std::vector<double> state, int steps, double eps, const FieldFn& mean);

// Conditional generation for a batch of source environments. Returns packed
// states [B, k_target, 2+D]. Niche and random-cloud modes integrate from
// Gaussian noise; per-cell integrates from the source state itself.
std::vector<double> generate_states(const FlowModel& model, const model::EnvBatch& source, int source_time,
                                    int target_time, std::int64_t k_target, const GenerationConfig& config,
                                    Rng& rng);

struct TrainLoopConfig {
    int max_steps = 2000;
    SampleConfig sampling;
    int checkpoint_every = 500;
    int early_stop_window = 200;      // stop when window-mean improves < 1%
    double early_stop_threshold = 0.01;
    std::uint64_t seed = 0;
};

struct StepRecord {
    int step = 0;
    double loss = 0;
    double mean_t = 0;
};

// Training loop: per-step derived rng streams keep resume runs bit-identical
// with uninterrupted ones. Early-stop windows align to absolute step numbers;
// pass the prior trace when resuming so window state replays exactly.
std::vector<StepRecord> train(const Prepared& prepared, FlowModel& model, ad::OptimizerState& optimizer,
                              const TrainLoopConfig& config,
                              const std::function<void(const StepRecord&)>& on_step = nullptr,
                              const std::function<void(int)>& on_checkpoint = nullptr,
                              const std::vector<StepRecord>& prior_trace = {});

}  // namespace nfkit::flow
