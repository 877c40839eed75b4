#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nfkit/tensor.hpp"

namespace nfkit::ad {

// AdamW with decoupled weight decay. Defaults: lr=2e-4, wd=1e-5,
// betas=(0.9, 0.999), eps=1e-8. No gradient clipping.
struct OptimizerState {
    double learning_rate = 2e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step_count = 0;
    std::map<std::string, std::vector<double>> first_moment;
    std::map<std::string, std::vector<double>> second_moment;
};

// One update over every parameter with a populated gradient. Parameters
// without a gradient are treated as grad == 0 (decay still applies).
// Throws numeric_error on NaN/Inf gradients or post-step parameters.
void adamw_step(ParamStore& params, OptimizerState& state);

// Checkpoint container: versioned header, string metadata, step count, and
// named little-endian float64 arrays (parameters + optimizer moments).
struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::int64_t step_count = 0;
    std::map<std::string, std::pair<std::vector<std::int64_t>, std::vector<double>>> tensors;
};

inline constexpr const char* kCheckpointHeader = "nfkit-ckpt-v1";

void save_checkpoint(const std::string& path, const ParamStore& params, const OptimizerState& state,
                     const std::map<std::string, std::string>& meta);
Checkpoint load_checkpoint(const std::string& path);
// Restores parameter values and moments into an already-built model.
void restore(const Checkpoint& ckpt, ParamStore& params, OptimizerState& state);

}  // namespace nfkit::ad
