#pragma once

#include <cstdint>
#include <vector>

#include "nfkit/common.hpp"
#include "nfkit/dataset.hpp"
#include "nfkit/tensor.hpp"

// Permutation-invariant encoder-decoder transformer over attributed point
// sets. The encoder reads the source microenvironment (no time channel); the
// decoder reads the noisy microenvironment with a sinusoidal embedding of t
// and cross-attends to the encoded source. Post-norm residual blocks,
// LeakyReLU feedforward, binary key masking for padded slots.

namespace nfkit::model {

struct TransformerConfig {
    int feature_dim = 50;      // D
    int num_timepoints = 2;    // |T|, one-hot appended to features
    int embed_dim = 128;
    int mlp_hidden = 256;
    int heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    double dropout = 0.1;
    double leaky_slope = 0.01;
    int time_freqs = 64;       // log-spaced bank over [1, 1000]

    int input_feature_dim() const { return feature_dim + num_timepoints; }
    int output_dim() const { return feature_dim + 2; }
    void validate() const;
};

// Flattened batched environments. Feature rows carry the slide one-hot; the
// decoder side additionally carries one interpolation time per environment.
struct EnvBatch {
    std::int64_t batch = 0;  // B environments
    std::int64_t slots = 0;  // k slots per environment
    std::int64_t feat_dim = 0;
    std::vector<double> features;  // B*k*feat_dim
    std::vector<double> coords;    // B*k*2
    std::vector<double> mask;      // B*k, 1.0 = valid
    std::vector<double> t;         // per-env time, decoder side only

    bool has_time() const { return !t.empty(); }
    void validate() const;
};

// Builds an EnvBatch from microenvironments, appending the given slide
// one-hot to every feature row (padded slots stay zero).
EnvBatch make_env_batch(const std::vector<data::Microenvironment>& envs, const std::vector<int>& ids,
                        int feature_dim, int num_timepoints, int onehot_index);

struct Prediction {
    ad::Tensor full;    // [B, k, D+2], coords first
    ad::Tensor coords;  // [B, k, 2]
    ad::Tensor feats;   // [B, k, D]
};

class MicroenvTransformer {
  public:
    MicroenvTransformer(TransformerConfig config, std::uint64_t init_seed);

    const TransformerConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

    // Precomputed encoder output with the per-layer cross-attention keys and
    // values; generation reuses it across all integrator steps.
    struct SourceCache {
        ad::Tensor encoded;
        std::vector<ad::Tensor> keys;    // one per decoder layer
        std::vector<ad::Tensor> values;
        std::vector<double> key_mask;
        std::int64_t batch = 0, slots = 0;
    };

    // Token embeddings; with_time requires per-env t on the batch.
    ad::Tensor embed_inputs(const EnvBatch& batch, bool with_time, const std::string& prefix) const;
    // Encoder stack over the source. Throws contract_error if the batch
    // carries a time channel or any env is fully masked.
    ad::Tensor encode(const EnvBatch& source, bool training = false, Rng* dropout_rng = nullptr) const;
    ad::Tensor decode(const EnvBatch& noisy, const ad::Tensor& encoded_source, const EnvBatch& source,
                      bool training = false, Rng* dropout_rng = nullptr) const;
    SourceCache encode_cached(const EnvBatch& source) const;
    ad::Tensor decode(const EnvBatch& noisy, const SourceCache& cache) const;
    // Full forward: posterior means (or velocity components under CFM).
    Prediction predict(const EnvBatch& noisy, const EnvBatch& source, bool training = false,
                       Rng* dropout_rng = nullptr) const;

  private:
    TransformerConfig cfg_;
    ad::ParamStore params_;

    ad::Tensor linear(const ad::Tensor& x, const std::string& name) const;
    ad::Tensor attention(const ad::Tensor& q_in, const ad::Tensor& kv_in, const std::vector<double>& key_mask,
                         const std::string& prefix, bool training, Rng* rng) const;
    ad::Tensor attention_kv(const ad::Tensor& q_in, const ad::Tensor& k_heads, const ad::Tensor& v_heads,
                            const std::vector<double>& key_mask, const std::string& prefix) const;
    ad::Tensor split_for_heads(const ad::Tensor& x, const std::string& name) const;
    ad::Tensor feed_forward(const ad::Tensor& x, const std::string& prefix, bool training, Rng* rng) const;
    ad::Tensor norm(const ad::Tensor& x, const std::string& prefix) const;
};

// Sinusoidal features of t over a log-spaced frequency bank: [cos, sin] pairs.
std::vector<double> time_embedding_bank(const std::vector<double>& t, int n_freqs);

}  // namespace nfkit::model
