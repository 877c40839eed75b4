#include "nfkit/transformer.hpp"

#include <cmath>

namespace nfkit::model {

using namespace nfkit::ad;

void TransformerConfig::validate() const {
    if (embed_dim % heads != 0) throw param_error("transformer: embed_dim must be divisible by heads");
    if (embed_dim % 2 != 0) throw param_error("transformer: embed_dim must be even");
    if (feature_dim < 1 || num_timepoints < 1) throw param_error("transformer: bad dims");
    if (dropout < 0 || dropout >= 1) throw param_error("transformer: bad dropout");
}

void EnvBatch::validate() const {
    if (batch < 1 || slots < 1) throw shape_error("env batch: empty");
    if (static_cast<std::int64_t>(features.size()) != batch * slots * feat_dim)
        throw shape_error("env batch: feature buffer size mismatch");
    if (static_cast<std::int64_t>(coords.size()) != batch * slots * 2)
        throw shape_error("env batch: coord buffer size mismatch");
    if (static_cast<std::int64_t>(mask.size()) != batch * slots)
        throw shape_error("env batch: mask size mismatch");
    if (!t.empty() && static_cast<std::int64_t>(t.size()) != batch)
        throw shape_error("env batch: need one t per environment");
}

EnvBatch make_env_batch(const std::vector<data::Microenvironment>& envs, const std::vector<int>& ids,
                        int feature_dim, int num_timepoints, int onehot_index) {
    if (ids.empty()) throw param_error("make_env_batch: no environments");
    if (onehot_index < 0 || onehot_index >= num_timepoints)
        throw param_error("make_env_batch: one-hot index out of range");
    EnvBatch b;
    b.batch = static_cast<std::int64_t>(ids.size());
    b.slots = static_cast<std::int64_t>(envs[static_cast<std::size_t>(ids[0])].mask.size());
    b.feat_dim = feature_dim + num_timepoints;
    b.features.assign(static_cast<std::size_t>(b.batch * b.slots * b.feat_dim), 0.0);
    b.coords.assign(static_cast<std::size_t>(b.batch * b.slots * 2), 0.0);
    b.mask.assign(static_cast<std::size_t>(b.batch * b.slots), 0.0);
    for (std::int64_t e = 0; e < b.batch; ++e) {
        const auto& env = envs[static_cast<std::size_t>(ids[static_cast<std::size_t>(e)])];
        if (static_cast<std::int64_t>(env.mask.size()) != b.slots)
            throw shape_error("make_env_batch: environments have differing slot counts");
        for (std::int64_t s = 0; s < b.slots; ++s) {
            auto si = static_cast<std::size_t>(s);
            if (!env.mask[si]) continue;
            b.mask[static_cast<std::size_t>(e * b.slots + s)] = 1.0;
            b.coords[static_cast<std::size_t>((e * b.slots + s) * 2 + 0)] = env.coords[si][0];
            b.coords[static_cast<std::size_t>((e * b.slots + s) * 2 + 1)] = env.coords[si][1];
            if (static_cast<int>(env.features[si].size()) != feature_dim)
                throw shape_error("make_env_batch: feature dim mismatch");
            double* row = b.features.data() + (e * b.slots + s) * b.feat_dim;
            for (int d = 0; d < feature_dim; ++d) row[d] = env.features[si][static_cast<std::size_t>(d)];
            row[feature_dim + onehot_index] = 1.0;
        }
    }
    return b;
}

std::vector<double> time_embedding_bank(const std::vector<double>& t, int n_freqs) {
    std::vector<double> out(t.size() * static_cast<std::size_t>(2 * n_freqs));
    double log_lo = std::log(1.0), log_hi = std::log(1000.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (int f = 0; f < n_freqs; ++f) {
            double w = std::exp(log_lo + (log_hi - log_lo) * (n_freqs > 1 ? static_cast<double>(f) / (n_freqs - 1) : 0.0));
            out[i * static_cast<std::size_t>(2 * n_freqs) + static_cast<std::size_t>(2 * f)] = std::cos(w * t[i]);
            out[i * static_cast<std::size_t>(2 * n_freqs) + static_cast<std::size_t>(2 * f + 1)] = std::sin(w * t[i]);
        }
    }
    return out;
}

namespace {

void add_linear_params(ParamStore& params, const std::string& name, int in, int out, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(static_cast<std::size_t>(in * out));
    for (auto& x : w) x = rng.uniform(-bound, bound);
    params.create(name + ".w", {in, out}, std::move(w));
    params.create(name + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
}

void add_norm_params(ParamStore& params, const std::string& name, int dim) {
    params.create(name + ".g", {dim}, std::vector<double>(static_cast<std::size_t>(dim), 1.0));
    params.create(name + ".b", {dim}, std::vector<double>(static_cast<std::size_t>(dim), 0.0));
}

}  // namespace

MicroenvTransformer::MicroenvTransformer(TransformerConfig config, std::uint64_t init_seed) : cfg_(config) {
    cfg_.validate();
    Rng rng(init_seed);
    int e = cfg_.embed_dim;
    int half = e / 2;

    add_linear_params(params_, "enc.embed.feat", cfg_.input_feature_dim(), half, rng);
    add_linear_params(params_, "enc.embed.coord", 2, half, rng);
    add_linear_params(params_, "enc.embed.proj", e, e, rng);
    add_linear_params(params_, "dec.embed.feat", cfg_.input_feature_dim(), half, rng);
    add_linear_params(params_, "dec.embed.coord", 2, half, rng);
    add_linear_params(params_, "dec.embed.time", 2 * cfg_.time_freqs, half, rng);
    add_linear_params(params_, "dec.embed.proj", e + half, e, rng);

    for (int l = 0; l < cfg_.encoder_layers; ++l) {
        std::string p = "enc." + std::to_string(l);
        for (const char* part : {".attn.q", ".attn.k", ".attn.v", ".attn.o"})
            add_linear_params(params_, p + part, e, e, rng);
        add_linear_params(params_, p + ".ff.1", e, cfg_.mlp_hidden, rng);
        add_linear_params(params_, p + ".ff.2", cfg_.mlp_hidden, e, rng);
        add_norm_params(params_, p + ".ln1", e);
        add_norm_params(params_, p + ".ln2", e);
    }
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        std::string p = "dec." + std::to_string(l);
        for (const char* part : {".self.q", ".self.k", ".self.v", ".self.o", ".cross.q", ".cross.k",
                                 ".cross.v", ".cross.o"})
            add_linear_params(params_, p + part, e, e, rng);
        add_linear_params(params_, p + ".ff.1", e, cfg_.mlp_hidden, rng);
        add_linear_params(params_, p + ".ff.2", cfg_.mlp_hidden, e, rng);
        add_norm_params(params_, p + ".ln1", e);
        add_norm_params(params_, p + ".ln2", e);
        add_norm_params(params_, p + ".ln3", e);
    }
    add_linear_params(params_, "head", e, cfg_.output_dim(), rng);
}

Tensor MicroenvTransformer::linear(const Tensor& x, const std::string& name) const {
    return add_rowvec(matmul(x, params_.get(name + ".w")), params_.get(name + ".b"));
}

Tensor MicroenvTransformer::norm(const Tensor& x, const std::string& prefix) const {
    return layer_norm(x, params_.get(prefix + ".g"), params_.get(prefix + ".b"));
}

Tensor MicroenvTransformer::embed_inputs(const EnvBatch& batch, bool with_time, const std::string& prefix) const {
    batch.validate();
    if (static_cast<int>(batch.feat_dim) != cfg_.input_feature_dim())
        throw shape_error("embed_inputs: feature dim " + std::to_string(batch.feat_dim) + " != " +
                          std::to_string(cfg_.input_feature_dim()));
    std::int64_t rows = batch.batch * batch.slots;
    auto feats = tensor({rows, batch.feat_dim}, batch.features);
    auto coords = tensor({rows, 2}, batch.coords);

    auto fe = linear(feats, prefix + ".embed.feat");
    auto ce = linear(coords, prefix + ".embed.coord");
    Tensor cat;
    if (with_time) {
        if (!batch.has_time()) throw param_error("embed_inputs: with_time requires per-env t");
        auto bank = time_embedding_bank(batch.t, cfg_.time_freqs);
        auto bank_t = tensor({batch.batch, 2 * cfg_.time_freqs}, bank);
        auto te = linear(bank_t, prefix + ".embed.time");               // [B, half]
        auto te_rep = repeat_rows(te, batch.slots);                     // [B, k, half]
        auto te_flat = reshape(te_rep, {rows, cfg_.embed_dim / 2});
        cat = concat_lastdim({fe, ce, te_flat});
    } else {
        cat = concat_lastdim({fe, ce});
    }
    auto projected = linear(cat, prefix + ".embed.proj");
    return reshape(projected, {batch.batch, batch.slots, cfg_.embed_dim});
}

Tensor MicroenvTransformer::split_for_heads(const Tensor& x, const std::string& name) const {
    std::int64_t B = x.dim(0), k = x.dim(1);
    return split_heads(reshape(linear(reshape(x, {B * k, cfg_.embed_dim}), name), {B, k, cfg_.embed_dim}),
                       cfg_.heads);
}

Tensor MicroenvTransformer::attention_kv(const Tensor& q_in, const Tensor& k_heads, const Tensor& v_heads,
                                         const std::vector<double>& key_mask, const std::string& prefix) const {
    std::int64_t B = q_in.dim(0);
    int hd = cfg_.embed_dim / cfg_.heads;
    auto q = split_for_heads(q_in, prefix + ".q");
    auto scores = scale(bmm_nt(q, k_heads), 1.0 / std::sqrt(static_cast<double>(hd)));
    auto masked = mask_keys(scores, key_mask, cfg_.heads);
    auto weights = softmax(masked, -1);
    auto ctx = merge_heads(bmm(weights, v_heads), cfg_.heads);
    auto out = linear(reshape(ctx, {B * q_in.dim(1), cfg_.embed_dim}), prefix + ".o");
    return reshape(out, {B, q_in.dim(1), cfg_.embed_dim});
}

Tensor MicroenvTransformer::attention(const Tensor& q_in, const Tensor& kv_in, const std::vector<double>& key_mask,
                                      const std::string& prefix, bool training, Rng* rng) const {
    std::int64_t B = q_in.dim(0);
    int hd = cfg_.embed_dim / cfg_.heads;
    auto q = split_for_heads(q_in, prefix + ".q");
    auto k = split_for_heads(kv_in, prefix + ".k");
    auto v = split_for_heads(kv_in, prefix + ".v");

    auto scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
    auto masked = mask_keys(scores, key_mask, cfg_.heads);
    auto weights = softmax(masked, -1);
    if (training && cfg_.dropout > 0) weights = dropout(weights, cfg_.dropout, true, *rng);
    auto ctx = merge_heads(bmm(weights, v), cfg_.heads);
    auto out = linear(reshape(ctx, {B * q_in.dim(1), cfg_.embed_dim}), prefix + ".o");
    return reshape(out, {B, q_in.dim(1), cfg_.embed_dim});
}

Tensor MicroenvTransformer::feed_forward(const Tensor& x, const std::string& prefix, bool training, Rng* rng) const {
    std::int64_t B = x.dim(0), k = x.dim(1);
    auto flat = reshape(x, {B * k, cfg_.embed_dim});
    auto h = leaky_relu(linear(flat, prefix + ".1"), cfg_.leaky_slope);
    auto out = linear(h, prefix + ".2");
    if (training && cfg_.dropout > 0) out = dropout(out, cfg_.dropout, true, *rng);
    return reshape(out, {B, k, cfg_.embed_dim});
}

Tensor MicroenvTransformer::encode(const EnvBatch& source, bool training, Rng* dropout_rng) const {
    if (source.has_time()) throw contract_error("encode: encoder input must not carry a time channel");
    for (std::int64_t e = 0; e < source.batch; ++e) {
        double any = 0;
        for (std::int64_t s = 0; s < source.slots; ++s) any += source.mask[static_cast<std::size_t>(e * source.slots + s)];
        if (any == 0) throw contract_error("encode: environment " + std::to_string(e) + " is fully masked");
    }
    if (training && cfg_.dropout > 0 && !dropout_rng) throw param_error("encode: training needs a dropout rng");

    auto x = embed_inputs(source, false, "enc");
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
        std::string p = "enc." + std::to_string(l);
        auto a = attention(x, x, source.mask, p + ".attn", training, dropout_rng);
        x = norm(add(x, a), p + ".ln1");
        auto f = feed_forward(x, p + ".ff", training, dropout_rng);
        x = norm(add(x, f), p + ".ln2");
    }
    return x;
}

Tensor MicroenvTransformer::decode(const EnvBatch& noisy, const Tensor& encoded_source, const EnvBatch& source,
                                   bool training, Rng* dropout_rng) const {
    if (!noisy.has_time()) throw param_error("decode: noisy batch must carry per-env t");
    if (encoded_source.ndim() != 3 || encoded_source.dim(0) != noisy.batch)
        throw shape_error("decode: batch mismatch between noisy and encoded source");
    if (encoded_source.dim(1) != source.slots)
        throw shape_error("decode: encoded source slot mismatch");

    auto x = embed_inputs(noisy, true, "dec");
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        std::string p = "dec." + std::to_string(l);
        auto a = attention(x, x, noisy.mask, p + ".self", training, dropout_rng);
        x = norm(add(x, a), p + ".ln1");
        auto c = attention(x, encoded_source, source.mask, p + ".cross", training, dropout_rng);
        x = norm(add(x, c), p + ".ln2");
        auto f = feed_forward(x, p + ".ff", training, dropout_rng);
        x = norm(add(x, f), p + ".ln3");
    }
    return x;
}

MicroenvTransformer::SourceCache MicroenvTransformer::encode_cached(const EnvBatch& source) const {
    SourceCache cache;
    cache.encoded = encode(source, false, nullptr);
    cache.key_mask = source.mask;
    cache.batch = source.batch;
    cache.slots = source.slots;
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        std::string p = "dec." + std::to_string(l) + ".cross";
        cache.keys.push_back(split_for_heads(cache.encoded, p + ".k"));
        cache.values.push_back(split_for_heads(cache.encoded, p + ".v"));
    }
    return cache;
}

Tensor MicroenvTransformer::decode(const EnvBatch& noisy, const SourceCache& cache) const {
    if (!noisy.has_time()) throw param_error("decode: noisy batch must carry per-env t");
    if (cache.batch != noisy.batch) throw shape_error("decode: batch mismatch between noisy and cached source");

    auto x = embed_inputs(noisy, true, "dec");
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        std::string p = "dec." + std::to_string(l);
        auto a = attention(x, x, noisy.mask, p + ".self", false, nullptr);
        x = norm(add(x, a), p + ".ln1");
        auto c = attention_kv(x, cache.keys[static_cast<std::size_t>(l)], cache.values[static_cast<std::size_t>(l)],
                              cache.key_mask, p + ".cross");
        x = norm(add(x, c), p + ".ln2");
        auto f = feed_forward(x, p + ".ff", false, nullptr);
        x = norm(add(x, f), p + ".ln3");
    }
    return x;
}

Prediction MicroenvTransformer::predict(const EnvBatch& noisy, const EnvBatch& source, bool training,
                                        Rng* dropout_rng) const {
    auto encoded = encode(source, training, dropout_rng);
    auto decoded = decode(noisy, encoded, source, training, dropout_rng);
    auto flat = reshape(decoded, {noisy.batch * noisy.slots, cfg_.embed_dim});
    auto head = linear(flat, "head");
    Prediction pred;
    pred.full = reshape(head, {noisy.batch, noisy.slots, cfg_.output_dim()});
    pred.coords = slice_lastdim(pred.full, 0, 2);
    pred.feats = slice_lastdim(pred.full, 2, cfg_.output_dim());
    return pred;
}

}  // namespace nfkit::model
