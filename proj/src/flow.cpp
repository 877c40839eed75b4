#include "nfkit/flow.hpp"

#include <algorithm>
#include <cmath>

namespace nfkit::flow {

using namespace nfkit::ad;
using model::EnvBatch;

std::string to_string(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::CFM: return "cfm";
        case ObjectiveKind::GVFM: return "gvfm";
        case ObjectiveKind::GLVFM: return "glvfm";
    }
    return "?";
}

std::string to_string(ConditioningMode m) {
    switch (m) {
        case ConditioningMode::Niche: return "niche";
        case ConditioningMode::RandomCloud: return "random-cloud";
        case ConditioningMode::PerCell: return "per-cell";
    }
    return "?";
}

ObjectiveKind objective_from_string(const std::string& s) {
    if (s == "cfm") return ObjectiveKind::CFM;
    if (s == "gvfm") return ObjectiveKind::GVFM;
    if (s == "glvfm") return ObjectiveKind::GLVFM;
    throw param_error("unknown objective '" + s + "' (expected cfm|gvfm|glvfm)");
}

ConditioningMode conditioning_from_string(const std::string& s) {
    if (s == "niche") return ConditioningMode::Niche;
    if (s == "random-cloud") return ConditioningMode::RandomCloud;
    if (s == "per-cell") return ConditioningMode::PerCell;
    throw param_error("unknown conditioning '" + s + "' (expected niche|random-cloud|per-cell)");
}

PerCellMlp::PerCellMlp(int state_dim, int num_timepoints, int hidden, std::uint64_t init_seed)
    : state_dim_(state_dim), num_timepoints_(num_timepoints), hidden_(hidden) {
    Rng rng(init_seed);
    auto add_linear = [&](const std::string& name, int in, int out) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::vector<double> w(static_cast<std::size_t>(in * out));
        for (auto& x : w) x = rng.uniform(-bound, bound);
        params_.create(name + ".w", {in, out}, std::move(w));
        params_.create(name + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
    };
    add_linear("mlp.0", input_dim(), hidden_);
    add_linear("mlp.1", hidden_, hidden_);
    add_linear("mlp.head", hidden_, state_dim_);
}

Tensor PerCellMlp::forward(const Tensor& input) const {
    auto lin = [&](const Tensor& x, const std::string& name) {
        return add_rowvec(matmul(x, params_.get(name + ".w")), params_.get(name + ".b"));
    };
    auto h1 = leaky_relu(lin(input, "mlp.0"), 0.01);
    auto h2 = leaky_relu(lin(h1, "mlp.1"), 0.01);
    return lin(h2, "mlp.head");
}

ParamStore& FlowModel::params() {
    if (transformer) return transformer->params();
    if (mlp) return mlp->params();
    throw contract_error("flow model has no backbone");
}

const ParamStore& FlowModel::params() const {
    if (transformer) return transformer->params();
    if (mlp) return mlp->params();
    throw contract_error("flow model has no backbone");
}

int FlowModel::feature_dim() const {
    if (transformer) return transformer->config().feature_dim;
    return mlp->state_dim() - 2;
}

int FlowModel::num_timepoints() const {
    if (transformer) return transformer->config().num_timepoints;
    return mlp->num_timepoints();
}

FlowModel make_flow_model(const FlowObjective& objective, ConditioningMode mode,
                          const model::TransformerConfig& tcfg, std::uint64_t init_seed) {
    FlowModel m;
    m.objective = objective;
    m.conditioning = mode;
    if (mode == ConditioningMode::PerCell) {
        m.mlp = std::make_unique<PerCellMlp>(tcfg.feature_dim + 2, tcfg.num_timepoints, tcfg.mlp_hidden, init_seed);
    } else {
        m.transformer = std::make_unique<model::MicroenvTransformer>(tcfg, init_seed);
    }
    return m;
}

Prepared prepare(const data::Dataset& ds, double radius, int k_regions, ConditioningMode mode,
                 std::uint64_t seed) {
    if (ds.slides.size() < 2) throw param_error("prepare: need at least 2 time points");
    Prepared out;
    out.mode = mode;
    out.feature_dim = ds.meta.feature_dim;
    out.num_timepoints = static_cast<int>(ds.slides.size());

    Rng root(seed);
    for (std::size_t si = 0; si < ds.slides.size(); ++si) {
        const auto& slide = ds.slides[si];
        Rng slide_rng = root.child(si);
        PreparedSlide ps;
        ps.time_index = slide.time_index;

        std::vector<std::array<double, 2>> cell_coords;
        cell_coords.reserve(slide.cells.size());
        for (const auto& c : slide.cells) cell_coords.push_back(c.coords);
        int k_eff = std::min<int>(k_regions, static_cast<int>(slide.cells.size()));
        Rng km_rng = slide_rng.child(1);
        auto km = data::kmeans_partition(cell_coords, k_eff, km_rng);

        if (mode == ConditioningMode::PerCell) {
            ps.env_size = 1;
            ps.envs.reserve(slide.cells.size());
            for (std::size_t i = 0; i < slide.cells.size(); ++i) {
                data::Microenvironment e;
                e.center_index = static_cast<int>(i);
                e.time_index = slide.time_index;
                e.member_indices = {static_cast<int>(i)};
                e.coords = {slide.cells[i].coords};
                e.features = {slide.cells[i].features};
                e.mask = {1};
                ps.envs.push_back(std::move(e));
            }
        } else {
            auto raw = data::extract_microenvironments(slide, radius);
            Rng size_rng = slide_rng.child(2);
            auto sized = data::standardize_env_size(raw, size_rng);
            ps.env_size = static_cast<int>(sized[0].mask.size());
            if (mode == ConditioningMode::Niche) {
                ps.envs = std::move(sized);
            } else {
                // Random clouds: k cells sampled uniformly from the center's
                // K-Means region; the r-ball invariant does not apply.
                Rng cloud_rng = slide_rng.child(3);
                std::vector<std::vector<int>> by_region(static_cast<std::size_t>(k_eff));
                for (std::size_t i = 0; i < slide.cells.size(); ++i)
                    by_region[static_cast<std::size_t>(km.labels[i])].push_back(static_cast<int>(i));
                int k = ps.env_size;
                for (std::size_t i = 0; i < slide.cells.size(); ++i) {
                    const auto& pool = by_region[static_cast<std::size_t>(km.labels[i])];
                    data::Microenvironment e;
                    e.center_index = static_cast<int>(i);
                    e.time_index = slide.time_index;
                    e.radius_bound = false;
                    std::vector<int> members{static_cast<int>(i)};
                    if (pool.size() > 1) {
                        auto perm = cloud_rng.permutation(pool.size());
                        for (std::size_t p = 0; p < perm.size() && static_cast<int>(members.size()) < k; ++p) {
                            int cand = pool[perm[p]];
                            if (cand != static_cast<int>(i)) members.push_back(cand);
                        }
                    }
                    for (int mi : members) {
                        e.member_indices.push_back(mi);
                        e.coords.push_back(slide.cells[static_cast<std::size_t>(mi)].coords);
                        e.features.push_back(slide.cells[static_cast<std::size_t>(mi)].features);
                        e.mask.push_back(1);
                    }
                    while (static_cast<int>(e.mask.size()) < k) {
                        e.member_indices.push_back(-1);
                        e.coords.push_back({0.0, 0.0});
                        e.features.push_back(std::vector<double>(static_cast<std::size_t>(out.feature_dim), 0.0));
                        e.mask.push_back(0);
                    }
                    ps.envs.push_back(std::move(e));
                }
            }
        }

        ps.regions.reserve(ps.envs.size());
        for (const auto& e : ps.envs) ps.regions.push_back(km.labels[static_cast<std::size_t>(e.center_index)]);
        out.slides.push_back(std::move(ps));
    }
    return out;
}

std::vector<double> interpolate(const std::vector<double>& mz, const std::vector<double>& m1,
                                const std::vector<double>& mask, std::int64_t state_dim, double t) {
    if (mz.size() != m1.size()) throw shape_error("interpolate: state size mismatch");
    if (mask.size() * static_cast<std::size_t>(state_dim) != mz.size())
        throw shape_error("interpolate: mask/state size mismatch");
    if (t < 0.0 || t > 1.0) throw param_error("interpolate: t outside [0,1]");
    std::vector<double> mt(mz.size(), 0.0);
    for (std::size_t s = 0; s < mask.size(); ++s) {
        if (mask[s] == 0.0) continue;
        for (std::int64_t d = 0; d < state_dim; ++d) {
            auto i = s * static_cast<std::size_t>(state_dim) + static_cast<std::size_t>(d);
            mt[i] = (1.0 - t) * mz[i] + t * m1[i];
        }
    }
    return mt;
}

namespace {

// Packs env slots into [B*k*(2+D)] coords-first state rows.
std::vector<double> pack_states(const std::vector<data::Microenvironment>& envs, const std::vector<int>& ids,
                                int feature_dim) {
    std::int64_t k = static_cast<std::int64_t>(envs[static_cast<std::size_t>(ids[0])].mask.size());
    std::int64_t state_dim = 2 + feature_dim;
    std::vector<double> out(ids.size() * static_cast<std::size_t>(k * state_dim), 0.0);
    for (std::size_t e = 0; e < ids.size(); ++e) {
        const auto& env = envs[static_cast<std::size_t>(ids[e])];
        for (std::int64_t s = 0; s < k; ++s) {
            if (!env.mask[static_cast<std::size_t>(s)]) continue;
            double* row = out.data() + (static_cast<std::int64_t>(e) * k + s) * state_dim;
            row[0] = env.coords[static_cast<std::size_t>(s)][0];
            row[1] = env.coords[static_cast<std::size_t>(s)][1];
            for (int d = 0; d < feature_dim; ++d) row[2 + d] = env.features[static_cast<std::size_t>(s)][static_cast<std::size_t>(d)];
        }
    }
    return out;
}

}  // namespace

EnvBatch env_batch_from_states(const std::vector<double>& states, const std::vector<double>& mask, std::int64_t B,
                               std::int64_t k, int feature_dim, int num_timepoints, int onehot_index) {
    EnvBatch b;
    b.batch = B;
    b.slots = k;
    b.feat_dim = feature_dim + num_timepoints;
    b.features.assign(static_cast<std::size_t>(B * k * b.feat_dim), 0.0);
    b.coords.assign(static_cast<std::size_t>(B * k * 2), 0.0);
    b.mask = mask;
    std::int64_t state_dim = 2 + feature_dim;
    for (std::int64_t i = 0; i < B * k; ++i) {
        if (mask[static_cast<std::size_t>(i)] == 0.0) continue;
        const double* row = states.data() + i * state_dim;
        b.coords[static_cast<std::size_t>(i * 2)] = row[0];
        b.coords[static_cast<std::size_t>(i * 2 + 1)] = row[1];
        double* frow = b.features.data() + i * b.feat_dim;
        for (int d = 0; d < feature_dim; ++d) frow[d] = row[2 + d];
        frow[feature_dim + onehot_index] = 1.0;
    }
    return b;
}

TrainBatch sample_and_interpolate(const Prepared& prepared, const ot::BatchCouplingConfig& coupling, Rng& rng) {
    if (prepared.slides.size() < 2) throw param_error("sample_and_interpolate: need >= 2 time points");
    int n_pairs_choices = static_cast<int>(prepared.slides.size()) - 1;
    int s = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n_pairs_choices)));
    const auto& src_slide = prepared.slides[static_cast<std::size_t>(s)];
    const auto& tgt_slide = prepared.slides[static_cast<std::size_t>(s + 1)];

    auto pairs = ot::batch_coupling(src_slide.envs, src_slide.regions, tgt_slide.envs, tgt_slide.regions,
                                    coupling, rng);

    TrainBatch batch;
    batch.source_time = s;
    batch.target_time = s + 1;
    std::int64_t B = static_cast<std::int64_t>(pairs.source_ids.size());
    std::int64_t k = tgt_slide.env_size;
    std::int64_t state_dim = 2 + prepared.feature_dim;

    batch.source = model::make_env_batch(src_slide.envs, pairs.source_ids, prepared.feature_dim,
                                         prepared.num_timepoints, s);
    batch.m1_state = pack_states(tgt_slide.envs, pairs.target_ids, prepared.feature_dim);

    batch.mask.assign(static_cast<std::size_t>(B * k), 0.0);
    for (std::int64_t e = 0; e < B; ++e) {
        const auto& env = tgt_slide.envs[static_cast<std::size_t>(pairs.target_ids[static_cast<std::size_t>(e)])];
        for (std::int64_t sl = 0; sl < k; ++sl)
            batch.mask[static_cast<std::size_t>(e * k + sl)] = env.mask[static_cast<std::size_t>(sl)] ? 1.0 : 0.0;
    }

    // Noise draw. Per-cell flows start from the source state instead.
    batch.t = rng.uniform();
    if (prepared.mode == ConditioningMode::PerCell) {
        batch.mz_state = pack_states(src_slide.envs, pairs.source_ids, prepared.feature_dim);
    } else {
        batch.mz_state.assign(static_cast<std::size_t>(B * k * state_dim), 0.0);
        for (std::int64_t i = 0; i < B * k; ++i) {
            if (batch.mask[static_cast<std::size_t>(i)] == 0.0) continue;
            for (std::int64_t d = 0; d < state_dim; ++d)
                batch.mz_state[static_cast<std::size_t>(i * state_dim + d)] = rng.normal();
        }
    }

    batch.mt_state = interpolate(batch.mz_state, batch.m1_state, batch.mask, state_dim, batch.t);
    batch.noisy = env_batch_from_states(batch.mt_state, batch.mask, B, k, prepared.feature_dim,
                                    prepared.num_timepoints, s + 1);
    batch.noisy.t.assign(static_cast<std::size_t>(B), batch.t);
    return batch;
}

Tensor predict_states(const TrainBatch& batch, const FlowModel& model, bool training, Rng* rng) {
    if (model.conditioning == ConditioningMode::PerCell) {
        std::int64_t B = batch.noisy.batch, k = batch.noisy.slots;
        std::int64_t state_dim = 2 + model.feature_dim();
        std::int64_t in_dim = state_dim + 1 + model.num_timepoints();
        std::vector<double> input(static_cast<std::size_t>(B * k * in_dim), 0.0);
        for (std::int64_t i = 0; i < B * k; ++i) {
            double* row = input.data() + i * in_dim;
            for (std::int64_t d = 0; d < state_dim; ++d) row[d] = batch.mt_state[static_cast<std::size_t>(i * state_dim + d)];
            row[state_dim] = batch.t;
            row[state_dim + 1 + batch.source_time] = 1.0;
        }
        auto out = model.mlp->forward(tensor({B * k, in_dim}, std::move(input)));
        return reshape(out, {B, k, state_dim});
    }
    auto pred = model.transformer->predict(batch.noisy, batch.source, training, rng);
    return pred.full;
}

namespace {

Tensor masked_residual(const Tensor& pred, const std::vector<double>& target, const std::vector<double>& mask) {
    auto tgt = tensor(pred.shape(), target);
    auto diff = sub(pred, tgt);
    return scale_rows(diff, mask);
}

}  // namespace

Tensor loss_cfm(const TrainBatch& batch, const FlowModel& model, bool training, Rng* rng) {
    if (model.objective.kind != ObjectiveKind::CFM)
        throw contract_error("loss_cfm: model not configured for CFM");
    auto pred = predict_states(batch, model, training, rng);
    std::vector<double> u_target(batch.m1_state.size());
    for (std::size_t i = 0; i < u_target.size(); ++i) u_target[i] = batch.m1_state[i] - batch.mz_state[i];
    auto r = masked_residual(pred, u_target, batch.mask);
    auto sq = mul(r, r);
    return scale(sum(sq), 0.5 / static_cast<double>(pred.dim(0)));
}

Tensor loss_gvfm(const TrainBatch& batch, const FlowModel& model, bool training, Rng* rng) {
    if (model.objective.kind != ObjectiveKind::GVFM)
        throw contract_error("loss_gvfm: model not configured for GVFM");
    auto pred = predict_states(batch, model, training, rng);
    auto r = masked_residual(pred, batch.m1_state, batch.mask);
    auto sq = mul(r, r);
    return scale(sum(sq), 0.5 / static_cast<double>(pred.dim(0)));
}

Tensor loss_glvfm(const TrainBatch& batch, const FlowModel& model, bool training, Rng* rng) {
    if (model.objective.kind != ObjectiveKind::GLVFM)
        throw contract_error("loss_glvfm: model not configured for GLVFM");
    auto pred = predict_states(batch, model, training, rng);
    auto r = masked_residual(pred, batch.m1_state, batch.mask);
    auto coords = slice_lastdim(r, 0, 2);
    auto feats = slice_lastdim(r, 2, r.shape().back());
    auto l1 = sum(abs(coords));
    auto l2 = scale(sum(mul(feats, feats)), 0.5);
    return scale(add(l1, l2), 1.0 / static_cast<double>(pred.dim(0)));
}

Tensor loss_for(const TrainBatch& batch, const FlowModel& model, bool training, Rng* rng) {
    switch (model.objective.kind) {
        case ObjectiveKind::CFM: return loss_cfm(batch, model, training, rng);
        case ObjectiveKind::GVFM: return loss_gvfm(batch, model, training, rng);
        case ObjectiveKind::GLVFM: return loss_glvfm(batch, model, training, rng);
    }
    throw contract_error("loss_for: bad objective");
}

std::vector<double> integrate_velocity(std::vector<double> state, int steps, const FieldFn& velocity) {
    if (steps < 1) throw param_error("integrate_velocity: steps must be >= 1");
    double h = 1.0 / static_cast<double>(steps);
    for (int i = 0; i < steps; ++i) {
        double t = static_cast<double>(i) * h;
        auto u = velocity(state, t);
        if (u.size() != state.size()) throw shape_error("integrate_velocity: field size mismatch");
        for (std::size_t j = 0; j < state.size(); ++j) state[j] += h * u[j];
        for (double v : state)
            if (!std::isfinite(v))
                throw numeric_error("integrate_velocity: non-finite state at step " + std::to_string(i));
    }
    return state;
}

std::vector<double> integrate_vfm(std::vector<double> state, int steps, double eps, const FieldFn& mean) {
    if (eps <= 0) throw param_error("integrate_vfm: eps must be positive");
    return integrate_velocity(std::move(state), steps, [&](const std::vector<double>& x, double t) {
        auto mu = mean(x, t);
        double denom = 1.0 - t + eps;
        std::vector<double> u(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) u[i] = (mu[i] - x[i]) / denom;
        return u;
    });
}

std::vector<double> generate_states(const FlowModel& model, const EnvBatch& source, int source_time,
                                    int target_time, std::int64_t k_target, const GenerationConfig& config,
                                    Rng& rng) {
    ad::NoGrad inference;
    std::int64_t B = source.batch;
    std::int64_t state_dim = 2 + model.feature_dim();
    std::vector<double> init(static_cast<std::size_t>(B * k_target * state_dim));
    std::vector<double> gen_mask(static_cast<std::size_t>(B * k_target), 1.0);

    if (model.conditioning == ConditioningMode::PerCell) {
        if (k_target != 1 || source.slots != 1)
            throw param_error("generate_states: per-cell mode works on k=1 environments");
        for (std::int64_t e = 0; e < B; ++e) {
            double* row = init.data() + e * state_dim;
            row[0] = source.coords[static_cast<std::size_t>(e * 2)];
            row[1] = source.coords[static_cast<std::size_t>(e * 2 + 1)];
            for (std::int64_t d = 0; d < state_dim - 2; ++d)
                row[2 + d] = source.features[static_cast<std::size_t>(e * source.feat_dim + d)];
        }
    } else {
        for (auto& x : init) x = rng.normal();
    }

    model::MicroenvTransformer::SourceCache cache;
    if (model.transformer) cache = model.transformer->encode_cached(source);

    auto model_output = [&](const std::vector<double>& state, double t) {
        if (model.conditioning == ConditioningMode::PerCell) {
            std::int64_t in_dim = state_dim + 1 + model.num_timepoints();
            std::vector<double> input(static_cast<std::size_t>(B * in_dim), 0.0);
            for (std::int64_t e = 0; e < B; ++e) {
                double* row = input.data() + e * in_dim;
                for (std::int64_t d = 0; d < state_dim; ++d) row[d] = state[static_cast<std::size_t>(e * state_dim + d)];
                row[state_dim] = t;
                // Source-time one-hot: the transition is identified by its start.
                row[state_dim + 1 + source_time] = 1.0;
            }
            auto out = model.mlp->forward(tensor({B, in_dim}, std::move(input)));
            return out.values();
        }
        auto noisy = env_batch_from_states(state, gen_mask, B, k_target, model.feature_dim(),
                                       model.num_timepoints(), target_time);
        noisy.t.assign(static_cast<std::size_t>(B), t);
        auto decoded = model.transformer->decode(noisy, cache);
        auto flat = reshape(decoded, {B * k_target, model.transformer->config().embed_dim});
        auto head = add_rowvec(matmul(flat, model.transformer->params().get("head.w")),
                               model.transformer->params().get("head.b"));
        return head.values();
    };

    if (model.objective.kind == ObjectiveKind::CFM) {
        return integrate_velocity(std::move(init), config.euler_steps, model_output);
    }
    return integrate_vfm(std::move(init), config.euler_steps, config.numeric_eps, model_output);
}

std::vector<StepRecord> train(const Prepared& prepared, FlowModel& model, ad::OptimizerState& optimizer,
                              const TrainLoopConfig& config, const std::function<void(const StepRecord&)>& on_step,
                              const std::function<void(int)>& on_checkpoint,
                              const std::vector<StepRecord>& prior_trace) {
    Rng root(config.seed);
    std::vector<StepRecord> trace;

    // Window means aligned to absolute steps; only complete windows count.
    double prev_window = HUGE_VAL;
    double window_acc = 0;
    int window_n = 0;
    auto feed_window = [&](int step, double loss) {
        window_acc += loss;
        ++window_n;
        if (config.early_stop_window <= 0 || (step + 1) % config.early_stop_window != 0) return false;
        bool stop = false;
        if (window_n == config.early_stop_window) {
            double mean = window_acc / window_n;
            stop = std::isfinite(prev_window) && mean > prev_window * (1.0 - config.early_stop_threshold);
            prev_window = mean;
        }
        window_acc = 0;
        window_n = 0;
        return stop;
    };
    for (const auto& rec : prior_trace) feed_window(rec.step, rec.loss);

    for (int step = static_cast<int>(optimizer.step_count); step < config.max_steps; ++step) {
        Rng step_rng = root.child(0xF10F ^ static_cast<std::uint64_t>(step));
        model.params().zero_grad();

        int instances = std::max(1, config.sampling.instances_per_batch);
        double total_loss = 0, total_t = 0;
        for (int inst = 0; inst < instances; ++inst) {
            Rng inst_rng = step_rng.child(static_cast<std::uint64_t>(inst));
            auto batch = sample_and_interpolate(prepared, config.sampling.coupling, inst_rng);
            Rng dropout_rng = inst_rng.child(0xD0);
            auto loss = loss_for(batch, model, true, &dropout_rng);
            auto scaled = scale(loss, 1.0 / static_cast<double>(instances));
            backward(scaled);
            double lv = loss.item();
            if (!std::isfinite(lv))
                throw numeric_error("train: non-finite loss at step " + std::to_string(step) + " (t=" +
                                    std::to_string(batch.t) + ", pair " + std::to_string(batch.source_time) +
                                    "->" + std::to_string(batch.target_time) + ")");
            total_loss += lv / instances;
            total_t += batch.t / instances;
        }

        adamw_step(model.params(), optimizer);

        StepRecord rec{step, total_loss, total_t};
        trace.push_back(rec);
        if (on_step) on_step(rec);
        if (on_checkpoint && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0)
            on_checkpoint(step + 1);

        if (feed_window(step, total_loss)) break;
    }
    return trace;
}

}  // namespace nfkit::flow
