#include "nfkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>

#include "nfkit/coupling.hpp"
#include "nfkit/optim.hpp"
#include "nfkit/transformer.hpp"

namespace nfkit::metrics {

using namespace nfkit::ad;

KdTree2d::KdTree2d(std::vector<std::array<double, 2>> points) : pts_(std::move(points)) {
    if (pts_.empty()) throw param_error("KdTree2d: empty point set");
    std::vector<int> ids(pts_.size());
    std::iota(ids.begin(), ids.end(), 0);
    nodes_.reserve(pts_.size());
    root_ = build(ids, 0, static_cast<int>(ids.size()), 0);
}

int KdTree2d::build(std::vector<int>& ids, int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    int axis = depth % 2;
    int mid = (lo + hi) / 2;
    std::nth_element(ids.begin() + lo, ids.begin() + mid, ids.begin() + hi, [&](int a, int b) {
        double va = pts_[static_cast<std::size_t>(a)][static_cast<std::size_t>(axis)];
        double vb = pts_[static_cast<std::size_t>(b)][static_cast<std::size_t>(axis)];
        if (va != vb) return va < vb;
        return a < b;
    });
    int node_id = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    nodes_[static_cast<std::size_t>(node_id)].point = ids[static_cast<std::size_t>(mid)];
    nodes_[static_cast<std::size_t>(node_id)].axis = axis;
    int left = build(ids, lo, mid, depth + 1);
    int right = build(ids, mid + 1, hi, depth + 1);
    nodes_[static_cast<std::size_t>(node_id)].left = left;
    nodes_[static_cast<std::size_t>(node_id)].right = right;
    return node_id;
}

void KdTree2d::search(int node, const std::array<double, 2>& q, double& best_d2, int& best_idx) const {
    if (node < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(node)];
    const auto& p = pts_[static_cast<std::size_t>(n.point)];
    double dx = q[0] - p[0], dy = q[1] - p[1];
    double d2 = dx * dx + dy * dy;
    if (d2 < best_d2 || (d2 == best_d2 && n.point < best_idx)) {
        best_d2 = d2;
        best_idx = n.point;
    }
    double delta = q[static_cast<std::size_t>(n.axis)] - p[static_cast<std::size_t>(n.axis)];
    int near = delta <= 0 ? n.left : n.right;
    int far = delta <= 0 ? n.right : n.left;
    search(near, q, best_d2, best_idx);
    if (delta * delta <= best_d2) search(far, q, best_d2, best_idx);
}

int KdTree2d::nearest(const std::array<double, 2>& query) const {
    double best_d2 = HUGE_VAL;
    int best_idx = static_cast<int>(pts_.size());
    search(root_, query, best_d2, best_idx);
    return best_idx;
}

double KdTree2d::nearest_sq_dist(const std::array<double, 2>& query) const {
    double best_d2 = HUGE_VAL;
    int best_idx = static_cast<int>(pts_.size());
    search(root_, query, best_d2, best_idx);
    return best_d2;
}

namespace {

double directed_mean_sq(const PointSets& from, const PointSets& to, const char* to_name) {
    if (from.size() != to.size()) throw shape_error("psd/spd: time bucket counts differ");
    double total = 0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < from.size(); ++t) {
        if (from[t].empty()) continue;
        if (to[t].empty())
            throw param_error(std::string("psd/spd: empty ") + to_name + " set at time bucket " + std::to_string(t));
        KdTree2d tree(to[t]);
        for (const auto& p : from[t]) {
            total += tree.nearest_sq_dist(p);
            ++count;
        }
    }
    if (count == 0) throw param_error("psd/spd: no points to evaluate");
    return total / static_cast<double>(count);
}

}  // namespace

double psd(const PointSets& generated, const PointSets& reference) {
    return directed_mean_sq(generated, reference, "reference");
}

double spd(const PointSets& generated, const PointSets& reference) {
    return directed_mean_sq(reference, generated, "generated");
}

double kde_likelihood(const std::vector<std::array<double, 2>>& samples, const std::array<double, 2>& query,
                      double sigma) {
    if (sigma <= 0) throw param_error("kde_likelihood: sigma must be positive");
    if (samples.empty()) throw param_error("kde_likelihood: no samples");
    double acc = 0;
    for (const auto& s : samples) {
        double dx = query[0] - s[0], dy = query[1] - s[1];
        acc += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    }
    return acc / static_cast<double>(samples.size());
}

namespace {

struct WeightedSet {
    std::vector<std::vector<double>> points;
    std::vector<double> weights;  // sums to 1
};

// Exact duplicates collapse into weighted atoms; tiny-epsilon Sinkhorn is
// badly conditioned on repeated rows otherwise.
WeightedSet dedupe_weighted(const std::vector<std::vector<double>>& set) {
    std::map<std::vector<double>, double> acc;
    for (const auto& p : set) acc[p] += 1.0;
    WeightedSet out;
    out.points.reserve(acc.size());
    out.weights.reserve(acc.size());
    for (auto& [p, w] : acc) {
        out.points.push_back(p);
        out.weights.push_back(w / static_cast<double>(set.size()));
    }
    return out;
}

std::vector<double> pairwise_cost(const std::vector<std::vector<double>>& a,
                                  const std::vector<std::vector<double>>& b, int order) {
    std::vector<double> cost(a.size() * b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) {
            double d2 = 0;
            for (std::size_t k = 0; k < a[i].size(); ++k) {
                double d = a[i][k] - b[j][k];
                d2 += d * d;
            }
            cost[i * b.size() + j] = order == 1 ? std::sqrt(d2) : d2;
        }
    return cost;
}

double entropic_cost(const WeightedSet& a, const WeightedSet& b, int order, double eps) {
    auto cost = pairwise_cost(a.points, b.points, order);
    if (a.points.size() == 1 && b.points.size() == 1) return cost[0];
    ot::SinkhornOptions opt;
    opt.epsilon = eps;
    opt.max_iter = 20000;
    opt.tol = 1e-7;
    // Metric tolerances sit at the percent level; stalled iterates below
    // 1e-3 violation are rounded to exact feasibility and kept.
    opt.accept_violation = 1e-3;
    auto plan = ot::sinkhorn(cost, static_cast<std::int64_t>(a.points.size()),
                             static_cast<std::int64_t>(b.points.size()), a.weights, b.weights, opt);
    return plan.transport_cost(cost);
}

}  // namespace

double wasserstein(const std::vector<std::vector<double>>& set_a, const std::vector<std::vector<double>>& set_b,
                   int order) {
    if (order != 1 && order != 2) throw param_error("wasserstein: order must be 1 or 2");
    if (set_a.empty() || set_b.empty()) throw param_error("wasserstein: empty set");
    if (set_a[0].size() != set_b[0].size()) throw shape_error("wasserstein: dimension mismatch");

    auto a = dedupe_weighted(set_a);
    auto b = dedupe_weighted(set_b);
    auto ab = pairwise_cost(a.points, b.points, order);
    double mean = 0;
    for (double c : ab) mean += c;
    mean /= static_cast<double>(ab.size());
    if (mean <= 0) return 0.0;  // coincident single-point sets
    double eps = 1e-3 * mean;

    // Sinkhorn divergence: OT(a,b) - (OT(a,a) + OT(b,b)) / 2.
    double d = entropic_cost(a, b, order, eps) -
               0.5 * (entropic_cost(a, a, order, eps) + entropic_cost(b, b, order, eps));
    d = std::max(d, 0.0);
    return order == 1 ? d : std::sqrt(d);
}

TypeClassifier::TypeClassifier(int input_dim, int num_types, int hidden, std::uint64_t init_seed)
    : input_dim_(input_dim), num_types_(num_types), hidden_(hidden) {
    if (num_types_ < 2) throw param_error("TypeClassifier: need >= 2 types");
    Rng rng(init_seed);
    auto add_linear = [&](const std::string& name, int in, int out) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::vector<double> w(static_cast<std::size_t>(in * out));
        for (auto& x : w) x = rng.uniform(-bound, bound);
        params_.create(name + ".w", {in, out}, std::move(w));
        params_.create(name + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
    };
    add_linear("clf.0", input_dim_, hidden_);
    add_linear("clf.1", hidden_, hidden_);
    add_linear("clf.head", hidden_, num_types_);
}

Tensor TypeClassifier::logits(const Tensor& features) const {
    auto lin = [&](const Tensor& x, const std::string& name) {
        return add_rowvec(matmul(x, params_.get(name + ".w")), params_.get(name + ".b"));
    };
    auto h1 = relu(lin(features, "clf.0"));
    auto h2 = relu(lin(h1, "clf.1"));
    return lin(h2, "clf.head");
}

std::vector<int> TypeClassifier::predict(const std::vector<std::vector<double>>& features) const {
    ad::NoGrad inference;
    if (features.empty()) return {};
    std::int64_t n = static_cast<std::int64_t>(features.size());
    std::vector<double> flat(static_cast<std::size_t>(n * input_dim_));
    for (std::int64_t i = 0; i < n; ++i) {
        if (static_cast<int>(features[static_cast<std::size_t>(i)].size()) != input_dim_)
            throw shape_error("TypeClassifier::predict: feature dim mismatch");
        for (int d = 0; d < input_dim_; ++d)
            flat[static_cast<std::size_t>(i * input_dim_ + d)] = features[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
    }
    auto out = logits(tensor({n, input_dim_}, std::move(flat)));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        int arg = 0;
        double best = -HUGE_VAL;
        for (int c = 0; c < num_types_; ++c) {
            double v = out.values()[static_cast<std::size_t>(i * num_types_ + c)];
            if (v > best) {
                best = v;
                arg = c;
            }
        }
        labels[static_cast<std::size_t>(i)] = arg;
    }
    return labels;
}

double weighted_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred, int num_classes) {
    if (y_true.size() != y_pred.size() || y_true.empty()) throw param_error("weighted_f1: bad label vectors");
    std::vector<double> tp(static_cast<std::size_t>(num_classes), 0), fp(static_cast<std::size_t>(num_classes), 0),
        fn(static_cast<std::size_t>(num_classes), 0), support(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        int t = y_true[i], p = y_pred[i];
        if (t < 0 || t >= num_classes || p < 0 || p >= num_classes)
            throw param_error("weighted_f1: label out of range");
        support[static_cast<std::size_t>(t)] += 1;
        if (t == p) tp[static_cast<std::size_t>(t)] += 1;
        else {
            fp[static_cast<std::size_t>(p)] += 1;
            fn[static_cast<std::size_t>(t)] += 1;
        }
    }
    double f1 = 0;
    for (int c = 0; c < num_classes; ++c) {
        auto ci = static_cast<std::size_t>(c);
        double denom = 2 * tp[ci] + fp[ci] + fn[ci];
        double f = denom > 0 ? 2 * tp[ci] / denom : 0.0;
        f1 += f * support[ci] / static_cast<double>(y_true.size());
    }
    return f1;
}

ClassifierResult train_classifier(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                                  int num_types, std::uint64_t split_seed, const ClassifierOptions& options) {
    if (features.size() != labels.size() || features.empty())
        throw param_error("train_classifier: features/labels mismatch");
    if (num_types < 2) throw param_error("train_classifier: need >= 2 types");
    std::vector<std::size_t> per_type(static_cast<std::size_t>(num_types), 0);
    for (int l : labels) {
        if (l < 0 || l >= num_types) throw param_error("train_classifier: label out of range");
        per_type[static_cast<std::size_t>(l)] += 1;
    }
    for (int c = 0; c < num_types; ++c)
        if (per_type[static_cast<std::size_t>(c)] < 20)
            throw param_error("train_classifier: type " + std::to_string(c) + " has fewer than 20 cells");

    int input_dim = static_cast<int>(features[0].size());
    Rng rng(split_seed);
    auto perm = rng.permutation(features.size());
    std::size_t n_train = (features.size() * 8) / 10;
    if (n_train == 0 || n_train == features.size()) throw param_error("train_classifier: set too small to split");

    std::vector<std::size_t> train_ids(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> held_ids(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());

    std::vector<bool> in_train(static_cast<std::size_t>(num_types), false);
    for (auto i : train_ids) in_train[static_cast<std::size_t>(labels[i])] = true;
    for (int c = 0; c < num_types; ++c)
        if (!in_train[static_cast<std::size_t>(c)])
            throw param_error("train_classifier: class " + std::to_string(c) + " absent from train split");

    auto pack = [&](const std::vector<std::size_t>& ids) {
        std::vector<double> flat(ids.size() * static_cast<std::size_t>(input_dim));
        std::vector<int> ys(ids.size());
        for (std::size_t r = 0; r < ids.size(); ++r) {
            for (int d = 0; d < input_dim; ++d)
                flat[r * static_cast<std::size_t>(input_dim) + static_cast<std::size_t>(d)] =
                    features[ids[r]][static_cast<std::size_t>(d)];
            ys[r] = labels[ids[r]];
        }
        return std::make_pair(std::move(flat), std::move(ys));
    };
    auto [held_flat, held_y] = pack(held_ids);
    auto held_x = tensor({static_cast<std::int64_t>(held_ids.size()), input_dim}, held_flat);

    ClassifierResult result{TypeClassifier(input_dim, num_types, options.hidden, split_seed ^ 0xC1A55), 0.0, 0};
    OptimizerState opt;
    opt.learning_rate = options.learning_rate;
    opt.weight_decay = options.weight_decay;

    const std::size_t batch_size = 256;
    double best_held = HUGE_VAL;
    int misses = 0;
    Rng batch_rng = rng.child(0xBA7C);
    for (int step = 0; step < options.max_steps; ++step) {
        std::vector<std::size_t> batch_ids;
        batch_ids.reserve(std::min(batch_size, train_ids.size()));
        for (std::size_t i = 0; i < std::min(batch_size, train_ids.size()); ++i)
            batch_ids.push_back(train_ids[static_cast<std::size_t>(batch_rng.uniform_index(train_ids.size()))]);
        auto [bx, by] = pack(batch_ids);
        auto x = tensor({static_cast<std::int64_t>(batch_ids.size()), input_dim}, std::move(bx));
        result.classifier.params().zero_grad();
        auto loss = cross_entropy_logits(result.classifier.logits(x), by);
        backward(loss);
        adamw_step(result.classifier.params(), opt);
        result.steps_trained = step + 1;

        if ((step + 1) % options.eval_every == 0) {
            double held_loss = cross_entropy_logits(result.classifier.logits(held_x), held_y).item();
            if (held_loss < 1e-3) break;  // converged outright
            // Count an evaluation as progress only on a 2% relative drop.
            if (held_loss < best_held * 0.98) {
                best_held = held_loss;
                misses = 0;
            } else if (++misses >= options.patience) {
                break;
            }
        }
    }

    // Held-out weighted F1 at the stopping point.
    auto out = result.classifier.logits(held_x);
    std::vector<int> pred(held_ids.size());
    for (std::size_t i = 0; i < held_ids.size(); ++i) {
        int arg = 0;
        double best = -HUGE_VAL;
        for (int c = 0; c < num_types; ++c) {
            double v = out.values()[i * static_cast<std::size_t>(num_types) + static_cast<std::size_t>(c)];
            if (v > best) {
                best = v;
                arg = c;
            }
        }
        pred[i] = arg;
    }
    result.heldout_weighted_f1 = weighted_f1(held_y, pred, num_types);
    return result;
}

double one_nn_f1(const std::vector<std::array<double, 2>>& gen_coords,
                 const std::vector<std::vector<double>>& gen_features,
                 const std::vector<std::array<double, 2>>& ref_coords, const std::vector<int>& ref_labels,
                 const TypeClassifier& classifier) {
    if (gen_coords.size() != gen_features.size()) throw param_error("one_nn_f1: generated size mismatch");
    if (ref_coords.size() != ref_labels.size() || ref_coords.empty())
        throw param_error("one_nn_f1: reference size mismatch");
    for (int l : ref_labels)
        if (l < 0) throw param_error("one_nn_f1: reference cell without type label");

    auto pred = classifier.predict(gen_features);
    KdTree2d tree(ref_coords);
    std::vector<int> matched(gen_coords.size());
    for (std::size_t i = 0; i < gen_coords.size(); ++i)
        matched[i] = ref_labels[static_cast<std::size_t>(tree.nearest(gen_coords[i]))];
    return weighted_f1(matched, pred, classifier.num_types());
}

std::string MetricsReport::serialize() const {
    std::ostringstream os;
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    os << "psd=" << num(psd) << '\n';
    os << "spd=" << num(spd) << '\n';
    os << "one_nn_f1=" << num(one_nn_f1) << '\n';
    os << "classifier_f1=" << num(classifier_f1) << '\n';
    for (const auto& [type, w] : wasserstein) {
        os << "wasserstein.type" << type << ".w1_coords=" << num(w.w1_coords) << '\n';
        os << "wasserstein.type" << type << ".w2_coords=" << num(w.w2_coords) << '\n';
        os << "wasserstein.type" << type << ".w1_features=" << num(w.w1_features) << '\n';
        os << "wasserstein.type" << type << ".w2_features=" << num(w.w2_features) << '\n';
        os << "wasserstein.type" << type << ".samples=" << w.samples << '\n';
    }
    for (const auto& [k, v] : meta) os << "meta." << k << '=' << v << '\n';
    return os.str();
}

MetricsReport MetricsReport::parse(const std::string& text) {
    MetricsReport r;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw format_error("metrics report: bad line '" + line + "'");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "psd") r.psd = std::stod(val);
        else if (key == "spd") r.spd = std::stod(val);
        else if (key == "one_nn_f1") r.one_nn_f1 = std::stod(val);
        else if (key == "classifier_f1") r.classifier_f1 = std::stod(val);
        else if (key.rfind("meta.", 0) == 0) r.meta[key.substr(5)] = val;
        else if (key.rfind("wasserstein.type", 0) == 0) {
            auto dot = key.find('.', 16);
            int type = std::stoi(key.substr(16, dot - 16));
            std::string field = key.substr(dot + 1);
            auto& w = r.wasserstein[type];
            if (field == "w1_coords") w.w1_coords = std::stod(val);
            else if (field == "w2_coords") w.w2_coords = std::stod(val);
            else if (field == "w1_features") w.w1_features = std::stod(val);
            else if (field == "w2_features") w.w2_features = std::stod(val);
            else if (field == "samples") w.samples = std::stoi(val);
            else throw format_error("metrics report: unknown field " + field);
        } else {
            throw format_error("metrics report: unknown key " + key);
        }
    }
    return r;
}

namespace {

// Subsample a set (without replacement) to at most cap rows.
std::vector<std::vector<double>> cap_set(const std::vector<std::vector<double>>& in, int cap, Rng& rng) {
    if (static_cast<int>(in.size()) <= cap) return in;
    auto perm = rng.permutation(in.size());
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<std::size_t>(cap));
    for (int i = 0; i < cap; ++i) out.push_back(in[perm[static_cast<std::size_t>(i)]]);
    return out;
}

std::vector<data::Microenvironment> eval_envs_for(const data::Slide& slide, const EvalConfig& config, Rng rng) {
    auto envs = data::discretized_grid_envs(slide, config.grid_step, config.radius, config.target_count, rng);
    // Reuse the slide-wide environment size so eval batches match training.
    auto all = data::extract_microenvironments(slide, config.radius);
    int k = data::modal_env_size(all);
    Rng r2 = rng.child(1);
    return data::standardize_env_size_to(envs, k, r2);
}

}  // namespace

GenerateHook oracle_hook(const data::Dataset& ds, const EvalConfig& config, std::uint64_t seed) {
    return [&ds, config, seed](const std::vector<data::Microenvironment>& sources, int source_time,
                               Rng& rng) -> GeneratedBatch {
        (void)sources;
        (void)rng;
        const auto& target = ds.slide_at(source_time + 1);
        Rng grid_rng = Rng(seed).child(0xE7A1 ^ static_cast<std::uint64_t>(source_time + 1));
        auto envs = data::discretized_grid_envs(target, config.grid_step, config.radius, config.target_count,
                                                grid_rng);
        std::int64_t slots = 0;
        for (const auto& e : envs) slots = std::max<std::int64_t>(slots, static_cast<std::int64_t>(e.mask.size()));
        int feature_dim = envs[0].features.empty() ? 0 : static_cast<int>(envs[0].features[0].size());
        std::int64_t state_dim = 2 + feature_dim;
        GeneratedBatch out;
        out.slots = slots;
        out.states.assign(static_cast<std::size_t>(static_cast<std::int64_t>(envs.size()) * slots * state_dim), 0.0);
        out.mask.assign(static_cast<std::size_t>(static_cast<std::int64_t>(envs.size()) * slots), 0.0);
        for (std::size_t e = 0; e < envs.size(); ++e) {
            for (std::size_t s = 0; s < envs[e].mask.size(); ++s) {
                if (!envs[e].mask[s]) continue;
                auto row = (static_cast<std::int64_t>(e) * slots + static_cast<std::int64_t>(s));
                out.mask[static_cast<std::size_t>(row)] = 1.0;
                double* st = out.states.data() + row * state_dim;
                st[0] = envs[e].coords[s][0];
                st[1] = envs[e].coords[s][1];
                for (int d = 0; d < feature_dim; ++d) st[2 + d] = envs[e].features[s][static_cast<std::size_t>(d)];
            }
        }
        return out;
    };
}

MetricsReport evaluate_with_hook(const data::Dataset& ds, const EvalConfig& config, std::uint64_t seed,
                                 const GenerateHook& hook, int feature_dim,
                                 const ClassifierResult* shared_classifier) {
    if (ds.slides.size() < 2) throw param_error("evaluate: need >= 2 time points");
    Rng root(seed);

    std::optional<ClassifierResult> own;
    if (!shared_classifier) {
        // Classifier over all labeled cells.
        std::vector<std::vector<double>> all_features;
        std::vector<int> all_labels;
        for (const auto& s : ds.slides)
            for (const auto& c : s.cells) {
                if (c.type_label < 0) throw param_error("evaluate: dataset has unlabeled cells");
                all_features.push_back(c.features);
                all_labels.push_back(c.type_label);
            }
        own.emplace(train_classifier(all_features, all_labels, ds.meta.num_types, seed ^ 0xC1F0));
    }
    const ClassifierResult& clf = shared_classifier ? *shared_classifier : *own;

    MetricsReport report;
    report.classifier_f1 = clf.heldout_weighted_f1;

    PointSets gen_sets, ref_sets;
    std::vector<int> match_true, match_pred;
    std::map<int, WassersteinEntry> wacc;
    std::int64_t state_dim = 2 + feature_dim;

    for (std::size_t si = 0; si + 1 < ds.slides.size(); ++si) {
        const auto& src_slide = ds.slides[si];
        const auto& tgt_slide = ds.slides[si + 1];
        int s = static_cast<int>(si);

        Rng grid_rng = root.child(0xE7A1 ^ static_cast<std::uint64_t>(s));
        auto sources = eval_envs_for(src_slide, config, grid_rng);

        std::vector<std::array<double, 2>> gen_coords;
        std::vector<std::vector<double>> gen_features;
        for (int rep = 0; rep < config.samples_per_env; ++rep) {
            Rng gen_rng = root.child(0x6E6E ^ (static_cast<std::uint64_t>(s) << 8) ^ static_cast<std::uint64_t>(rep));
            auto batch = hook(sources, s, gen_rng);
            std::size_t n_rows = batch.mask.size();
            for (std::size_t row = 0; row < n_rows; ++row) {
                if (batch.mask[row] == 0.0) continue;
                const double* st = batch.states.data() + static_cast<std::int64_t>(row) * state_dim;
                gen_coords.push_back({st[0], st[1]});
                gen_features.push_back(std::vector<double>(st + 2, st + state_dim));
            }
        }

        std::vector<std::array<double, 2>> ref_coords;
        std::vector<int> ref_labels;
        for (const auto& c : tgt_slide.cells) {
            ref_coords.push_back(c.coords);
            ref_labels.push_back(c.type_label);
        }

        gen_sets.push_back(gen_coords);
        ref_sets.push_back(ref_coords);

        // 1NN matching pooled across times.
        auto pred = clf.classifier.predict(gen_features);
        KdTree2d tree(ref_coords);
        for (std::size_t i = 0; i < gen_coords.size(); ++i) {
            match_true.push_back(ref_labels[static_cast<std::size_t>(tree.nearest(gen_coords[i]))]);
            match_pred.push_back(pred[i]);
        }

        // Per-type Wasserstein on coords and features.
        Rng wrng = root.child(0x3A55 ^ static_cast<std::uint64_t>(s));
        for (int type = 0; type < ds.meta.num_types; ++type) {
            std::vector<std::vector<double>> gen_c, gen_f, ref_c, ref_f;
            for (std::size_t i = 0; i < gen_coords.size(); ++i) {
                if (pred[i] != type) continue;
                gen_c.push_back({gen_coords[i][0], gen_coords[i][1]});
                gen_f.push_back(gen_features[i]);
            }
            for (const auto& c : tgt_slide.cells) {
                if (c.type_label != type) continue;
                ref_c.push_back({c.coords[0], c.coords[1]});
                ref_f.push_back(c.features);
            }
            if (gen_c.empty() || ref_c.empty()) continue;  // type absent: skip
            auto gc = cap_set(gen_c, config.wasserstein_cap, wrng);
            auto gf = cap_set(gen_f, config.wasserstein_cap, wrng);
            auto rc = cap_set(ref_c, config.wasserstein_cap, wrng);
            auto rf = cap_set(ref_f, config.wasserstein_cap, wrng);
            auto& acc = wacc[type];
            acc.w1_coords += wasserstein(gc, rc, 1);
            acc.w2_coords += wasserstein(gc, rc, 2);
            acc.w1_features += wasserstein(gf, rf, 1);
            acc.w2_features += wasserstein(gf, rf, 2);
            acc.samples += 1;
        }
    }

    report.psd = psd(gen_sets, ref_sets);
    report.spd = spd(gen_sets, ref_sets);
    report.one_nn_f1 = weighted_f1(match_true, match_pred, ds.meta.num_types);
    for (auto& [type, acc] : wacc) {
        WassersteinEntry e = acc;
        if (acc.samples > 0) {
            e.w1_coords /= acc.samples;
            e.w2_coords /= acc.samples;
            e.w1_features /= acc.samples;
            e.w2_features /= acc.samples;
        }
        report.wasserstein[type] = e;
    }
    report.meta["seed"] = std::to_string(seed);
    report.meta["samples_per_env"] = std::to_string(config.samples_per_env);
    return report;
}

MetricsReport evaluate(const flow::FlowModel& model, const data::Dataset& ds, const EvalConfig& config,
                       std::uint64_t seed, const ClassifierResult* shared_classifier) {
    int feature_dim = ds.meta.feature_dim;
    int num_timepoints = static_cast<int>(ds.slides.size());

    // Target-slide environment sizes for generation.
    std::vector<int> k_of_slide(ds.slides.size(), 1);
    if (model.conditioning != flow::ConditioningMode::PerCell) {
        for (std::size_t i = 0; i < ds.slides.size(); ++i) {
            auto all = data::extract_microenvironments(ds.slides[i], config.radius);
            k_of_slide[i] = data::modal_env_size(all);
        }
    }

    GenerateHook hook = [&model, feature_dim, num_timepoints, &k_of_slide, &config](
                            const std::vector<data::Microenvironment>& sources, int source_time,
                            Rng& rng) -> GeneratedBatch {
        GeneratedBatch out;
        std::int64_t state_dim = 2 + feature_dim;
        flow::GenerationConfig gen = config.generation;

        if (model.conditioning == flow::ConditioningMode::PerCell) {
            // Push every member cell of every source env through the flow.
            std::vector<data::Microenvironment> singles;
            for (const auto& env : sources)
                for (std::size_t s = 0; s < env.mask.size(); ++s) {
                    if (!env.mask[s]) continue;
                    data::Microenvironment e;
                    e.center_index = env.member_indices[s];
                    e.time_index = env.time_index;
                    e.member_indices = {env.member_indices[s]};
                    e.coords = {env.coords[s]};
                    e.features = {env.features[s]};
                    e.mask = {1};
                    singles.push_back(std::move(e));
                }
            std::vector<int> ids(singles.size());
            std::iota(ids.begin(), ids.end(), 0);
            auto batch = model::make_env_batch(singles, ids, feature_dim, num_timepoints, source_time);
            auto states = flow::generate_states(model, batch, source_time, source_time + 1, 1, gen, rng);
            out.slots = 1;
            out.states = std::move(states);
            out.mask.assign(singles.size(), 1.0);
            return out;
        }

        std::vector<int> ids(sources.size());
        std::iota(ids.begin(), ids.end(), 0);
        auto batch = model::make_env_batch(sources, ids, feature_dim, num_timepoints, source_time);
        std::int64_t k_target = k_of_slide[static_cast<std::size_t>(source_time + 1)];
        auto states = flow::generate_states(model, batch, source_time, source_time + 1, k_target, gen, rng);
        out.slots = k_target;
        out.states = std::move(states);
        out.mask.assign(sources.size() * static_cast<std::size_t>(k_target), 1.0);
        (void)state_dim;
        return out;
    };

    auto report = evaluate_with_hook(ds, config, seed, hook, feature_dim, shared_classifier);
    report.meta["objective"] = flow::to_string(model.objective.kind);
    report.meta["conditioning"] = flow::to_string(model.conditioning);
    return report;
}

}  // namespace nfkit::metrics
