#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nfkit/common.hpp"

// Dense float64 tensors with tape-free reverse-mode autodiff: each op links
// its output node to its parents, backward() walks the DAG from a scalar
// loss. Single-threaded per graph; forward evaluation is pure.

namespace nfkit::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    std::vector<std::int64_t> shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily during backward
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;  // accumulates node.grad into parents

    std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::int64_t>& shape() const { return node_->shape; }
    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& mutable_values() { return node_->values; }
    const std::vector<double>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    std::int64_t size() const { return node_->size(); }
    std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t ndim() const { return node_->shape.size(); }
    double item() const;
    void zero_grad() { node_->grad.clear(); }

    NodePtr node() const { return node_; }

  private:
    NodePtr node_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);
std::string shape_str(const std::vector<std::int64_t>& shape);

// Leaf constructors. Values are checked for finiteness on creation.
Tensor tensor(std::vector<std::int64_t> shape, std::vector<double> values, bool requires_grad = false);
Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
Tensor full(std::vector<std::int64_t> shape, double value, bool requires_grad = false);
Tensor scalar(double value, bool requires_grad = false);
// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_linear(std::int64_t fan_in, std::int64_t fan_out, Rng& rng);

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor abs(const Tensor& a);  // subgradient 0 at 0

// x: [..., C] treated as rows; bias: [C].
Tensor add_rowvec(const Tensor& x, const Tensor& bias);
// Per-row scaling by a constant weight vector (one weight per row). Used to
// zero padded slots in losses; weights carry no gradient.
Tensor scale_rows(const Tensor& x, const std::vector<double>& row_weights);

// Matrix product. a: [..., k] flattened to [R, k]; b: [k, n]; result [..., n].
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched products over leading dim B.
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,p,q] x [B,q,r] -> [B,p,r]
Tensor bmm_nt(const Tensor& a, const Tensor& b);  // [B,p,q] x [B,r,q]^T -> [B,p,r]

Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor relu(const Tensor& x);
// Inverted dropout; identity when !training. Deterministic given rng state.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

Tensor sum(const Tensor& x);  // -> scalar
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(const Tensor& x, std::int64_t from, std::int64_t to);
// x: [B, C] -> [B, k, C] (row repeated k times; backward sums the copies).
Tensor repeat_rows(const Tensor& x, std::int64_t k);
// [B, k, E] -> [B*H, k, E/H] and back.
Tensor split_heads(const Tensor& x, std::int64_t heads);
Tensor merge_heads(const Tensor& x, std::int64_t heads);
// Adds -1e30 to scores[b*H+h][q][j] wherever mask[b*kk + j] == 0.
Tensor mask_keys(const Tensor& scores, const std::vector<double>& key_mask, std::int64_t heads);
// logits: [N, C]; labels in [0, C). Returns mean NLL over rows.
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels);
Tensor reshape(const Tensor& x, std::vector<std::int64_t> new_shape);

// Reverse-mode sweep from a scalar loss. Repeated calls accumulate.
void backward(const Tensor& loss);

// Scoped inference mode: ops inside the guard record no graph, so forward
// passes allocate no backward closures. Not reentrant across threads.
class NoGrad {
  public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

  private:
    bool prev_;
};

// Named parameter registry (ordered; iteration order is part of the
// checkpoint contract).
class ParamStore {
  public:
    Tensor& create(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> values);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    std::map<std::string, Tensor>& all() { return params_; }
    const std::map<std::string, Tensor>& all() const { return params_; }
    void zero_grad();
    std::int64_t total_size() const;

  private:
    std::map<std::string, Tensor> params_;
};

}  // namespace nfkit::ad
