#include "nfkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

namespace nfkit::ad {

namespace {

constexpr double kMaskFill = -1e30;

thread_local bool g_no_grad = false;

NodePtr make_node(std::vector<std::int64_t> shape, std::vector<double> values, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

bool any_requires(const std::vector<NodePtr>& parents) {
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

Tensor finish(NodePtr out, std::vector<NodePtr> parents, std::function<void(Node&)> bwd) {
    out->requires_grad = !g_no_grad && any_requires(parents);
    if (out->requires_grad) {
        out->parents = std::move(parents);
        out->backward_fn = std::move(bwd);
    }
    return Tensor(std::move(out));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

// Rows = product of all dims but the last.
std::pair<std::int64_t, std::int64_t> as_rows(const Tensor& x) {
    if (x.ndim() < 1) throw shape_error("expected tensor with >=1 dim");
    std::int64_t cols = x.shape().back();
    std::int64_t rows = cols == 0 ? 0 : x.size() / cols;
    return {rows, cols};
}

}  // namespace

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

double Tensor::item() const {
    if (size() != 1) throw shape_error("item(): tensor has " + std::to_string(size()) + " elements");
    return values()[0];
}

Tensor tensor(std::vector<std::int64_t> shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape)
        if (d <= 0) throw shape_error("non-positive dimension in " + shape_str(shape));
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw shape_error("value count " + std::to_string(values.size()) + " does not match " +
                          shape_str(shape));
    check_finite(values, "tensor");
    return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
}

Tensor full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor scalar(double value, bool requires_grad) {
    return tensor({1}, {value}, requires_grad);
}

Tensor init_linear(std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> w(static_cast<std::size_t>(fan_in * fan_out));
    for (auto& x : w) x = rng.uniform(-bound, bound);
    return tensor({fan_in, fan_out}, std::move(w), true);
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto n = make_node(a.shape(), std::move(out), false);
    return finish(n, {a.node(), b.node()}, [](Node& self) {
        for (int p = 0; p < 2; ++p) {
            auto& par = *self.parents[p];
            if (!par.requires_grad) continue;
            par.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) par.grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    auto n = make_node(a.shape(), std::move(out), false);
    return finish(n, {a.node(), b.node()}, [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    auto n = make_node(a.shape(), std::move(out), false);
    return finish(n, {a.node(), b.node()}, [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.values[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.values[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw numeric_error("scale: non-finite factor");
    std::vector<double> out(a.values());
    for (auto& x : out) x *= c;
    auto n = make_node(a.shape(), std::move(out), false);
    return finish(n, {a.node()}, [c](Node& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += c * self.grad[i];
    });
}

Tensor abs(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& x : out) x = std::fabs(x);
    auto n = make_node(a.shape(), std::move(out), false);
    return finish(n, {a.node()}, [](Node& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double x = pa.values[i];
            double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            pa.grad[i] += s * self.grad[i];
        }
    });
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
    auto [rows, cols] = as_rows(x);
    if (bias.ndim() != 1 || bias.dim(0) != cols)
        throw shape_error("add_rowvec: bias " + shape_str(bias.shape()) + " vs cols " + std::to_string(cols));
    std::vector<double> out(x.values());
    const auto& bv = bias.values();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(r * cols + c)] += bv[static_cast<std::size_t>(c)];
    auto n = make_node(x.shape(), std::move(out), false);
    return finish(n, {x.node(), bias.node()}, [rows, cols](Node& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < cols; ++c)
                    pb.grad[static_cast<std::size_t>(c)] += self.grad[static_cast<std::size_t>(r * cols + c)];
        }
    });
}

Tensor scale_rows(const Tensor& x, const std::vector<double>& row_weights) {
    auto [rows, cols] = as_rows(x);
    if (static_cast<std::int64_t>(row_weights.size()) != rows)
        throw shape_error("scale_rows: " + std::to_string(row_weights.size()) + " weights for " +
                          std::to_string(rows) + " rows");
    std::vector<double> out(x.values());
    for (std::int64_t r = 0; r < rows; ++r) {
        double w = row_weights[static_cast<std::size_t>(r)];
        for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(r * cols + c)] *= w;
    }
    auto n = make_node(x.shape(), std::move(out), false);
    auto w = row_weights;
    return finish(n, {x.node()}, [w = std::move(w), rows, cols](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            double wr = w[static_cast<std::size_t>(r)];
            for (std::int64_t c = 0; c < cols; ++c) {
                auto i = static_cast<std::size_t>(r * cols + c);
                px.grad[i] += wr * self.grad[i];
            }
        }
    });
}

namespace {

// C[m,n] += A[m,k] * B[k,n]; ikj order keeps the inner loop contiguous.
void gemm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T (dot products of contiguous rows).
void gemm_nt_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n].
void gemm_tn_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() != 2)
        throw shape_error("matmul: need a with >=2 dims and 2-D b, got " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    std::int64_t k = a.shape().back();
    if (k != b.dim(0))
        throw shape_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    std::int64_t rows = a.size() / k;
    std::int64_t n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(rows * n), 0.0);
    gemm_acc(a.values().data(), b.values().data(), out.data(), rows, k, n);
    auto out_shape = a.shape();
    out_shape.back() = n;
    auto node = make_node(std::move(out_shape), std::move(out), false);
    return finish(node, {a.node(), b.node()}, [rows, k, n](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            // dA = g * B^T
            gemm_nt_acc(self.grad.data(), pb.values.data(), pa.grad.data(), rows, n, k);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            // dB = A^T * g
            gemm_tn_acc(pa.values.data(), self.grad.data(), pb.grad.data(), rows, k, n);
        }
    });
}

namespace {
void require_bmm(const Tensor& a, const Tensor& b, const char* op) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
        throw shape_error(std::string(op) + ": need matching 3-D batches, got " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
}
}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) {
    require_bmm(a, b, "bmm");
    std::int64_t B = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
    if (b.dim(1) != q) throw shape_error("bmm: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(B * p * r), 0.0);
    for (std::int64_t i = 0; i < B; ++i)
        gemm_acc(a.values().data() + i * p * q, b.values().data() + i * q * r, out.data() + i * p * r, p, q, r);
    auto node = make_node({B, p, r}, std::move(out), false);
    return finish(node, {a.node(), b.node()}, [B, p, q, r](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::int64_t i = 0; i < B; ++i) {
            const double* g = self.grad.data() + i * p * r;
            if (pa.requires_grad) {
                pa.ensure_grad();
                gemm_nt_acc(g, pb.values.data() + i * q * r, pa.grad.data() + i * p * q, p, r, q);
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                gemm_tn_acc(pa.values.data() + i * p * q, g, pb.grad.data() + i * q * r, p, q, r);
            }
        }
    });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    require_bmm(a, b, "bmm_nt");
    std::int64_t B = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(1);
    if (b.dim(2) != q) throw shape_error("bmm_nt: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(B * p * r), 0.0);
    for (std::int64_t i = 0; i < B; ++i)
        gemm_nt_acc(a.values().data() + i * p * q, b.values().data() + i * r * q, out.data() + i * p * r, p, q, r);
    auto node = make_node({B, p, r}, std::move(out), false);
    return finish(node, {a.node(), b.node()}, [B, p, q, r](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::int64_t i = 0; i < B; ++i) {
            const double* g = self.grad.data() + i * p * r;
            if (pa.requires_grad) {
                pa.ensure_grad();
                // dA = g * B
                gemm_acc(g, pb.values.data() + i * r * q, pa.grad.data() + i * p * q, p, r, q);
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                // dB = g^T * A
                gemm_tn_acc(g, pa.values.data() + i * p * q, pb.grad.data() + i * r * q, p, r, q);
            }
        }
    });
}

Tensor softmax(const Tensor& x, int axis) {
    int nd = static_cast<int>(x.ndim());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw shape_error("softmax: axis out of range");
    std::int64_t axis_len = x.shape()[static_cast<std::size_t>(axis)];
    std::int64_t inner = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
    std::int64_t outer = x.size() / (axis_len * inner);

    std::vector<double> out(x.values().size());
    const auto& xv = x.values();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            std::int64_t base = o * axis_len * inner + in;
            double mx = -HUGE_VAL;
            for (std::int64_t a = 0; a < axis_len; ++a) mx = std::max(mx, xv[static_cast<std::size_t>(base + a * inner)]);
            double denom = 0.0;
            for (std::int64_t a = 0; a < axis_len; ++a) {
                double e = std::exp(xv[static_cast<std::size_t>(base + a * inner)] - mx);
                out[static_cast<std::size_t>(base + a * inner)] = e;
                denom += e;
            }
            for (std::int64_t a = 0; a < axis_len; ++a) out[static_cast<std::size_t>(base + a * inner)] /= denom;
        }
    }
    auto node = make_node(x.shape(), std::move(out), false);
    return finish(node, {x.node()}, [outer, axis_len, inner, values = node->values](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                std::int64_t base = o * axis_len * inner + in;
                double dot = 0.0;
                for (std::int64_t a = 0; a < axis_len; ++a) {
                    auto i = static_cast<std::size_t>(base + a * inner);
                    dot += self.grad[i] * values[i];
                }
                for (std::int64_t a = 0; a < axis_len; ++a) {
                    auto i = static_cast<std::size_t>(base + a * inner);
                    px.grad[i] += (self.grad[i] - dot) * values[i];
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    auto [rows, cols] = as_rows(x);
    if (gain.ndim() != 1 || gain.dim(0) != cols || bias.ndim() != 1 || bias.dim(0) != cols)
        throw shape_error("layer_norm: gain/bias must be [" + std::to_string(cols) + "]");
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    std::vector<double> xhat(xv.size());
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * cols;
        double mean = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) mean += row[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            double d = row[c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(r)] = is;
        for (std::int64_t c = 0; c < cols; ++c) {
            auto i = static_cast<std::size_t>(r * cols + c);
            xhat[i] = (row[c] - mean) * is;
            out[i] = xhat[i] * gain.values()[static_cast<std::size_t>(c)] + bias.values()[static_cast<std::size_t>(c)];
        }
    }
    auto node = make_node(x.shape(), std::move(out), false);
    return finish(node, {x.node(), gain.node(), bias.node()},
                  [rows, cols, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node& self) {
                      auto& px = *self.parents[0];
                      auto& pg = *self.parents[1];
                      auto& pb = *self.parents[2];
                      const auto& gv = pg.values;
                      for (std::int64_t r = 0; r < rows; ++r) {
                          const double* g = self.grad.data() + r * cols;
                          const double* xh = xhat.data() + r * cols;
                          if (pg.requires_grad) {
                              pg.ensure_grad();
                              for (std::int64_t c = 0; c < cols; ++c) pg.grad[static_cast<std::size_t>(c)] += g[c] * xh[c];
                          }
                          if (pb.requires_grad) {
                              pb.ensure_grad();
                              for (std::int64_t c = 0; c < cols; ++c) pb.grad[static_cast<std::size_t>(c)] += g[c];
                          }
                          if (px.requires_grad) {
                              px.ensure_grad();
                              double mean_d = 0.0, mean_dx = 0.0;
                              for (std::int64_t c = 0; c < cols; ++c) {
                                  double dxh = g[c] * gv[static_cast<std::size_t>(c)];
                                  mean_d += dxh;
                                  mean_dx += dxh * xh[c];
                              }
                              mean_d /= static_cast<double>(cols);
                              mean_dx /= static_cast<double>(cols);
                              double is = inv_sigma[static_cast<std::size_t>(r)];
                              for (std::int64_t c = 0; c < cols; ++c) {
                                  double dxh = g[c] * gv[static_cast<std::size_t>(c)];
                                  px.grad[static_cast<std::size_t>(r * cols + c)] += is * (dxh - mean_d - xh[c] * mean_dx);
                              }
                          }
                      }
                  });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    if (!(slope > 0.0 && slope < 1.0)) throw param_error("leaky_relu: slope must be in (0,1)");
    std::vector<double> out(x.values());
    for (auto& v : out)
        if (v < 0.0) v *= slope;
    auto node = make_node(x.shape(), std::move(out), false);
    return finish(node, {x.node()}, [slope](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            px.grad[i] += self.grad[i] * (px.values[i] >= 0.0 ? 1.0 : slope);
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.values());
    for (auto& v : out)
        if (v < 0.0) v = 0.0;
    auto node = make_node(x.shape(), std::move(out), false);
    return finish(node, {x.node()}, [](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            px.grad[i] += self.grad[i] * (px.values[i] > 0.0 ? 1.0 : 0.0);
    });
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw param_error("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) {
        // Identity node keeps the graph uniform between train and eval.
        auto node = make_node(x.shape(), x.values(), false);
        return finish(node, {x.node()}, [](Node& self) {
            auto& px = *self.parents[0];
            px.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
        });
    }
    double keep = 1.0 - rate;
    std::vector<double> mask(x.values().size());
    for (auto& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    auto node = make_node(x.shape(), std::move(out), false);
    return finish(node, {x.node()}, [mask = std::move(mask)](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * mask[i];
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto node = make_node({1}, {s}, false);
    return finish(node, {x.node()}, [](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        double g = self.grad[0];
        for (auto& gv : px.grad) gv += g;
    });
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw shape_error("concat_lastdim: no inputs");
    auto lead = parts[0].shape();
    lead.pop_back();
    std::int64_t total_cols = 0;
    for (const auto& p : parts) {
        auto l = p.shape();
        l.pop_back();
        if (l != lead) throw shape_error("concat_lastdim: leading dims differ");
        total_cols += p.shape().back();
    }
    std::int64_t rows = shape_numel(lead);
    std::vector<double> out(static_cast<std::size_t>(rows * total_cols));
    std::vector<std::int64_t> col_of(parts.size());
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        std::int64_t c = parts[pi].shape().back();
        col_of[pi] = off;
        const auto& v = parts[pi].values();
        for (std::int64_t r = 0; r < rows; ++r)
            std::copy(v.begin() + r * c, v.begin() + (r + 1) * c, out.begin() + r * total_cols + off);
        off += c;
    }
    auto shape = lead;
    shape.push_back(total_cols);
    auto node = make_node(std::move(shape), std::move(out), false);
    std::vector<NodePtr> parents;
    std::vector<std::int64_t> widths;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        widths.push_back(p.shape().back());
    }
    return finish(node, std::move(parents), [rows, total_cols, widths, col_of](Node& self) {
        for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
            auto& par = *self.parents[pi];
            if (!par.requires_grad) continue;
            par.ensure_grad();
            std::int64_t c = widths[pi], off2 = col_of[pi];
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j)
                    par.grad[static_cast<std::size_t>(r * c + j)] += self.grad[static_cast<std::size_t>(r * total_cols + off2 + j)];
        }
    });
}

Tensor slice_lastdim(const Tensor& x, std::int64_t from, std::int64_t to) {
    std::int64_t cols = x.shape().back();
    if (from < 0 || to > cols || from >= to) throw shape_error("slice_lastdim: bad range");
    std::int64_t rows = x.size() / cols;
    std::int64_t w = to - from;
    std::vector<double> out(static_cast<std::size_t>(rows * w));
    const auto& v = x.values();
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy(v.begin() + r * cols + from, v.begin() + r * cols + to, out.begin() + r * w);
    auto shape = x.shape();
    shape.back() = w;
    auto node = make_node(std::move(shape), std::move(out), false);
    return finish(node, {x.node()}, [rows, cols, from, w](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < w; ++j)
                px.grad[static_cast<std::size_t>(r * cols + from + j)] += self.grad[static_cast<std::size_t>(r * w + j)];
    });
}

Tensor repeat_rows(const Tensor& x, std::int64_t k) {
    if (x.ndim() != 2) throw shape_error("repeat_rows: expected [B, C]");
    std::int64_t B = x.dim(0), C = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(B * k * C));
    const auto& v = x.values();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t r = 0; r < k; ++r)
            std::copy(v.begin() + b * C, v.begin() + (b + 1) * C, out.begin() + (b * k + r) * C);
    auto node = make_node({B, k, C}, std::move(out), false);
    return finish(node, {x.node()}, [B, k, C](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t r = 0; r < k; ++r)
                for (std::int64_t c = 0; c < C; ++c)
                    px.grad[static_cast<std::size_t>(b * C + c)] += self.grad[static_cast<std::size_t>((b * k + r) * C + c)];
    });
}

Tensor split_heads(const Tensor& x, std::int64_t heads) {
    if (x.ndim() != 3) throw shape_error("split_heads: expected [B, k, E]");
    std::int64_t B = x.dim(0), k = x.dim(1), E = x.dim(2);
    if (E % heads != 0) throw shape_error("split_heads: E not divisible by heads");
    std::int64_t hd = E / heads;
    std::vector<double> out(x.values().size());
    const auto& v = x.values();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < heads; ++h)
            for (std::int64_t t = 0; t < k; ++t)
                std::copy(v.begin() + (b * k + t) * E + h * hd, v.begin() + (b * k + t) * E + (h + 1) * hd,
                          out.begin() + ((b * heads + h) * k + t) * hd);
    auto node = make_node({B * heads, k, hd}, std::move(out), false);
    return finish(node, {x.node()}, [B, k, E, heads, hd](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t h = 0; h < heads; ++h)
                for (std::int64_t t = 0; t < k; ++t)
                    for (std::int64_t d = 0; d < hd; ++d)
                        px.grad[static_cast<std::size_t>((b * k + t) * E + h * hd + d)] +=
                            self.grad[static_cast<std::size_t>(((b * heads + h) * k + t) * hd + d)];
    });
}

Tensor merge_heads(const Tensor& x, std::int64_t heads) {
    if (x.ndim() != 3) throw shape_error("merge_heads: expected [B*H, k, hd]");
    std::int64_t BH = x.dim(0), k = x.dim(1), hd = x.dim(2);
    if (BH % heads != 0) throw shape_error("merge_heads: batch not divisible by heads");
    std::int64_t B = BH / heads, E = heads * hd;
    std::vector<double> out(x.values().size());
    const auto& v = x.values();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < heads; ++h)
            for (std::int64_t t = 0; t < k; ++t)
                std::copy(v.begin() + ((b * heads + h) * k + t) * hd, v.begin() + ((b * heads + h) * k + t + 1) * hd,
                          out.begin() + (b * k + t) * E + h * hd);
    auto node = make_node({B, k, E}, std::move(out), false);
    return finish(node, {x.node()}, [B, k, E, heads, hd](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t h = 0; h < heads; ++h)
                for (std::int64_t t = 0; t < k; ++t)
                    for (std::int64_t d = 0; d < hd; ++d)
                        px.grad[static_cast<std::size_t>(((b * heads + h) * k + t) * hd + d)] +=
                            self.grad[static_cast<std::size_t>((b * k + t) * E + h * hd + d)];
    });
}

Tensor mask_keys(const Tensor& scores, const std::vector<double>& key_mask, std::int64_t heads) {
    if (scores.ndim() != 3) throw shape_error("mask_keys: expected [B*H, q, kk]");
    std::int64_t BH = scores.dim(0), q = scores.dim(1), kk = scores.dim(2);
    std::int64_t B = BH / heads;
    if (BH % heads != 0 || static_cast<std::int64_t>(key_mask.size()) != B * kk)
        throw shape_error("mask_keys: mask size mismatch");
    std::vector<double> out(scores.values());
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < kk; ++j) {
            if (key_mask[static_cast<std::size_t>(b * kk + j)] != 0.0) continue;
            for (std::int64_t h = 0; h < heads; ++h)
                for (std::int64_t t = 0; t < q; ++t)
                    out[static_cast<std::size_t>(((b * heads + h) * q + t) * kk + j)] = kMaskFill;
        }
    auto node = make_node(scores.shape(), std::move(out), false);
    // Additive constant: gradient passes through unchanged. Masked entries get
    // exactly zero softmax weight downstream, so their pass-through grad is moot.
    return finish(node, {scores.node()}, [](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    });
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw shape_error("cross_entropy_logits: expected [N, C]");
    std::int64_t N = logits.dim(0), C = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != N) throw shape_error("cross_entropy_logits: label count mismatch");
    const auto& v = logits.values();
    std::vector<double> probs(v.size());
    double loss = 0.0;
    for (std::int64_t i = 0; i < N; ++i) {
        int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= C) throw param_error("cross_entropy_logits: label out of range");
        const double* row = v.data() + i * C;
        double mx = -HUGE_VAL;
        for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            double e = std::exp(row[c] - mx);
            probs[static_cast<std::size_t>(i * C + c)] = e;
            denom += e;
        }
        for (std::int64_t c = 0; c < C; ++c) probs[static_cast<std::size_t>(i * C + c)] /= denom;
        loss += std::log(denom) + mx - row[y];
    }
    loss /= static_cast<double>(N);
    auto node = make_node({1}, {loss}, false);
    return finish(node, {logits.node()}, [N, C, probs = std::move(probs), labels](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        double g = self.grad[0] / static_cast<double>(N);
        for (std::int64_t i = 0; i < N; ++i)
            for (std::int64_t c = 0; c < C; ++c) {
                double p = probs[static_cast<std::size_t>(i * C + c)];
                double y = (labels[static_cast<std::size_t>(i)] == c) ? 1.0 : 0.0;
                px.grad[static_cast<std::size_t>(i * C + c)] += g * (p - y);
            }
    });
}

Tensor reshape(const Tensor& x, std::vector<std::int64_t> new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw shape_error("reshape: element count mismatch " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    auto node = make_node(std::move(new_shape), x.values(), false);
    return finish(node, {x.node()}, [](Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    });
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) throw contract_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior grads are scratch for this sweep; only leaves accumulate
    // across repeated calls.
    for (Node* n : order)
        if (!n->parents.empty()) n->grad.assign(n->values.size(), 0.0);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

NoGrad::NoGrad() : prev_(g_no_grad) { g_no_grad = true; }
NoGrad::~NoGrad() { g_no_grad = prev_; }

Tensor& ParamStore::create(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> values) {
    if (params_.count(name)) throw param_error("parameter already exists: " + name);
    auto [it, ok] = params_.emplace(name, tensor(std::move(shape), std::move(values), true));
    (void)ok;
    return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw param_error("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw param_error("unknown parameter: " + name);
    return it->second;
}

void ParamStore::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

std::int64_t ParamStore::total_size() const {
    std::int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.size();
    return n;
}

}  // namespace nfkit::ad

namespace nfkit {

std::size_t worker_count() {
    const char* env = std::getenv("NFKIT_THREADS");
    if (!env) return 1;
    long v = std::strtol(env, nullptr, 10);
    if (v < 1) return 1;
    if (v > 64) return 64;
    return static_cast<std::size_t>(v);
}

}  // namespace nfkit
