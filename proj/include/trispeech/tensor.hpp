#ifndef TRISPEECH_TENSOR_HPP
#define TRISPEECH_TENSOR_HPP

// Dense row-major tensors with reverse-mode automatic differentiation.
// Ops execute eagerly; each op appends one node to its graph's tape, so the
// tape order is a valid topological order and backward() is a single reverse
// sweep. Gradients always accumulate (+=), never overwrite, so a parameter
// used several times in one graph (the shared encoder serving three
// modalities) collects contributions from every use.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

#include "trispeech/common.hpp"

namespace trispeech {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

// Plain value storage for parameters and inputs. `grad` is a persistent
// accumulator, sized lazily on first backward and zeroed by the optimizer.
template <typename S>
struct TensorData {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;

  TensorData() = default;
  TensorData(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }
  static TensorData zeros(Shape sh) {
    auto n = numel_of(sh);
    return TensorData(std::move(sh), std::vector<S>(static_cast<size_t>(n), S(0)));
  }
  int64_t numel() const { return numel_of(shape); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }

  template <typename T>
  TensorData<T> cast() const {
    TensorData<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

template <typename S>
class Graph;

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized iff this node requires grad
  std::function<void(Node<S>&)> backfn;
  TensorData<S>* param = nullptr;  // set for parameter leaves
  size_t index = 0;

  bool requires_grad() const { return !grad.empty(); }
  int64_t numel() const { return static_cast<int64_t>(value.size()); }
};

}  // namespace detail

// Lightweight handle into a Graph; must not outlive it.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  bool requires_grad() const { return node_->requires_grad(); }
  const std::vector<S>& values() const { return node_->value; }
  S value_at(int64_t i) const { return node_->value[static_cast<size_t>(i)]; }
  S scalar() const {
    if (numel() != 1) throw ContractError("scalar() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  const std::vector<S>& grad() const { return node_->grad; }
  bool valid() const { return node_ != nullptr; }

 private:
  friend class Graph<S>;
  Tensor(Graph<S>* g, detail::Node<S>* n) : graph_(g), node_(n) {}
  Graph<S>* graph_ = nullptr;
  detail::Node<S>* node_ = nullptr;

 public:
  Graph<S>* graph() const { return graph_; }
  detail::Node<S>* node() const { return node_; }
};

template <typename S>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Lifts a parameter into the graph. Lifting the same TensorData twice
  // returns the same node, so shared weights are one leaf with accumulated
  // gradient.
  Tensor<S> param(TensorData<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Tensor<S>(this, it->second);
    detail::Node<S>* n = new_node(p.shape, p.data, /*requires_grad=*/true);
    n->param = &p;
    param_nodes_[&p] = n;
    return Tensor<S>(this, n);
  }

  Tensor<S> input(const Shape& shape, const std::vector<S>& data, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("input data length does not match shape " + shape_str(shape));
    return Tensor<S>(this, new_node(shape, data, requires_grad));
  }

  Tensor<S> input(const TensorData<S>& d, bool requires_grad = false) {
    return input(d.shape, d.data, requires_grad);
  }

  Tensor<S> constant(const Shape& shape, const std::vector<S>& data) {
    return input(shape, data, false);
  }

  Tensor<S> scalar(S v) { return input({1}, {v}, false); }

  // Reverse sweep from `loss` (must be scalar). Each differentiable leaf gets
  // dLoss/dLeaf added into it; parameter leaves additionally flush into their
  // TensorData grad accumulators. A second backward on the same graph is a
  // contract violation: intermediate values are not retained for reuse.
  void backward(Tensor<S> loss) {
    if (backward_done_)
      throw ContractError("second backward on the same graph without re-running forward");
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    backward_done_ = true;
    if (!loss.requires_grad()) return;  // loss disconnected from any parameter
    loss.node()->grad[0] = S(1);
    size_t start = loss.node()->index;
    for (size_t i = start + 1; i-- > 0;) {
      detail::Node<S>& n = nodes_[i];
      if (n.backfn && n.requires_grad()) n.backfn(n);
    }
    for (auto& [p, n] : param_nodes_) {
      p->ensure_grad();
      for (size_t i = 0; i < n->grad.size(); ++i) p->grad[i] += n->grad[i];
    }
  }

  size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  detail::Node<S>* new_node(const Shape& shape, std::vector<S> value, bool requires_grad) {
    nodes_.emplace_back();
    detail::Node<S>& n = nodes_.back();
    n.shape = shape;
    n.value = std::move(value);
    if (requires_grad) n.grad.assign(n.value.size(), S(0));
    n.index = nodes_.size() - 1;
    return &n;
  }

  Tensor<S> wrap(detail::Node<S>* n) { return Tensor<S>(this, n); }

 private:
  std::deque<detail::Node<S>> nodes_;
  std::map<TensorData<S>*, detail::Node<S>*> param_nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// op helpers

namespace detail {

template <typename S>
Tensor<S> make_op(Graph<S>* g, Shape shape, std::vector<S> value, bool requires_grad,
                  std::function<void(Node<S>&)> backfn) {
  Node<S>* n = g->new_node(shape, std::move(value), requires_grad);
  if (requires_grad) n->backfn = std::move(backfn);
  return g->wrap(n);
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "add");
  std::vector<S> v(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  bool rg = a.requires_grad() || b.requires_grad();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), rg, [an, bn](detail::Node<S>& o) {
    if (an->requires_grad())
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    if (bn->requires_grad())
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
  });
}

template <typename S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<S> v(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  bool rg = a.requires_grad() || b.requires_grad();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), rg, [an, bn](detail::Node<S>& o) {
    if (an->requires_grad())
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    if (bn->requires_grad())
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
  });
}

template <typename S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<S> v(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  bool rg = a.requires_grad() || b.requires_grad();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), rg, [an, bn](detail::Node<S>& o) {
    if (an->requires_grad())
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
    if (bn->requires_grad())
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
  });
}

template <typename S>
Tensor<S> scale(Tensor<S> a, S c) {
  std::vector<S> v(a.values());
  for (auto& x : v) x *= c;
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), a.requires_grad(),
                            [an, c](detail::Node<S>& o) {
                              for (size_t i = 0; i < o.grad.size(); ++i)
                                an->grad[i] += c * o.grad[i];
                            });
}

// Adds a length-C row vector to every row of a [..., C] tensor.
template <typename S>
Tensor<S> add_row(Tensor<S> a, Tensor<S> row) {
  if (row.rank() != 1 || a.dim(a.rank() - 1) != row.dim(0))
    throw ShapeError("add_row: " + shape_str(a.shape()) + " vs " + shape_str(row.shape()));
  const int64_t c = row.dim(0);
  std::vector<S> v(a.values());
  const auto& rv = row.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] += rv[i % static_cast<size_t>(c)];
  bool rg = a.requires_grad() || row.requires_grad();
  auto* an = a.node();
  auto* rn = row.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), rg, [an, rn, c](detail::Node<S>& o) {
    if (an->requires_grad())
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    if (rn->requires_grad())
      for (size_t i = 0; i < o.grad.size(); ++i)
        rn->grad[i % static_cast<size_t>(c)] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// matmul: [B..., M, K] x [B..., K, N] -> [B..., M, N], leading batch dims
// broadcast against each other (equal or 1).

template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul needs rank >= 2: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const int64_t M = as[as.size() - 2], K = as[as.size() - 1];
  const int64_t Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
  if (K != Kb)
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(as) + " x " +
                     shape_str(bs));
  const size_t abat = as.size() - 2, bbat = bs.size() - 2;
  const size_t nbat = std::max(abat, bbat);
  Shape batch(nbat, 1);
  for (size_t i = 0; i < nbat; ++i) {
    int64_t da = i < nbat - abat ? 1 : as[i - (nbat - abat)];
    int64_t db = i < nbat - bbat ? 1 : bs[i - (nbat - bbat)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("matmul batch dimensions not broadcastable: " + shape_str(as) + " x " +
                       shape_str(bs));
    batch[i] = std::max(da, db);
  }
  const int64_t nbatches = numel_of(batch);
  // Per-batch flat offsets into a and b (0-stride over broadcast dims).
  std::vector<int64_t> aoff(static_cast<size_t>(nbatches), 0), boff(aoff);
  {
    std::vector<int64_t> idx(nbat, 0);
    for (int64_t bi = 0; bi < nbatches; ++bi) {
      int64_t ao = 0, bo = 0;
      for (size_t i = 0; i < nbat; ++i) {
        if (i >= nbat - abat) {
          int64_t d = as[i - (nbat - abat)];
          ao = ao * d + (d == 1 ? 0 : idx[i]);
        }
        if (i >= nbat - bbat) {
          int64_t d = bs[i - (nbat - bbat)];
          bo = bo * d + (d == 1 ? 0 : idx[i]);
        }
      }
      aoff[static_cast<size_t>(bi)] = ao * M * K;
      boff[static_cast<size_t>(bi)] = bo * K * N;
      for (size_t i = nbat; i-- > 0;) {
        if (++idx[i] < batch[i]) break;
        idx[i] = 0;
      }
    }
  }
  Shape oshape = batch;
  oshape.push_back(M);
  oshape.push_back(N);
  std::vector<S> out(static_cast<size_t>(nbatches * M * N), S(0));
  const S* ad = a.values().data();
  const S* bd = b.values().data();
  for (int64_t bi = 0; bi < nbatches; ++bi) {
    const S* A = ad + aoff[static_cast<size_t>(bi)];
    const S* B = bd + boff[static_cast<size_t>(bi)];
    S* C = out.data() + bi * M * N;
    for (int64_t i = 0; i < M; ++i)
      for (int64_t k = 0; k < K; ++k) {
        const S s = A[i * K + k];
        const S* brow = B + k * N;
        S* crow = C + i * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += s * brow[j];
      }
  }
  bool rg = a.requires_grad() || b.requires_grad();
  auto* an = a.node();
  auto* bn = b.node();
  auto aoffc = aoff;
  auto boffc = boff;
  return detail::make_op<S>(
      a.graph(), oshape, std::move(out), rg,
      [an, bn, aoffc, boffc, M, N, K, nbatches](detail::Node<S>& o) {
        const S* go = o.grad.data();
        for (int64_t bi = 0; bi < nbatches; ++bi) {
          const S* G = go + bi * M * N;
          if (an->requires_grad()) {
            S* dA = an->grad.data() + aoffc[static_cast<size_t>(bi)];
            const S* B = bn->value.data() + boffc[static_cast<size_t>(bi)];
            // dA[i,k] += sum_j G[i,j] * B[k,j]
            for (int64_t i = 0; i < M; ++i)
              for (int64_t k = 0; k < K; ++k) {
                S acc = 0;
                const S* grow = G + i * N;
                const S* brow = B + k * N;
                for (int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
                dA[i * K + k] += acc;
              }
          }
          if (bn->requires_grad()) {
            S* dB = bn->grad.data() + boffc[static_cast<size_t>(bi)];
            const S* A = an->value.data() + aoffc[static_cast<size_t>(bi)];
            // dB[k,j] += sum_i A[i,k] * G[i,j]
            for (int64_t i = 0; i < M; ++i)
              for (int64_t k = 0; k < K; ++k) {
                const S s = A[i * K + k];
                const S* grow = G + i * N;
                S* brow = dB + k * N;
                for (int64_t j = 0; j < N; ++j) brow[j] += s * grow[j];
              }
          }
        }
      });
}

template <typename S>
Tensor<S> transpose(Tensor<S> a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  const int64_t R = a.dim(0), C = a.dim(1);
  std::vector<S> v(static_cast<size_t>(R * C));
  const auto& av = a.values();
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j) v[static_cast<size_t>(j * R + i)] = av[static_cast<size_t>(i * C + j)];
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), {C, R}, std::move(v), a.requires_grad(),
                            [an, R, C](detail::Node<S>& o) {
                              for (int64_t i = 0; i < R; ++i)
                                for (int64_t j = 0; j < C; ++j)
                                  an->grad[static_cast<size_t>(i * C + j)] +=
                                      o.grad[static_cast<size_t>(j * R + i)];
                            });
}

// ---------------------------------------------------------------------------
// nonlinearity

template <typename S>
Tensor<S> gelu(Tensor<S> a) {
  std::vector<S> v(a.values());
  for (auto& x : v) {
    double xd = static_cast<double>(x);
    x = static_cast<S>(0.5 * xd * (1.0 + std::erf(xd / M_SQRT2)));
  }
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), a.requires_grad(),
                            [an](detail::Node<S>& o) {
                              for (size_t i = 0; i < o.grad.size(); ++i) {
                                double x = static_cast<double>(an->value[i]);
                                double cdf = 0.5 * (1.0 + std::erf(x / M_SQRT2));
                                double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
                                an->grad[i] += o.grad[i] * static_cast<S>(cdf + x * pdf);
                              }
                            });
}

// ---------------------------------------------------------------------------
// softmax family (max-subtracted for stability)

namespace detail {
struct AxisIter {
  int64_t outer, n, inner;
};
inline AxisIter axis_iter(const Shape& s, int axis) {
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  AxisIter it{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) it.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) it.inner *= s[i];
  return it;
}
}  // namespace detail

template <typename S>
Tensor<S> softmax(Tensor<S> a, int axis) {
  auto it = detail::axis_iter(a.shape(), axis);
  std::vector<S> v(a.values());
  for (int64_t o = 0; o < it.outer; ++o)
    for (int64_t in = 0; in < it.inner; ++in) {
      S* base = v.data() + o * it.n * it.inner + in;
      S mx = base[0];
      for (int64_t k = 1; k < it.n; ++k) mx = std::max(mx, base[k * it.inner]);
      if (!std::isfinite(static_cast<double>(mx)) && mx > 0)
        throw NumericError("softmax over non-finite input");
      S sum = 0;
      for (int64_t k = 0; k < it.n; ++k) {
        S e = std::exp(base[k * it.inner] - mx);
        base[k * it.inner] = e;
        sum += e;
      }
      for (int64_t k = 0; k < it.n; ++k) base[k * it.inner] /= sum;
    }
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), a.requires_grad(),
                            [an, it](detail::Node<S>& o) {
                              for (int64_t ou = 0; ou < it.outer; ++ou)
                                for (int64_t in = 0; in < it.inner; ++in) {
                                  const int64_t off = ou * it.n * it.inner + in;
                                  S dot = 0;
                                  for (int64_t k = 0; k < it.n; ++k)
                                    dot += o.value[static_cast<size_t>(off + k * it.inner)] *
                                           o.grad[static_cast<size_t>(off + k * it.inner)];
                                  for (int64_t k = 0; k < it.n; ++k) {
                                    const size_t i = static_cast<size_t>(off + k * it.inner);
                                    an->grad[i] += o.value[i] * (o.grad[i] - dot);
                                  }
                                }
                            });
}

template <typename S>
Tensor<S> log_softmax(Tensor<S> a, int axis) {
  auto it = detail::axis_iter(a.shape(), axis);
  std::vector<S> v(a.values());
  for (int64_t o = 0; o < it.outer; ++o)
    for (int64_t in = 0; in < it.inner; ++in) {
      S* base = v.data() + o * it.n * it.inner + in;
      S mx = base[0];
      for (int64_t k = 1; k < it.n; ++k) mx = std::max(mx, base[k * it.inner]);
      S sum = 0;
      for (int64_t k = 0; k < it.n; ++k) sum += std::exp(base[k * it.inner] - mx);
      const S lse = mx + std::log(sum);
      for (int64_t k = 0; k < it.n; ++k) base[k * it.inner] -= lse;
    }
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), a.requires_grad(),
                            [an, it](detail::Node<S>& o) {
                              for (int64_t ou = 0; ou < it.outer; ++ou)
                                for (int64_t in = 0; in < it.inner; ++in) {
                                  const int64_t off = ou * it.n * it.inner + in;
                                  S gsum = 0;
                                  for (int64_t k = 0; k < it.n; ++k)
                                    gsum += o.grad[static_cast<size_t>(off + k * it.inner)];
                                  for (int64_t k = 0; k < it.n; ++k) {
                                    const size_t i = static_cast<size_t>(off + k * it.inner);
                                    an->grad[i] += o.grad[i] - std::exp(o.value[i]) * gsum;
                                  }
                                }
                            });
}

// ---------------------------------------------------------------------------
// normalisation

// Per-position normalisation over the channel (last) axis, then affine.
template <typename S>
Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gain, Tensor<S> bias, S eps) {
  const int64_t C = x.dim(x.rank() - 1);
  if (gain.numel() != C || bias.numel() != C)
    throw ShapeError("layer_norm affine params must have length " + std::to_string(C));
  const int64_t rows = x.numel() / C;
  std::vector<S> v(x.values().size());
  std::vector<S> xhat(v.size());
  std::vector<S> inv_sigma(static_cast<size_t>(rows));
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (int64_t r = 0; r < rows; ++r) {
    const S* px = xv.data() + r * C;
    S mu = 0;
    for (int64_t c = 0; c < C; ++c) mu += px[c];
    mu /= static_cast<S>(C);
    S var = 0;
    for (int64_t c = 0; c < C; ++c) var += (px[c] - mu) * (px[c] - mu);
    var /= static_cast<S>(C);
    const S is = S(1) / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(r)] = is;
    for (int64_t c = 0; c < C; ++c) {
      const size_t i = static_cast<size_t>(r * C + c);
      xhat[i] = (px[c] - mu) * is;
      v[i] = gv[static_cast<size_t>(c)] * xhat[i] + bv[static_cast<size_t>(c)];
    }
  }
  bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  auto* xn = x.node();
  auto* gn = gain.node();
  auto* bn = bias.node();
  return detail::make_op<S>(
      x.graph(), x.shape(), std::move(v), rg,
      [xn, gn, bn, xhat, inv_sigma, rows, C](detail::Node<S>& o) {
        for (int64_t r = 0; r < rows; ++r) {
          const S* dy = o.grad.data() + r * C;
          const S* xh = xhat.data() + r * C;
          if (gn->requires_grad())
            for (int64_t c = 0; c < C; ++c) gn->grad[static_cast<size_t>(c)] += dy[c] * xh[c];
          if (bn->requires_grad())
            for (int64_t c = 0; c < C; ++c) bn->grad[static_cast<size_t>(c)] += dy[c];
          if (xn->requires_grad()) {
            S m1 = 0, m2 = 0;
            for (int64_t c = 0; c < C; ++c) {
              const S gdy = gn->value[static_cast<size_t>(c)] * dy[c];
              m1 += gdy;
              m2 += gdy * xh[c];
            }
            m1 /= static_cast<S>(C);
            m2 /= static_cast<S>(C);
            const S is = inv_sigma[static_cast<size_t>(r)];
            for (int64_t c = 0; c < C; ++c) {
              const S gdy = gn->value[static_cast<size_t>(c)] * dy[c];
              xn->grad[static_cast<size_t>(r * C + c)] += is * (gdy - m1 - xh[c] * m2);
            }
          }
        }
      });
}

// Per-channel normalisation over the time (first) axis of a [T,C] tensor.
template <typename S>
Tensor<S> instance_norm(Tensor<S> x, S eps) {
  if (x.rank() != 2) throw ShapeError("instance_norm expects [T,C], got " + shape_str(x.shape()));
  const int64_t T = x.dim(0), C = x.dim(1);
  if (T == 0) throw ShapeError("instance_norm on empty input (T = 0)");
  std::vector<S> v(x.values().size());
  std::vector<S> xhat(v.size());
  std::vector<S> inv_sigma(static_cast<size_t>(C));
  const auto& xv = x.values();
  for (int64_t c = 0; c < C; ++c) {
    S mu = 0;
    for (int64_t t = 0; t < T; ++t) mu += xv[static_cast<size_t>(t * C + c)];
    mu /= static_cast<S>(T);
    S var = 0;
    for (int64_t t = 0; t < T; ++t) {
      const S d = xv[static_cast<size_t>(t * C + c)] - mu;
      var += d * d;
    }
    var /= static_cast<S>(T);
    const S is = S(1) / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(c)] = is;
    for (int64_t t = 0; t < T; ++t) {
      const size_t i = static_cast<size_t>(t * C + c);
      xhat[i] = (xv[i] - mu) * is;
      v[i] = xhat[i];
    }
  }
  auto* xn = x.node();
  return detail::make_op<S>(x.graph(), x.shape(), std::move(v), x.requires_grad(),
                            [xn, xhat, inv_sigma, T, C](detail::Node<S>& o) {
                              for (int64_t c = 0; c < C; ++c) {
                                S m1 = 0, m2 = 0;
                                for (int64_t t = 0; t < T; ++t) {
                                  const size_t i = static_cast<size_t>(t * C + c);
                                  m1 += o.grad[i];
                                  m2 += o.grad[i] * xhat[i];
                                }
                                m1 /= static_cast<S>(T);
                                m2 /= static_cast<S>(T);
                                const S is = inv_sigma[static_cast<size_t>(c)];
                                for (int64_t t = 0; t < T; ++t) {
                                  const size_t i = static_cast<size_t>(t * C + c);
                                  xn->grad[i] += is * (o.grad[i] - m1 - xhat[i] * m2);
                                }
                              }
                            });
}

// ---------------------------------------------------------------------------
// structure ops

template <typename S>
Tensor<S> concat_cols(Tensor<S> a, Tensor<S> b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t T = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  std::vector<S> v(static_cast<size_t>(T * (Ca + Cb)));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int64_t t = 0; t < T; ++t) {
    std::copy_n(av.data() + t * Ca, Ca, v.data() + t * (Ca + Cb));
    std::copy_n(bv.data() + t * Cb, Cb, v.data() + t * (Ca + Cb) + Ca);
  }
  bool rg = a.requires_grad() || b.requires_grad();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<S>(a.graph(), {T, Ca + Cb}, std::move(v), rg,
                            [an, bn, T, Ca, Cb](detail::Node<S>& o) {
                              for (int64_t t = 0; t < T; ++t) {
                                if (an->requires_grad())
                                  for (int64_t c = 0; c < Ca; ++c)
                                    an->grad[static_cast<size_t>(t * Ca + c)] +=
                                        o.grad[static_cast<size_t>(t * (Ca + Cb) + c)];
                                if (bn->requires_grad())
                                  for (int64_t c = 0; c < Cb; ++c)
                                    bn->grad[static_cast<size_t>(t * Cb + c)] +=
                                        o.grad[static_cast<size_t>(t * (Ca + Cb) + Ca + c)];
                              }
                            });
}

template <typename S>
Tensor<S> slice_cols(Tensor<S> a, int64_t c0, int64_t c1) {
  if (a.rank() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw ShapeError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                     shape_str(a.shape()));
  const int64_t T = a.dim(0), C = a.dim(1), W = c1 - c0;
  std::vector<S> v(static_cast<size_t>(T * W));
  const auto& av = a.values();
  for (int64_t t = 0; t < T; ++t) std::copy_n(av.data() + t * C + c0, W, v.data() + t * W);
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), {T, W}, std::move(v), a.requires_grad(),
                            [an, T, C, c0, W](detail::Node<S>& o) {
                              for (int64_t t = 0; t < T; ++t)
                                for (int64_t c = 0; c < W; ++c)
                                  an->grad[static_cast<size_t>(t * C + c0 + c)] +=
                                      o.grad[static_cast<size_t>(t * W + c)];
                            });
}

// Row lookup: out[i,:] = table[ids[i],:]. Gradient scatter-adds into the table.
template <typename S>
Tensor<S> embed(Tensor<S> table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embed expects [V,D] table");
  const int64_t V = table.dim(0), D = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw ContractError("embed id " + std::to_string(id) + " out of range [0," +
                          std::to_string(V) + ")");
  const int64_t N = static_cast<int64_t>(ids.size());
  std::vector<S> v(static_cast<size_t>(N * D));
  const auto& tv = table.values();
  for (int64_t i = 0; i < N; ++i)
    std::copy_n(tv.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * D, D,
                v.data() + i * D);
  auto* tn = table.node();
  return detail::make_op<S>(table.graph(), {N, D}, std::move(v), table.requires_grad(),
                            [tn, ids, D](detail::Node<S>& o) {
                              for (size_t i = 0; i < ids.size(); ++i)
                                for (int64_t d = 0; d < D; ++d)
                                  tn->grad[static_cast<size_t>(ids[i] * D + d)] +=
                                      o.grad[i * static_cast<size_t>(D) + static_cast<size_t>(d)];
                            });
}

// out[i] = a[i, ids[i]] for a [N,V] tensor.
template <typename S>
Tensor<S> gather_rows(Tensor<S> a, const std::vector<int>& ids) {
  if (a.rank() != 2 || static_cast<int64_t>(ids.size()) != a.dim(0))
    throw ShapeError("gather_rows: ids length must equal rows of " + shape_str(a.shape()));
  const int64_t V = a.dim(1);
  std::vector<S> v(ids.size());
  const auto& av = a.values();
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= V) throw ContractError("gather_rows id out of range");
    v[i] = av[i * static_cast<size_t>(V) + static_cast<size_t>(ids[i])];
  }
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), {static_cast<int64_t>(ids.size())}, std::move(v),
                            a.requires_grad(), [an, ids, V](detail::Node<S>& o) {
                              for (size_t i = 0; i < ids.size(); ++i)
                                an->grad[i * static_cast<size_t>(V) + static_cast<size_t>(ids[i])] +=
                                    o.grad[i];
                            });
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Tensor<S> sum(Tensor<S> a) {
  S acc = 0;
  for (S x : a.values()) acc += x;
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), {1}, {acc}, a.requires_grad(), [an](detail::Node<S>& o) {
    for (auto& g : an->grad) g += o.grad[0];
  });
}

template <typename S>
Tensor<S> mean(Tensor<S> a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  S acc = 0;
  for (S x : a.values()) acc += x;
  acc *= inv;
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), {1}, {acc}, a.requires_grad(), [an, inv](detail::Node<S>& o) {
    for (auto& g : an->grad) g += inv * o.grad[0];
  });
}

// Scalar dot with a constant weight vector: sum_i w[i] * a[i].
template <typename S>
Tensor<S> weighted_sum(Tensor<S> a, const std::vector<S>& w) {
  if (static_cast<int64_t>(w.size()) != a.numel())
    throw ShapeError("weighted_sum: weight length mismatch");
  S acc = 0;
  const auto& av = a.values();
  for (size_t i = 0; i < w.size(); ++i) acc += w[i] * av[i];
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), {1}, {acc}, a.requires_grad(), [an, w](detail::Node<S>& o) {
    for (size_t i = 0; i < w.size(); ++i) an->grad[i] += w[i] * o.grad[0];
  });
}

// Row-wise dot product of two [N,C] tensors -> [N].
template <typename S>
Tensor<S> rowwise_dot(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "rowwise_dot");
  if (a.rank() != 2) throw ShapeError("rowwise_dot expects rank 2");
  const int64_t N = a.dim(0), C = a.dim(1);
  std::vector<S> v(static_cast<size_t>(N), S(0));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int64_t i = 0; i < N; ++i)
    for (int64_t c = 0; c < C; ++c)
      v[static_cast<size_t>(i)] += av[static_cast<size_t>(i * C + c)] * bv[static_cast<size_t>(i * C + c)];
  bool rg = a.requires_grad() || b.requires_grad();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<S>(a.graph(), {N}, std::move(v), rg, [an, bn, N, C](detail::Node<S>& o) {
    for (int64_t i = 0; i < N; ++i)
      for (int64_t c = 0; c < C; ++c) {
        const size_t k = static_cast<size_t>(i * C + c);
        if (an->requires_grad()) an->grad[k] += o.grad[static_cast<size_t>(i)] * bn->value[k];
        if (bn->requires_grad()) bn->grad[k] += o.grad[static_cast<size_t>(i)] * an->value[k];
      }
  });
}

// 1/sqrt(x + eps), elementwise.
template <typename S>
Tensor<S> rsqrt(Tensor<S> a, S eps) {
  std::vector<S> v(a.values());
  for (auto& x : v) x = S(1) / std::sqrt(x + eps);
  auto* an = a.node();
  return detail::make_op<S>(a.graph(), a.shape(), std::move(v), a.requires_grad(),
                            [an](detail::Node<S>& o) {
                              for (size_t i = 0; i < o.grad.size(); ++i) {
                                const S y = o.value[i];  // (x+eps)^{-1/2}
                                an->grad[i] += o.grad[i] * S(-0.5) * y * y * y;
                              }
                            });
}

// ---------------------------------------------------------------------------
// temporal convolution: x [T,Cin], w [Cout,Cin,K], b [Cout] -> [Tout,Cout]
// Tout = (T + pad_l + pad_r - K) / stride + 1; out-of-range taps read zero.

template <typename S>
Tensor<S> conv1d(Tensor<S> x, Tensor<S> w, Tensor<S> b, int64_t stride, int64_t pad_l,
                 int64_t pad_r) {
  if (x.rank() != 2 || w.rank() != 3) throw ShapeError("conv1d expects x[T,Cin], w[Cout,Cin,K]");
  const int64_t T = x.dim(0), Cin = x.dim(1);
  const int64_t Cout = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Cin)
    throw ShapeError("conv1d channel mismatch: x " + shape_str(x.shape()) + " w " +
                     shape_str(w.shape()));
  if (b.numel() != Cout) throw ShapeError("conv1d bias length mismatch");
  const int64_t span = T + pad_l + pad_r - K;
  if (span < 0 || span % stride != 0)
    throw ShapeError("conv1d length " + std::to_string(T) + " incompatible with stride " +
                     std::to_string(stride));
  const int64_t Tout = span / stride + 1;
  std::vector<S> v(static_cast<size_t>(Tout * Cout));
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  for (int64_t to = 0; to < Tout; ++to)
    for (int64_t co = 0; co < Cout; ++co) {
      S acc = bv[static_cast<size_t>(co)];
      for (int64_t k = 0; k < K; ++k) {
        const int64_t ti = to * stride + k - pad_l;
        if (ti < 0 || ti >= T) continue;
        const S* xr = xv.data() + ti * Cin;
        const S* wr = wv.data() + (co * Cin * K) + k;
        for (int64_t ci = 0; ci < Cin; ++ci) acc += xr[ci] * wr[ci * K];
      }
      v[static_cast<size_t>(to * Cout + co)] = acc;
    }
  bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  auto* xn = x.node();
  auto* wn = w.node();
  auto* bn = b.node();
  return detail::make_op<S>(
      x.graph(), {Tout, Cout}, std::move(v), rg,
      [xn, wn, bn, T, Cin, Cout, K, Tout, stride, pad_l](detail::Node<S>& o) {
        for (int64_t to = 0; to < Tout; ++to)
          for (int64_t co = 0; co < Cout; ++co) {
            const S g = o.grad[static_cast<size_t>(to * Cout + co)];
            if (g == S(0)) continue;
            if (bn->requires_grad()) bn->grad[static_cast<size_t>(co)] += g;
            for (int64_t k = 0; k < K; ++k) {
              const int64_t ti = to * stride + k - pad_l;
              if (ti < 0 || ti >= T) continue;
              for (int64_t ci = 0; ci < Cin; ++ci) {
                const size_t xi = static_cast<size_t>(ti * Cin + ci);
                const size_t wi = static_cast<size_t>(co * Cin * K + ci * K + k);
                if (wn->requires_grad()) wn->grad[wi] += g * xn->value[xi];
                if (xn->requires_grad()) xn->grad[xi] += g * wn->value[wi];
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// CTC loss as a primitive op.
//
// Forward algorithm over the 2U+1 extended label sequence in log space;
// gradient via the backward (beta) recursion and per-frame posteriors.
// `log_probs` is [T,V] of per-frame log probabilities; labels must not
// contain blank. The caller is responsible for the feasibility precheck
// (see ctc_min_frames); an infeasible call is a contract violation.

inline int64_t ctc_min_frames(const std::vector<int>& labels) {
  int64_t repeats = 0;
  for (size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++repeats;
  return static_cast<int64_t>(labels.size()) + repeats;
}

template <typename S>
Tensor<S> ctc_loss_op(Tensor<S> log_probs, const std::vector<int>& labels, int blank) {
  if (log_probs.rank() != 2) throw ShapeError("ctc_loss expects [T,V] log-probs");
  const int64_t T = log_probs.dim(0), V = log_probs.dim(1);
  if (blank < 0 || blank >= V) throw ContractError("ctc blank id out of range");
  for (int l : labels) {
    if (l == blank) throw ContractError("ctc labels must not contain blank");
    if (l < 0 || l >= V) throw ContractError("ctc label id out of range");
  }
  if (T < ctc_min_frames(labels))
    throw ContractError("ctc label sequence infeasible for " + std::to_string(T) + " frames");

  const int64_t U = static_cast<int64_t>(labels.size());
  const int64_t Sx = 2 * U + 1;
  auto ext = [&](int64_t s) -> int { return (s % 2 == 0) ? blank : labels[static_cast<size_t>(s / 2)]; };
  const S ninf = -std::numeric_limits<S>::infinity();
  auto lse2 = [ninf](S a, S b) -> S {
    if (a == ninf) return b;
    if (b == ninf) return a;
    S m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
  };
  const auto& lp = log_probs.values();
  auto lpat = [&](int64_t t, int64_t k) -> S { return lp[static_cast<size_t>(t * V + k)]; };

  std::vector<S> alpha(static_cast<size_t>(T * Sx), ninf);
  alpha[0] = lpat(0, blank);
  if (Sx > 1) alpha[1] = lpat(0, ext(1));
  for (int64_t t = 1; t < T; ++t)
    for (int64_t s = 0; s < Sx; ++s) {
      S acc = alpha[static_cast<size_t>((t - 1) * Sx + s)];
      if (s >= 1) acc = lse2(acc, alpha[static_cast<size_t>((t - 1) * Sx + s - 1)]);
      if (s >= 2 && ext(s) != blank && ext(s) != ext(s - 2))
        acc = lse2(acc, alpha[static_cast<size_t>((t - 1) * Sx + s - 2)]);
      alpha[static_cast<size_t>(t * Sx + s)] = acc == ninf ? ninf : acc + lpat(t, ext(s));
    }
  S log_z = alpha[static_cast<size_t>((T - 1) * Sx + Sx - 1)];
  if (Sx > 1) log_z = lse2(log_z, alpha[static_cast<size_t>((T - 1) * Sx + Sx - 2)]);
  const S loss = -log_z;

  auto* xn = log_probs.node();
  auto labels_c = labels;
  return detail::make_op<S>(
      log_probs.graph(), {1}, {loss}, log_probs.requires_grad(),
      [xn, labels_c, blank, T, V, alpha, log_z, ninf, lse2](detail::Node<S>& o) {
        const int64_t U = static_cast<int64_t>(labels_c.size());
        const int64_t Sx = 2 * U + 1;
        auto ext = [&](int64_t s) -> int {
          return (s % 2 == 0) ? blank : labels_c[static_cast<size_t>(s / 2)];
        };
        auto lpat = [&](int64_t t, int64_t k) -> S {
          return xn->value[static_cast<size_t>(t * V + k)];
        };
        std::vector<S> beta(static_cast<size_t>(T * Sx), ninf);
        beta[static_cast<size_t>((T - 1) * Sx + Sx - 1)] = lpat(T - 1, ext(Sx - 1));
        if (Sx > 1) beta[static_cast<size_t>((T - 1) * Sx + Sx - 2)] = lpat(T - 1, ext(Sx - 2));
        for (int64_t t = T - 2; t >= 0; --t)
          for (int64_t s = 0; s < Sx; ++s) {
            S acc = beta[static_cast<size_t>((t + 1) * Sx + s)];
            if (s + 1 < Sx) acc = lse2(acc, beta[static_cast<size_t>((t + 1) * Sx + s + 1)]);
            if (s + 2 < Sx && ext(s + 2) != blank && ext(s + 2) != ext(s))
              acc = lse2(acc, beta[static_cast<size_t>((t + 1) * Sx + s + 2)]);
            beta[static_cast<size_t>(t * Sx + s)] = acc == ninf ? ninf : acc + lpat(t, ext(s));
          }
        // dLoss/dlp[t,k] = -sum_{s: ext(s)=k} exp(alpha+beta - lp[t,k] - logZ)
        const S g0 = o.grad[0];
        for (int64_t t = 0; t < T; ++t) {
          std::vector<S> acc(static_cast<size_t>(V), ninf);
          for (int64_t s = 0; s < Sx; ++s) {
            const S a = alpha[static_cast<size_t>(t * Sx + s)];
            const S b = beta[static_cast<size_t>(t * Sx + s)];
            if (a == ninf || b == ninf) continue;
            const int k = ext(s);
            acc[static_cast<size_t>(k)] =
                lse2(acc[static_cast<size_t>(k)], a + b - lpat(t, k));
          }
          for (int64_t k = 0; k < V; ++k)
            if (acc[static_cast<size_t>(k)] != ninf)
              xn->grad[static_cast<size_t>(t * V + k)] -=
                  g0 * std::exp(acc[static_cast<size_t>(k)] - log_z);
        }
      });
}

}  // namespace trispeech

#endif  // TRISPEECH_TENSOR_HPP
