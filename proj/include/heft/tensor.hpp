#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace heft {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

class Tape;

// Dense row-major tensor of 64-bit floats. A tensor is either a plain value
// (tape() == nullptr) or additionally registered as a node of exactly one
// tape. Values are treated as immutable once they enter an op; in-place
// mutation through data() is reserved for parameter owners (optimizer,
// initialization) on tensors that are not currently part of a live tape.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != values.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    }
    check_shape();
    data_ = std::make_shared<std::vector<double>>(std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : *t.data_) x = v;
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t rank() const { return shape_.size(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_.front(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  const std::shared_ptr<std::vector<double>>& storage() const { return data_; }

  double item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor has shape " + shape_str(shape_));
    return (*data_)[0];
  }

  double at(std::size_t i) const { return (*data_)[check_index(i)]; }
  double at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw std::invalid_argument("at(i,j): tensor has shape " + shape_str(shape_));
    return (*data_)[check_index(i * shape_[1] + j)];
  }

  void set(std::size_t i, double v) { (*data_)[check_index(i)] = v; }
  void set(std::size_t i, std::size_t j, double v) {
    if (rank() != 2) throw std::invalid_argument("set(i,j): tensor has shape " + shape_str(shape_));
    (*data_)[check_index(i * shape_[1] + j)] = v;
  }

  // Deep copy, detached from any tape.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }

 private:
  void check_shape() const {
    for (auto d : shape_) {
      if (d == 0) throw std::invalid_argument("tensor: zero dimension in shape " + shape_str(shape_));
    }
  }
  std::size_t check_index(std::size_t i) const {
    if (!data_ || i >= data_->size()) {
      throw std::out_of_range("tensor: flat index " + std::to_string(i) + " out of range");
    }
    return i;
  }

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;

  friend class Tape;
};

// Reverse-mode tape. Nodes are appended in forward order; backward visits
// them in reverse, so topological order equals append order by construction.
// An op records a node only when at least one operand is on the tape, which
// means frozen (constant) subgraphs cost nothing and can never receive
// gradients.
class Tape {
 public:
  using Pull = std::function<void(const std::vector<double>& gout, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  // Registers a leaf whose gradient can be queried after backward.
  Tensor watch(const Tensor& value) {
    if (!value.defined()) throw std::invalid_argument("watch: undefined tensor");
    if (value.tape_ == this) return value;
    if (value.tape_) throw std::invalid_argument("watch: tensor already belongs to another tape");
    Tensor t = value;  // shares storage
    t.tape_ = this;
    t.node_ = push_node(t.size(), {}, nullptr);
    return t;
  }

  // Low-level extension point used by the op library: attaches `value` as a
  // new node whose pull function scatters gradients into the parents.
  Tensor record(Tensor value, std::vector<int> parents, Pull pull) {
    if (value.tape_ && value.tape_ != this) {
      throw std::invalid_argument("record: tensor already belongs to another tape");
    }
    value.tape_ = this;
    value.node_ = push_node(value.size(), std::move(parents), std::move(pull));
    return value;
  }

  // Gradient accumulator of a node, zero-initialized on first touch.
  std::vector<double>& grad_buffer(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].out_size, 0.0);
    return g;
  }

  void backward(const Tensor& loss, double seed = 1.0) {
    if (loss.tape_ != this) throw std::invalid_argument("backward: loss is not on this tape");
    if (loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    }
    grads_.assign(nodes_.size(), {});
    grad_buffer(loss.node_)[0] = seed;
    for (int i = loss.node_; i >= 0; --i) {
      const auto& node = nodes_[static_cast<std::size_t>(i)];
      if (!node.pull) continue;
      const auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.empty()) continue;  // unreachable from the loss
      node.pull(g, *this);
    }
    ran_backward_ = true;
  }

  bool ran_backward() const { return ran_backward_; }

  bool has_grad(const Tensor& t) const {
    return t.tape_ == this && ran_backward_ && !grads_[static_cast<std::size_t>(t.node_)].empty();
  }

  // Accumulated gradient for a tensor on this tape. Nodes the loss never
  // reached report zeros of the right shape.
  Tensor grad(const Tensor& t) const {
    if (t.tape_ != this) throw std::invalid_argument("grad: tensor is not on this tape");
    if (!ran_backward_) throw std::logic_error("grad: backward has not been run");
    const auto& g = grads_[static_cast<std::size_t>(t.node_)];
    if (g.empty()) return Tensor(t.shape());
    return Tensor(t.shape(), g);
  }

 private:
  struct Node {
    std::vector<int> parents;
    Pull pull;  // null for leaves
    std::size_t out_size;
  };

  int push_node(std::size_t out_size, std::vector<int> parents, Pull pull) {
    nodes_.push_back(Node{std::move(parents), std::move(pull), out_size});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool ran_backward_ = false;
};

namespace detail {

inline Tape* result_tape(const Tensor& a, const Tensor& b) {
  if (a.tape() && b.tape() && a.tape() != b.tape()) {
    throw std::invalid_argument("op: operands live on different tapes");
  }
  return a.tape() ? a.tape() : b.tape();
}

// c += a[m×k] · b[k×n]. i-k-j order keeps both inner streams contiguous;
// four output rows per sweep reuse each loaded b row.
inline void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c = a[m×k] · b[k×n]; c must be zeroed by the caller.
inline void mm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
  mm_acc(a, b, c, m, k, n);
}

// ga += g[m×n] · bᵀ where b is [k×n]. b is transposed up front so the sweep
// has the same contiguous shape as mm.
inline void mm_acc_gbt(const double* g, const double* b, double* ga, std::size_t m, std::size_t k,
                       std::size_t n) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  mm_acc(g, bt.data(), ga, m, n, k);
}

// gb += aᵀ · g where a is [m×k], g is [m×n]: gb[p,:] += a[i,p] * g[i,:].
// Four input rows per sweep amortize the gb row traffic.
inline void mm_acc_atg(const double* a, const double* g, double* gb, std::size_t m, std::size_t k,
                       std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    const double* g0 = g + i * n;
    const double* g1 = g0 + n;
    const double* g2 = g1 + n;
    const double* g3 = g2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      double* gbrow = gb + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        gbrow[j] += v0 * g0[j] + v1 * g1[j] + v2 * g2[j] + v3 * g3[j];
      }
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* gbrow = gb + p * n;
      for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
    }
  }
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

// rms_norm/softmax accept a single row (rank 1) or a stack of rows (rank 2).
inline std::pair<std::size_t, std::size_t> row_view(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  throw std::invalid_argument(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw std::invalid_argument("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out({m, n});
  detail::mm(a.data(), b.data(), out.data(), m, k, n);
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  const int pa = a.node(), pb = b.node();
  auto sa = a.storage();
  auto sb = b.storage();
  return tape->record(std::move(out), {pa, pb}, [=](const std::vector<double>& g, Tape& t) {
    if (pa >= 0) detail::mm_acc_gbt(g.data(), sb->data(), t.grad_buffer(pa).data(), m, k, n);
    if (pb >= 0) detail::mm_acc_atg(sa->data(), g.data(), t.grad_buffer(pb).data(), m, k, n);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  Tape* tape = a.tape();
  if (!tape) return out;
  const int pa = a.node();
  return tape->record(std::move(out), {pa}, [=](const std::vector<double>& g, Tape& t) {
    if (pa < 0) return;
    auto& ga = t.grad_buffer(pa);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
    }
  });
}

// Elementwise addition. The single permitted broadcast is a trailing vector
// added to every row of a matrix (bias), which keeps gradient rules auditable.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool bias = !same && a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0];
  if (!same && !bias) {
    throw std::invalid_argument("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  Tensor out(a.shape());
  double* o = out.data();
  const double* aa = a.data();
  const double* bb = b.data();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = aa[i] + bb[i];
  } else {
    const std::size_t rows = a.shape()[0], d = a.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) o[r * d + j] = aa[r * d + j] + bb[j];
    }
  }
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  const int pa = a.node(), pb = b.node();
  const std::size_t bsize = b.size();
  return tape->record(std::move(out), {pa, pb}, [=](const std::vector<double>& g, Tape& t) {
    if (pa >= 0) {
      auto& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb >= 0) {
      auto& gb = t.grad_buffer(pb);
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      } else {
        const std::size_t d = bsize;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("sub: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  Tensor out(a.shape());
  double* o = out.data();
  const double* aa = a.data();
  const double* bb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = aa[i] - bb[i];
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  const int pa = a.node(), pb = b.node();
  return tape->record(std::move(out), {pa, pb}, [=](const std::vector<double>& g, Tape& t) {
    if (pa >= 0) {
      auto& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb >= 0) {
      auto& gb = t.grad_buffer(pb);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const double* aa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = aa[i] * c;
  Tape* tape = a.tape();
  if (!tape) return out;
  const int pa = a.node();
  return tape->record(std::move(out), {pa}, [=](const std::vector<double>& g, Tape& t) {
    if (pa < 0) return;
    auto& ga = t.grad_buffer(pa);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Tensor mul_elem(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mul_elem: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  Tensor out(a.shape());
  double* o = out.data();
  const double* aa = a.data();
  const double* bb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = aa[i] * bb[i];
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  const int pa = a.node(), pb = b.node();
  auto sa = a.storage();
  auto sb = b.storage();
  return tape->record(std::move(out), {pa, pb}, [=](const std::vector<double>& g, Tape& t) {
    if (pa >= 0) {
      auto& ga = t.grad_buffer(pa);
      const double* other = sb->data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * other[i];
    }
    if (pb >= 0) {
      auto& gb = t.grad_buffer(pb);
      const double* other = sa->data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * other[i];
    }
  });
}

// Row-wise RMS normalization with a learned gain:
// y[r,j] = x[r,j] * gain[j] / sqrt(mean_j(x[r,j]^2) + eps).
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  const auto [rows, d] = detail::row_view(x, "rms_norm");
  if (gain.rank() != 1 || gain.shape()[0] != d) {
    throw std::invalid_argument("rms_norm: gain " + shape_str(gain.shape()) + " does not match row width " +
                                std::to_string(d));
  }
  if (eps < 0.0) throw std::invalid_argument("rms_norm: eps must be non-negative");
  Tensor out(x.shape());
  std::vector<double> inv_rms(rows);
  const double* xv = x.data();
  const double* gv = gain.data();
  double* ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += row[j] * row[j];
    ms = ms / static_cast<double>(d) + eps;
    const double s = 1.0 / std::sqrt(ms);
    inv_rms[r] = s;
    for (std::size_t j = 0; j < d; ++j) ov[r * d + j] = row[j] * gv[j] * s;
  }
  Tape* tape = detail::result_tape(x, gain);
  if (!tape) return out;
  const int px = x.node(), pg = gain.node();
  auto sx = x.storage();
  auto sg = gain.storage();
  return tape->record(std::move(out), {px, pg},
                      [=, inv = std::move(inv_rms)](const std::vector<double>& g, Tape& t) {
    const double* xd = sx->data();
    const double* gd = sg->data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xd + r * d;
      const double* grow = g.data() + r * d;
      const double s = inv[r];
      if (px >= 0) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += grow[j] * gd[j] * row[j];
        const double c = dot * s * s * s / static_cast<double>(d);
        auto& gx = t.grad_buffer(px);
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += grow[j] * gd[j] * s - row[j] * c;
      }
      if (pg >= 0) {
        auto& gg = t.grad_buffer(pg);
        for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * row[j] * s;
      }
    }
  });
}

inline Tensor softmax_rows(const Tensor& x) {
  const auto [rows, d] = detail::row_view(x, "softmax_rows");
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double mx = row[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double e = std::exp(row[j] - mx);
      ov[r * d + j] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < d; ++j) ov[r * d + j] *= inv;
  }
  Tape* tape = x.tape();
  if (!tape) return out;
  const int px = x.node();
  auto so = out.storage();  // gradient uses the probabilities themselves
  return tape->record(std::move(out), {px}, [=](const std::vector<double>& g, Tape& t) {
    if (px < 0) return;
    auto& gx = t.grad_buffer(px);
    const double* p = so->data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* prow = p + r * d;
      const double* grow = g.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += grow[j] * prow[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += prow[j] * (grow[j] - dot);
    }
  });
}

inline Tensor silu(const Tensor& x) {
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-xv[i]));
    ov[i] = xv[i] * s;
  }
  Tape* tape = x.tape();
  if (!tape) return out;
  const int px = x.node();
  auto sx = x.storage();
  return tape->record(std::move(out), {px}, [=](const std::vector<double>& g, Tape& t) {
    if (px < 0) return;
    auto& gx = t.grad_buffer(px);
    const double* xd = sx->data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xd[i]));
      gx[i] += g[i] * s * (1.0 + xd[i] * (1.0 - s));
    }
  });
}

inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  detail::require_matrix(table, "embedding_lookup");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: empty id sequence");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
                              std::to_string(v) + ")");
    }
  }
  Tensor out({ids.size(), d});
  const double* tv = table.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* row = tv + static_cast<std::size_t>(ids[i]) * d;
    for (std::size_t j = 0; j < d; ++j) ov[i * d + j] = row[j];
  }
  Tape* tape = table.tape();
  if (!tape) return out;
  const int pt = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return tape->record(std::move(out), {pt}, [=, ids = std::move(idv)](const std::vector<double>& g, Tape& t) {
    if (pt < 0) return;
    auto& gt = t.grad_buffer(pt);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* row = gt.data() + static_cast<std::size_t>(ids[i]) * d;
      const double* grow = g.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += grow[j];
    }
  });
}

// Mean negative log-likelihood over supervised rows. A negative target id
// marks the row as unsupervised and excluded from the mean.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != rows) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(rows) + " rows");
  }
  std::size_t count = 0;
  for (int t : targets) {
    if (t >= static_cast<int>(v)) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " out of range [0," +
                              std::to_string(v) + ")");
    }
    if (t >= 0) ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: no supervised rows");
  const double* lv = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    const double* row = lv + r * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[static_cast<std::size_t>(targets[r])];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  Tape* tape = logits.tape();
  if (!tape) return out;
  const int pl = logits.node();
  auto sl = logits.storage();
  std::vector<int> tv(targets.begin(), targets.end());
  return tape->record(std::move(out), {pl},
                      [=, targets = std::move(tv)](const std::vector<double>& g, Tape& t) {
    if (pl < 0) return;
    auto& gl = t.grad_buffer(pl);
    const double* ld = sl->data();
    const double w = g[0] / static_cast<double>(count);
    for (std::size_t r = 0; r < rows; ++r) {
      if (targets[r] < 0) continue;
      const double* row = ld + r * v;
      double* grow = gl.data() + r * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < v; ++j) grow[j] += w * std::exp(row[j] - mx) * inv;
      grow[static_cast<std::size_t>(targets[r])] -= w;
    }
  });
}

inline Tensor slice_rows(const Tensor& x, std::size_t first, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (count == 0 || first + count > rows) {
    throw std::out_of_range("slice_rows: rows [" + std::to_string(first) + "," +
                            std::to_string(first + count) + ") out of " + std::to_string(rows));
  }
  Tensor out({count, d});
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < count * d; ++i) ov[i] = xv[first * d + i];
  Tape* tape = x.tape();
  if (!tape) return out;
  const int px = x.node();
  return tape->record(std::move(out), {px}, [=](const std::vector<double>& g, Tape& t) {
    if (px < 0) return;
    auto& gx = t.grad_buffer(px);
    for (std::size_t i = 0; i < g.size(); ++i) gx[first * d + i] += g[i];
  });
}

// Copy of x with rows [first, first+rep.rows) replaced by rep.
inline Tensor replace_rows(const Tensor& x, std::size_t first, const Tensor& rep) {
  detail::require_matrix(x, "replace_rows");
  detail::require_matrix(rep, "replace_rows");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  const std::size_t count = rep.shape()[0];
  if (rep.shape()[1] != d || first + count > rows) {
    throw std::out_of_range("replace_rows: block " + shape_str(rep.shape()) + " at row " +
                            std::to_string(first) + " does not fit " + shape_str(x.shape()));
  }
  Tensor out = x.clone();
  double* ov = out.data();
  const double* rv = rep.data();
  for (std::size_t i = 0; i < count * d; ++i) ov[first * d + i] = rv[i];
  Tape* tape = detail::result_tape(x, rep);
  if (!tape) return out;
  const int px = x.node(), pr = rep.node();
  return tape->record(std::move(out), {px, pr}, [=](const std::vector<double>& g, Tape& t) {
    if (px >= 0) {
      auto& gx = t.grad_buffer(px);
      for (std::size_t i = 0; i < first * d; ++i) gx[i] += g[i];
      for (std::size_t i = (first + count) * d; i < g.size(); ++i) gx[i] += g[i];
    }
    if (pr >= 0) {
      auto& gr = t.grad_buffer(pr);
      for (std::size_t i = 0; i < count * d; ++i) gr[i] += g[first * d + i];
    }
  });
}

inline Tensor slice_cols(const Tensor& x, std::size_t first, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (count == 0 || first + count > d) {
    throw std::out_of_range("slice_cols: cols [" + std::to_string(first) + "," +
                            std::to_string(first + count) + ") out of " + std::to_string(d));
  }
  Tensor out({rows, count});
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < count; ++j) ov[r * count + j] = xv[r * d + first + j];
  }
  Tape* tape = x.tape();
  if (!tape) return out;
  const int px = x.node();
  return tape->record(std::move(out), {px}, [=](const std::vector<double>& g, Tape& t) {
    if (px < 0) return;
    auto& gx = t.grad_buffer(px);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) gx[r * d + first + j] += g[r * count + j];
    }
  });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t rows = parts.front().rank() == 2 ? parts.front().shape()[0] : 0;
  std::size_t total = 0;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.shape()[0] != rows) {
      throw std::invalid_argument("concat_cols: row counts differ: " + shape_str(parts.front().shape()) +
                                  " vs " + shape_str(p.shape()));
    }
    total += p.shape()[1];
    if (p.tape()) {
      if (tape && tape != p.tape()) throw std::invalid_argument("concat_cols: parts on different tapes");
      tape = p.tape();
    }
  }
  Tensor out({rows, total});
  double* ov = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    const double* pv = p.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) ov[r * total + offset + j] = pv[r * w + j];
    }
    offset += w;
  }
  if (!tape) return out;
  std::vector<int> nodes;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.shape()[1]);
  }
  std::vector<int> parents = nodes;
  return tape->record(std::move(out), std::move(parents),
                      [=, nodes = std::move(nodes), widths = std::move(widths)](
                          const std::vector<double>& g, Tape& t) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      const std::size_t w = widths[p];
      if (nodes[p] >= 0) {
        auto& gp = t.grad_buffer(nodes[p]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + off + j];
        }
      }
      off += w;
    }
  });
}

// Multi-head scaled dot-product attention with a causal mask, fused into one
// node. Position t attends to positions <= t only; masked entries are never
// computed, so causality is exact by construction. q, k, v are [n x d] with
// head h occupying columns [h*hd, (h+1)*hd).
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               std::size_t n_heads) {
  detail::require_matrix(q, "causal_attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw std::invalid_argument("causal_attention: q/k/v shapes differ: " + shape_str(q.shape()) +
                                " " + shape_str(k.shape()) + " " + shape_str(v.shape()));
  }
  const std::size_t n = q.shape()[0], d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) {
    throw std::invalid_argument("causal_attention: width " + std::to_string(d) +
                                " is not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor out({n, d});
  // per-head attention probabilities, kept for backward
  auto probs = std::make_shared<std::vector<double>>(n_heads * n * n, 0.0);
  {
    const double* qd = q.data();
    const double* kd = k.data();
    const double* vd = v.data();
    double* od = out.data();
    std::vector<double> row(n);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * hd;
      double* p = probs->data() + h * n * n;
      for (std::size_t t = 0; t < n; ++t) {
        const double* qrow = qd + t * d + c0;
        double mx = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* krow = kd + s * d + c0;
          double dot = 0.0;
          for (std::size_t i = 0; i < hd; ++i) dot += qrow[i] * krow[i];
          row[s] = dot * inv;
          mx = std::max(mx, row[s]);
        }
        double sum = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          row[s] = std::exp(row[s] - mx);
          sum += row[s];
        }
        const double norm = 1.0 / sum;
        double* prow = p + t * n;
        double* orow = od + t * d + c0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double w = row[s] * norm;
          prow[s] = w;
          const double* vrow = vd + s * d + c0;
          for (std::size_t i = 0; i < hd; ++i) orow[i] += w * vrow[i];
        }
      }
    }
  }

  Tape* tape = detail::result_tape(q, k);
  if (v.tape()) {
    if (tape && tape != v.tape()) {
      throw std::invalid_argument("causal_attention: operands on different tapes");
    }
    tape = v.tape();
  }
  if (!tape) return out;
  const int pq = q.node(), pk = k.node(), pv = v.node();
  auto sq = q.storage();
  auto sk = k.storage();
  auto sv = v.storage();
  return tape->record(std::move(out), {pq, pk, pv}, [=](const std::vector<double>& g, Tape& t) {
    const double* qd = sq->data();
    const double* kd = sk->data();
    const double* vd = sv->data();
    double* gq = pq >= 0 ? t.grad_buffer(pq).data() : nullptr;
    double* gk = pk >= 0 ? t.grad_buffer(pk).data() : nullptr;
    double* gv = pv >= 0 ? t.grad_buffer(pv).data() : nullptr;
    std::vector<double> gp(n);   // dL/d prob over one row
    std::vector<double> gs(n);   // dL/d score over one row
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * hd;
      const double* p = probs->data() + h * n * n;
      for (std::size_t t_pos = 0; t_pos < n; ++t_pos) {
        const double* grow = g.data() + t_pos * d + c0;
        const double* prow = p + t_pos * n;
        double dot = 0.0;
        for (std::size_t s = 0; s <= t_pos; ++s) {
          const double* vrow = vd + s * d + c0;
          double acc = 0.0;
          for (std::size_t i = 0; i < hd; ++i) acc += grow[i] * vrow[i];
          gp[s] = acc;
          dot += acc * prow[s];
        }
        if (gv) {
          for (std::size_t s = 0; s <= t_pos; ++s) {
            const double w = prow[s];
            double* gvrow = gv + s * d + c0;
            for (std::size_t i = 0; i < hd; ++i) gvrow[i] += w * grow[i];
          }
        }
        for (std::size_t s = 0; s <= t_pos; ++s) gs[s] = prow[s] * (gp[s] - dot) * inv;
        if (gq) {
          double* gqrow = gq + t_pos * d + c0;
          for (std::size_t s = 0; s <= t_pos; ++s) {
            const double w = gs[s];
            const double* krow = kd + s * d + c0;
            for (std::size_t i = 0; i < hd; ++i) gqrow[i] += w * krow[i];
          }
        }
        if (gk) {
          const double* qrow = qd + t_pos * d + c0;
          for (std::size_t s = 0; s <= t_pos; ++s) {
            const double w = gs[s];
            double* gkrow = gk + s * d + c0;
            for (std::size_t i = 0; i < hd; ++i) gkrow[i] += w * qrow[i];
          }
        }
      }
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data(), x.data() + x.size()));
  Tape* tape = x.tape();
  if (!tape) return out;
  const int px = x.node();
  return tape->record(std::move(out), {px}, [=](const std::vector<double>& g, Tape& t) {
    if (px < 0) return;
    auto& gx = t.grad_buffer(px);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  const double* xv = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) s += xv[i];
  Tensor out = Tensor::scalar(s);
  Tape* tape = x.tape();
  if (!tape) return out;
  const int px = x.node();
  const std::size_t n = x.size();
  return tape->record(std::move(out), {px}, [=](const std::vector<double>& g, Tape& t) {
    if (px < 0) return;
    auto& gx = t.grad_buffer(px);
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
  });
}

// Central-difference gradient estimate of a scalar function. The probe tensor
// is a detached copy; nothing here ever touches a tape, so this stays a valid
// independent oracle for backward().
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
  if (step <= 0.0) throw std::invalid_argument("fd_gradient: step must be positive");
  Tensor probe = x.clone();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + step;
    const double hi = f(probe);
    probe.data()[i] = saved - step;
    const double lo = f(probe);
    probe.data()[i] = saved;
    out.data()[i] = (hi - lo) / (2.0 * step);
  }
  return out;
}

}  // namespace heft
