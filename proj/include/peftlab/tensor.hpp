#pragma once

// Reverse-mode automatic differentiation on dense 64-bit tensors.
//
// A Tensor is a shared handle to a flat row-major buffer plus an optional
// gradient slot. Operations record backward closures on a Tape; calling
// Tape::backward(loss) walks the tape in reverse and accumulates dLoss/dx
// into every gradient slot reachable from the loss. Tensors marked constant
// carry no gradient slot and are skipped by backpropagation entirely.
//
// The operation set is deliberately small: add/sub/mul/scale, matmul,
// transpose, softmax, layer_norm, gelu, gather (embedding lookup), concat,
// slice, cross_entropy and scalar reductions. That is exactly what the
// transformer forward pass and the embedding-space attack need.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace peftlab {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 gives a portable bit stream; the floating
// point derivations below avoid the implementation-defined std distributions
// so that a (seed, config) pair pins results down to the bit.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

  // Independent stream derived from this seed and a salt.
  Rng fork(uint64_t salt) const { return Rng(splitmix64(seed_ ^ splitmix64(salt))); }

  uint64_t bits() { return gen_(); }

  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  // Uniform integer in [0, n).
  int64_t below(int64_t n) {
    return int64_t((static_cast<__uint128_t>(gen_()) * static_cast<uint64_t>(n)) >> 64);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      std::swap(v[size_t(i)], v[size_t(below(i + 1))]);
    }
  }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

struct GradSlot {
  std::vector<double> g;  // empty until first accumulation
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0, true); }

  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v, true); }

  static Tensor from(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), 0.0, true);
    if (int64_t(data.size()) != t.size()) {
      throw std::invalid_argument("Tensor::from: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(t.shape()));
    }
    *t.data_ = std::move(data);
    return t;
  }

  // Constant tensors never receive a gradient slot.
  static Tensor constant(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.gslot_.reset();
    return t;
  }

  static Tensor constant_full(Shape shape, double v) {
    Tensor t(std::move(shape), v, false);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0) {
    Tensor t(std::move(shape), 0.0, true);
    for (auto& x : *t.data_) x = sigma * rng.normal();
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t size() const { return int64_t(data_ ? data_->size() : 0); }
  int64_t rank() const { return int64_t(shape_.size()); }

  // Rank 1 tensors are treated as a single row where a matrix is expected.
  int64_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  int64_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

  std::vector<double>& data() { return *data_; }
  const std::vector<double>& data() const { return *data_; }
  double* ptr() { return data_->data(); }
  const double* ptr() const { return data_->data(); }

  double scalar() const {
    if (size() != 1) {
      throw std::invalid_argument("Tensor::scalar: tensor has " + std::to_string(size()) +
                                  " elements");
    }
    return (*data_)[0];
  }

  bool defined() const { return bool(data_); }
  bool is_constant() const { return !gslot_; }
  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b) {
    if (b && is_constant()) {
      throw std::logic_error("set_requires_grad: tensor is marked constant");
    }
    requires_grad_ = b;
  }

  int64_t node() const { return node_; }
  void set_node(int64_t n) { node_ = n; }

  bool wants_grad() const { return gslot_ && (requires_grad_ || node_ >= 0); }

  bool has_grad() const { return gslot_ && !gslot_->g.empty(); }

  std::vector<double>& grad() {
    if (!has_grad()) throw std::logic_error("Tensor::grad: no gradient accumulated");
    return gslot_->g;
  }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw std::logic_error("Tensor::grad: no gradient accumulated");
    return gslot_->g;
  }

  // Allocates (zeroed) on first use. The slot is shared across all copies of
  // the handle, so this is logically const.
  std::vector<double>& ensure_grad() const {
    if (!gslot_) throw std::logic_error("ensure_grad: tensor is marked constant");
    if (gslot_->g.empty()) gslot_->g.assign(size_t(size()), 0.0);
    return gslot_->g;
  }

  void zero_grad() {
    if (gslot_ && !gslot_->g.empty()) std::fill(gslot_->g.begin(), gslot_->g.end(), 0.0);
  }

  // Deep copy of the value; fresh grad slot, detached from any tape.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    if (gslot_) t.gslot_ = std::make_shared<GradSlot>();
    t.requires_grad_ = requires_grad_;
    return t;
  }

  double& at(int64_t r, int64_t c) { return (*data_)[size_t(r * cols() + c)]; }
  double at(int64_t r, int64_t c) const { return (*data_)[size_t(r * cols() + c)]; }

 private:
  Tensor(Shape shape, double fill, bool with_grad_slot)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(size_t(numel(shape_)), fill)) {
    if (with_grad_slot) gslot_ = std::make_shared<GradSlot>();
  }

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<GradSlot> gslot_;
  bool requires_grad_ = false;
  int64_t node_ = -1;  // index into the tape that produced this tensor
};

// ---------------------------------------------------------------------------
// Raw matrix kernels (row-major). The ikj loop order keeps the inner loop
// contiguous in both b and c.
// ---------------------------------------------------------------------------
namespace kernels {

inline void matmul_nn(const double* a, const double* b, double* c, int64_t m, int64_t k,
                      int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a^T[.] * b where a is [k x m]
inline void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k,
                      int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b^T where b is [n x k]
inline void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k,
                      int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double dot = 0.0;
      for (int64_t p = 0; p < k; ++p) dot += arow[p] * brow[p];
      if (accumulate) crow[j] += dot;
      else crow[j] = dot;
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_grad_; }
  int64_t num_ops() const { return int64_t(backward_.size()); }

  // Registers an op output. The backward closure must check that its output
  // gradient exists before doing work.
  int64_t emit(Tensor& out, std::function<void()> backward) {
    if (!record_grad_) return -1;
    backward_.push_back(std::move(backward));
    int64_t id = int64_t(backward_.size()) - 1;
    out.set_node(id);
    return id;
  }

  // Populates gradient slots of every non-constant ancestor of `loss`.
  // Gradients accumulate additively, both across uses within the graph and
  // across repeated backward calls.
  void backward(Tensor& loss) {
    if (loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(loss.shape()));
    }
    if (loss.node() < 0) {
      throw std::invalid_argument("backward: loss is not connected to this tape");
    }
    loss.ensure_grad()[0] += 1.0;
    for (int64_t i = loss.node(); i >= 0; --i) backward_[size_t(i)]();
  }

 private:
  std::vector<std::function<void()>> backward_;
  bool record_grad_;
};

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor make_output(const Tape& tape, Shape shape) {
  if (tape.recording()) return Tensor::zeros(std::move(shape));
  return Tensor::constant_full(std::move(shape), 0.0);
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// out = a + b. b may be a single row broadcast over the rows of a.
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  const bool row_bcast = (b.rows() == 1 && a.rows() > 1 && a.cols() == b.cols());
  if (!row_bcast) detail::check_same_shape("add", a, b);
  Tensor out = detail::make_output(tape, a.shape());
  const int64_t m = a.rows(), n = a.cols();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.ptr()[i * n + j] = a.ptr()[i * n + j] + b.ptr()[row_bcast ? j : i * n + j];
  tape.emit(out, [a, b, out, m, n, row_bcast]() mutable {
    if (!out.has_grad()) return;
    const auto& g = out.grad();
    if (a.wants_grad()) {
      auto& ga = a.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.wants_grad()) {
      auto& gb = b.ensure_grad();
      if (row_bcast) {
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) gb[size_t(j)] += g[size_t(i * n + j)];
      } else {
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    }
  });
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  Tensor out = detail::make_output(tape, a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  tape.emit(out, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const auto& g = out.grad();
    if (a.wants_grad()) {
      auto& ga = a.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.wants_grad()) {
      auto& gb = b.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  Tensor out = detail::make_output(tape, a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  tape.emit(out, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const auto& g = out.grad();
    if (a.wants_grad()) {
      auto& ga = a.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.ptr()[i];
    }
    if (b.wants_grad()) {
      auto& gb = b.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.ptr()[i];
    }
  });
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double s) {
  Tensor out = detail::make_output(tape, a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = s * a.ptr()[i];
  tape.emit(out, [a, out, s]() mutable {
    if (!out.has_grad() || !a.wants_grad()) return;
    const auto& g = out.grad();
    auto& ga = a.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
  return out;
}

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = detail::make_output(tape, {m, n});
  kernels::matmul_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
  tape.emit(out, [a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (a.wants_grad()) kernels::matmul_nt(g, b.ptr(), a.ensure_grad().data(), m, n, k, true);
    if (b.wants_grad()) kernels::matmul_tn(a.ptr(), g, b.ensure_grad().data(), k, m, n, true);
  });
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose: rank-2 tensor required, got " +
                                shape_str(a.shape()));
  }
  const int64_t m = a.rows(), n = a.cols();
  Tensor out = detail::make_output(tape, {n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.ptr()[j * m + i] = a.ptr()[i * n + j];
  tape.emit(out, [a, out, m, n]() mutable {
    if (!out.has_grad() || !a.wants_grad()) return;
    const auto& g = out.grad();
    auto& ga = a.ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) ga[size_t(i * n + j)] += g[size_t(j * m + i)];
  });
  return out;
}

// Softmax along the last axis (axis = -1 or rank-1), or axis 0 of a matrix.
inline Tensor softmax(Tape& tape, const Tensor& a, int axis = -1) {
  const int64_t r = a.rank();
  if (r < 1 || r > 2) {
    throw std::invalid_argument("softmax: rank 1 or 2 required, got " + shape_str(a.shape()));
  }
  const int norm_axis = axis < 0 ? int(r) + axis : axis;
  if (norm_axis < 0 || norm_axis >= int(r)) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " invalid for shape " + shape_str(a.shape()));
  }
  if (r == 2 && norm_axis == 0) {
    Tensor t = transpose(tape, a);
    Tensor s = softmax(tape, t, -1);
    return transpose(tape, s);
  }
  const int64_t m = a.rows(), n = a.cols();
  Tensor out = detail::make_output(tape, a.shape());
  for (int64_t i = 0; i < m; ++i) {
    const double* x = a.ptr() + i * n;
    double* y = out.ptr() + i * n;
    double mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int64_t j = 0; j < n; ++j) y[j] /= z;
  }
  tape.emit(out, [a, out, m, n]() mutable {
    if (!out.has_grad() || !a.wants_grad()) return;
    const auto& g = out.grad();
    auto& ga = a.ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      const double* y = out.ptr() + i * n;
      const double* gi = g.data() + i * n;
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += gi[j] * y[j];
      double* go = ga.data() + i * n;
      for (int64_t j = 0; j < n; ++j) go[j] += y[j] * (gi[j] - dot);
    }
  });
  return out;
}

// Per-row standardization over the last dimension followed by gamma/beta.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const int64_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n) {
    throw std::invalid_argument("layer_norm: gamma/beta must match last dim " +
                                std::to_string(n) + ", got " + shape_str(gamma.shape()) +
                                " and " + shape_str(beta.shape()));
  }
  Tensor out = detail::make_output(tape, x.shape());
  // Cache per-row inverse stddev and normalized values for the backward pass.
  auto inv_std = std::make_shared<std::vector<double>>(size_t(m));
  auto xhat = std::make_shared<std::vector<double>>(size_t(m * n));
  for (int64_t i = 0; i < m; ++i) {
    const double* xi = x.ptr() + i * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += xi[j];
    mean /= double(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= double(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[size_t(i)] = is;
    double* h = xhat->data() + i * n;
    double* y = out.ptr() + i * n;
    for (int64_t j = 0; j < n; ++j) {
      h[j] = (xi[j] - mean) * is;
      y[j] = gamma.ptr()[j] * h[j] + beta.ptr()[j];
    }
  }
  tape.emit(out, [x, gamma, beta, out, inv_std, xhat, m, n]() mutable {
    if (!out.has_grad()) return;
    const auto& g = out.grad();
    for (int64_t i = 0; i < m; ++i) {
      const double* gi = g.data() + i * n;
      const double* h = xhat->data() + i * n;
      if (gamma.wants_grad()) {
        auto& gg = gamma.ensure_grad();
        for (int64_t j = 0; j < n; ++j) gg[size_t(j)] += gi[j] * h[j];
      }
      if (beta.wants_grad()) {
        auto& gb = beta.ensure_grad();
        for (int64_t j = 0; j < n; ++j) gb[size_t(j)] += gi[j];
      }
      if (x.wants_grad()) {
        auto& gx = x.ensure_grad();
        double sum_gy = 0.0, sum_gyh = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          const double gy = gi[j] * gamma.ptr()[j];
          sum_gy += gy;
          sum_gyh += gy * h[j];
        }
        const double is = (*inv_std)[size_t(i)];
        double* go = gx.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
          const double gy = gi[j] * gamma.ptr()[j];
          go[j] += is * (gy - sum_gy / double(n) - h[j] * sum_gyh / double(n));
        }
      }
    }
  });
  return out;
}

inline Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor out = detail::make_output(tape, x.shape());
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (int64_t i = 0; i < x.size(); ++i) {
    const double v = x.ptr()[i];
    out.ptr()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  tape.emit(out, [x, out]() mutable {
    if (!out.has_grad() || !x.wants_grad()) return;
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    const auto& g = out.grad();
    auto& gx = x.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      const double v = x.ptr()[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
  return out;
}

// Embedding lookup: out[i, :] = table[idx[i], :]. Backward scatter-adds row
// gradients into the table.
inline Tensor gather_rows(Tape& tape, const Tensor& table, const std::vector<int>& idx) {
  if (table.rank() != 2) {
    throw std::invalid_argument("gather_rows: table must be rank 2, got " +
                                shape_str(table.shape()));
  }
  const int64_t rows = table.rows(), n = table.cols();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]) + " at position " +
                              std::to_string(i) + " out of range [0, " + std::to_string(rows) +
                              ")");
    }
  }
  Tensor out = detail::make_output(tape, {int64_t(idx.size()), n});
  for (size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(table.ptr() + int64_t(idx[i]) * n, n, out.ptr() + int64_t(i) * n);
  }
  tape.emit(out, [table, out, idx, n]() mutable {
    if (!out.has_grad() || !table.wants_grad()) return;
    const auto& g = out.grad();
    auto& gt = table.ensure_grad();
    for (size_t i = 0; i < idx.size(); ++i) {
      const double* gi = g.data() + int64_t(i) * n;
      double* trow = gt.data() + int64_t(idx[i]) * n;
      for (int64_t j = 0; j < n; ++j) trow[j] += gi[j];
    }
  });
  return out;
}

inline Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const int64_t n = a.cols(), ra = a.rows(), rb = b.rows();
  Tensor out = detail::make_output(tape, {ra + rb, n});
  std::copy_n(a.ptr(), ra * n, out.ptr());
  std::copy_n(b.ptr(), rb * n, out.ptr() + ra * n);
  tape.emit(out, [a, b, out, ra, rb, n]() mutable {
    if (!out.has_grad()) return;
    const auto& g = out.grad();
    if (a.wants_grad()) {
      auto& ga = a.ensure_grad();
      for (int64_t i = 0; i < ra * n; ++i) ga[size_t(i)] += g[size_t(i)];
    }
    if (b.wants_grad()) {
      auto& gb = b.ensure_grad();
      for (int64_t i = 0; i < rb * n; ++i) gb[size_t(i)] += g[size_t(ra * n + i)];
    }
  });
  return out;
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no tensors given");
  const int64_t m = parts[0].rows();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(p.shape()));
    }
    total += p.cols();
  }
  Tensor out = detail::make_output(tape, {m, total});
  int64_t off = 0;
  for (const auto& p : parts) {
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(p.ptr() + i * p.cols(), p.cols(), out.ptr() + i * total + off);
    off += p.cols();
  }
  tape.emit(out, [parts, out, m, total]() mutable {
    if (!out.has_grad()) return;
    const auto& g = out.grad();
    int64_t off = 0;
    for (auto& p : parts) {
      const int64_t n = p.cols();
      if (p.wants_grad()) {
        auto& gp = p.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) gp[size_t(i * n + j)] += g[size_t(i * total + off + j)];
      }
      off += n;
    }
  });
  return out;
}

inline Tensor slice_rows(Tape& tape, const Tensor& a, int64_t r0, int64_t r1) {
  if (r0 < 0 || r1 < r0 || r1 > a.rows()) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + ", " +
                                std::to_string(r1) + ") invalid for " + shape_str(a.shape()));
  }
  const int64_t n = a.cols();
  Tensor out = detail::make_output(tape, {r1 - r0, n});
  std::copy_n(a.ptr() + r0 * n, (r1 - r0) * n, out.ptr());
  tape.emit(out, [a, out, r0, r1, n]() mutable {
    if (!out.has_grad() || !a.wants_grad()) return;
    const auto& g = out.grad();
    auto& ga = a.ensure_grad();
    for (int64_t i = 0; i < (r1 - r0) * n; ++i) ga[size_t(r0 * n + i)] += g[size_t(i)];
  });
  return out;
}

inline Tensor slice_cols(Tape& tape, const Tensor& a, int64_t c0, int64_t c1) {
  if (c0 < 0 || c1 < c0 || c1 > a.cols()) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") invalid for " + shape_str(a.shape()));
  }
  const int64_t m = a.rows(), n = a.cols(), w = c1 - c0;
  Tensor out = detail::make_output(tape, {m, w});
  for (int64_t i = 0; i < m; ++i) std::copy_n(a.ptr() + i * n + c0, w, out.ptr() + i * w);
  tape.emit(out, [a, out, c0, m, n, w]() mutable {
    if (!out.has_grad() || !a.wants_grad()) return;
    const auto& g = out.grad();
    auto& ga = a.ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) ga[size_t(i * n + c0 + j)] += g[size_t(i * w + j)];
  });
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& a) {
  Tensor out = detail::make_output(tape, {1});
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += a.ptr()[i];
  out.ptr()[0] = s;
  tape.emit(out, [a, out]() mutable {
    if (!out.has_grad() || !a.wants_grad()) return;
    const double g = out.grad()[0];
    auto& ga = a.ensure_grad();
    for (auto& v : ga) v += g;
  });
  return out;
}

inline Tensor mean(Tape& tape, const Tensor& a) {
  return scale(tape, sum(tape, a), 1.0 / double(a.size()));
}

// Mean negative log-likelihood of `targets` under label-smoothed softmax of
// `logits` rows. Fused primitive with a closed-form backward.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& targets,
                            double label_smoothing = 0.0) {
  const int64_t m = logits.rows(), v = logits.cols();
  if (int64_t(targets.size()) != m) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(m) + " rows");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw std::invalid_argument("cross_entropy: label_smoothing must be in [0, 1)");
  }
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                              " at row " + std::to_string(i) + " out of range [0, " +
                              std::to_string(v) + ")");
    }
  }
  Tensor out = detail::make_output(tape, {1});
  const double eps = label_smoothing;
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double* z = logits.ptr() + i * v;
    double mx = z[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
    double se = 0.0, sz = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      se += std::exp(z[j] - mx);
      sz += z[j];
    }
    const double lse = mx + std::log(se);
    // loss_i = lse - sum_v q_v z_v with q = smoothed one-hot
    total += lse - (1.0 - eps) * z[targets[size_t(i)]] - eps / double(v) * sz;
  }
  out.ptr()[0] = total / double(m);
  tape.emit(out, [logits, out, targets, m, v, eps]() mutable {
    if (!out.has_grad() || !logits.wants_grad()) return;
    const double g = out.grad()[0] / double(m);
    auto& gl = logits.ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      const double* z = logits.ptr() + i * v;
      double mx = z[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
      double se = 0.0;
      for (int64_t j = 0; j < v; ++j) se += std::exp(z[j] - mx);
      double* go = gl.data() + i * v;
      for (int64_t j = 0; j < v; ++j) {
        const double p = std::exp(z[j] - mx) / se;
        double q = eps / double(v);
        if (j == targets[size_t(i)]) q += 1.0 - eps;
        go[j] += g * (p - q);
      }
    }
  });
  return out;
}

}  // namespace peftlab
