#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "diar/error.hpp"
#include "diar/numeric.hpp"

namespace diar {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Scalars are represented with shape {1}.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  // Eigen kernels peel unaligned heads by absolute address, so alignment
  // fixes the summation order across allocations.
  using Storage = std::vector<T, Eigen::aligned_allocator<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, Storage{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    Tensor out(std::move(shape), data_);
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    typename Tensor<U>::Storage out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
  }

  Shape shape_;
  Storage data_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  const Tensor<T>& grad() const { return tape_->grad(id_); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so every node's inputs precede it and a reverse sweep is a valid
/// topological traversal.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false); }
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), {}, nullptr, true); }

  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
    const bool needs =
        std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].needs_grad; });
    return push(std::move(value), std::move(inputs), needs ? std::move(backward) : nullptr, needs);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  // Gradient of the last backward() root w.r.t. node id (zeros if untouched).
  const Tensor<T>& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  // Accumulation target used by backward rules.
  Tensor<T>& grad_acc(std::size_t id) {
    grad(id);
    return nodes_[id].grad;
  }

  void backward(const Var<T>& root) {
    if (&root.tape() != this) throw Error("backward root belongs to another tape");
    if (root.value().size() != 1) {
      throw ShapeError("backward root must be a scalar, got " + shape_str(root.shape()));
    }
    for (auto& n : nodes_) {
      n.grad = Tensor<T>();
      n.has_grad = false;
    }
    grad_acc(root.id())[0] = T{1};
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.has_grad && n.backward) n.backward(*this, id);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    bool has_grad = false;
  };

  Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward, bool needs) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(inputs), std::move(backward), needs, false});
    return Var<T>(this, nodes_.size() - 1);
  }

  // deque keeps references to earlier nodes valid while new nodes are appended.
  std::deque<Node> nodes_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// The 64-bit path sums softmax denominators and bmm contractions with
// exact_sum, so their results do not depend on term order.
template <typename T>
inline constexpr bool kOrderFreeSums = std::is_same_v<T, double>;

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <typename T, typename F>
Var<T> unary_elementwise(const Var<T>& x, F forward, std::function<T(T x, T y)> derivative) {
  auto& tape = x.tape();
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = forward(xv[i]);
  const std::size_t xi = x.id();
  return tape.record(std::move(out), {xi}, [xi, derivative](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(xi);
    const auto& yv = t.value(self);
    auto& gx = t.grad_acc(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * derivative(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m×k] · b[k×n].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  detail::MapMat<T>(out.ptr(), m, n).noalias() =
      detail::CMapMat<T>(a.value().ptr(), m, k) * detail::CMapMat<T>(b.value().ptr(), k, n);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape<T>& t, std::size_t self) {
    detail::CMapMat<T> g(t.grad(self).ptr(), m, n);
    if (t.needs_grad(ai)) {
      detail::MapMat<T>(t.grad_acc(ai).ptr(), m, k).noalias() +=
          g * detail::CMapMat<T>(t.value(bi).ptr(), k, n).transpose();
    }
    if (t.needs_grad(bi)) {
      detail::MapMat<T>(t.grad_acc(bi).ptr(), k, n).noalias() +=
          detail::CMapMat<T>(t.value(ai).ptr(), m, k).transpose() * g;
    }
  });
}

/// Batched product a[B×m×k] · b[B×k×n], or a · bᵀ with b[B×n×k] when
/// transpose_b is set.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  const std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
  const std::size_t n = transpose_b ? b.shape()[1] : b.shape()[2];
  const std::size_t bk = transpose_b ? b.shape()[2] : b.shape()[1];
  if (b.shape()[0] != batch || bk != k) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  Tensor<T> out({batch, m, n});
  if constexpr (detail::kOrderFreeSums<T>) {
    const T* ap = a.value().ptr();
    const T* bp = b.value().ptr();
    std::vector<double> terms(k);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          for (std::size_t j = 0; j < k; ++j) {
            const T bv = transpose_b ? bp[(i * n + c) * k + j] : bp[(i * k + j) * n + c];
            terms[j] = ap[(i * m + r) * k + j] * bv;
          }
          out[(i * m + r) * n + c] = exact_sum(terms);
        }
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      detail::CMapMat<T> am(a.value().ptr() + i * m * k, m, k);
      detail::MapMat<T> om(out.ptr() + i * m * n, m, n);
      if (transpose_b) {
        om.noalias() = am * detail::CMapMat<T>(b.value().ptr() + i * n * k, n, k).transpose();
      } else {
        om.noalias() = am * detail::CMapMat<T>(b.value().ptr() + i * k * n, k, n);
      }
    }
  }
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {ai, bi}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(ai);
    const auto& bv = t.value(bi);
    T* ga = t.needs_grad(ai) ? t.grad_acc(ai).ptr() : nullptr;
    T* gb = t.needs_grad(bi) ? t.grad_acc(bi).ptr() : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      detail::CMapMat<T> gm(g.ptr() + i * m * n, m, n);
      detail::CMapMat<T> am(av.ptr() + i * m * k, m, k);
      if (transpose_b) {
        detail::CMapMat<T> bm(bv.ptr() + i * n * k, n, k);
        if (ga) detail::MapMat<T>(ga + i * m * k, m, k).noalias() += gm * bm;
        if (gb) detail::MapMat<T>(gb + i * n * k, n, k).noalias() += gm.transpose() * am;
      } else {
        detail::CMapMat<T> bm(bv.ptr() + i * k * n, k, n);
        if (ga) detail::MapMat<T>(ga + i * m * k, m, k).noalias() += gm * bm.transpose();
        if (gb) detail::MapMat<T>(gb + i * k * n, k, n).noalias() += am.transpose() * gm;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {ai, bi}, [ai, bi](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t in : {ai, bi}) {
      if (!t.needs_grad(in)) continue;
      auto& gi = t.grad_acc(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {ai, bi}, [ai, bi](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ai)) {
      auto& ga = t.grad_acc(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(bi)) {
      auto& gb = t.grad_acc(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {ai, bi}, [ai, bi](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ai)) {
      const auto& bv = t.value(bi);
      auto& ga = t.grad_acc(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(bi)) {
      const auto& av = t.value(ai);
      auto& gb = t.grad_acc(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  return detail::unary_elementwise<T>(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

/// Adds b[n] to every length-n row of a[..., n].
template <typename T>
Var<T> add_bias(const Var<T>& a, const Var<T>& b) {
  const std::size_t n = b.value().size();
  if (a.shape().back() != n || b.value().rank() != 1) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match rows of " + shape_str(a.shape()));
  }
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  const std::size_t rows = out.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {ai, bi}, [ai, bi, rows, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ai)) {
      auto& ga = t.grad_acc(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(bi)) {
      auto& gb = t.grad_acc(bi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary_elementwise<T>(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary_elementwise<T>(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  return detail::unary_elementwise<T>(
      x, [](T v) { return std::fabs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

/// Softmax along `axis`, computed with max subtraction.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("softmax: axis out of range for " + shape_str(shape));
  const std::size_t n = shape[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t outer = x.value().size() / (n * inner);
  const auto& xv = x.value();
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T sum{0};
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      if constexpr (detail::kOrderFreeSums<T>) {
        std::vector<double> terms(n);
        for (std::size_t j = 0; j < n; ++j) terms[j] = out[base + j * inner];
        sum = exact_sum(terms);
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
    }
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gx = t.grad_acc(xi);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

/// Normalizes the last axis to zero mean and unit variance, then applies
/// gamma/beta (both of the last-axis extent).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t n = x.shape().back();
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw ShapeError("layer_norm: scale/shift must have " + std::to_string(n) + " entries");
  }
  const std::size_t rows = x.value().size() / n;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(x.shape());
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.ptr() + r * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  return x.tape().record(
      std::move(out), {xi, gi, bi},
      [xi, gi, bi, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(gi);
        if (t.needs_grad(gi)) {
          auto& gg = t.grad_acc(gi);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * xhat[i];
        }
        if (t.needs_grad(bi)) {
          auto& gb = t.grad_acc(bi);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
        }
        if (t.needs_grad(xi)) {
          auto& gx = t.grad_acc(xi);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d{0}, mean_dh{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[r * n + j] * gv[j];
              mean_d += d;
              mean_dh += d * xhat[r * n + j];
            }
            mean_d /= T(n);
            mean_dh /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t i = r * n + j;
              gx[i] += inv_std[r] * (g[i] * gv[j] - mean_d - xhat[i] * mean_dh);
            }
          }
        }
      });
}

/// Sum of all entries, shape {1}.
template <typename T>
Var<T> reduce_sum(const Var<T>& x) {
  const auto& xv = x.value();
  T s{0};
  for (T v : xv.data()) s += v;
  const std::size_t xi = x.id();
  return x.tape().record(Tensor<T>::scalar(s), {xi}, [xi](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    auto& gx = t.grad_acc(xi);
    for (auto& v : gx.data()) v += g;
  });
}

/// Sum along `axis`; the axis is removed (rank-1 inputs reduce to {1}).
template <typename T>
Var<T> reduce_sum(const Var<T>& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("reduce_sum: axis out of range for " + shape_str(shape));
  const std::size_t n = shape[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t outer = x.value().size() / (n * inner);
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out_shape.push_back(shape[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] += xv[(o * n + j) * inner + in];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(xi);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t in = 0; in < inner; ++in) gx[(o * n + j) * inner + in] += g[o * inner + in];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(reduce_sum(x), T{1} / T(x.value().size()));
}

/// Mean over the leading axis with a correctly rounded summation, so the
/// result is bit-identical under any reordering of the leading slices and
/// under duplicating the whole set.
template <typename T>
Var<T> set_mean(const Var<T>& x) {
  const auto& shape = x.shape();
  const std::size_t n = shape[0];
  const std::size_t inner = x.value().size() / n;
  Shape out_shape(shape.begin() + 1, shape.end());
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  std::vector<double> column(n);
  for (std::size_t i = 0; i < inner; ++i) {
    for (std::size_t j = 0; j < n; ++j) column[j] = static_cast<double>(xv[j * inner + i]);
    out[i] = static_cast<T>(exact_sum(column) / static_cast<double>(n));
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, n, inner](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(xi);
    const T w = T{1} / T(n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) gx[j * inner + i] += g[i] * w;
  });
}

/// Sum over the leading axis with a correctly rounded summation.
template <typename T>
Var<T> set_sum(const Var<T>& x) {
  return scale(set_mean(x), T(x.shape()[0]));
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// General axis permutation: output axis i is input axis axes[i].
template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> axes) {
  const auto& shape = x.shape();
  const std::size_t r = shape.size();
  {
    std::vector<std::size_t> sorted = axes;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> iota(r);
    std::iota(iota.begin(), iota.end(), 0);
    if (sorted != iota) throw ShapeError("permute: invalid axis order for " + shape_str(shape));
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * shape[i + 1];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = shape[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  // map[o] = input offset of output element o
  const std::size_t total = x.value().size();
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < total; ++o) {
    map[o] = offset;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      offset += strides[d];
      if (idx[d] < out_shape[d]) break;
      offset -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < total; ++o) out[o] = xv[map[o]];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, map = std::move(map)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(xi);
    for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += g[o];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  detail::require_rank(x, 2, "transpose");
  return permute(x, {1, 0});
}

/// Selects leading-axis slices: out[i] = x[index[i]]. Repeated indices are
/// allowed; their gradients accumulate.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> index) {
  const auto& shape = x.shape();
  const std::size_t rows = shape[0];
  const std::size_t width = x.value().size() / rows;
  for (auto i : index) {
    if (i >= rows) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = shape;
  out_shape[0] = index.size();
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(xv.ptr() + index[r] * width, width, out.ptr() + r * width);
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, width, index = std::move(index)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(xi);
    for (std::size_t r = 0; r < index.size(); ++r) {
      const T* src = g.ptr() + r * width;
      T* dst = gx.ptr() + index[r] * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
}

/// Stacks equally shaped values along a new leading axis.
template <typename T>
Var<T> stack(const std::vector<Var<T>>& items) {
  if (items.empty()) throw ShapeError("stack: no inputs");
  const Shape& inner = items[0].shape();
  for (const auto& v : items) {
    if (v.shape() != inner) throw ShapeError("stack: mixed shapes " + shape_str(inner) + " and " + shape_str(v.shape()));
  }
  Shape out_shape{items.size()};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  Tensor<T> out(out_shape);
  const std::size_t width = items[0].value().size();
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy_n(items[i].value().ptr(), width, out.ptr() + i * width);
    ids.push_back(items[i].id());
  }
  return items[0].tape().record(std::move(out), ids, [ids, width](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.needs_grad(ids[i])) continue;
      auto& gi = t.grad_acc(ids[i]);
      for (std::size_t j = 0; j < width; ++j) gi[j] += g[i * width + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

// col[(c·k + ky)·k + kx][oy·wo + ox] = x[c][oy·s + ky − p][ox·s + kx − p] (0 outside).
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill_n(dst, wo, T{0});
            continue;
          }
          const T* src = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Output extent of a convolution along one axis, or 0 when it would be
/// non-positive.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  const long span = static_cast<long>(in + 2 * pad) - static_cast<long>(k);
  if (span < 0 || stride == 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

/// Cross-correlation of x[C_in×H×W] with w[C_out×C_in×k×k], zero padding.
/// `bias` (shape [C_out]) is optional.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* bias, std::size_t stride, std::size_t pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const std::size_t c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const std::size_t co = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != c || w.shape()[3] != k) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (k % 2 == 0) throw ShapeError("conv2d: kernel extent must be odd, got " + std::to_string(k));
  const std::size_t ho = conv_out_extent(h, k, stride, pad), wo = conv_out_extent(wd, k, stride, pad);
  if (ho == 0 || wo == 0) {
    throw ShapeError("conv2d: non-positive output extent for input " + shape_str(x.shape()) + ", kernel " +
                     std::to_string(k) + ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  if (bias && bias->value().size() != co) throw ShapeError("conv2d: bias must have C_out entries");
  const std::size_t kk = c * k * k, hw = ho * wo;
  std::vector<T> col(kk * hw);
  detail::im2col(x.value().ptr(), c, h, wd, k, stride, pad, ho, wo, col.data());
  Tensor<T> out({co, ho, wo});
  detail::MapMat<T> om(out.ptr(), co, hw);
  om.noalias() = detail::CMapMat<T>(w.value().ptr(), co, kk) * detail::CMapMat<T>(col.data(), kk, hw);
  if (bias) {
    const auto& bv = bias->value();
    for (std::size_t o = 0; o < co; ++o) om.row(o).array() += bv[o];
  }
  const std::size_t xi = x.id(), wi = w.id();
  std::vector<std::size_t> inputs{xi, wi};
  const bool has_bias = bias != nullptr;
  const std::size_t bi = has_bias ? bias->id() : 0;
  if (has_bias) inputs.push_back(bi);
  return x.tape().record(std::move(out), inputs, [=](Tape<T>& t, std::size_t self) {
    detail::CMapMat<T> g(t.grad(self).ptr(), co, hw);
    std::vector<T> col(kk * hw);
    if (t.needs_grad(wi)) {
      detail::im2col(t.value(xi).ptr(), c, h, wd, k, stride, pad, ho, wo, col.data());
      detail::MapMat<T>(t.grad_acc(wi).ptr(), co, kk).noalias() +=
          g * detail::CMapMat<T>(col.data(), kk, hw).transpose();
    }
    if (has_bias && t.needs_grad(bi)) {
      auto& gb = t.grad_acc(bi);
      for (std::size_t o = 0; o < co; ++o) gb[o] += g.row(o).sum();
    }
    if (t.needs_grad(xi)) {
      detail::MapMat<T>(col.data(), kk, hw).noalias() =
          detail::CMapMat<T>(t.value(wi).ptr(), co, kk).transpose() * g;
      detail::col2im(col.data(), c, h, wd, k, stride, pad, ho, wo, t.grad_acc(xi).ptr());
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride, std::size_t pad) {
  return conv2d<T>(x, w, nullptr, stride, pad);
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  return conv2d<T>(x, w, &bias, stride, pad);
}

/// Nearest-neighbour 2× upsampling of x[C×H×W].
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  detail::require_rank(x, 3, "upsample2x");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Tensor<T> out({c, 2 * h, 2 * w});
  const auto& xv = x.value();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(ci * 2 * h + y) * 2 * w + xx] = xv[(ci * h + y / 2) * w + xx / 2];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(xi);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          gx[(ci * h + y / 2) * w + xx / 2] += g[(ci * 2 * h + y) * 2 * w + xx];
  });
}

}  // namespace diar
