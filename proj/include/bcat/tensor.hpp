#pragma once

// Dense row-major tensors with a define-by-run reverse-mode graph.
//
// Every op produces a new Node. When gradients are enabled on the calling
// thread and at least one input requires a gradient, the node records its
// inputs and a vector-Jacobian product. backward() walks the recorded graph
// in reverse topological order and returns gradients for the leaves without
// mutating them, so independent graphs over shared read-only parameters can
// run on separate threads.

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bcat/error.hpp"

namespace bcat {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Additive mask value for disallowed attention entries: the most negative
/// finite f32. Masked entries get probability exactly 0.
template <typename T>
constexpr T mask_sentinel() {
  return static_cast<T>(std::numeric_limits<float>::lowest());
}

template <typename T>
constexpr bool is_masked(T v) {
  return v <= mask_sentinel<T>();
}

namespace detail {

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct ScratchCounter {
  std::size_t live = 0;
  std::size_t peak = 0;
};

inline ScratchCounter& scratch() {
  thread_local ScratchCounter counter;
  return counter;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Best-effort accounting of tensor payload bytes alive on this thread.
inline void reset_scratch_peak() { detail::scratch().peak = detail::scratch().live; }
inline std::size_t scratch_peak_bytes() { return detail::scratch().peak; }
inline std::size_t scratch_live_bytes() { return detail::scratch().live; }

template <typename T>
struct Node;

template <typename T>
using VjpFn = std::function<void(const Node<T>& self, const std::vector<T>& grad_out,
                                 std::vector<T>* const* grad_in)>;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  VjpFn<T> vjp;

  Node(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    seq = detail::sequence_counter().fetch_add(1, std::memory_order_relaxed);
    auto& sc = detail::scratch();
    sc.live += data.size() * sizeof(T);
    sc.peak = std::max(sc.peak, sc.live);
  }
  ~Node() {
    auto& sc = detail::scratch();
    const std::size_t bytes = data.size() * sizeof(T);
    sc.live = sc.live >= bytes ? sc.live - bytes : 0;
  }
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                       " values, got " + std::to_string(data.size()));
    }
    auto node = std::make_shared<Node<T>>(std::move(shape), std::move(data));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value) { return from({}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const T> data() const& { return node_->data; }
  std::span<const T> data() && = delete;
  const std::vector<T>& vec() const& { return node_->data; }
  std::vector<T> vec() && { return node_->data; }  // a temporary's buffer would dangle
  /// Direct write access. Only for leaves (parameter updates, test probes).
  std::span<T> mutable_data() const { return node_->data; }

  T item() const {
    if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& handle() const { return node_; }

  /// Deep copy as a fresh leaf.
  Tensor clone(bool requires_grad = false) const { return from(shape(), vec(), requires_grad); }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
void check_finite(const char* op, const std::vector<T>& data) {
  for (const T v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      VjpFn<T> vjp) {
  check_finite(op, data);
  auto node = std::make_shared<Node<T>>(std::move(shape), std::move(data));
  node->op = op;
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.handle());
      node->vjp = std::move(vjp);
    }
  }
  return Tensor<T>(std::move(node));
}

// Register-tiled GEMM. Each output element is summed in f64 over k in
// ascending order, then rounded once, so the result does not depend on the
// tiling.
template <typename T, std::size_t MR, std::size_t NR>
inline void gemm_tile(const T* a, const T* b, T* c, std::size_t k, std::size_t lda, std::size_t ldb, std::size_t ldc,
                      bool accumulate) {
  double acc[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    double bv[NR];
    for (std::size_t j = 0; j < NR; ++j) bv[j] = static_cast<double>(brow[j]);
    for (std::size_t r = 0; r < MR; ++r) {
      const double av = static_cast<double>(a[r * lda + p]);
      for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * bv[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) {
      T& dst = c[r * ldc + j];
      dst = static_cast<T>(accumulate ? static_cast<double>(dst) + acc[r][j] : acc[r][j]);
    }
}

template <typename T, std::size_t MR>
inline void gemm_row_block(const T* a, const T* b, T* c, std::size_t k, std::size_t n, bool accumulate) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) gemm_tile<T, MR, 16>(a, b + j, c + j, k, k, n, n, accumulate);
  for (; j + 8 <= n; j += 8) gemm_tile<T, MR, 8>(a, b + j, c + j, k, k, n, n, accumulate);
  for (; j < n; ++j) gemm_tile<T, MR, 1>(a, b + j, c + j, k, k, n, n, accumulate);
}

/// C[M,N] = A[M,K] * B[K,N], or C += A * B when `accumulate`.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_row_block<T, 4>(a + i * k, b, c + i * n, k, n, accumulate);
  for (; i < m; ++i) gemm_row_block<T, 1>(a + i * k, b, c + i * n, k, n, accumulate);
}

template <typename T>
std::vector<T> transpose2d(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// One-sided broadcasting of b onto a's shape: trailing-aligned dims of b
// must equal a's or be 1. Suffix-shaped and single-element b take a fast
// path (index i of a reads b[i % b.size()]); otherwise an explicit index map
// is built.
struct Broadcast {
  std::size_t outer = 1;
  std::shared_ptr<std::vector<std::size_t>> map;  // null on the fast path

  std::size_t operator()(std::size_t i, std::size_t inner) const { return map ? (*map)[i] : i % inner; }
};

inline Broadcast broadcast_plan(const char* op, const Shape& a, const Shape& b) {
  Broadcast plan;
  if (a == b) return plan;
  const std::size_t nb = numel(b);
  if (nb == 1) {
    plan.outer = numel(a);
    return plan;
  }
  if (b.size() <= a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    plan.outer = numel(a) / nb;
    return plan;
  }
  if (b.size() > a.size())
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  const std::size_t lead = a.size() - b.size();
  Shape bfull(lead, 1);
  bfull.insert(bfull.end(), b.begin(), b.end());
  for (std::size_t d = 0; d < a.size(); ++d)
    if (bfull[d] != 1 && bfull[d] != a[d])
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  std::vector<std::size_t> bstride(a.size(), 0);
  std::size_t st = 1;
  for (std::size_t d = a.size(); d-- > 0;) {
    bstride[d] = bfull[d] == 1 ? 0 : st;
    st *= bfull[d];
  }
  const std::size_t total = numel(a);
  plan.map = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(a.size(), 0);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t j = 0;
    for (std::size_t d = 0; d < a.size(); ++d) j += idx[d] * bstride[d];
    (*plan.map)[i] = j;
    for (std::size_t d = a.size(); d-- > 0;) {
      if (++idx[d] < a[d]) break;
      idx[d] = 0;
    }
  }
  plan.outer = total / nb;
  return plan;
}

inline void check_axis(const char* op, std::size_t axis, std::size_t rank) {
  if (axis >= rank) throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with suffix broadcasting of the right operand.

namespace detail {

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> binary(const char* op, BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const Broadcast bc = broadcast_plan(op, a.shape(), b.shape());
  const std::size_t inner = b.size();
  const auto& av = a.vec();
  const auto& bv = b.vec();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const std::size_t j = bc(i, inner);
    switch (kind) {
      case BinaryKind::kAdd: out[i] = av[i] + bv[j]; break;
      case BinaryKind::kSub: out[i] = av[i] - bv[j]; break;
      case BinaryKind::kMul: out[i] = av[i] * bv[j]; break;
      case BinaryKind::kDiv: out[i] = av[i] / bv[j]; break;
    }
  }
  VjpFn<T> vjp = [kind, bc, inner](const Node<T>& self, const std::vector<T>& g, std::vector<T>* const* gin) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (gin[0]) {
      auto& ga = *gin[0];
      for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t j = bc(i, inner);
        switch (kind) {
          case BinaryKind::kAdd:
          case BinaryKind::kSub: ga[i] += g[i]; break;
          case BinaryKind::kMul: ga[i] += g[i] * y[j]; break;
          case BinaryKind::kDiv: ga[i] += g[i] / y[j]; break;
        }
      }
    }
    if (gin[1]) {
      std::vector<double> acc(inner, 0.0);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t j = bc(i, inner);
        const double gi = g[i];
        switch (kind) {
          case BinaryKind::kAdd: acc[j] += gi; break;
          case BinaryKind::kSub: acc[j] -= gi; break;
          case BinaryKind::kMul: acc[j] += gi * x[i]; break;
          case BinaryKind::kDiv: acc[j] -= gi * x[i] / (static_cast<double>(y[j]) * y[j]); break;
        }
      }
      auto& gb = *gin[1];
      for (std::size_t j = 0; j < inner; ++j) gb[j] += static_cast<T>(acc[j]);
    }
  };
  return make_result<T>(op, a.shape(), std::move(out), {a, b}, std::move(vjp));
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  const auto& av = a.vec();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  VjpFn<T> vjp = [deriv](const Node<T>& self, const std::vector<T>& g, std::vector<T>* const* gin) {
    const auto& x = self.inputs[0]->data;
    auto& ga = *gin[0];
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * deriv(x[i], self.data[i]);
  };
  return make_result<T>(op, a.shape(), std::move(out), {a}, std::move(vjp));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("add", detail::BinaryKind::kAdd, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("sub", detail::BinaryKind::kSub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("mul", detail::BinaryKind::kMul, a, b);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("div", detail::BinaryKind::kDiv, a, b);
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  const T st = static_cast<T>(s);
  return detail::unary<T>(
      "scale", a, [st](T x) { return x * st; }, [st](T, T) { return st; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double s) {
  const T st = static_cast<T>(s);
  return detail::unary<T>(
      "add_scalar", a, [st](T x) { return x + st; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary<T>(
      "silu", a,
      [](T x) { return static_cast<T>(x / (1.0 + std::exp(-static_cast<double>(x)))); },
      [](T x, T) {
        const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
        return static_cast<T>(s * (1.0 + x * (1.0 - s)));
      });
}

/// GeLU, tanh approximation:
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kBeta = 0.044715;
  return detail::unary<T>(
      "gelu", a,
      [](T xt) {
        const double x = xt;
        return static_cast<T>(0.5 * x * (1.0 + std::tanh(kAlpha * (x + kBeta * x * x * x))));
      },
      [](T xt, T) {
        const double x = xt;
        const double t = std::tanh(kAlpha * (x + kBeta * x * x * x));
        return static_cast<T>(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kAlpha * (1.0 + 3.0 * kBeta * x * x));
      });
}

// ---------------------------------------------------------------------------
// Matrix multiply: a[..., M, K] x b[..., K, N] with matching batch dims, or a
// rank-2 b shared by every batch entry of a.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands need rank >= 2");
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2);
  const std::size_t n = b.dim(b.rank() - 1);
  if (k != kb) throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool shared_b = b.rank() == 2;
  if (!shared_b && !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(), b.shape().end() - 2))
    throw ShapeError("matmul: batch dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = a.size() / (m * k);

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n);
  if (shared_b) {
    detail::gemm(a.vec().data(), b.vec().data(), out.data(), batch * m, k, n);
  } else {
    for (std::size_t bi = 0; bi < batch; ++bi)
      detail::gemm(a.vec().data() + bi * m * k, b.vec().data() + bi * k * n, out.data() + bi * m * n, m, k, n);
  }

  VjpFn<T> vjp = [m, k, n, batch, shared_b](const Node<T>& self, const std::vector<T>& g,
                                             std::vector<T>* const* gin) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    const std::size_t rows = shared_b ? batch * m : m;
    const std::size_t nb = shared_b ? 1 : batch;
    for (std::size_t bi = 0; bi < nb; ++bi) {
      const T* ab = av.data() + bi * rows * k;
      const T* bb = bv.data() + bi * k * n;
      const T* gb = g.data() + bi * rows * n;
      if (gin[0]) {
        // dA += dC * B^T
        const auto bt = detail::transpose2d(bb, k, n);
        detail::gemm(gb, bt.data(), gin[0]->data() + bi * rows * k, rows, n, k, true);
      }
      if (gin[1]) {
        // dB += A^T * dC
        const auto at = detail::transpose2d(ab, rows, k);
        detail::gemm(at.data(), gb, gin[1]->data() + bi * k * n, k, rows, n, true);
      }
    }
  };
  return detail::make_result<T>("matmul", std::move(out_shape), std::move(out), {a, b}, std::move(vjp));
}

// ---------------------------------------------------------------------------
// Layout ops.

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  VjpFn<T> vjp = [](const Node<T>&, const std::vector<T>& g, std::vector<T>* const* gin) {
    auto& ga = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  };
  return detail::make_result<T>("reshape", std::move(shape), a.vec(), {a}, std::move(vjp));
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// For each output flat index, the source flat index under permutation `perm`.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm) {
  const auto in_strides = strides_of(in);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in[perm[i]];
  const std::size_t total = numel(in);
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> idx(perm.size(), 0);
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t s = 0;
    for (std::size_t d = 0; d < perm.size(); ++d) s += idx[d] * in_strides[perm[d]];
    src[o] = s;
    for (std::size_t d = perm.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return src;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> perm) {
  if (perm.size() != a.rank()) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
  auto src = std::make_shared<std::vector<std::size_t>>(detail::permute_index(a.shape(), perm));
  std::vector<T> out(a.size());
  const auto& av = a.vec();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = av[(*src)[o]];
  VjpFn<T> vjp = [src](const Node<T>&, const std::vector<T>& g, std::vector<T>* const* gin) {
    auto& ga = *gin[0];
    for (std::size_t o = 0; o < g.size(); ++o) ga[(*src)[o]] += g[o];
  };
  return detail::make_result<T>("permute", std::move(out_shape), std::move(out), {a}, std::move(vjp));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::check_axis("concat", axis, s0.size());
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  const std::size_t outer = numel(Shape(s0.begin(), s0.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s0.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s0.end()));
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && p.dim(d) != s0[d])
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(s0));
    out_shape[axis] += p.dim(axis);
    widths.push_back(p.dim(axis) * inner);
  }
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].vec();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * widths[pi]), widths[pi],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    offset += widths[pi];
  }
  VjpFn<T> vjp = [widths, outer, row](const Node<T>&, const std::vector<T>& g, std::vector<T>* const* gin) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < widths.size(); ++pi) {
      if (gin[pi]) {
        auto& gp = *gin[pi];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[pi]; ++j) gp[o * widths[pi] + j] += g[o * row + off + j];
      }
      off += widths[pi];
    }
  };
  return detail::make_result<T>("concat", std::move(out_shape), std::move(out), parts, std::move(vjp));
}

/// Contiguous slice [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::check_axis("slice", axis, a.rank());
  if (begin > end || end > a.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on " +
                     shape_str(a.shape()));
  const Shape& s = a.shape();
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<T> out(outer * out_row);
  const auto& av = a.vec();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * in_row + begin * inner), out_row,
                out.begin() + static_cast<std::ptrdiff_t>(o * out_row));
  VjpFn<T> vjp = [outer, in_row, out_row, begin, inner](const Node<T>&, const std::vector<T>& g,
                                                        std::vector<T>* const* gin) {
    auto& ga = *gin[0];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < out_row; ++j) ga[o * in_row + begin * inner + j] += g[o * out_row + j];
  };
  return detail::make_result<T>("slice", std::move(out_shape), std::move(out), {a}, std::move(vjp));
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, std::size_t axis, const std::vector<std::size_t>& sizes) {
  detail::check_axis("split", axis, a.rank());
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != a.dim(axis))
    throw ShapeError("split: sizes do not sum to axis extent of " + shape_str(a.shape()));
  std::vector<Tensor<T>> out;
  std::size_t begin = 0;
  for (auto sz : sizes) {
    out.push_back(slice(a, axis, begin, begin + sz));
    begin += sz;
  }
  return out;
}

/// Rows of a[R, ...] selected by index.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& index) {
  if (a.rank() < 1) throw ShapeError("gather_rows: rank 0 input");
  const std::size_t rows = a.dim(0);
  const std::size_t width = a.size() / std::max<std::size_t>(rows, 1);
  Shape out_shape = a.shape();
  out_shape[0] = index.size();
  std::vector<T> out(index.size() * width);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " >= " + std::to_string(rows));
    std::copy_n(a.vec().begin() + static_cast<std::ptrdiff_t>(index[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  VjpFn<T> vjp = [index, width](const Node<T>&, const std::vector<T>& g, std::vector<T>* const* gin) {
    auto& ga = *gin[0];
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) ga[index[i] * width + j] += g[i * width + j];
  };
  return detail::make_result<T>("gather_rows", std::move(out_shape), std::move(out), {a}, std::move(vjp));
}

// ---------------------------------------------------------------------------
// Reductions, accumulated in f64.

namespace detail {

struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // per input element
  std::size_t count = 1;               // elements per output
};

inline ReducePlan reduce_plan(const char* op, const Shape& in, std::vector<std::size_t> axes, bool keepdim) {
  std::vector<bool> reduced(in.size(), false);
  if (axes.empty())
    std::fill(reduced.begin(), reduced.end(), true);
  for (auto ax : axes) {
    check_axis(op, ax, in.size());
    reduced[ax] = true;
  }
  ReducePlan plan;
  Shape kept;
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (reduced[d]) {
      plan.count *= in[d];
      if (keepdim) plan.out_shape.push_back(1);
    } else {
      plan.out_shape.push_back(in[d]);
      kept.push_back(in[d]);
    }
  }
  const auto kept_strides = strides_of(kept);
  const std::size_t total = numel(in);
  plan.out_index.resize(total);
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t o = 0;
    std::size_t kd = 0;
    for (std::size_t d = 0; d < in.size(); ++d)
      if (!reduced[d]) o += idx[d] * kept_strides[kd++];
    plan.out_index[i] = o;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace detail

/// Mean over `axes` (all axes when empty).
template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::vector<std::size_t> axes = {}, bool keepdim = false) {
  auto plan = std::make_shared<detail::ReducePlan>(detail::reduce_plan("mean", a.shape(), std::move(axes), keepdim));
  if (plan->count == 0) throw ShapeError("mean: empty reduction");
  std::vector<double> acc(numel(plan->out_shape), 0.0);
  const auto& av = a.vec();
  for (std::size_t i = 0; i < av.size(); ++i) acc[plan->out_index[i]] += av[i];
  std::vector<T> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] / static_cast<double>(plan->count));
  VjpFn<T> vjp = [plan](const Node<T>&, const std::vector<T>& g, std::vector<T>* const* gin) {
    auto& ga = *gin[0];
    const double inv = 1.0 / static_cast<double>(plan->count);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(g[plan->out_index[i]] * inv);
  };
  return detail::make_result<T>("mean", plan->out_shape, std::move(out), {a}, std::move(vjp));
}

/// Population variance over `axes` (all axes when empty).
template <typename T>
Tensor<T> variance(const Tensor<T>& a, std::vector<std::size_t> axes = {}, bool keepdim = false) {
  auto plan = std::make_shared<detail::ReducePlan>(detail::reduce_plan("variance", a.shape(), std::move(axes), keepdim));
  if (plan->count == 0) throw ShapeError("variance: empty reduction");
  const std::size_t nout = numel(plan->out_shape);
  const auto& av = a.vec();
  auto mu = std::make_shared<std::vector<double>>(nout, 0.0);
  for (std::size_t i = 0; i < av.size(); ++i) (*mu)[plan->out_index[i]] += av[i];
  for (auto& m : *mu) m /= static_cast<double>(plan->count);
  std::vector<double> acc(nout, 0.0);
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - (*mu)[plan->out_index[i]];
    acc[plan->out_index[i]] += d * d;
  }
  std::vector<T> out(nout);
  for (std::size_t i = 0; i < nout; ++i) out[i] = static_cast<T>(acc[i] / static_cast<double>(plan->count));
  VjpFn<T> vjp = [plan, mu](const Node<T>& self, const std::vector<T>& g, std::vector<T>* const* gin) {
    const auto& x = self.inputs[0]->data;
    auto& ga = *gin[0];
    const double scale2 = 2.0 / static_cast<double>(plan->count);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const std::size_t o = plan->out_index[i];
      ga[i] += static_cast<T>(g[o] * scale2 * (x[i] - (*mu)[o]));
    }
  };
  return detail::make_result<T>("variance", plan->out_shape, std::move(out), {a}, std::move(vjp));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (const T v : a.vec()) acc += v;
  VjpFn<T> vjp = [](const Node<T>&, const std::vector<T>& g, std::vector<T>* const* gin) {
    for (auto& v : *gin[0]) v += g[0];
  };
  return detail::make_result<T>("sum", {}, {static_cast<T>(acc)}, {a}, std::move(vjp));
}

// ---------------------------------------------------------------------------
// Softmax over the last axis with an optional additive mask.
//
// `mask` (when defined) has shape [R, L] and is broadcast over the leading
// dims of `a`, viewed as [B, R, L]. Entries must be 0 or mask_sentinel().
// Masked entries get probability 0; a row with every entry masked is an
// error.

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, const Tensor<T>& mask = Tensor<T>()) {
  if (a.rank() < 1) throw ShapeError("softmax: rank 0 input");
  const std::size_t len = a.dim(a.rank() - 1);
  const std::size_t rows = a.size() / std::max<std::size_t>(len, 1);
  std::size_t mask_rows = 0;
  if (mask.defined()) {
    if (mask.rank() != 2 || mask.dim(1) != len || rows % mask.dim(0) != 0)
      throw ShapeError("softmax: mask " + shape_str(mask.shape()) + " incompatible with " + shape_str(a.shape()));
    mask_rows = mask.dim(0);
  }
  const auto& av = a.vec();
  std::vector<T> out(av.size());
  std::vector<double> e(len);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * len;
    const T* mrow = mask.defined() ? mask.vec().data() + (r % mask_rows) * len : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < len; ++j) {
      if (mrow && is_masked(mrow[j])) continue;
      const double v = static_cast<double>(x[j]) + (mrow ? static_cast<double>(mrow[j]) : 0.0);
      mx = std::max(mx, v);
      any = true;
    }
    if (!any) throw NumericError("softmax: row " + std::to_string(r) + " has every entry masked");
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      if (mrow && is_masked(mrow[j])) {
        e[j] = 0.0;
        continue;
      }
      e[j] = std::exp(static_cast<double>(x[j]) + (mrow ? static_cast<double>(mrow[j]) : 0.0) - mx);
      total += e[j];
    }
    T* y = out.data() + r * len;
    for (std::size_t j = 0; j < len; ++j) y[j] = static_cast<T>(e[j] / total);
  }
  VjpFn<T> vjp = [len, rows](const Node<T>& self, const std::vector<T>& g, std::vector<T>* const* gin) {
    if (!gin[0]) return;
    auto& ga = *gin[0];
    const auto& y = self.data;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += static_cast<double>(g[r * len + j]) * y[r * len + j];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t i = r * len + j;
        ga[i] += static_cast<T>(y[i] * (g[i] - dot));
      }
    }
  };
  std::vector<Tensor<T>> inputs{a};
  if (mask.defined()) inputs.push_back(mask);
  return detail::make_result<T>("softmax", a.shape(), std::move(out), std::move(inputs), std::move(vjp));
}

// ---------------------------------------------------------------------------
// RMS normalization over the last axis: gain * x / sqrt(mean(x^2) + eps).
// Fused for speed; tests compare it against the composition of primitive ops.

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, double eps) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (gain.size() == 0 || gain.size() % d != 0 || x.size() % gain.size() != 0)
    throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t rows = x.size() / d;
  const std::size_t gsize = gain.size();  // may cover several trailing rows
  const auto& xv = x.vec();
  const auto& gv = gain.vec();
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(xv[r * d + j]) * xv[r * d + j];
    const double rinv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    (*inv)[r] = rinv;
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t i = r * d + j;
      out[i] = static_cast<T>(gv[i % gsize] * (xv[i] * rinv));
    }
  }
  VjpFn<T> vjp = [inv, d, rows, gsize](const Node<T>& self, const std::vector<T>& g, std::vector<T>* const* gin) {
    const auto& xv = self.inputs[0]->data;
    const auto& gv = self.inputs[1]->data;
    std::vector<double> ggain(gin[1] ? gsize : 0, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double rinv = (*inv)[r];
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = r * d + j;
        dot += static_cast<double>(g[i]) * gv[i % gsize] * xv[i];
      }
      const double coef = rinv * rinv * rinv * dot / static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = r * d + j;
        if (gin[0]) (*gin[0])[i] += static_cast<T>(rinv * g[i] * gv[i % gsize] - coef * xv[i]);
        if (gin[1]) ggain[i % gsize] += static_cast<double>(g[i]) * xv[i] * rinv;
      }
    }
    if (gin[1])
      for (std::size_t j = 0; j < gsize; ++j) (*gin[1])[j] += static_cast<T>(ggain[j]);
  };
  return detail::make_result<T>("rms_norm", x.shape(), std::move(out), {x, gain}, std::move(vjp));
}

// ---------------------------------------------------------------------------
// Reverse pass.

/// Gradients of a scalar output with respect to each reachable leaf that
/// requires a gradient. Leaves are never mutated.
template <typename T>
class Gradients {
 public:
  bool contains(const Tensor<T>& leaf) const { return grads_.count(leaf.node()) > 0; }

  /// Gradient for `leaf`; zeros when the output does not depend on it.
  std::vector<T> of(const Tensor<T>& leaf) const {
    auto it = grads_.find(leaf.node());
    if (it == grads_.end()) return std::vector<T>(leaf.size(), T(0));
    return it->second;
  }

  const std::vector<T>* find(const Tensor<T>& leaf) const {
    auto it = grads_.find(leaf.node());
    return it == grads_.end() ? nullptr : &it->second;
  }

  std::unordered_map<const Node<T>*, std::vector<T>>& raw() { return grads_; }

 private:
  std::unordered_map<const Node<T>*, std::vector<T>> grads_;
};

template <typename T>
Gradients<T> backward(const Tensor<T>& output) {
  if (output.size() != 1)
    throw ShapeError("backward: output must be scalar, got " + shape_str(output.shape()));
  Gradients<T> result;
  if (!output.requires_grad()) return result;

  // Iterative post-order DFS; each node appears once.
  std::vector<Node<T>*> order;
  std::unordered_map<const Node<T>*, std::size_t> position;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{output.node(), 0}};
  std::unordered_map<const Node<T>*, bool> visited{{output.node(), true}};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      assert(child->seq < node->seq && "graph nodes must be recorded in creation order");
      if (child->requires_grad && !visited[child]) {
        visited[child] = true;
        stack.emplace_back(child, 0);
      }
    } else {
      position[node] = order.size();
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::vector<std::vector<T>> grads(order.size());
  grads.back() = std::vector<T>(1, T(1));
  std::vector<std::vector<T>*> gin;
  for (std::size_t oi = order.size(); oi-- > 0;) {
    Node<T>* node = order[oi];
    if (grads[oi].empty()) continue;
    if (!node->vjp) {
      result.raw()[node] = std::move(grads[oi]);
      continue;
    }
    gin.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node<T>* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto& buf = grads[position.at(in)];
      if (buf.empty()) buf.assign(in->data.size(), T(0));
      gin[i] = &buf;
    }
    node->vjp(*node, grads[oi], gin.data());
    std::vector<T>().swap(grads[oi]);
  }
  return result;
}

}  // namespace bcat
