#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

namespace parelab {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

[[noreturn]] inline void tensor_error(const std::string& msg) {
  throw std::runtime_error("parelab: " + msg);
}

// Thread-local switch for tape construction. Inference paths wrap
// themselves in NoGradGuard so no graph is built.
inline bool& grad_mode_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_enabled()) { grad_mode_enabled() = false; }
  ~NoGradGuard() { grad_mode_enabled() = prev; }
};

// Dense row-major tensor with a reverse-mode tape.
//
// A Tensor is a shared handle to an immutable value node. Operations on
// tensors that require gradients record a backward closure; backward()
// on a scalar loss walks the tape once in reverse topological order.
template <class T>
class Tensor {
public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool consumed = false;  // backward already ran through this node
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    int64_t numel() const { return shape_numel(shape); }
    void ensure_grad() {
      if (grad.empty()) grad.assign(value.size(), T(0));
    }
  };

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (shape_numel(shape) != int64_t(data.size()))
      tensor_error("from_data: shape " + shape_str(shape) + " needs " +
                   std::to_string(shape_numel(shape)) + " elements, got " +
                   std::to_string(data.size()));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad && grad_mode_enabled();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    std::vector<T> d(size_t(shape_numel(shape)), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const& { return n_->shape; }
  Shape shape() && { return n_->shape; }
  int64_t dim() const { return int64_t(n_->shape.size()); }
  int64_t size(int64_t axis) const { return n_->shape[size_t(axis)]; }
  int64_t numel() const { return n_->numel(); }
  bool requires_grad() const { return n_->requires_grad; }

  // Reference accessors are lvalue-only: calling them on a temporary would
  // hand back a reference into a node about to be freed.
  const std::vector<T>& data() const& { return n_->value; }
  std::vector<T> data() && { return n_->value; }
  // In-place access for leaves (optimizer updates, buffer mutation).
  std::vector<T>& mutable_data() { return n_->value; }
  const std::vector<T>& grad() const& {
    const_cast<Node*>(n_.get())->ensure_grad();
    return n_->grad;
  }
  std::vector<T> grad() && {
    n_->ensure_grad();
    return n_->grad;
  }
  std::vector<T>& mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->value.size(), T(0)); }

  T item() const {
    if (numel() != 1) tensor_error("item(): tensor has " +
                                   std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  std::shared_ptr<Node> node() const { return n_; }

  // Reverse-mode sweep from a scalar loss. Visits each reachable node
  // exactly once; a second sweep over the same tape throws.
  void backward() const {
    if (numel() != 1) tensor_error("backward(): loss must be scalar, got " +
                                   shape_str(shape()));
    if (n_->consumed)
      tensor_error("backward(): tape already consumed; rebuild the graph");

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    n_->ensure_grad();
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward) {
        node->ensure_grad();
        node->backward(*node);
        node->consumed = true;
      }
    }
    n_->consumed = true;
  }

private:
  std::shared_ptr<Node> n_;
};

namespace detail {

template <class T>
using NodePtr = std::shared_ptr<typename Tensor<T>::Node>;

// Builds the result node; attaches the closure only when some input
// wants gradients and grad mode is on.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value,
                  std::vector<NodePtr<T>> parents,
                  std::function<void(typename Tensor<T>::Node&)> backward) {
  auto out = Tensor<T>::from_data(std::move(shape), std::move(value));
  bool needs = false;
  if (grad_mode_enabled())
    for (auto& p : parents)
      if (p->requires_grad) { needs = true; break; }
  if (needs) {
    auto n = out.node();
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return out;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (size_t i = 0; i < out.size(); ++i) {
    int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      tensor_error("broadcast: incompatible shapes " + shape_str(a) + " vs " +
                   shape_str(b) + " at axis " + std::to_string(i));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 on broadcast axes, right-aligned to out rank.
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    size_t oi = i + out.size() - s.size();
    st[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

// Sums grad over axes that were broadcast to reach `from` from `to`.
template <class T>
std::vector<T> sum_to_shape(const std::vector<T>& g, const Shape& from,
                            const Shape& to) {
  if (from == to) return g;
  std::vector<T> out(size_t(shape_numel(to)), T(0));
  auto st = broadcast_strides(to, from);
  std::vector<int64_t> idx(from.size(), 0);
  int64_t n = shape_numel(from);
  for (int64_t i = 0; i < n; ++i) {
    int64_t off = 0;
    for (size_t d = 0; d < from.size(); ++d) off += idx[d] * st[d];
    out[size_t(off)] += g[size_t(i)];
    for (size_t d = from.size(); d-- > 0;) {
      if (++idx[d] < from[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

template <class T, class FwdFn, class DaFn, class DbFn>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdFn f, DaFn da,
                    DbFn db) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const int64_t n = shape_numel(out_shape);
  std::vector<T> value(static_cast<size_t>(n));
  const auto& av = a.data();
  const auto& bv = b.data();

  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) value[size_t(i)] = f(av[size_t(i)], bv[size_t(i)]);
  } else {
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<int64_t> idx(out_shape.size(), 0);
    for (int64_t i = 0; i < n; ++i) {
      int64_t oa = 0, ob = 0;
      for (size_t d = 0; d < out_shape.size(); ++d) {
        oa += idx[d] * sa[d];
        ob += idx[d] * sb[d];
      }
      value[size_t(i)] = f(av[size_t(oa)], bv[size_t(ob)]);
      for (size_t d = out_shape.size(); d-- > 0;) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
  }

  auto an = a.node(), bn = b.node();
  Shape ash = a.shape(), bsh = b.shape();
  return make_op<T>(
      out_shape, std::move(value), {an, bn},
      [an, bn, ash, bsh, out_shape, da, db](typename Tensor<T>::Node& o) {
        const int64_t n = shape_numel(out_shape);
        auto sa = broadcast_strides(ash, out_shape);
        auto sb = broadcast_strides(bsh, out_shape);
        const bool same = ash == bsh && ash == out_shape;
        std::vector<T> ga, gb;
        if (an->requires_grad) ga.assign(size_t(n), T(0));
        if (bn->requires_grad) gb.assign(size_t(n), T(0));
        std::vector<int64_t> idx(out_shape.size(), 0);
        for (int64_t i = 0; i < n; ++i) {
          int64_t oa = i, ob = i;
          if (!same) {
            oa = ob = 0;
            for (size_t d = 0; d < out_shape.size(); ++d) {
              oa += idx[d] * sa[d];
              ob += idx[d] * sb[d];
            }
            for (size_t d = out_shape.size(); d-- > 0;) {
              if (++idx[d] < out_shape[d]) break;
              idx[d] = 0;
            }
          }
          T x = an->value[size_t(oa)], y = bn->value[size_t(ob)];
          T g = o.grad[size_t(i)];
          if (an->requires_grad) ga[size_t(i)] = da(x, y, g);
          if (bn->requires_grad) gb[size_t(i)] = db(x, y, g);
        }
        if (an->requires_grad) {
          auto r = sum_to_shape<T>(ga, out_shape, ash);
          an->ensure_grad();
          for (size_t i = 0; i < r.size(); ++i) an->grad[i] += r[i];
        }
        if (bn->requires_grad) {
          auto r = sum_to_shape<T>(gb, out_shape, bsh);
          bn->ensure_grad();
          for (size_t i = 0; i < r.size(); ++i) bn->grad[i] += r[i];
        }
      });
}

template <class T, class FwdFn, class BwdFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn f, BwdFn dfdx) {
  const int64_t n = a.numel();
  std::vector<T> value(static_cast<size_t>(n));
  const auto& av = a.data();
  for (int64_t i = 0; i < n; ++i) value[size_t(i)] = f(av[size_t(i)]);
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(value), {an},
                    [an, dfdx](typename Tensor<T>::Node& o) {
                      an->ensure_grad();
                      for (size_t i = 0; i < o.value.size(); ++i)
                        an->grad[i] += dfdx(an->value[i], o.value[i]) * o.grad[i];
                    });
}

}  // namespace detail

// ---- elementwise suite ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x * y; },
      [](T, T y, T g) { return g * y; }, [](T x, T, T g) { return g * x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, T c) { return add(a, Tensor<T>::scalar(c)); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, T c) { return sub(a, Tensor<T>::scalar(c)); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, T c) { return mul(a, Tensor<T>::scalar(c)); }
template <class T>
Tensor<T> div(const Tensor<T>& a, T c) { return div(a, Tensor<T>::scalar(c)); }

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return -x; },
                          [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return x * x; },
                          [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::sqrt(x); },
                          [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> exp_t(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::exp(x); },
                          [](T, T y) { return y; });
}

template <class T>
Tensor<T> log_t(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::log(x); },
                          [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                          [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// log(1+exp(x)), overflow-safe
template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary_op(
      a,
      [](T x) { return x > T(0) ? x + std::log1p(std::exp(-x))
                                : std::log1p(std::exp(x)); },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

// ---- reductions ----

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T x : a.data()) acc += x;
  auto an = a.node();
  return detail::make_op<T>({}, {acc}, {an}, [an](typename Tensor<T>::Node& o) {
    an->ensure_grad();
    for (auto& g : an->grad) g += o.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return div(sum(a), T(a.numel()));
}

namespace detail {
inline void axis_extents(const Shape& s, int64_t axis, int64_t& outer,
                         int64_t& len, int64_t& inner) {
  outer = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[size_t(i)];
  len = s[size_t(axis)];
  inner = 1;
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& a, int64_t axis, bool keepdim = false) {
  if (axis < 0) axis += a.dim();
  if (axis < 0 || axis >= a.dim())
    tensor_error("sum: axis " + std::to_string(axis) + " out of range for " +
                 shape_str(a.shape()));
  int64_t outer, len, inner;
  detail::axis_extents(a.shape(), axis, outer, len, inner);
  Shape out_shape = a.shape();
  if (keepdim) out_shape[size_t(axis)] = 1;
  else out_shape.erase(out_shape.begin() + axis);
  std::vector<T> value(size_t(outer * inner), T(0));
  const auto& av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t l = 0; l < len; ++l) {
      const T* src = av.data() + (o * len + l) * inner;
      T* dst = value.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  auto an = a.node();
  return detail::make_op<T>(
      out_shape, std::move(value), {an},
      [an, outer, len, inner](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        for (int64_t ot = 0; ot < outer; ++ot)
          for (int64_t l = 0; l < len; ++l) {
            T* dst = an->grad.data() + (ot * len + l) * inner;
            const T* src = o.grad.data() + ot * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, int64_t axis, bool keepdim = false) {
  if (axis < 0) axis += a.dim();
  return div(sum(a, axis, keepdim), T(a.size(axis)));
}

// Detached per-slice max along an axis (keepdim). Used for numerically
// stable softmax shifts; not differentiable on purpose.
template <class T>
Tensor<T> max_detached(const Tensor<T>& a, int64_t axis) {
  if (axis < 0) axis += a.dim();
  int64_t outer, len, inner;
  detail::axis_extents(a.shape(), axis, outer, len, inner);
  Shape out_shape = a.shape();
  out_shape[size_t(axis)] = 1;
  std::vector<T> value(size_t(outer * inner));
  const auto& av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      T m = av[size_t((o * len) * inner + i)];
      for (int64_t l = 1; l < len; ++l)
        m = std::max(m, av[size_t((o * len + l) * inner + i)]);
      value[size_t(o * inner + i)] = m;
    }
  return Tensor<T>::from_data(std::move(out_shape), std::move(value));
}

// ---- structure ----

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  // one -1 wildcard allowed
  int64_t known = 1, wild = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (wild >= 0) tensor_error("reshape: more than one -1");
      wild = int64_t(i);
    } else known *= shape[i];
  }
  if (wild >= 0) {
    if (known == 0 || a.numel() % known != 0)
      tensor_error("reshape: cannot infer -1 for " + shape_str(a.shape()) +
                   " -> " + shape_str(shape));
    shape[size_t(wild)] = a.numel() / known;
  }
  if (shape_numel(shape) != a.numel())
    tensor_error("reshape: " + shape_str(a.shape()) + " -> " +
                 shape_str(shape) + " changes element count");
  auto an = a.node();
  std::vector<T> value = a.data();
  return detail::make_op<T>(std::move(shape), std::move(value), {an},
                            [an](typename Tensor<T>::Node& o) {
                              an->ensure_grad();
                              for (size_t i = 0; i < o.grad.size(); ++i)
                                an->grad[i] += o.grad[i];
                            });
}

template <class T>
Tensor<T> flatten(const Tensor<T>& a) {
  return reshape(a, {a.numel()});
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.dim() != 2) tensor_error("transpose: expected 2-D, got " +
                                 shape_str(a.shape()));
  const int64_t m = a.size(0), n = a.size(1);
  std::vector<T> value(size_t(m * n));
  const auto& av = a.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) value[size_t(j * m + i)] = av[size_t(i * n + j)];
  auto an = a.node();
  return detail::make_op<T>({n, m}, std::move(value), {an},
                            [an, m, n](typename Tensor<T>::Node& o) {
                              an->ensure_grad();
                              for (int64_t i = 0; i < m; ++i)
                                for (int64_t j = 0; j < n; ++j)
                                  an->grad[size_t(i * n + j)] +=
                                      o.grad[size_t(j * m + i)];
                            });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int64_t axis, int64_t start, int64_t len) {
  if (axis < 0) axis += a.dim();
  if (axis < 0 || axis >= a.dim() || start < 0 || len < 0 ||
      start + len > a.size(axis))
    tensor_error("slice: range [" + std::to_string(start) + "," +
                 std::to_string(start + len) + ") invalid on axis " +
                 std::to_string(axis) + " of " + shape_str(a.shape()));
  int64_t outer, alen, inner;
  detail::axis_extents(a.shape(), axis, outer, alen, inner);
  Shape out_shape = a.shape();
  out_shape[size_t(axis)] = len;
  std::vector<T> value(size_t(outer * len * inner));
  const auto& av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * alen + start) * inner, len * inner,
                value.data() + o * len * inner);
  auto an = a.node();
  return detail::make_op<T>(
      std::move(out_shape), std::move(value), {an},
      [an, outer, alen, inner, start, len](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        for (int64_t ot = 0; ot < outer; ++ot) {
          const T* src = o.grad.data() + ot * len * inner;
          T* dst = an->grad.data() + (ot * alen + start) * inner;
          for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  if (parts.empty()) tensor_error("concat: no inputs");
  if (axis < 0) axis += parts[0].dim();
  Shape out_shape = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.dim() != int64_t(out_shape.size()))
      tensor_error("concat: rank mismatch");
    for (int64_t d = 0; d < p.dim(); ++d)
      if (d != axis && p.size(d) != out_shape[size_t(d)])
        tensor_error("concat: shape mismatch on axis " + std::to_string(d) +
                     ": " + shape_str(p.shape()) + " vs " +
                     shape_str(out_shape));
    total += p.size(axis);
  }
  out_shape[size_t(axis)] = total;
  int64_t outer, len, inner;
  detail::axis_extents(out_shape, axis, outer, len, inner);
  std::vector<T> value(size_t(shape_numel(out_shape)));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t plen = p.size(axis);
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * plen * inner, plen * inner,
                  value.data() + (o * len + off) * inner);
    off += plen;
  }
  std::vector<detail::NodePtr<T>> ps;
  std::vector<int64_t> lens;
  for (const auto& p : parts) {
    ps.push_back(p.node());
    lens.push_back(p.size(axis));
  }
  return detail::make_op<T>(
      out_shape, std::move(value), ps,
      [ps, lens, outer, len, inner](typename Tensor<T>::Node& o) {
        int64_t off = 0;
        for (size_t pi = 0; pi < ps.size(); ++pi) {
          auto& p = ps[pi];
          int64_t plen = lens[pi];
          if (p->requires_grad) {
            p->ensure_grad();
            for (int64_t ot = 0; ot < outer; ++ot) {
              const T* src = o.grad.data() + (ot * len + off) * inner;
              T* dst = p->grad.data() + ot * plen * inner;
              for (int64_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
            }
          }
          off += plen;
        }
      });
}

// ---- matmul (2-D) ----

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() != 2 || b.dim() != 2)
    tensor_error("matmul: expected 2-D x 2-D, got " + shape_str(a.shape()) +
                 " x " + shape_str(b.shape()));
  if (a.size(1) != b.size(0))
    tensor_error("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                 shape_str(b.shape()));
  const int64_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<T> value(size_t(m * n));
  ECMap<T> A(a.data().data(), m, k), B(b.data().data(), k, n);
  EMap<T> C(value.data(), m, n);
  C.noalias() = A * B;
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      {m, n}, std::move(value), {an, bn},
      [an, bn, m, k, n](typename Tensor<T>::Node& o) {
        ECMap<T> G(o.grad.data(), m, n);
        if (an->requires_grad) {
          an->ensure_grad();
          EMap<T> dA(an->grad.data(), m, k);
          ECMap<T> B(bn->value.data(), k, n);
          dA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          EMap<T> dB(bn->grad.data(), k, n);
          ECMap<T> A(an->value.data(), m, k);
          dB.noalias() += A.transpose() * G;
        }
      });
}

// ---- softmax ----

// Max-shifted softmax along an axis; positive, sums to 1 per fiber.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int64_t axis) {
  if (axis < 0) axis += a.dim();
  if (axis < 0 || axis >= a.dim())
    tensor_error("softmax: axis " + std::to_string(axis) +
                 " out of range for " + shape_str(a.shape()));
  auto e = exp_t(sub(a, max_detached(a, axis)));
  return div(e, sum(e, axis, true));
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& a, int64_t axis) {
  if (axis < 0) axis += a.dim();
  auto shifted = sub(a, max_detached(a, axis));
  return sub(shifted, log_t(sum(exp_t(shifted), axis, true)));
}

// detached copy (shares no tape)
template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from_data(a.shape(), a.data());
}

using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;

}  // namespace parelab
