#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "p3d/rng.hpp"

// Finite checks on op inputs are debug-only; shape checks are always on.
#if !defined(P3D_CHECK_FINITE)
#if defined(NDEBUG)
#define P3D_CHECK_FINITE 0
#else
#define P3D_CHECK_FINITE 1
#endif
#endif

namespace p3d {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily by backward
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;
  bool leaf = true;

  Index numel() const { return static_cast<Index>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

}  // namespace detail

template <class S>
class Tensor {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                "Tensor supports float and double");

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor filled(Shape shape, S v, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node<S>>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(shape_numel(n->shape)), v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<Index>(data.size()))
      throw std::invalid_argument("Tensor::from_data: " + shape_str(shape) + " needs " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(data.size()));
    auto n = std::make_shared<detail::Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v) { return from_data({}, {v}); }

  static Tensor from_node(std::shared_ptr<detail::Node<S>> n) { return Tensor(std::move(n)); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return check().shape; }
  Index ndim() const { return static_cast<Index>(check().shape.size()); }
  Index numel() const { return check().numel(); }
  Index dim(Index i) const {
    const Shape& s = shape();
    if (i < 0) i += static_cast<Index>(s.size());
    if (i < 0 || i >= static_cast<Index>(s.size()))
      throw std::out_of_range("Tensor::dim: axis out of range");
    return s[static_cast<size_t>(i)];
  }
  bool requires_grad() const { return check().requires_grad; }
  bool is_leaf() const { return check().leaf; }

  std::span<const S> values() const { return {check().value.data(), check().value.size()}; }
  std::span<S> values_mut() {
    if (!check().leaf)
      throw std::logic_error("Tensor: op outputs are immutable; only leaves may be written");
    return {n_->value.data(), n_->value.size()};
  }
  std::span<const S> grad() const { return {check().grad.data(), check().grad.size()}; }
  std::span<S> grad_mut() {
    check().ensure_grad();
    return {n_->grad.data(), n_->grad.size()};
  }

  S item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item: tensor has more than one element");
    return check().value[0];
  }

  void set_requires_grad(bool rg) {
    if (!check().leaf) throw std::logic_error("Tensor: requires_grad is settable on leaves only");
    n_->requires_grad = rg;
  }

  void zero_grad() { check().grad.assign(check().value.size(), S(0)); }

  void assert_finite(const std::string& what) const {
    for (S v : check().value)
      if (!std::isfinite(v)) throw std::runtime_error(what + ": non-finite value");
  }

  // Reverse-mode sweep from a scalar root. Grads accumulate into every
  // reachable tensor with requires_grad set.
  void backward() const {
    detail::Node<S>& root = check();
    if (root.numel() != 1) throw std::logic_error("backward: root must be a scalar");
    if (!root.requires_grad) throw std::logic_error("backward: root does not require grad");

    // iterative post-order over the grad-requiring subgraph
    std::vector<detail::Node<S>*> order;
    std::unordered_set<detail::Node<S>*> seen;
    struct Frame {
      detail::Node<S>* node;
      size_t next_parent;
    };
    std::vector<Frame> stack{{&root, 0}};
    seen.insert(&root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      bool descended = false;
      while (f.next_parent < f.node->parents.size()) {
        detail::Node<S>* p = f.node->parents[f.next_parent++].get();
        if (p->requires_grad && seen.insert(p).second) {
          stack.push_back({p, 0});
          descended = true;
          break;
        }
      }
      if (!descended && (stack.back().next_parent >= stack.back().node->parents.size())) {
        order.push_back(stack.back().node);
        stack.pop_back();
      }
    }

    root.ensure_grad();
    root.grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop(**it);
  }

  std::shared_ptr<detail::Node<S>> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<S>> n) : n_(std::move(n)) {}
  detail::Node<S>& check() const {
    if (!n_) throw std::logic_error("Tensor: used before initialization");
    return *n_;
  }
  std::shared_ptr<detail::Node<S>> n_;
};

// Named trainable leaf. norm_or_bias marks 1-D parameters (gains/biases) for
// the optimizer's weight-decay switch.
template <class S>
struct Parameter {
  std::string name;
  Tensor<S> tensor;
  bool norm_or_bias = false;
};

namespace detail {

template <class S>
void check_defined(const char* op, std::initializer_list<const Tensor<S>*> ts) {
  for (const Tensor<S>* t : ts)
    if (!t->defined()) throw std::invalid_argument(std::string(op) + ": undefined input tensor");
}

template <class S>
void check_finite_input(const char* op, const Tensor<S>& t) {
#if P3D_CHECK_FINITE
  for (S v : t.values())
    if (!std::isfinite(v)) throw std::runtime_error(std::string(op) + ": non-finite input");
#else
  (void)op;
  (void)t;
#endif
}

template <class S>
Tensor<S> make_node(Shape shape, std::vector<S> value, std::vector<Tensor<S>> inputs,
                    std::function<void(Node<S>&)> bp) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  for (const Tensor<S>& t : inputs) {
    n->parents.push_back(t.node());
    n->requires_grad = n->requires_grad || t.requires_grad();
  }
  if (n->requires_grad) n->backprop = std::move(bp);
  return Tensor<S>::from_node(std::move(n));
}

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

}  // namespace detail

// ---- arithmetic ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_defined<S>("add", {&a, &b});
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  detail::check_finite_input("add", a);
  detail::check_finite_input("add", b);
  std::vector<S> out(a.values().begin(), a.values().end());
  for (Index i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] += b.values()[i];
  return detail::make_node<S>(a.shape(), std::move(out), {a, b}, [](detail::Node<S>& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *self.parents[static_cast<size_t>(k)];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_defined<S>("sub", {&a, &b});
  if (a.shape() != b.shape())
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  std::vector<S> out(a.values().begin(), a.values().end());
  for (Index i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] -= b.values()[i];
  return detail::make_node<S>(a.shape(), std::move(out), {a, b}, [](detail::Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_defined<S>("mul", {&a, &b});
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  std::vector<S> out(static_cast<size_t>(a.numel()));
  for (Index i = 0; i < a.numel(); ++i)
    out[static_cast<size_t>(i)] = a.values()[i] * b.values()[i];
  return detail::make_node<S>(a.shape(), std::move(out), {a, b}, [](detail::Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  detail::check_defined<S>("scale", {&x});
  std::vector<S> out(static_cast<size_t>(x.numel()));
  for (Index i = 0; i < x.numel(); ++i) out[static_cast<size_t>(i)] = x.values()[i] * c;
  return detail::make_node<S>(x.shape(), std::move(out), {x}, [c](detail::Node<S>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  });
}

// x: [..., d], b: [d]
template <class S>
Tensor<S> bias_add(const Tensor<S>& x, const Tensor<S>& b) {
  detail::check_defined<S>("bias_add", {&x, &b});
  if (b.ndim() != 1 || x.ndim() < 1 || x.dim(-1) != b.dim(0))
    throw std::invalid_argument("bias_add: x " + shape_str(x.shape()) + " vs bias " +
                                shape_str(b.shape()));
  const Index d = b.dim(0);
  const Index rows = x.numel() / d;
  std::vector<S> out(static_cast<size_t>(x.numel()));
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < d; ++j)
      out[static_cast<size_t>(r * d + j)] = x.values()[r * d + j] + b.values()[j];
  return detail::make_node<S>(x.shape(), std::move(out), {x, b}, [d, rows](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < d; ++j)
          pb.grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r * d + j)];
    }
  });
}

// x: [B, T, d], table: [T, d]; adds the table to every batch element
template <class S>
Tensor<S> add_time_table(const Tensor<S>& x, const Tensor<S>& table) {
  detail::check_defined<S>("add_time_table", {&x, &table});
  if (x.ndim() != 3 || table.ndim() != 2 || x.dim(1) != table.dim(0) || x.dim(2) != table.dim(1))
    throw std::invalid_argument("add_time_table: x " + shape_str(x.shape()) + " vs table " +
                                shape_str(table.shape()));
  const Index B = x.dim(0), td = table.numel();
  std::vector<S> out(static_cast<size_t>(x.numel()));
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < td; ++i)
      out[static_cast<size_t>(b * td + i)] = x.values()[b * td + i] + table.values()[i];
  return detail::make_node<S>(x.shape(), std::move(out), {x, table},
                              [B, td](detail::Node<S>& self) {
                                auto& px = *self.parents[0];
                                auto& pt = *self.parents[1];
                                if (px.requires_grad) {
                                  px.ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                    px.grad[i] += self.grad[i];
                                }
                                if (pt.requires_grad) {
                                  pt.ensure_grad();
                                  for (Index b = 0; b < B; ++b)
                                    for (Index i = 0; i < td; ++i)
                                      pt.grad[static_cast<size_t>(i)] +=
                                          self.grad[static_cast<size_t>(b * td + i)];
                                }
                              });
}

// ---- matrix products ----

// a: [..., k] treated as rows, b: [k, n]
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_defined<S>("matmul", {&a, &b});
  if (a.ndim() < 1 || b.ndim() != 2 || a.dim(-1) != b.dim(0))
    throw std::invalid_argument("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  detail::check_finite_input("matmul", a);
  detail::check_finite_input("matmul", b);
  const Index k = b.dim(0), n = b.dim(1);
  const Index rows = a.numel() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<S> out(static_cast<size_t>(rows * n));
  {
    detail::ECMap<S> A(a.values().data(), rows, k);
    detail::ECMap<S> B(b.values().data(), k, n);
    detail::EMap<S> C(out.data(), rows, n);
    C.noalias() = A * B;
  }
  return detail::make_node<S>(
      std::move(out_shape), std::move(out), {a, b}, [rows, k, n](detail::Node<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        detail::ECMap<S> G(self.grad.data(), rows, n);
        if (pa.requires_grad) {
          pa.ensure_grad();
          detail::ECMap<S> B(pb.value.data(), k, n);
          detail::EMap<S>(pa.grad.data(), rows, k).noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          detail::ECMap<S> A(pa.value.data(), rows, k);
          detail::EMap<S>(pb.grad.data(), k, n).noalias() += A.transpose() * G;
        }
      });
}

// a: [B, m, k], b: [B, k, n]
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_defined<S>("bmm", {&a, &b});
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<S> out(static_cast<size_t>(B * m * n));
  for (Index i = 0; i < B; ++i) {
    detail::ECMap<S> A(a.values().data() + i * m * k, m, k);
    detail::ECMap<S> Bm(b.values().data() + i * k * n, k, n);
    detail::EMap<S> C(out.data() + i * m * n, m, n);
    C.noalias() = A * Bm;
  }
  return detail::make_node<S>(
      {B, m, n}, std::move(out), {a, b}, [B, m, k, n](detail::Node<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (Index i = 0; i < B; ++i) {
          detail::ECMap<S> G(self.grad.data() + i * m * n, m, n);
          if (pa.requires_grad) {
            detail::ECMap<S> Bm(pb.value.data() + i * k * n, k, n);
            detail::EMap<S>(pa.grad.data() + i * m * k, m, k).noalias() += G * Bm.transpose();
          }
          if (pb.requires_grad) {
            detail::ECMap<S> A(pa.value.data() + i * m * k, m, k);
            detail::EMap<S>(pb.grad.data() + i * k * n, k, n).noalias() += A.transpose() * G;
          }
        }
      });
}

template <class S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  detail::check_defined<S>("transpose_last2", {&x});
  if (x.ndim() < 2) throw std::invalid_argument("transpose_last2: needs ndim >= 2");
  const Index m = x.dim(-2), n = x.dim(-1);
  const Index outer = x.numel() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  std::vector<S> out(static_cast<size_t>(x.numel()));
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j)
        out[static_cast<size_t>(o * m * n + j * m + i)] = x.values()[o * m * n + i * n + j];
  return detail::make_node<S>(std::move(out_shape), std::move(out), {x},
                              [outer, m, n](detail::Node<S>& self) {
                                auto& p = *self.parents[0];
                                p.ensure_grad();
                                for (Index o = 0; o < outer; ++o)
                                  for (Index i = 0; i < m; ++i)
                                    for (Index j = 0; j < n; ++j)
                                      p.grad[static_cast<size_t>(o * m * n + i * n + j)] +=
                                          self.grad[static_cast<size_t>(o * m * n + j * m + i)];
                              });
}

// ---- nonlinearities ----

// exact erf form
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  detail::check_defined<S>("gelu", {&x});
  detail::check_finite_input("gelu", x);
  const double inv_sqrt2 = 0.70710678118654752440;
  std::vector<S> out(static_cast<size_t>(x.numel()));
  for (Index i = 0; i < x.numel(); ++i) {
    const double v = static_cast<double>(x.values()[i]);
    out[static_cast<size_t>(i)] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  return detail::make_node<S>(x.shape(), std::move(out), {x}, [](detail::Node<S>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    const double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt2pi = 0.39894228040143267794;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double v = static_cast<double>(p.value[i]);
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      p.grad[i] += self.grad[i] * static_cast<S>(cdf + v * pdf);
    }
  });
}

namespace detail {
inline void axis_split(const Shape& s, int axis, Index& outer, Index& len, Index& inner) {
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("axis out of range");
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  len = s[static_cast<size_t>(axis)];
  for (int i = axis + 1; i < nd; ++i) inner *= s[static_cast<size_t>(i)];
}
}  // namespace detail

// max-shifted, numerically safe for large magnitudes
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  detail::check_defined<S>("softmax", {&x});
  detail::check_finite_input("softmax", x);
  Index outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  std::vector<S> out(static_cast<size_t>(x.numel()));
  for (Index o = 0; o < outer; ++o)
    for (Index in = 0; in < inner; ++in) {
      const auto at = [&](Index i) { return static_cast<size_t>((o * len + i) * inner + in); };
      S mx = x.values()[at(0)];
      for (Index i = 1; i < len; ++i) mx = std::max(mx, x.values()[at(i)]);
      double denom = 0;
      for (Index i = 0; i < len; ++i) {
        const double e = std::exp(static_cast<double>(x.values()[at(i)] - mx));
        out[at(i)] = static_cast<S>(e);
        denom += e;
      }
      for (Index i = 0; i < len; ++i)
        out[at(i)] = static_cast<S>(static_cast<double>(out[at(i)]) / denom);
    }
  return detail::make_node<S>(
      x.shape(), std::move(out), {x}, [outer, len, inner](detail::Node<S>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (Index o = 0; o < outer; ++o)
          for (Index in = 0; in < inner; ++in) {
            const auto at = [&](Index i) {
              return static_cast<size_t>((o * len + i) * inner + in);
            };
            double dot = 0;
            for (Index i = 0; i < len; ++i)
              dot += static_cast<double>(self.grad[at(i)]) * self.value[at(i)];
            for (Index i = 0; i < len; ++i)
              p.grad[at(i)] += self.value[at(i)] * (self.grad[at(i)] - static_cast<S>(dot));
          }
      });
}

// ---- normalization ----

// normalizes the last axis; gain/bias: [d]
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5)) {
  detail::check_defined<S>("layer_norm", {&x, &gain, &bias});
  if (x.ndim() < 1 || gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != x.dim(-1) ||
      bias.dim(0) != x.dim(-1))
    throw std::invalid_argument("layer_norm: x " + shape_str(x.shape()) + " gain " +
                                shape_str(gain.shape()) + " bias " + shape_str(bias.shape()));
  detail::check_finite_input("layer_norm", x);
  const Index d = x.dim(-1);
  const Index rows = x.numel() / d;
  std::vector<S> out(static_cast<size_t>(x.numel()));
  auto mean_v = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  auto rstd_v = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const S* xr = x.values().data() + r * d;
    double mu = 0;
    for (Index j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (Index j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*mean_v)[static_cast<size_t>(r)] = static_cast<S>(mu);
    (*rstd_v)[static_cast<size_t>(r)] = static_cast<S>(rstd);
    for (Index j = 0; j < d; ++j) {
      const S xh = static_cast<S>((xr[j] - mu) * rstd);
      out[static_cast<size_t>(r * d + j)] = gain.values()[j] * xh + bias.values()[j];
    }
  }
  return detail::make_node<S>(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, mean_v, rstd_v](detail::Node<S>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (Index r = 0; r < rows; ++r) {
          const S* xr = px.value.data() + r * d;
          const S* gr = self.grad.data() + r * d;
          const S mu = (*mean_v)[static_cast<size_t>(r)];
          const S rstd = (*rstd_v)[static_cast<size_t>(r)];
          double sum_dxh = 0, sum_dxh_xh = 0;
          for (Index j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu) * rstd;
            const double dxh = static_cast<double>(gr[j]) * pg.value[static_cast<size_t>(j)];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            if (pg.requires_grad) pg.grad[static_cast<size_t>(j)] += gr[j] * static_cast<S>(xh);
            if (pb.requires_grad) pb.grad[static_cast<size_t>(j)] += gr[j];
          }
          if (px.requires_grad) {
            const double inv_d = 1.0 / static_cast<double>(d);
            for (Index j = 0; j < d; ++j) {
              const double xh = (xr[j] - mu) * rstd;
              const double dxh = static_cast<double>(gr[j]) * pg.value[static_cast<size_t>(j)];
              px.grad[static_cast<size_t>(r * d + j)] += static_cast<S>(
                  rstd * (dxh - inv_d * sum_dxh - xh * inv_d * sum_dxh_xh));
            }
          }
        }
      });
}

template <class S>
struct BatchNormState {
  std::vector<S> running_mean;
  std::vector<S> running_var;

  BatchNormState() = default;
  explicit BatchNormState(Index d)
      : running_mean(static_cast<size_t>(d), S(0)), running_var(static_cast<size_t>(d), S(1)) {}
};

// per-channel over all leading axes; x: [..., d]. Training uses batch stats
// (biased variance for normalization, unbiased pushed into the running
// average, momentum-style update); eval uses the running stats.
template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     BatchNormState<S>& state, bool training, bool update_running = true,
                     S momentum = S(0.1), S eps = S(1e-5)) {
  detail::check_defined<S>("batch_norm", {&x, &gain, &bias});
  const Index d = x.dim(-1);
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != d || bias.dim(0) != d)
    throw std::invalid_argument("batch_norm: x " + shape_str(x.shape()) + " gain " +
                                shape_str(gain.shape()));
  if (state.running_mean.size() != static_cast<size_t>(d) ||
      state.running_var.size() != static_cast<size_t>(d))
    throw std::invalid_argument("batch_norm: state width mismatch");
  detail::check_finite_input("batch_norm", x);
  const Index rows = x.numel() / d;
  if (training && rows < 2)
    throw std::invalid_argument("batch_norm: training needs at least 2 rows");

  auto mean_v = std::make_shared<std::vector<S>>(static_cast<size_t>(d));
  auto rstd_v = std::make_shared<std::vector<S>>(static_cast<size_t>(d));
  if (training) {
    for (Index j = 0; j < d; ++j) {
      double mu = 0;
      for (Index r = 0; r < rows; ++r) mu += x.values()[r * d + j];
      mu /= static_cast<double>(rows);
      double var = 0;
      for (Index r = 0; r < rows; ++r) {
        const double c = x.values()[r * d + j] - mu;
        var += c * c;
      }
      var /= static_cast<double>(rows);
      (*mean_v)[static_cast<size_t>(j)] = static_cast<S>(mu);
      (*rstd_v)[static_cast<size_t>(j)] =
          static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      if (update_running) {
        const double unbiased = var * static_cast<double>(rows) / static_cast<double>(rows - 1);
        state.running_mean[static_cast<size_t>(j)] = static_cast<S>(
            (1.0 - momentum) * state.running_mean[static_cast<size_t>(j)] + momentum * mu);
        state.running_var[static_cast<size_t>(j)] = static_cast<S>(
            (1.0 - momentum) * state.running_var[static_cast<size_t>(j)] + momentum * unbiased);
      }
    }
  } else {
    for (Index j = 0; j < d; ++j) {
      (*mean_v)[static_cast<size_t>(j)] = state.running_mean[static_cast<size_t>(j)];
      (*rstd_v)[static_cast<size_t>(j)] = static_cast<S>(
          1.0 / std::sqrt(static_cast<double>(state.running_var[static_cast<size_t>(j)]) +
                          static_cast<double>(eps)));
    }
  }

  std::vector<S> out(static_cast<size_t>(x.numel()));
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < d; ++j) {
      const S xh = (x.values()[r * d + j] - (*mean_v)[static_cast<size_t>(j)]) *
                   (*rstd_v)[static_cast<size_t>(j)];
      out[static_cast<size_t>(r * d + j)] = gain.values()[j] * xh + bias.values()[j];
    }

  return detail::make_node<S>(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, mean_v, rstd_v, training](detail::Node<S>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (Index j = 0; j < d; ++j) {
          const S mu = (*mean_v)[static_cast<size_t>(j)];
          const S rstd = (*rstd_v)[static_cast<size_t>(j)];
          const S g = pg.value[static_cast<size_t>(j)];
          double sum_dxh = 0, sum_dxh_xh = 0, sum_g = 0, sum_g_xh = 0;
          for (Index r = 0; r < rows; ++r) {
            const double xh = (px.value[static_cast<size_t>(r * d + j)] - mu) * rstd;
            const double go = self.grad[static_cast<size_t>(r * d + j)];
            sum_g += go;
            sum_g_xh += go * xh;
            const double dxh = go * g;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          if (pg.requires_grad) pg.grad[static_cast<size_t>(j)] += static_cast<S>(sum_g_xh);
          if (pb.requires_grad) pb.grad[static_cast<size_t>(j)] += static_cast<S>(sum_g);
          if (px.requires_grad) {
            if (training) {
              const double inv_n = 1.0 / static_cast<double>(rows);
              for (Index r = 0; r < rows; ++r) {
                const double xh = (px.value[static_cast<size_t>(r * d + j)] - mu) * rstd;
                const double dxh = static_cast<double>(self.grad[static_cast<size_t>(r * d + j)]) * g;
                px.grad[static_cast<size_t>(r * d + j)] += static_cast<S>(
                    rstd * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh));
              }
            } else {
              for (Index r = 0; r < rows; ++r)
                px.grad[static_cast<size_t>(r * d + j)] +=
                    self.grad[static_cast<size_t>(r * d + j)] * g * rstd;
            }
          }
        }
      });
}

// ---- regularization ----

// inverted dropout; identity (the same handle, no copy) when inactive
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double p, bool training, RngState& rng) {
  detail::check_defined<S>("dropout", {&x});
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<S>>(static_cast<size_t>(x.numel()));
  std::vector<S> out(static_cast<size_t>(x.numel()));
  for (Index i = 0; i < x.numel(); ++i) {
    const S m = rng.uniform() >= p ? keep_scale : S(0);
    (*mask)[static_cast<size_t>(i)] = m;
    out[static_cast<size_t>(i)] = x.values()[i] * m;
  }
  return detail::make_node<S>(x.shape(), std::move(out), {x}, [mask](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * (*mask)[i];
  });
}

// ---- shape ops ----

template <class S>
Tensor<S> slice_lastdim(const Tensor<S>& x, Index start, Index len) {
  detail::check_defined<S>("slice_lastdim", {&x});
  const Index d = x.dim(-1);
  if (start < 0 || len <= 0 || start + len > d)
    throw std::invalid_argument("slice_lastdim: [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of width " +
                                std::to_string(d));
  const Index rows = x.numel() / d;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  std::vector<S> out(static_cast<size_t>(rows * len));
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < len; ++j)
      out[static_cast<size_t>(r * len + j)] = x.values()[r * d + start + j];
  return detail::make_node<S>(std::move(out_shape), std::move(out), {x},
                              [rows, d, start, len](detail::Node<S>& self) {
                                auto& px = *self.parents[0];
                                px.ensure_grad();
                                for (Index r = 0; r < rows; ++r)
                                  for (Index j = 0; j < len; ++j)
                                    px.grad[static_cast<size_t>(r * d + start + j)] +=
                                        self.grad[static_cast<size_t>(r * len + j)];
                              });
}

template <class S>
Tensor<S> concat_lastdim(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_lastdim: no inputs");
  for (const auto& t : parts) detail::check_defined<S>("concat_lastdim", {&t});
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  Index total = 0;
  std::vector<Index> widths;
  for (const auto& t : parts) {
    Shape l(t.shape().begin(), t.shape().end() - 1);
    if (l != lead)
      throw std::invalid_argument("concat_lastdim: leading shape mismatch " + shape_str(t.shape()) +
                                  " vs " + shape_str(parts[0].shape()));
    widths.push_back(t.dim(-1));
    total += t.dim(-1);
  }
  const Index rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  std::vector<S> out(static_cast<size_t>(rows * total));
  Index off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const Index w = widths[k];
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < w; ++j)
        out[static_cast<size_t>(r * total + off + j)] = parts[k].values()[r * w + j];
    off += w;
  }
  return detail::make_node<S>(std::move(out_shape), std::move(out), parts,
                              [rows, total, widths](detail::Node<S>& self) {
                                Index off = 0;
                                for (size_t k = 0; k < self.parents.size(); ++k) {
                                  auto& p = *self.parents[k];
                                  const Index w = widths[k];
                                  if (p.requires_grad) {
                                    p.ensure_grad();
                                    for (Index r = 0; r < rows; ++r)
                                      for (Index j = 0; j < w; ++j)
                                        p.grad[static_cast<size_t>(r * w + j)] +=
                                            self.grad[static_cast<size_t>(r * total + off + j)];
                                  }
                                  off += w;
                                }
                              });
}

// [B, T, d] -> [B, d]
template <class S>
Tensor<S> time_mean(const Tensor<S>& x) {
  detail::check_defined<S>("time_mean", {&x});
  if (x.ndim() != 3) throw std::invalid_argument("time_mean: needs [B,T,d], got " + shape_str(x.shape()));
  const Index B = x.dim(0), T = x.dim(1), d = x.dim(2);
  std::vector<S> out(static_cast<size_t>(B * d), S(0));
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index j = 0; j < d; ++j)
        out[static_cast<size_t>(b * d + j)] += x.values()[(b * T + t) * d + j];
  const S inv_t = S(1) / static_cast<S>(T);
  for (S& v : out) v *= inv_t;
  return detail::make_node<S>({B, d}, std::move(out), {x}, [B, T, d](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    const S inv_t = S(1) / static_cast<S>(T);
    for (Index b = 0; b < B; ++b)
      for (Index t = 0; t < T; ++t)
        for (Index j = 0; j < d; ++j)
          px.grad[static_cast<size_t>((b * T + t) * d + j)] +=
              self.grad[static_cast<size_t>(b * d + j)] * inv_t;
  });
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  detail::check_defined<S>("sum_all", {&x});
  double s = 0;
  for (S v : x.values()) s += v;
  return detail::make_node<S>({}, {static_cast<S>(s)}, {x}, [](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (S& g : px.grad) g += self.grad[0];
  });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  detail::check_defined<S>("mean_all", {&x});
  double s = 0;
  for (S v : x.values()) s += v;
  const Index n = x.numel();
  return detail::make_node<S>({}, {static_cast<S>(s / static_cast<double>(n))}, {x},
                              [n](detail::Node<S>& self) {
                                auto& px = *self.parents[0];
                                px.ensure_grad();
                                const S inv = S(1) / static_cast<S>(n);
                                for (S& g : px.grad) g += self.grad[0] * inv;
                              });
}

// ---- losses ----

// logits: [B, C]; mean over the batch of (logsumexp(z) - z[label])
template <class S>
Tensor<S> cross_entropy_with_logits(const Tensor<S>& logits, const std::vector<int>& labels) {
  detail::check_defined<S>("cross_entropy_with_logits", {&logits});
  if (logits.ndim() != 2)
    throw std::invalid_argument("cross_entropy_with_logits: logits must be [B,C], got " +
                                shape_str(logits.shape()));
  const Index B = logits.dim(0), C = logits.dim(1);
  if (static_cast<Index>(labels.size()) != B)
    throw std::invalid_argument("cross_entropy_with_logits: batch " + std::to_string(B) +
                                " vs labels " + std::to_string(labels.size()));
  for (int y : labels)
    if (y < 0 || y >= C)
      throw std::invalid_argument("cross_entropy_with_logits: label " + std::to_string(y) +
                                  " outside [0," + std::to_string(C) + ")");
  detail::check_finite_input("cross_entropy_with_logits", logits);
  auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(B * C));
  double loss = 0;
  for (Index b = 0; b < B; ++b) {
    const S* z = logits.values().data() + b * C;
    S mx = z[0];
    for (Index c = 1; c < C; ++c) mx = std::max(mx, z[c]);
    double denom = 0;
    for (Index c = 0; c < C; ++c) {
      const double e = std::exp(static_cast<double>(z[c] - mx));
      (*probs)[static_cast<size_t>(b * C + c)] = static_cast<S>(e);
      denom += e;
    }
    for (Index c = 0; c < C; ++c)
      (*probs)[static_cast<size_t>(b * C + c)] =
          static_cast<S>(static_cast<double>((*probs)[static_cast<size_t>(b * C + c)]) / denom);
    const double lse = static_cast<double>(mx) + std::log(denom);
    loss += lse - static_cast<double>(z[labels[static_cast<size_t>(b)]]);
  }
  loss /= static_cast<double>(B);
  auto labels_s = std::make_shared<std::vector<int>>(labels);
  return detail::make_node<S>({}, {static_cast<S>(loss)}, {logits},
                              [B, C, probs, labels_s](detail::Node<S>& self) {
                                auto& pl = *self.parents[0];
                                pl.ensure_grad();
                                const S g = self.grad[0] / static_cast<S>(B);
                                for (Index b = 0; b < B; ++b) {
                                  for (Index c = 0; c < C; ++c)
                                    pl.grad[static_cast<size_t>(b * C + c)] +=
                                        g * (*probs)[static_cast<size_t>(b * C + c)];
                                  pl.grad[static_cast<size_t>(
                                      b * C + (*labels_s)[static_cast<size_t>(b)])] -= g;
                                }
                              });
}

// ---- attention ----

template <class S>
struct AttentionWeights {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

// x: [B, T, d]; per-head channel blocks are contiguous slices; dropout acts
// on the attention weights
template <class S>
Tensor<S> multi_head_self_attention(const Tensor<S>& x, const AttentionWeights<S>& w, int heads,
                                    double weight_dropout, bool training, RngState& rng) {
  detail::check_defined<S>("multi_head_self_attention", {&x});
  if (x.ndim() != 3)
    throw std::invalid_argument("multi_head_self_attention: x must be [B,T,d], got " +
                                shape_str(x.shape()));
  const Index d = x.dim(2);
  if (heads <= 0 || d % heads != 0)
    throw std::invalid_argument("multi_head_self_attention: width " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  for (const Tensor<S>* m : {&w.wq, &w.wk, &w.wv, &w.wo})
    if (m->ndim() != 2 || m->dim(0) != d || m->dim(1) != d)
      throw std::invalid_argument("multi_head_self_attention: projection must be [d,d]");
  const Index dh = d / heads;
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<S> q = bias_add(matmul(x, w.wq), w.bq);
  Tensor<S> k = bias_add(matmul(x, w.wk), w.bk);
  Tensor<S> v = bias_add(matmul(x, w.wv), w.bv);

  std::vector<Tensor<S>> ctx;
  ctx.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor<S> qh = slice_lastdim(q, h * dh, dh);
    Tensor<S> kh = slice_lastdim(k, h * dh, dh);
    Tensor<S> vh = slice_lastdim(v, h * dh, dh);
    Tensor<S> scores = scale(bmm(qh, transpose_last2(kh)), inv_sqrt_dh);
    Tensor<S> attn = softmax(scores, -1);
    attn = dropout(attn, weight_dropout, training, rng);
    ctx.push_back(bmm(attn, vh));
  }
  return bias_add(matmul(concat_lastdim(ctx), w.wo), w.bo);
}

// ---- gradient verification ----

struct GradCheckEntry {
  std::string param;
  Index index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradCheckReport {
  double max_rel_err = 0;
  double tol = 0;
  bool passed = false;
  std::vector<GradCheckEntry> entries;
};

// Central finite differences against reverse-mode grads on sampled
// coordinates. loss_fn must be deterministic (it is run twice to verify);
// it must rebuild the graph and return a scalar each call.
template <class S, class LossFn>
GradCheckReport grad_check(LossFn&& loss_fn, std::span<Parameter<S>> params, double h, double tol,
                           Index samples_per_param, RngState rng) {
  static_assert(std::is_same_v<S, double> || std::is_same_v<S, float>);
  {
    const S l1 = loss_fn().item();
    const S l2 = loss_fn().item();
    if (std::memcmp(&l1, &l2, sizeof(S)) != 0)
      throw std::runtime_error("grad_check: forward pass is not deterministic");
  }
  for (auto& p : params) p.tensor.zero_grad();
  Tensor<S> loss = loss_fn();
  loss.backward();

  GradCheckReport report;
  report.tol = tol;
  for (auto& p : params) {
    const Index n = p.tensor.numel();
    std::vector<Index> idx;
    if (n <= samples_per_param) {
      idx.resize(static_cast<size_t>(n));
      std::iota(idx.begin(), idx.end(), Index(0));
    } else {
      std::unordered_set<Index> chosen;
      while (static_cast<Index>(chosen.size()) < samples_per_param)
        chosen.insert(static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(n))));
      idx.assign(chosen.begin(), chosen.end());
      std::sort(idx.begin(), idx.end());
    }
    auto vals = p.tensor.values_mut();
    auto grads = p.tensor.grad();
    for (Index i : idx) {
      const S saved = vals[static_cast<size_t>(i)];
      const double hi = h * std::max(1.0, std::abs(static_cast<double>(saved)));
      vals[static_cast<size_t>(i)] = saved + static_cast<S>(hi);
      const double fp = static_cast<double>(loss_fn().item());
      vals[static_cast<size_t>(i)] = saved - static_cast<S>(hi);
      const double fm = static_cast<double>(loss_fn().item());
      vals[static_cast<size_t>(i)] = saved;
      GradCheckEntry e;
      e.param = p.name;
      e.index = i;
      e.numeric = (fp - fm) / (2.0 * hi);
      e.analytic = grads.empty() ? 0.0 : static_cast<double>(grads[static_cast<size_t>(i)]);
      // the denominator floor keeps finite-difference roundoff on true-zero
      // gradients from registering as relative error
      e.rel_err = std::abs(e.analytic - e.numeric) /
                  std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-4});
      report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
      report.entries.push_back(std::move(e));
    }
  }
  report.passed = report.max_rel_err < tol;
  return report;
}

}  // namespace p3d
