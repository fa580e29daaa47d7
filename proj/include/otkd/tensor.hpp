#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "otkd/error.hpp"
#include "otkd/random.hpp"

namespace otkd {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Per-backward-pass gradient buffers, keyed by node identity.
struct GradMap {
  std::unordered_map<const Node*, std::vector<double>> bufs;

  std::vector<double>* find(const Node* n) {
    auto it = bufs.find(n);
    return it == bufs.end() ? nullptr : &it->second;
  }

  std::vector<double>& acc(const Node* n, std::size_t size) {
    auto it = bufs.find(n);
    if (it == bufs.end()) it = bufs.emplace(n, std::vector<double>(size, 0.0)).first;
    return it->second;
  }
};

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::string name;        // empty unless a named leaf
  const char* op = nullptr;  // null for leaves
  std::uint64_t id = 0;      // creation order; parents always have smaller ids
  std::vector<NodePtr> parents;
  std::function<void(const std::vector<double>&, GradMap&)> backward_fn;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

/// Dense row-major tensor of 64-bit reals. Cheap to copy (shared node);
/// arithmetic on tensors with requires_grad set records the op for
/// reverse-mode differentiation.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    }
    for (int d : shape) {
      if (d < 0) throw ShapeError("tensor: negative extent in shape " + shape_str(shape));
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
    node_->id = detail::next_node_id();
  }

  static Tensor zeros(Shape shape) {
    std::vector<double> d(static_cast<std::size_t>(numel(shape)), 0.0);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, double v) {
    std::vector<double> d(static_cast<std::size_t>(numel(shape)), v);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor randn(Shape shape, StreamRng& rng, double stddev = 1.0) {
    std::vector<double> d(static_cast<std::size_t>(numel(shape)));
    for (double& x : d) x = rng.normal() * stddev;
    return Tensor(std::move(shape), std::move(d));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  const std::vector<double>& data() const { return node_->value; }

  /// Direct write access; meant for leaves (parameter updates between passes).
  std::vector<double>& mutable_data() { return node_->value; }

  double item() const {
    if (size() != 1) throw UsageError("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  double at(std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  const std::string& name() const { return node_->name; }
  Tensor& set_name(std::string n) {
    node_->name = std::move(n);
    return *this;
  }

  /// Value copy with no graph history.
  Tensor detached() const { return Tensor(node_->shape, node_->value); }

  detail::Node* node() const { return node_.get(); }
  const detail::NodePtr& node_ptr() const { return node_; }

 private:
  detail::NodePtr node_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

using BackwardFn = std::function<void(const std::vector<double>&, GradMap&)>;

/// Builds an op result; records parents and the backward closure only when
/// some input carries gradient.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          const std::vector<Tensor>& inputs, BackwardFn fn) {
  check_finite(op, value);
  bool grad = false;
  for (const Tensor& t : inputs) grad = grad || t.requires_grad();
  Tensor out(std::move(shape), std::move(value), grad);
  if (grad) {
    Node* n = out.node();
    n->op = op;
    n->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward_fn = std::move(fn);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast arithmetic.
// Supported operand pairings: identical shapes, scalar (numel 1) on either
// side, or one operand whose shape equals a trailing suffix of the other's.
// Anything fancier is rejected so the gradient rules stay auditable.
// ---------------------------------------------------------------------------

namespace detail {

struct BroadcastPlan {
  bool swapped = false;   // true when the first operand is the small one
  std::int64_t repeat = 1;  // leading repetition count of the small operand
  std::int64_t inner = 1;   // elements of the small operand
};

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.inner = numel(a);
    return p;
  }
  const bool b_small = numel(b) == 1 || is_suffix(b, a);
  const bool a_small = numel(a) == 1 || is_suffix(a, b);
  if (b_small && numel(a) >= numel(b)) {
    p.inner = numel(b) == 1 ? 1 : numel(b);
    p.repeat = numel(a) / std::max<std::int64_t>(p.inner, 1);
    return p;
  }
  if (a_small) {
    p.swapped = true;
    p.inner = numel(a) == 1 ? 1 : numel(a);
    p.repeat = numel(b) / std::max<std::int64_t>(p.inner, 1);
    return p;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// out[r*inner + i] = combine(big[r*inner + i], small[i]); scalar small has inner == 1.
template <class F>
inline std::vector<double> broadcast_apply(const std::vector<double>& big,
                                           const std::vector<double>& small,
                                           const BroadcastPlan& p, F combine) {
  std::vector<double> out(big.size());
  if (small.size() == 1) {
    double s = small[0];
    for (std::size_t i = 0; i < big.size(); ++i) out[i] = combine(big[i], s);
    return out;
  }
  for (std::int64_t r = 0; r < p.repeat; ++r) {
    const std::size_t base = static_cast<std::size_t>(r * p.inner);
    for (std::int64_t i = 0; i < p.inner; ++i) {
      out[base + static_cast<std::size_t>(i)] =
          combine(big[base + static_cast<std::size_t>(i)], small[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

// Reduce a big-shaped gradient onto the small operand by summing repeats.
inline void reduce_into_small(const std::vector<double>& g, std::vector<double>& acc,
                              const BroadcastPlan& p) {
  if (acc.size() == 1) {
    double s = 0.0;
    for (double v : g) s += v;
    acc[0] += s;
    return;
  }
  for (std::int64_t r = 0; r < p.repeat; ++r) {
    const std::size_t base = static_cast<std::size_t>(r * p.inner);
    for (std::int64_t i = 0; i < p.inner; ++i) {
      acc[static_cast<std::size_t>(i)] += g[base + static_cast<std::size_t>(i)];
    }
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto p = detail::plan_broadcast("add", a.shape(), b.shape());
  const Tensor& big = p.swapped ? b : a;
  const Tensor& small = p.swapped ? a : b;
  auto out = detail::broadcast_apply(big.data(), small.data(), p,
                                     [](double x, double y) { return x + y; });
  auto* bn = big.node();
  auto* sn = small.node();
  bool bg = big.requires_grad(), sg = small.requires_grad();
  return detail::make_result(
      "add", big.shape(), std::move(out), {a, b},
      [bn, sn, p, bg, sg](const std::vector<double>& g, detail::GradMap& gm) {
        if (bg) {
          auto& acc = gm.acc(bn, bn->value.size());
          for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
        if (sg) detail::reduce_into_small(g, gm.acc(sn, sn->value.size()), p);
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto p = detail::plan_broadcast("sub", a.shape(), b.shape());
  const Tensor& big = p.swapped ? b : a;
  const Tensor& small = p.swapped ? a : b;
  const double sign_small = p.swapped ? 1.0 : -1.0;  // gradient sign of the small operand
  auto out = p.swapped ? detail::broadcast_apply(big.data(), small.data(), p,
                                                 [](double x, double y) { return y - x; })
                       : detail::broadcast_apply(big.data(), small.data(), p,
                                                 [](double x, double y) { return x - y; });
  auto* bn = big.node();
  auto* sn = small.node();
  bool bg = big.requires_grad(), sg = small.requires_grad();
  const double sign_big = p.swapped ? -1.0 : 1.0;
  return detail::make_result(
      "sub", big.shape(), std::move(out), {a, b},
      [bn, sn, p, bg, sg, sign_big, sign_small](const std::vector<double>& g,
                                                detail::GradMap& gm) {
        if (bg) {
          auto& acc = gm.acc(bn, bn->value.size());
          for (std::size_t i = 0; i < g.size(); ++i) acc[i] += sign_big * g[i];
        }
        if (sg) {
          std::vector<double> gs(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) gs[i] = sign_small * g[i];
          detail::reduce_into_small(gs, gm.acc(sn, sn->value.size()), p);
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto p = detail::plan_broadcast("mul", a.shape(), b.shape());
  const Tensor& big = p.swapped ? b : a;
  const Tensor& small = p.swapped ? a : b;
  auto out = detail::broadcast_apply(big.data(), small.data(), p,
                                     [](double x, double y) { return x * y; });
  auto* bn = big.node();
  auto* sn = small.node();
  bool bg = big.requires_grad(), sg = small.requires_grad();
  // backward closures need both values; keep copies alive via shared_ptr nodes
  auto bp = big.node_ptr();
  auto sp = small.node_ptr();
  return detail::make_result(
      "mul", big.shape(), std::move(out), {a, b},
      [bn, sn, bp, sp, p, bg, sg](const std::vector<double>& g, detail::GradMap& gm) {
        const auto& bv = bp->value;
        const auto& sv = sp->value;
        if (bg) {
      auto& acc = gm.acc(bn, bv.size());
      if (sv.size() == 1) {
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * sv[0];
      } else {
        for (std::int64_t r = 0; r < p.repeat; ++r) {
          const std::size_t base = static_cast<std::size_t>(r * p.inner);
          for (std::int64_t i = 0; i < p.inner; ++i) {
            const std::size_t k = base + static_cast<std::size_t>(i);
            acc[k] += g[k] * sv[static_cast<std::size_t>(i)];
          }
        }
      }
        }
        if (sg) {
          std::vector<double> gs(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) gs[i] = g[i] * bv[i];
          detail::reduce_into_small(gs, gm.acc(sn, sv.size()), p);
        }
      });
}

inline Tensor div_scalar(const Tensor& a, double c) {
  if (c == 0.0) throw NumericError("div_scalar: division by zero");
  std::vector<double> out(a.data());
  for (double& v : out) v /= c;
  auto* an = a.node();
  bool ag = a.requires_grad();
  return detail::make_result("div_scalar", a.shape(), std::move(out), {a},
                             [an, c, ag](const std::vector<double>& g, detail::GradMap& gm) {
                               if (!ag) return;
                               auto& acc = gm.acc(an, an->value.size());
                               for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] / c;
                             });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, double c) { return div_scalar(a, c); }

// ---------------------------------------------------------------------------
// Unary maps.
// ---------------------------------------------------------------------------

namespace detail {

template <class F, class DF>
inline Tensor unary_op(const char* op, const Tensor& a, F f, DF dfdx_from_xy) {
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  auto ap = a.node_ptr();
  auto* an = a.node();
  bool ag = a.requires_grad();
  // share the forward result with the closure so dfdx can use y when cheaper
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(op, a.shape(), std::move(out), {a},
                     [an, ap, y, dfdx_from_xy, ag](const std::vector<double>& g, GradMap& gm) {
                       if (!ag) return;
                       auto& acc = gm.acc(an, ap->value.size());
                       const auto& x = ap->value;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         acc[i] += g[i] * dfdx_from_xy(x[i], (*y)[i]);
                       }
                     });
}

}  // namespace detail

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Last-dimension row ops: softmax, log-softmax, layer norm.
// ---------------------------------------------------------------------------

namespace detail {

inline void row_extents(const char* op, const Shape& s, std::int64_t& rows, std::int64_t& cols) {
  if (s.empty()) throw ShapeError(std::string(op) + ": rank-0 tensor");
  cols = s.back();
  if (cols <= 0) throw ShapeError(std::string(op) + ": empty last dimension " + shape_str(s));
  rows = numel(s) / cols;
}

}  // namespace detail

/// Softmax over the last dimension, max-shifted for stability.
inline Tensor softmax(const Tensor& a) {
  std::int64_t rows, cols;
  detail::row_extents("softmax", a.shape(), rows, cols);
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r * cols);
    double m = x[base];
    for (std::int64_t c = 1; c < cols; ++c) m = std::max(m, x[base + static_cast<std::size_t>(c)]);
    double z = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      const std::size_t i = base + static_cast<std::size_t>(c);
      out[i] = std::exp(x[i] - m);
      z += out[i];
    }
    for (std::int64_t c = 0; c < cols; ++c) out[base + static_cast<std::size_t>(c)] /= z;
  }
  auto* an = a.node();
  bool ag = a.requires_grad();
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result(
      "softmax", a.shape(), std::move(out), {a},
      [an, y, rows, cols, ag](const std::vector<double>& g, detail::GradMap& gm) {
        if (!ag) return;
        auto& acc = gm.acc(an, y->size());
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r * cols);
          double dot = 0.0;
          for (std::int64_t c = 0; c < cols; ++c) {
            const std::size_t i = base + static_cast<std::size_t>(c);
            dot += g[i] * (*y)[i];
          }
          for (std::int64_t c = 0; c < cols; ++c) {
            const std::size_t i = base + static_cast<std::size_t>(c);
            acc[i] += (g[i] - dot) * (*y)[i];
          }
        }
      });
}

/// Log-softmax over the last dimension (max-shift + log-sum-exp).
inline Tensor log_softmax(const Tensor& a) {
  std::int64_t rows, cols;
  detail::row_extents("log_softmax", a.shape(), rows, cols);
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r * cols);
    double m = x[base];
    for (std::int64_t c = 1; c < cols; ++c) m = std::max(m, x[base + static_cast<std::size_t>(c)]);
    double z = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) z += std::exp(x[base + static_cast<std::size_t>(c)] - m);
    const double lse = m + std::log(z);
    for (std::int64_t c = 0; c < cols; ++c) {
      const std::size_t i = base + static_cast<std::size_t>(c);
      out[i] = x[i] - lse;
    }
  }
  auto* an = a.node();
  bool ag = a.requires_grad();
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result(
      "log_softmax", a.shape(), std::move(out), {a},
      [an, y, rows, cols, ag](const std::vector<double>& g, detail::GradMap& gm) {
        if (!ag) return;
        auto& acc = gm.acc(an, y->size());
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r * cols);
          double gsum = 0.0;
          for (std::int64_t c = 0; c < cols; ++c) gsum += g[base + static_cast<std::size_t>(c)];
          for (std::int64_t c = 0; c < cols; ++c) {
            const std::size_t i = base + static_cast<std::size_t>(c);
            acc[i] += g[i] - std::exp((*y)[i]) * gsum;
          }
        }
      });
}

/// Layer normalization over the last dimension with learned scale and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  std::int64_t rows, cols;
  detail::row_extents("layer_norm", x.shape(), rows, cols);
  if (gamma.size() != cols || beta.size() != cols) {
    throw ShapeError("layer_norm: scale/shift " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match last dim of " +
                     shape_str(x.shape()));
  }
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r * cols);
    double mean = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) mean += xv[base + static_cast<std::size_t>(c)];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      const double d = xv[base + static_cast<std::size_t>(c)] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<std::size_t>(r)] = is;
    for (std::int64_t c = 0; c < cols; ++c) {
      const std::size_t i = base + static_cast<std::size_t>(c);
      (*xhat)[i] = (xv[i] - mean) * is;
      out[i] = (*xhat)[i] * gv[static_cast<std::size_t>(c)] + bv[static_cast<std::size_t>(c)];
    }
  }
  auto* xn = x.node();
  auto* gn = gamma.node();
  auto* bn = beta.node();
  bool xg = x.requires_grad(), gg = gamma.requires_grad(), bg = beta.requires_grad();
  auto gp = gamma.node_ptr();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, gp, xhat, inv_sigma, rows, cols, xg, gg, bg](const std::vector<double>& g,
                                                                detail::GradMap& gm) {
        const auto& gv = gp->value;
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r * cols);
          if (gg) {
            auto& accg = gm.acc(gn, gv.size());
            for (std::int64_t c = 0; c < cols; ++c) {
              const std::size_t i = base + static_cast<std::size_t>(c);
              accg[static_cast<std::size_t>(c)] += g[i] * (*xhat)[i];
            }
          }
          if (bg) {
            auto& accb = gm.acc(bn, gv.size());
            for (std::int64_t c = 0; c < cols; ++c) {
              accb[static_cast<std::size_t>(c)] += g[base + static_cast<std::size_t>(c)];
            }
          }
          if (xg) {
            auto& accx = gm.acc(xn, xhat->size());
            // dx = (h - mean(h) - xhat * mean(h .* xhat)) / sigma, h = g .* gamma
            double mh = 0.0, mhx = 0.0;
            for (std::int64_t c = 0; c < cols; ++c) {
              const std::size_t i = base + static_cast<std::size_t>(c);
              const double h = g[i] * gv[static_cast<std::size_t>(c)];
              mh += h;
              mhx += h * (*xhat)[i];
            }
            mh /= static_cast<double>(cols);
            mhx /= static_cast<double>(cols);
            const double is = (*inv_sigma)[static_cast<std::size_t>(r)];
            for (std::int64_t c = 0; c < cols; ++c) {
              const std::size_t i = base + static_cast<std::size_t>(c);
              const double h = g[i] * gv[static_cast<std::size_t>(c)];
              accx[i] += (h - mh - (*xhat)[i] * mhx) * is;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and structure ops.
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto* an = a.node();
  bool ag = a.requires_grad();
  std::size_t n = a.data().size();
  return detail::make_result("sum", {1}, {s}, {a},
                             [an, ag, n](const std::vector<double>& g, detail::GradMap& gm) {
                               if (!ag) return;
                               auto& acc = gm.acc(an, n);
                               for (std::size_t i = 0; i < n; ++i) acc[i] += g[0];
                             });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw UsageError("mean: empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.size());
  auto* an = a.node();
  bool ag = a.requires_grad();
  std::size_t cnt = a.data().size();
  return detail::make_result("mean", {1}, {s / n}, {a},
                             [an, ag, cnt, n](const std::vector<double>& g, detail::GradMap& gm) {
                               if (!ag) return;
                               auto& acc = gm.acc(an, cnt);
                               const double gv = g[0] / n;
                               for (std::size_t i = 0; i < cnt; ++i) acc[i] += gv;
                             });
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(a.shape()));
  const std::int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      out[static_cast<std::size_t>(j * m + i)] = x[static_cast<std::size_t>(i * n + j)];
    }
  }
  auto* an = a.node();
  bool ag = a.requires_grad();
  return detail::make_result(
      "transpose", {static_cast<int>(n), static_cast<int>(m)}, std::move(out), {a},
      [an, ag, m, n](const std::vector<double>& g, detail::GradMap& gm) {
        if (!ag) return;
        auto& acc = gm.acc(an, static_cast<std::size_t>(m * n));
        for (std::int64_t j = 0; j < n; ++j) {
          for (std::int64_t i = 0; i < m; ++i) {
            acc[static_cast<std::size_t>(i * n + j)] += g[static_cast<std::size_t>(j * m + i)];
          }
        }
      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto* an = a.node();
  bool ag = a.requires_grad();
  std::size_t n = a.data().size();
  return detail::make_result("reshape", std::move(shape), a.data(), {a},
                             [an, ag, n](const std::vector<double>& g, detail::GradMap& gm) {
                               if (!ag) return;
                               auto& acc = gm.acc(an, n);
                               for (std::size_t i = 0; i < n; ++i) acc[i] += g[i];
                             });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i * k + p)];
      if (aip == 0.0) continue;
      const std::size_t brow = static_cast<std::size_t>(p * n);
      const std::size_t orow = static_cast<std::size_t>(i * n);
      for (std::int64_t j = 0; j < n; ++j) out[orow + static_cast<std::size_t>(j)] += aip * bv[brow + static_cast<std::size_t>(j)];
    }
  }
  auto* an = a.node();
  auto* bn = b.node();
  auto ap = a.node_ptr();
  auto bp = b.node_ptr();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return detail::make_result(
      "matmul", {static_cast<int>(m), static_cast<int>(n)}, std::move(out), {a, b},
      [an, bn, ap, bp, m, k, n, ag, bg](const std::vector<double>& g, detail::GradMap& gm) {
        const auto& av = ap->value;
        const auto& bv = bp->value;
        if (ag) {
          // dA = g . B^T
          auto& acc = gm.acc(an, av.size());
          for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
              const double gij = g[static_cast<std::size_t>(i * n + j)];
              if (gij == 0.0) continue;
              for (std::int64_t p = 0; p < k; ++p) {
                acc[static_cast<std::size_t>(i * k + p)] += gij * bv[static_cast<std::size_t>(p * n + j)];
              }
            }
          }
        }
        if (bg) {
          // dB = A^T . g
          auto& acc = gm.acc(bn, bv.size());
          for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t p = 0; p < k; ++p) {
              const double aip = av[static_cast<std::size_t>(i * k + p)];
              if (aip == 0.0) continue;
              for (std::int64_t j = 0; j < n; ++j) {
                acc[static_cast<std::size_t>(p * n + j)] += aip * g[static_cast<std::size_t>(i * n + j)];
              }
            }
          }
        }
      });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank) throw UsageError("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const Tensor& t : parts) {
    if (t.ndim() != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && t.dim(d) != s0[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                         shape_str(s0));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += t.dim(axis);
  }
  // outer = product of dims before axis; inner = product after
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[static_cast<std::size_t>(d)];
  const std::int64_t out_axis = out_shape[static_cast<std::size_t>(axis)];
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  std::int64_t offset = 0;
  for (const Tensor& t : parts) {
    const std::int64_t ta = t.dim(axis);
    const auto& tv = t.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t x = 0; x < ta; ++x) {
        const std::size_t src = static_cast<std::size_t>((o * ta + x) * inner);
        const std::size_t dst = static_cast<std::size_t>((o * out_axis + offset + x) * inner);
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(src), inner,
                    out.begin() + static_cast<std::ptrdiff_t>(dst));
      }
    }
    offset += ta;
  }
  struct PartInfo {
    detail::Node* node;
    std::int64_t axis_len;
    std::int64_t offset;
    bool grad;
  };
  auto infos = std::make_shared<std::vector<PartInfo>>();
  offset = 0;
  for (const Tensor& t : parts) {
    infos->push_back({t.node(), t.dim(axis), offset, t.requires_grad()});
    offset += t.dim(axis);
  }
  return detail::make_result(
      "concat", out_shape, std::move(out), parts,
      [infos, outer, inner, out_axis](const std::vector<double>& g, detail::GradMap& gm) {
        for (const auto& pi : *infos) {
          if (!pi.grad) continue;
          auto& acc = gm.acc(pi.node, static_cast<std::size_t>(outer * pi.axis_len * inner));
          for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t x = 0; x < pi.axis_len; ++x) {
              const std::size_t src =
                  static_cast<std::size_t>((o * out_axis + pi.offset + x) * inner);
              const std::size_t dst = static_cast<std::size_t>((o * pi.axis_len + x) * inner);
              for (std::int64_t i = 0; i < inner; ++i) {
                acc[dst + static_cast<std::size_t>(i)] += g[src + static_cast<std::size_t>(i)];
              }
            }
          }
        }
      });
}

inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  const int rank = a.ndim();
  if (axis < 0 || axis >= rank) throw UsageError("slice: axis out of range");
  if (start < 0 || len < 0 || start + len > a.dim(axis)) {
    throw UsageError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds extent " +
                     std::to_string(a.dim(axis)));
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= a.dim(d);
  const std::int64_t in_axis = a.dim(axis);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
  const auto& xv = a.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t x = 0; x < len; ++x) {
      const std::size_t src = static_cast<std::size_t>((o * in_axis + start + x) * inner);
      const std::size_t dst = static_cast<std::size_t>((o * len + x) * inner);
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(src), inner,
                  out.begin() + static_cast<std::ptrdiff_t>(dst));
    }
  }
  auto* an = a.node();
  bool ag = a.requires_grad();
  std::size_t total = xv.size();
  return detail::make_result(
      "slice", out_shape, std::move(out), {a},
      [an, ag, outer, inner, in_axis, start, len, total](const std::vector<double>& g,
                                                         detail::GradMap& gm) {
        if (!ag) return;
        auto& acc = gm.acc(an, total);
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t x = 0; x < len; ++x) {
            const std::size_t dst = static_cast<std::size_t>((o * in_axis + start + x) * inner);
            const std::size_t src = static_cast<std::size_t>((o * len + x) * inner);
            for (std::int64_t i = 0; i < inner; ++i) {
              acc[dst + static_cast<std::size_t>(i)] += g[src + static_cast<std::size_t>(i)];
            }
          }
        }
      });
}

/// Row gather from a table (R x H) by integer ids; gradient scatters back.
inline Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) {
    throw ShapeError("embedding_gather: table must be rank-2, got " + shape_str(table.shape()));
  }
  const std::int64_t rows = table.dim(0), width = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      throw UsageError("embedding_gather: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(rows) + ")");
    }
  }
  std::vector<double> out(ids.size() * static_cast<std::size_t>(width));
  const auto& tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(width)));
  }
  auto* tn = table.node();
  bool tg = table.requires_grad();
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  std::size_t total = tv.size();
  return detail::make_result(
      "embedding_gather", {static_cast<int>(ids.size()), static_cast<int>(width)}, std::move(out),
      {table},
      [tn, tg, ids_copy, width, total](const std::vector<double>& g, detail::GradMap& gm) {
        if (!tg) return;
        auto& acc = gm.acc(tn, total);
        for (std::size_t i = 0; i < ids_copy->size(); ++i) {
          const std::size_t dst = static_cast<std::size_t>((*ids_copy)[i] * width);
          const std::size_t src = i * static_cast<std::size_t>(width);
          for (std::int64_t c = 0; c < width; ++c) {
            acc[dst + static_cast<std::size_t>(c)] += g[src + static_cast<std::size_t>(c)];
          }
        }
      });
}

/// 1-D convolution over frames. x: T x Cin, w: Cout x (Cin/groups) x k,
/// b: Cout. Stride >= 1, dilation 1, symmetric zero padding floor(k/2);
/// output length ceil(T / stride).
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                     int groups = 1) {
  if (x.ndim() != 2 || w.ndim() != 3) {
    throw ShapeError("conv1d: expected x rank-2 and w rank-3, got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  const std::int64_t frames = x.dim(0), cin = x.dim(1);
  const std::int64_t cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
  if (stride < 1) throw UsageError("conv1d: stride must be >= 1");
  if (groups < 1 || cin % groups != 0 || cout % groups != 0) {
    throw UsageError("conv1d: groups " + std::to_string(groups) + " must divide channels");
  }
  if (cpg != cin / groups) {
    throw ShapeError("conv1d: weight " + shape_str(w.shape()) + " inconsistent with input " +
                     shape_str(x.shape()) + " and groups " + std::to_string(groups));
  }
  if (b.size() != cout) {
    throw ShapeError("conv1d: bias " + shape_str(b.shape()) + " does not match out channels " +
                     std::to_string(cout));
  }
  const std::int64_t out_frames = (frames + stride - 1) / stride;
  const std::int64_t pad = k / 2;
  const std::int64_t cout_pg = cout / groups;
  std::vector<double> out(static_cast<std::size_t>(out_frames * cout));
  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  for (std::int64_t t = 0; t < out_frames; ++t) {
    for (std::int64_t co = 0; co < cout; ++co) {
      const std::int64_t grp = co / cout_pg;
      double accv = bv[static_cast<std::size_t>(co)];
      for (std::int64_t d = 0; d < k; ++d) {
        const std::int64_t src_t = t * stride - pad + d;
        if (src_t < 0 || src_t >= frames) continue;
        const std::size_t xbase = static_cast<std::size_t>(src_t * cin + grp * cpg);
        const std::size_t wbase = static_cast<std::size_t>((co * cpg) * k + d);
        for (std::int64_t j = 0; j < cpg; ++j) {
          accv += xv[xbase + static_cast<std::size_t>(j)] *
                  wv[wbase + static_cast<std::size_t>(j * k)];
        }
      }
      out[static_cast<std::size_t>(t * cout + co)] = accv;
    }
  }
  auto* xn = x.node();
  auto* wn = w.node();
  auto* bn = b.node();
  auto xp = x.node_ptr();
  auto wp = w.node_ptr();
  bool xg = x.requires_grad(), wg = w.requires_grad(), bg = b.requires_grad();
  return detail::make_result(
      "conv1d", {static_cast<int>(out_frames), static_cast<int>(cout)}, std::move(out), {x, w, b},
      [xn, wn, bn, xp, wp, frames, cin, cout, cpg, k, stride, out_frames, pad, cout_pg, xg, wg,
       bg](const std::vector<double>& g, detail::GradMap& gm) {
        const auto& xv = xp->value;
        const auto& wv = wp->value;
        std::vector<double>* ax = xg ? &gm.acc(xn, xv.size()) : nullptr;
        std::vector<double>* aw = wg ? &gm.acc(wn, wv.size()) : nullptr;
        std::vector<double>* ab = bg ? &gm.acc(bn, static_cast<std::size_t>(cout)) : nullptr;
        for (std::int64_t t = 0; t < out_frames; ++t) {
          for (std::int64_t co = 0; co < cout; ++co) {
            const double go = g[static_cast<std::size_t>(t * cout + co)];
            if (go == 0.0) continue;
            if (ab) (*ab)[static_cast<std::size_t>(co)] += go;
            const std::int64_t grp = co / cout_pg;
            for (std::int64_t d = 0; d < k; ++d) {
              const std::int64_t src_t = t * stride - pad + d;
              if (src_t < 0 || src_t >= frames) continue;
              const std::size_t xbase = static_cast<std::size_t>(src_t * cin + grp * cpg);
              const std::size_t wbase = static_cast<std::size_t>((co * cpg) * k + d);
              for (std::int64_t j = 0; j < cpg; ++j) {
                if (aw) {
                  (*aw)[wbase + static_cast<std::size_t>(j * k)] +=
                      go * xv[xbase + static_cast<std::size_t>(j)];
                }
                if (ax) {
                  (*ax)[xbase + static_cast<std::size_t>(j)] +=
                      go * wv[wbase + static_cast<std::size_t>(j * k)];
                }
              }
            }
          }
        }
      });
}

/// Replaces entries where mask != 0 with `fill`; gradient is blocked there.
inline Tensor masked_fill(const Tensor& a, const std::vector<std::uint8_t>& mask, double fill) {
  if (mask.size() != a.data().size()) {
    throw ShapeError("masked_fill: mask length " + std::to_string(mask.size()) +
                     " does not match tensor " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = fill;
  }
  auto* an = a.node();
  bool ag = a.requires_grad();
  auto mask_copy = std::make_shared<std::vector<std::uint8_t>>(mask);
  return detail::make_result("masked_fill", a.shape(), std::move(out), {a},
                             [an, ag, mask_copy](const std::vector<double>& g,
                                                 detail::GradMap& gm) {
                               if (!ag) return;
                               auto& acc = gm.acc(an, g.size());
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 if (!(*mask_copy)[i]) acc[i] += g[i];
                               }
                             });
}

/// Inverted dropout: zeroes each entry with probability p and scales the
/// survivors by 1/(1-p), so the expectation is unchanged. p = 0 is the
/// identity and consumes no randomness. Callers gate this on training mode;
/// there is no eval-time variant.
template <typename Rng>
inline Tensor dropout(const Tensor& a, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw UsageError("dropout: rate must be in [0, 1), got " + std::to_string(p));
  }
  if (p == 0.0) return a;
  const double scale = 1.0 / (1.0 - p);
  auto kept = std::make_shared<std::vector<double>>(a.data().size());
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*kept)[i] = rng.uniform() < p ? 0.0 : scale;
    out[i] *= (*kept)[i];
  }
  auto* an = a.node();
  bool ag = a.requires_grad();
  return detail::make_result("dropout", a.shape(), std::move(out), {a},
                             [an, ag, kept](const std::vector<double>& g, detail::GradMap& gm) {
                               if (!ag) return;
                               auto& acc = gm.acc(an, g.size());
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 acc[i] += g[i] * (*kept)[i];
                               }
                             });
}

/// Custom taped node: value and input-gradient are supplied by the caller.
/// Used for losses whose gradient comes from a dedicated recursion rather
/// than from primitive composition.
inline Tensor custom_scalar_op(const char* op, double value, const Tensor& input,
                               std::vector<double> input_grad) {
  if (input_grad.size() != input.data().size()) {
    throw ShapeError(std::string(op) + ": gradient size mismatch");
  }
  auto* in = input.node();
  bool ig = input.requires_grad();
  auto gcopy = std::make_shared<std::vector<double>>(std::move(input_grad));
  detail::check_finite(op, *gcopy);
  return detail::make_result(op, {1}, {value}, {input},
                             [in, ig, gcopy](const std::vector<double>& g, detail::GradMap& gm) {
                               if (!ig) return;
                               auto& acc = gm.acc(in, gcopy->size());
                               for (std::size_t i = 0; i < acc.size(); ++i) {
                                 acc[i] += g[0] * (*gcopy)[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reverse pass.
// ---------------------------------------------------------------------------

/// Gradients produced by one backward pass. Leaves never touched by the
/// loss read back as zeros of their own shape.
class GradTable {
 public:
  bool has(const Tensor& t) const { return by_node_.count(t.node()) != 0; }

  Tensor grad(const Tensor& leaf) const {
    auto it = by_node_.find(leaf.node());
    if (it != by_node_.end()) return it->second;
    return Tensor::zeros(leaf.shape());
  }

  const std::map<std::string, Tensor>& named() const { return named_; }

  void insert(const detail::Node* n, Tensor g) {
    if (!n->name.empty()) named_.emplace(n->name, g);
    by_node_.emplace(n, std::move(g));
  }

 private:
  std::unordered_map<const detail::Node*, Tensor> by_node_;
  std::map<std::string, Tensor> named_;
};

/// The recorded subgraph reachable from one root, in execution order.
/// Replaying it in reverse yields gradients for every requires-grad leaf.
class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root) {
    if (!root.defined()) throw UsageError("tape: undefined root");
    std::unordered_map<const detail::Node*, bool> seen;
    std::vector<detail::NodePtr> stack{root.node_ptr()};
    seen[root.node()] = true;
    while (!stack.empty()) {
      detail::NodePtr n = std::move(stack.back());
      stack.pop_back();
      for (const auto& p : n->parents) {
        if (!seen[p.get()]) {
          seen[p.get()] = true;
          stack.push_back(p);
        }
      }
      order_.push_back(std::move(n));
    }
    // ids increase monotonically with creation, so this is a topological order
    std::sort(order_.begin(), order_.end(),
              [](const detail::NodePtr& a, const detail::NodePtr& b) { return a->id < b->id; });
  }

  /// Number of recorded ops (non-leaf nodes) on the tape.
  std::size_t num_ops() const {
    std::size_t n = 0;
    for (const auto& p : order_) {
      if (p->op != nullptr) ++n;
    }
    return n;
  }

  GradTable backward() const {
    if (root_.size() != 1) {
      throw UsageError("backward: loss must be scalar, got shape " + shape_str(root_.shape()));
    }
    detail::GradMap gm;
    gm.acc(root_.node(), 1)[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      const detail::NodePtr& n = *it;
      if (!n->backward_fn) continue;
      const std::vector<double>* g = gm.find(n.get());
      if (g == nullptr) continue;  // no gradient flowed here
      n->backward_fn(*g, gm);
    }
    GradTable table;
    for (const auto& n : order_) {
      if (!n->requires_grad || n->backward_fn) continue;  // leaves only
      const std::vector<double>* g = gm.find(n.get());
      if (g == nullptr) continue;
      Tensor gt(n->shape, *g);
      detail::check_finite("backward", gt.data());
      table.insert(n.get(), std::move(gt));
    }
    return table;
  }

 private:
  Tensor root_;
  std::vector<detail::NodePtr> order_;
};

inline GradTable backward(const Tensor& loss) { return Tape(loss).backward(); }

}  // namespace otkd
