#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "otkd/error.hpp"
#include "otkd/tensor.hpp"

namespace otkd {

/// Label alphabet plus the reserved blank class. Labels are 0..K-1; the
/// grid over which alignments are scored has K+1 classes with blank either
/// appended after the labels (default) or prepended before them.
enum class BlankPosition { Last, First };

class Vocab {
 public:
  explicit Vocab(int num_labels, BlankPosition pos = BlankPosition::Last)
      : num_labels_(num_labels), pos_(pos) {
    if (num_labels < 1) throw UsageError("vocab: need at least one label");
  }

  int num_labels() const { return num_labels_; }
  int num_classes() const { return num_labels_ + 1; }
  int blank() const { return pos_ == BlankPosition::Last ? num_labels_ : 0; }
  bool is_blank(int cls) const { return cls == blank(); }

  int class_of(int label) const {
    if (label < 0 || label >= num_labels_) {
      throw UsageError("vocab: label " + std::to_string(label) + " out of range [0," +
                       std::to_string(num_labels_) + ")");
    }
    return pos_ == BlankPosition::Last ? label : label + 1;
  }

  int label_of(int cls) const {
    if (cls < 0 || cls >= num_classes() || is_blank(cls)) {
      throw UsageError("vocab: class " + std::to_string(cls) + " is not a label");
    }
    return pos_ == BlankPosition::Last ? cls : cls - 1;
  }

 private:
  int num_labels_;
  BlankPosition pos_;
};

/// Collapse a class-index path: merge adjacent repeats, then drop blanks.
/// Returns a label sequence.
inline std::vector<int> collapse(const std::vector<int>& path, const Vocab& vocab) {
  std::vector<int> out;
  int prev = -1;
  for (int cls : path) {
    if (cls < 0 || cls >= vocab.num_classes()) {
      throw UsageError("collapse: class " + std::to_string(cls) + " out of range");
    }
    if (cls != prev && !vocab.is_blank(cls)) out.push_back(vocab.label_of(cls));
    prev = cls;
  }
  return out;
}

/// Fewest frames that can express y: one per label plus one separator
/// blank per adjacent repeat.
inline int min_frames(const std::vector<int>& y) {
  int repeats = 0;
  for (std::size_t i = 1; i < y.size(); ++i) {
    if (y[i] == y[i - 1]) ++repeats;
  }
  return static_cast<int>(y.size()) + repeats;
}

namespace detail {

inline void check_labels(const std::vector<int>& y, const Vocab& vocab) {
  for (int l : y) vocab.class_of(l);  // throws on out-of-range
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double lse2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double lse3(double a, double b, double c) { return lse2(lse2(a, b), c); }

/// Blank-interleaved extended sequence: [b, y1, b, y2, ..., yL, b].
inline std::vector<int> extended_classes(const std::vector<int>& y, const Vocab& vocab) {
  std::vector<int> ext;
  ext.reserve(2 * y.size() + 1);
  ext.push_back(vocab.blank());
  for (int l : y) {
    ext.push_back(vocab.class_of(l));
    ext.push_back(vocab.blank());
  }
  return ext;
}

}  // namespace detail

/// Every length-T class path whose collapse equals y. Exponential; guarded
/// to small instances. Paths come out in odometer (lexicographic) order.
inline std::vector<std::vector<int>> enumerate_paths(const std::vector<int>& y, int T,
                                                     const Vocab& vocab) {
  detail::check_labels(y, vocab);
  if (T < 0) throw UsageError("enumerate_paths: negative length");
  const int C = vocab.num_classes();
  double work = 1.0;
  for (int t = 0; t < T; ++t) work *= C;
  if (T > 12 || work > 16777216.0) {
    throw UsageError("enumerate_paths: instance too large (T=" + std::to_string(T) +
                     ", classes=" + std::to_string(C) + ")");
  }
  std::vector<std::vector<int>> out;
  if (T == 0) {
    if (y.empty()) out.push_back({});
    return out;
  }
  std::vector<int> path(static_cast<std::size_t>(T), 0);
  while (true) {
    if (collapse(path, vocab) == y) out.push_back(path);
    int i = T - 1;
    while (i >= 0 && path[static_cast<std::size_t>(i)] == C - 1) {
      path[static_cast<std::size_t>(i)] = 0;
      --i;
    }
    if (i < 0) break;
    ++path[static_cast<std::size_t>(i)];
  }
  return out;
}

/// |B^-1(y)| for length-T paths, by the alignment-lattice recursion. Same
/// transition structure as the loss recursion, so it counts exactly the
/// paths the loss sums over.
inline std::uint64_t count_paths(const std::vector<int>& y, int T, const Vocab& vocab) {
  detail::check_labels(y, vocab);
  if (T < 0) throw UsageError("count_paths: negative length");
  if (T == 0) return y.empty() ? 1 : 0;
  const auto ext = detail::extended_classes(y, vocab);
  const int U = static_cast<int>(ext.size());
  std::vector<std::uint64_t> cur(static_cast<std::size_t>(U), 0), nxt(static_cast<std::size_t>(U));
  cur[0] = 1;
  if (U > 1) cur[1] = 1;
  for (int t = 1; t < T; ++t) {
    for (int u = 0; u < U; ++u) {
      std::uint64_t c = cur[static_cast<std::size_t>(u)];
      if (u >= 1) c += cur[static_cast<std::size_t>(u - 1)];
      if (u >= 2 && !vocab.is_blank(ext[static_cast<std::size_t>(u)]) &&
          ext[static_cast<std::size_t>(u)] != ext[static_cast<std::size_t>(u - 2)]) {
        c += cur[static_cast<std::size_t>(u - 2)];
      }
      nxt[static_cast<std::size_t>(u)] = c;
    }
    cur.swap(nxt);
  }
  std::uint64_t total = cur[static_cast<std::size_t>(U - 1)];
  if (U > 1) total += cur[static_cast<std::size_t>(U - 2)];
  return total;
}

/// Loss by direct enumeration: -log sum over B^-1(y) of exp(path score).
/// The independent oracle for the lattice recursion; tiny instances only.
inline double ctc_loss_brute(const std::vector<double>& logp, int T, int C,
                             const std::vector<int>& y, const Vocab& vocab) {
  if (C != vocab.num_classes()) {
    throw ShapeError("ctc_loss_brute: grid has " + std::to_string(C) + " classes, vocab needs " +
                     std::to_string(vocab.num_classes()));
  }
  if (T > 8 || vocab.num_labels() > 4) {
    throw UsageError("ctc_loss_brute: instance too large (T=" + std::to_string(T) +
                     ", labels=" + std::to_string(vocab.num_labels()) + ")");
  }
  auto paths = enumerate_paths(y, T, vocab);
  if (paths.empty()) {
    throw InfeasibleError("ctc_loss_brute: no length-" + std::to_string(T) +
                          " path collapses to the target");
  }
  double acc = detail::kNegInf;
  for (const auto& path : paths) {
    double score = 0.0;
    for (int t = 0; t < T; ++t) {
      score += logp[static_cast<std::size_t>(t * C + path[static_cast<std::size_t>(t)])];
    }
    acc = detail::lse2(acc, score);
  }
  return -acc;
}

struct CtcResult {
  double loss = 0.0;
  std::vector<double> grad_logp;  // T x C, derivative of loss w.r.t. each log score
};

/// Alignment-lattice recursion in the log domain, with the exact gradient
/// of the loss with respect to every grid entry.
///
/// alpha(t,u): score of all lattice prefixes ending in state u after
/// emitting frame t (emission at t included). beta(t,u): score of all
/// suffixes from state u after frame t (emission at t excluded). Their
/// product, normalized, is the state posterior; summing states that share
/// a class gives the per-frame class posterior q, and dLoss/dlogp = -q.
inline CtcResult ctc_forward_backward(const std::vector<double>& logp, int T, int C,
                                      const std::vector<int>& y, const Vocab& vocab) {
  detail::check_labels(y, vocab);
  if (C != vocab.num_classes()) {
    throw ShapeError("ctc: grid has " + std::to_string(C) + " classes, vocab needs " +
                     std::to_string(vocab.num_classes()));
  }
  if (static_cast<std::int64_t>(logp.size()) != static_cast<std::int64_t>(T) * C) {
    throw ShapeError("ctc: grid size " + std::to_string(logp.size()) + " is not T*C = " +
                     std::to_string(T) + "*" + std::to_string(C));
  }
  const int L = static_cast<int>(y.size());
  if (T == 0 && L == 0) return {0.0, {}};
  if (T < min_frames(y)) {
    throw InfeasibleError("ctc: target needs at least " + std::to_string(min_frames(y)) +
                          " frames, grid has " + std::to_string(T));
  }

  const auto ext = detail::extended_classes(y, vocab);
  const int U = static_cast<int>(ext.size());
  const auto at = [&](int t, int u) { return static_cast<std::size_t>(t * U + u); };
  const auto em = [&](int t, int u) {
    return logp[static_cast<std::size_t>(t * C + ext[static_cast<std::size_t>(u)])];
  };
  const auto skip_ok = [&](int u) {
    return u >= 2 && !vocab.is_blank(ext[static_cast<std::size_t>(u)]) &&
           ext[static_cast<std::size_t>(u)] != ext[static_cast<std::size_t>(u - 2)];
  };

  std::vector<double> alpha(static_cast<std::size_t>(T) * U, detail::kNegInf);
  alpha[at(0, 0)] = em(0, 0);
  if (U > 1) alpha[at(0, 1)] = em(0, 1);
  for (int t = 1; t < T; ++t) {
    for (int u = 0; u < U; ++u) {
      double a = alpha[at(t - 1, u)];
      if (u >= 1) a = detail::lse2(a, alpha[at(t - 1, u - 1)]);
      if (skip_ok(u)) a = detail::lse2(a, alpha[at(t - 1, u - 2)]);
      if (a != detail::kNegInf) alpha[at(t, u)] = a + em(t, u);
    }
  }

  double log_prob = alpha[at(T - 1, U - 1)];
  if (U > 1) log_prob = detail::lse2(log_prob, alpha[at(T - 1, U - 2)]);
  if (log_prob == detail::kNegInf) {
    throw NumericError("ctc: total path score underflowed to zero");
  }

  std::vector<double> beta(static_cast<std::size_t>(T) * U, detail::kNegInf);
  beta[at(T - 1, U - 1)] = 0.0;
  if (U > 1) beta[at(T - 1, U - 2)] = 0.0;
  for (int t = T - 2; t >= 0; --t) {
    for (int u = 0; u < U; ++u) {
      double b = beta[at(t + 1, u)] + em(t + 1, u);
      if (u + 1 < U) b = detail::lse2(b, beta[at(t + 1, u + 1)] + em(t + 1, u + 1));
      if (u + 2 < U && skip_ok(u + 2)) {
        b = detail::lse2(b, beta[at(t + 1, u + 2)] + em(t + 1, u + 2));
      }
      beta[at(t, u)] = b;
    }
  }

  CtcResult res;
  res.loss = -log_prob;
  res.grad_logp.assign(static_cast<std::size_t>(T) * C, 0.0);
  for (int t = 0; t < T; ++t) {
    // log-sum alpha+beta per class, then one exp per class
    std::vector<double> cls_acc(static_cast<std::size_t>(C), detail::kNegInf);
    for (int u = 0; u < U; ++u) {
      const double ab = alpha[at(t, u)] + beta[at(t, u)];
      if (ab == detail::kNegInf) continue;
      auto& slot = cls_acc[static_cast<std::size_t>(ext[static_cast<std::size_t>(u)])];
      slot = detail::lse2(slot, ab);
    }
    for (int c = 0; c < C; ++c) {
      const double a = cls_acc[static_cast<std::size_t>(c)];
      if (a != detail::kNegInf) {
        res.grad_logp[static_cast<std::size_t>(t * C + c)] = -std::exp(a - log_prob);
      }
    }
  }
  return res;
}

inline double ctc_loss(const std::vector<double>& logp, int T, int C, const std::vector<int>& y,
                       const Vocab& vocab) {
  return ctc_forward_backward(logp, T, C, y, vocab).loss;
}

/// Taped loss over a T x C grid of log scores. The lattice recursion
/// supplies the input gradient; downstream ops see a regular scalar node.
inline Tensor ctc_loss_op(const Tensor& logp, const std::vector<int>& y, const Vocab& vocab) {
  if (logp.ndim() != 2) {
    throw ShapeError("ctc_loss_op: grid must be rank-2, got " + shape_str(logp.shape()));
  }
  const int T = logp.dim(0), C = logp.dim(1);
  CtcResult res = ctc_forward_backward(logp.data(), T, C, y, vocab);
  return custom_scalar_op("ctc_loss", res.loss, logp, std::move(res.grad_logp));
}

/// Best class per frame (ties to the lowest index), collapsed to labels.
inline std::vector<int> greedy_decode(const std::vector<double>& logp, int T, int C,
                                      const Vocab& vocab) {
  std::vector<int> path(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    int best = 0;
    double best_v = logp[static_cast<std::size_t>(t * C)];
    for (int c = 1; c < C; ++c) {
      const double v = logp[static_cast<std::size_t>(t * C + c)];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    path[static_cast<std::size_t>(t)] = best;
  }
  return collapse(path, vocab);
}

inline std::vector<int> greedy_decode(const Tensor& logp, const Vocab& vocab) {
  if (logp.ndim() != 2) {
    throw ShapeError("greedy_decode: grid must be rank-2, got " + shape_str(logp.shape()));
  }
  return greedy_decode(logp.data(), logp.dim(0), logp.dim(1), vocab);
}

/// Raw per-frame argmax classes before collapsing; used for blank-rate
/// statistics and alignment comparisons.
inline std::vector<int> argmax_path(const std::vector<double>& logp, int T, int C) {
  std::vector<int> path(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    int best = 0;
    double best_v = logp[static_cast<std::size_t>(t * C)];
    for (int c = 1; c < C; ++c) {
      const double v = logp[static_cast<std::size_t>(t * C + c)];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    path[static_cast<std::size_t>(t)] = best;
  }
  return path;
}

inline std::vector<int> argmax_path(const Tensor& logp) {
  if (logp.ndim() != 2) {
    throw ShapeError("argmax_path: grid must be rank-2, got " + shape_str(logp.shape()));
  }
  return argmax_path(logp.data(), logp.dim(0), logp.dim(1));
}

}  // namespace otkd
