#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "otkd/ctc.hpp"
#include "otkd/data.hpp"
#include "otkd/error.hpp"
#include "otkd/model.hpp"
#include "otkd/tensor.hpp"

namespace otkd {

/// Levenshtein distance with unit costs, rolling two-row table.
inline int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    prev.swap(cur);
  }
  return prev[m];
}

struct EvalReport {
  std::vector<double> per_sample_cer;
  double cer = 0.0;       // total edits over total reference length
  double accuracy = 0.0;  // exact-match fraction
  std::int64_t total_edits = 0;
  std::int64_t total_ref_len = 0;
  int count = 0;
};

using GridFn = std::function<Tensor(const Sample&)>;

/// Greedy-decodes every sample's grid and aggregates corpus-level CER.
/// Per-sample work is independent; n_threads > 1 splits samples across
/// workers with results landing in index-ordered slots, so the report is
/// identical at any thread count.
inline EvalReport evaluate_grids(const std::vector<Sample>& samples, const GridFn& grid_fn,
                                 const Vocab& vocab, int n_threads = 1) {
  const std::size_t n = samples.size();
  std::vector<int> edits(n, 0);
  std::vector<int> ref_lens(n, 0);
  std::vector<std::uint8_t> exact(n, 0);
  auto worker = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Tensor grid = grid_fn(samples[i]);
      const auto decoded = greedy_decode(grid, vocab);
      edits[i] = edit_distance(decoded, samples[i].labels);
      ref_lens[i] = static_cast<int>(samples[i].labels.size());
      exact[i] = decoded == samples[i].labels ? 1 : 0;
    }
  };
  if (n_threads <= 1 || n < 2) {
    worker(0, n);
  } else {
    const int workers = std::min<int>(n_threads, static_cast<int>(n));
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(worker, begin, end);
    }
    for (auto& t : pool) t.join();
  }
  EvalReport rep;
  rep.count = static_cast<int>(n);
  rep.per_sample_cer.reserve(n);
  int exact_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    rep.total_edits += edits[i];
    rep.total_ref_len += ref_lens[i];
    exact_count += exact[i];
    rep.per_sample_cer.push_back(ref_lens[i] > 0 ? static_cast<double>(edits[i]) / ref_lens[i]
                                                 : (edits[i] > 0 ? 1.0 : 0.0));
  }
  if (n > 0) {
    if (rep.total_ref_len == 0) {
      throw UsageError("evaluate: reference corpus is empty");
    }
    rep.cer = static_cast<double>(rep.total_edits) / static_cast<double>(rep.total_ref_len);
    rep.accuracy = static_cast<double>(exact_count) / static_cast<double>(n);
  }
  return rep;
}

/// Full-model evaluation with compatibility checks between the checkpoint
/// and the dataset.
inline EvalReport evaluate(const AnyModel& model, const std::vector<Sample>& samples,
                           int n_threads = 1) {
  for (const Sample& s : samples) {
    if (s.features.ndim() != 2 || s.features.dim(1) != model.feat_dim()) {
      throw CompatError("evaluate: sample " + std::to_string(s.id) + " has feature width " +
                        std::to_string(s.features.ndim() == 2 ? s.features.dim(1) : -1) +
                        ", model expects " + std::to_string(model.feat_dim()));
    }
    for (int l : s.labels) {
      if (l < 0 || l >= model.vocab()) {
        throw CompatError("evaluate: sample " + std::to_string(s.id) + " has label " +
                          std::to_string(l) + " outside model vocab " +
                          std::to_string(model.vocab()));
      }
    }
  }
  Vocab vocab(model.vocab());
  return evaluate_grids(
      samples, [&](const Sample& s) { return model.grid(s.features, s.labels); }, vocab,
      n_threads);
}

namespace detail {

inline std::string format_prob(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) throw IoError("write failed on " + path);
}

}  // namespace detail

/// Per-frame class probabilities as CSV: label columns in label order, then
/// the blank column. Values are exp of the log grid, six decimals.
inline std::string render_posterior_heatmap(const Tensor& grid, const Vocab& vocab) {
  if (grid.ndim() != 2 || grid.dim(1) != vocab.num_classes()) {
    throw ShapeError("heatmap: grid " + shape_str(grid.shape()) + " does not match vocab with " +
                     std::to_string(vocab.num_classes()) + " classes");
  }
  std::string out = "frame";
  for (int l = 0; l < vocab.num_labels(); ++l) out += ",class_" + std::to_string(l);
  out += ",blank\n";
  const int frames = grid.dim(0), classes = grid.dim(1);
  for (int t = 0; t < frames; ++t) {
    out += std::to_string(t);
    for (int l = 0; l < vocab.num_labels(); ++l) {
      out += ',' + detail::format_prob(std::exp(grid.at(t * classes + vocab.class_of(l))));
    }
    out += ',' + detail::format_prob(std::exp(grid.at(t * classes + vocab.blank())));
    out += '\n';
  }
  return out;
}

inline void export_posterior_heatmap(const Tensor& grid, const Vocab& vocab,
                                     const std::string& path) {
  detail::write_text_file(path, render_posterior_heatmap(grid, vocab));
}

/// Raw attention matrix as CSV, one row per query frame, six decimals.
inline std::string render_attention(const Tensor& attn) {
  if (attn.ndim() != 2) {
    throw ShapeError("attention export: expected rank-2 weights, got " + shape_str(attn.shape()));
  }
  std::string out;
  const int rows = attn.dim(0), cols = attn.dim(1);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (c) out += ',';
      out += detail::format_prob(attn.at(r * cols + c));
    }
    out += '\n';
  }
  return out;
}

inline void export_attention(const Tensor& attn, const std::string& path) {
  detail::write_text_file(path, render_attention(attn));
}

/// Mean key position per query row under the attention distribution. For a
/// perfectly diagonal alignment this rises linearly with the query index.
inline std::vector<double> weighted_key_positions(const Tensor& attn) {
  if (attn.ndim() != 2) {
    throw ShapeError("weighted_key_positions: expected rank-2 weights");
  }
  const int rows = attn.dim(0), cols = attn.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows), 0.0);
  for (int r = 0; r < rows; ++r) {
    double m = 0.0;
    for (int c = 0; c < cols; ++c) m += attn.at(r * cols + c) * c;
    out[static_cast<std::size_t>(r)] = m;
  }
  return out;
}

inline bool is_monotone_nondecreasing(const std::vector<double>& xs, double tol = 0.0) {
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] < xs[i - 1] - tol) return false;
  }
  return true;
}

/// Fraction of frames whose argmax class is the blank.
inline double blank_argmax_fraction(const Tensor& grid, const Vocab& vocab) {
  if (grid.ndim() != 2 || grid.dim(1) != vocab.num_classes()) {
    throw ShapeError("blank_argmax_fraction: grid does not match vocab");
  }
  const auto path = argmax_path(grid);
  if (path.empty()) return 0.0;
  int blanks = 0;
  for (int c : path) blanks += vocab.is_blank(c) ? 1 : 0;
  return static_cast<double>(blanks) / static_cast<double>(path.size());
}

}  // namespace otkd
