#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "otkd/error.hpp"
#include "otkd/random.hpp"
#include "otkd/store.hpp"
#include "otkd/tensor.hpp"

namespace otkd {

/// Synthetic transcription task: each label owns a fixed prototype vector;
/// an utterance is a label sequence rendered as a run of noisy prototype
/// frames per label, with random per-label durations.
struct TaskSpec {
  int vocab = 10;          // distinct labels
  int feat_dim = 8;        // frame feature width
  int min_duration = 3;    // frames per label, inclusive range
  int max_duration = 8;
  double noise_sigma = 0.3;
  int min_len = 2;         // labels per utterance, inclusive range
  int max_len = 10;
  int downsample = 2;      // model frame-rate reduction the data must respect
  int train_count = 256;
  int eval_count = 64;
  std::uint64_t seed = 1;
};

struct Sample {
  std::uint32_t id = 0;
  std::vector<int> labels;
  Tensor features;  // frames x feat_dim
};

namespace detail {

inline void validate_task(const TaskSpec& spec) {
  if (spec.vocab < 1) throw ConfigError("task: vocab must be positive");
  if (spec.feat_dim < 1) throw ConfigError("task: feat_dim must be positive");
  if (spec.min_duration < 1 || spec.max_duration < spec.min_duration) {
    throw ConfigError("task: duration range [" + std::to_string(spec.min_duration) + "," +
                      std::to_string(spec.max_duration) + "] is invalid");
  }
  if (spec.min_len < 1 || spec.max_len < spec.min_len) {
    throw ConfigError("task: length range [" + std::to_string(spec.min_len) + "," +
                      std::to_string(spec.max_len) + "] is invalid");
  }
  if (spec.noise_sigma < 0.0) throw ConfigError("task: noise sigma must be nonnegative");
  if (spec.downsample < 1) throw ConfigError("task: downsample must be positive");
  if (spec.train_count < 0 || spec.eval_count < 0) {
    throw ConfigError("task: sample counts must be nonnegative");
  }
}

}  // namespace detail

/// Per-class unit-norm prototype vectors, rejection-sampled until pairwise
/// separated. Pure function of the task seed.
inline std::vector<std::vector<double>> make_prototypes(const TaskSpec& spec) {
  detail::validate_task(spec);
  StreamRng rng(spec.seed, "prototypes");
  std::vector<std::vector<double>> protos;
  protos.reserve(static_cast<std::size_t>(spec.vocab));
  const double min_dist = 1.0;
  for (int k = 0; k < spec.vocab; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      std::vector<double> v(static_cast<std::size_t>(spec.feat_dim));
      double norm_sq = 0.0;
      for (auto& x : v) {
        x = rng.normal();
        norm_sq += x * x;
      }
      const double norm = std::sqrt(norm_sq);
      if (norm < 1e-9) continue;
      for (auto& x : v) x /= norm;
      bool ok = true;
      for (const auto& p : protos) {
        double d_sq = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) d_sq += (v[i] - p[i]) * (v[i] - p[i]);
        if (std::sqrt(d_sq) < min_dist) {
          ok = false;
          break;
        }
      }
      if (ok) {
        protos.push_back(std::move(v));
        placed = true;
      }
    }
    if (!placed) {
      throw GenerationError("prototypes: could not separate " + std::to_string(spec.vocab) +
                            " classes in " + std::to_string(spec.feat_dim) + " dimensions");
    }
  }
  return protos;
}

/// One sample, a pure function of (spec, index). The draw is retried until
/// the rendered utterance leaves enough downsampled frames for the worst
/// alignment of its label count (2L+1).
inline Sample gen_sample(const TaskSpec& spec, const std::vector<std::vector<double>>& protos,
                         std::uint32_t index) {
  StreamRng rng(spec.seed, "sample", index);
  std::vector<int> labels;
  std::vector<int> durations;
  int total_frames = 0;
  bool feasible = false;
  for (int attempt = 0; attempt < 100 && !feasible; ++attempt) {
    const int len = rng.uniform_int(spec.min_len, spec.max_len);
    labels.assign(static_cast<std::size_t>(len), 0);
    durations.assign(static_cast<std::size_t>(len), 0);
    total_frames = 0;
    for (int i = 0; i < len; ++i) {
      labels[static_cast<std::size_t>(i)] = rng.uniform_int(0, spec.vocab - 1);
      durations[static_cast<std::size_t>(i)] = rng.uniform_int(spec.min_duration, spec.max_duration);
      total_frames += durations[static_cast<std::size_t>(i)];
    }
    feasible = total_frames / spec.downsample >= 2 * len + 1;
  }
  if (!feasible) {
    throw GenerationError("sample " + std::to_string(index) +
                          ": no feasible draw in 100 attempts; durations too short for "
                          "downsample " + std::to_string(spec.downsample));
  }
  std::vector<double> feat(static_cast<std::size_t>(total_frames) *
                           static_cast<std::size_t>(spec.feat_dim));
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& proto = protos[static_cast<std::size_t>(labels[i])];
    for (int f = 0; f < durations[i]; ++f) {
      for (int d = 0; d < spec.feat_dim; ++d) {
        feat[pos++] = proto[static_cast<std::size_t>(d)] + spec.noise_sigma * rng.normal();
      }
    }
  }
  Sample s;
  s.id = index;
  s.labels = std::move(labels);
  s.features = Tensor({total_frames, spec.feat_dim}, std::move(feat));
  return s;
}

inline Sample gen_sample(const TaskSpec& spec, std::uint32_t index) {
  return gen_sample(spec, make_prototypes(spec), index);
}

/// The full corpus in index order: train samples first, then eval samples.
inline std::vector<Sample> generate_dataset(const TaskSpec& spec) {
  const auto protos = make_prototypes(spec);
  std::vector<Sample> out;
  const int total = spec.train_count + spec.eval_count;
  out.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    out.push_back(gen_sample(spec, protos, static_cast<std::uint32_t>(i)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file format. Little-endian:
//   magic "OTDS" | u32 version (=1) | u32 sample count
//   per sample: u32 id | u32 label count | u32 labels... |
//               u32 frames | u32 feat dim | f32 features (row-major)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string serialize_dataset(const std::vector<Sample>& samples) {
  std::string buf;
  buf += "OTDS";
  detail::put_u32(buf, kDatasetVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(samples.size()));
  for (const Sample& s : samples) {
    detail::put_u32(buf, s.id);
    detail::put_u32(buf, static_cast<std::uint32_t>(s.labels.size()));
    for (int l : s.labels) detail::put_u32(buf, static_cast<std::uint32_t>(l));
    detail::put_u32(buf, static_cast<std::uint32_t>(s.features.dim(0)));
    detail::put_u32(buf, static_cast<std::uint32_t>(s.features.dim(1)));
    for (double v : s.features.data()) detail::put_f32(buf, static_cast<float>(v));
  }
  return buf;
}

inline std::vector<Sample> deserialize_dataset(const std::string& buf, const std::string& what) {
  detail::ByteReader r(buf, what);
  if (r.bytes(4) != "OTDS") throw BadMagicError(what + ": not a dataset file");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw BadVersionError(what + ": unsupported dataset version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::vector<Sample> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.id = r.u32();
    const std::uint32_t len = r.u32();
    s.labels.resize(len);
    for (auto& l : s.labels) l = static_cast<int>(r.u32());
    const std::uint32_t frames = r.u32();
    const std::uint32_t dim = r.u32();
    std::vector<double> feat(static_cast<std::size_t>(frames) * dim);
    for (auto& v : feat) v = static_cast<double>(r.f32());
    s.features = Tensor({static_cast<int>(frames), static_cast<int>(dim)}, std::move(feat));
    out.push_back(std::move(s));
  }
  if (!r.at_end()) throw IoError(what + ": trailing bytes after last sample");
  return out;
}

inline void write_dataset(const std::vector<Sample>& samples, const std::string& path) {
  detail::write_file(path, serialize_dataset(samples));
}

inline std::vector<Sample> read_dataset(const std::string& path) {
  return deserialize_dataset(detail::read_file(path), path);
}

/// Splits a generated-corpus file back into its train and eval parts.
struct SplitView {
  std::vector<Sample> train;
  std::vector<Sample> eval;
};

inline SplitView split_dataset(std::vector<Sample> samples, int train_count, int eval_count) {
  if (static_cast<int>(samples.size()) < train_count + eval_count) {
    throw ConfigError("dataset has " + std::to_string(samples.size()) + " samples, config wants " +
                      std::to_string(train_count) + "+" + std::to_string(eval_count));
  }
  SplitView v;
  v.train.assign(samples.begin(), samples.begin() + train_count);
  v.eval.assign(samples.begin() + train_count, samples.begin() + train_count + eval_count);
  return v;
}

}  // namespace otkd
