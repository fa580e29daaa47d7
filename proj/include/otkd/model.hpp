#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "otkd/error.hpp"
#include "otkd/nn.hpp"
#include "otkd/random.hpp"
#include "otkd/store.hpp"
#include "otkd/tensor.hpp"

namespace otkd {

enum class ModelKind : int {
  Oracle = 0,
  OracleWithoutTarget = 1,
  OracleWithoutSource = 2,
  Student = 3,
  Conventional = 4,
};

inline bool is_oracle_kind(ModelKind k) {
  return k == ModelKind::Oracle || k == ModelKind::OracleWithoutTarget ||
         k == ModelKind::OracleWithoutSource;
}

inline std::string kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Oracle: return "oracle";
    case ModelKind::OracleWithoutTarget: return "oracle-wo-target";
    case ModelKind::OracleWithoutSource: return "oracle-wo-source";
    case ModelKind::Student: return "student";
    case ModelKind::Conventional: return "conventional";
  }
  throw UsageError("unknown model kind");
}

inline ModelKind kind_from_name(const std::string& name) {
  for (ModelKind k : {ModelKind::Oracle, ModelKind::OracleWithoutTarget,
                      ModelKind::OracleWithoutSource, ModelKind::Student,
                      ModelKind::Conventional}) {
    if (kind_name(k) == name) return k;
  }
  throw UsageError("unknown model kind: " + name);
}

inline int output_frames(int frames, const std::vector<int>& strides) {
  for (int s : strides) frames = (frames + s - 1) / s;
  return frames;
}

inline int downsample_factor(const std::vector<int>& strides) {
  int d = 1;
  for (int s : strides) d *= s;
  return d;
}

struct TeacherConfig {
  int vocab = 10;     // distinct labels, excluding blank
  int feat_dim = 8;   // source feature width per frame
  int width = 32;     // model width H
  int heads = 2;
  int ffn = 64;
  int enc_layers = 2;
  int dec_layers = 2;
  int kernel = 5;
  std::vector<int> conv_channels = {32, 32, 32, 32};
  std::vector<int> conv_strides = {1, 2, 1, 1};
  double dropout = 0.0;  // training-mode rate on the source representation
};

struct StudentConfig {
  int vocab = 10;
  int feat_dim = 8;
  int kernel = 5;
  bool separable = true;
  std::vector<int> conv_channels = {16, 16, 16, 16};
  std::vector<int> conv_strides = {1, 2, 1, 1};
  double dropout = 0.0;  // training-mode rate on the pre-head representation
};

/// Conventional teacher: same shape family as the student, wider and with
/// dense convolutions, trained on source features alone.
inline StudentConfig conventional_config(int vocab, int feat_dim) {
  StudentConfig c;
  c.vocab = vocab;
  c.feat_dim = feat_dim;
  c.separable = false;
  c.conv_channels = {32, 32, 32, 32};
  return c;
}

namespace detail {

inline void validate_conv_spec(const std::vector<int>& channels, const std::vector<int>& strides,
                               int kernel) {
  if (channels.empty() || channels.size() != strides.size()) {
    throw ConfigError("model: conv channel and stride lists must be nonempty and equal length");
  }
  for (int c : channels) {
    if (c < 1) throw ConfigError("model: conv channels must be positive");
  }
  for (int s : strides) {
    if (s < 1) throw ConfigError("model: conv strides must be positive");
  }
  if (kernel < 1) throw ConfigError("model: kernel must be positive");
}

struct EncoderLayer {
  EncoderLayer(ParameterStore& store, const std::string& prefix, int width, int heads, int ffn,
               StreamRng& rng)
      : self(store, prefix + ".self", width, heads, rng),
        ff(store, prefix + ".ff", width, ffn, rng) {}

  Tensor forward(const Tensor& x) const { return ff.forward(self.forward(x).output); }

  SelfAttentionBlock self;
  FeedForwardBlock ff;
};

struct DecoderLayer {
  DecoderLayer(ParameterStore& store, const std::string& prefix, int width, int heads, int ffn,
               StreamRng& rng)
      : self(store, prefix + ".self", width, heads, rng),
        cross(store, prefix + ".cross", width, heads, rng),
        ff(store, prefix + ".ff", width, ffn, rng) {}

  struct Out {
    Tensor output;
    Tensor attn;  // cross-attention weights, frames x target states
  };

  Out forward(const Tensor& x, const Tensor& memory) const {
    AttentionResult s = self.forward(x);
    AttentionResult c = cross.forward(s.output, memory);
    return {ff.forward(c.output), c.weights};
  }

  SelfAttentionBlock self;
  CrossAttentionBlock cross;
  FeedForwardBlock ff;
};

}  // namespace detail

struct TeacherOutput {
  Tensor grid;    // frames x (vocab+1), log probabilities
  Tensor hidden;  // frames x width, final pre-head representation
  Tensor attn;    // frames x (target length + 2), last cross-attention
};

/// Alignment-predicting teacher. The source branch downsamples features
/// into frame states; the target branch encodes the wrapped label sequence;
/// the decoder reads frame states as queries against the encoded target as
/// key-value memory. There is no look-ahead masking anywhere: every frame
/// sees the whole utterance and the whole target, and the output always has
/// one row per downsampled source frame regardless of the target length.
///
/// Ablation kinds replace one input with zeros of the same shape at both
/// training and inference time. The zeroed target branch still reveals the
/// target length through its frame count.
class OracleTeacher {
 public:
  OracleTeacher(TeacherConfig cfg, ModelKind kind, StreamRng& rng)
      : cfg_(cfg), kind_(kind), drop_rng_(rng.next_u64(), "dropout") {
    if (!is_oracle_kind(kind)) {
      throw UsageError("oracle teacher: kind must be an oracle variant, got " + kind_name(kind));
    }
    if (cfg.vocab < 1 || cfg.feat_dim < 1 || cfg.width < 1 || cfg.ffn < 1) {
      throw ConfigError("oracle teacher: dimensions must be positive");
    }
    if (cfg.enc_layers < 1 || cfg.dec_layers < 1) {
      throw ConfigError("oracle teacher: need at least one encoder and decoder layer");
    }
    detail::validate_conv_spec(cfg.conv_channels, cfg.conv_strides, cfg.kernel);
    int cin = cfg.feat_dim;
    for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
      src_blocks_.emplace_back(store_, "src.conv" + std::to_string(i), cin, cfg.conv_channels[i],
                               cfg.kernel, cfg.conv_strides[i], /*separable=*/false, rng);
      cin = cfg.conv_channels[i];
    }
    src_proj_.emplace(store_, "src.proj", cin, cfg.width, rng);
    // label rows 0..vocab-1, then the two sequence sentinels
    embed_ = &store_.create("tgt.embed", {cfg.vocab + 2, cfg.width}, rng,
                            1.0 / std::sqrt(static_cast<double>(cfg.width)));
    for (int i = 0; i < cfg.enc_layers; ++i) {
      enc_layers_.emplace_back(store_, "enc.layer" + std::to_string(i), cfg.width, cfg.heads,
                               cfg.ffn, rng);
    }
    enc_final_.emplace(store_, "enc.final", cfg.width);
    for (int i = 0; i < cfg.dec_layers; ++i) {
      dec_layers_.emplace_back(store_, "dec.layer" + std::to_string(i), cfg.width, cfg.heads,
                               cfg.ffn, rng);
    }
    dec_final_.emplace(store_, "dec.final", cfg.width);
    head_.emplace(store_, "head", cfg.width, cfg.vocab + 1, rng);
  }

  int bos_id() const { return cfg_.vocab; }
  int eos_id() const { return cfg_.vocab + 1; }

  TeacherOutput forward(const Tensor& x, const std::vector<int>& y) const {
    if (x.ndim() != 2 || x.dim(1) != cfg_.feat_dim) {
      throw ShapeError("oracle teacher: source must be frames x " +
                       std::to_string(cfg_.feat_dim) + ", got " + shape_str(x.shape()));
    }
    if (x.dim(0) < 1) throw UsageError("oracle teacher: source has no frames");
    if (y.empty()) throw UsageError("oracle teacher: target sequence is empty");
    for (int l : y) {
      if (l < 0 || l >= cfg_.vocab) {
        throw UsageError("oracle teacher: label " + std::to_string(l) + " out of range [0," +
                         std::to_string(cfg_.vocab) + ")");
      }
    }

    Tensor src = kind_ == ModelKind::OracleWithoutSource ? Tensor::zeros(x.shape()) : x;
    for (const auto& block : src_blocks_) src = block.forward(src);
    Tensor hs = src_proj_->forward(src);
    hs = add(hs, sinusoidal_positions(hs.dim(0), cfg_.width));
    // Source-side dropout only: the whole point of this model is to make
    // the target branch carry weight, so the source is what gets starved.
    if (training_ && cfg_.dropout > 0.0) hs = dropout(hs, cfg_.dropout, drop_rng_);

    std::vector<int> ids;
    ids.reserve(y.size() + 2);
    ids.push_back(bos_id());
    ids.insert(ids.end(), y.begin(), y.end());
    ids.push_back(eos_id());
    Tensor he = embedding_gather(*embed_, ids);
    if (kind_ == ModelKind::OracleWithoutTarget) he = mul(he, Tensor::scalar(0.0));
    he = add(he, sinusoidal_positions(static_cast<int>(ids.size()), cfg_.width));
    for (const auto& layer : enc_layers_) he = layer.forward(he);
    he = enc_final_->forward(he);

    Tensor h = hs;
    Tensor attn;
    for (const auto& layer : dec_layers_) {
      auto out = layer.forward(h, he);
      h = out.output;
      attn = out.attn;
    }
    Tensor hidden = dec_final_->forward(h);
    TeacherOutput res;
    res.grid = log_softmax(head_->forward(hidden));
    res.hidden = hidden;
    res.attn = attn;
    return res;
  }

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const TeacherConfig& config() const { return cfg_; }
  ModelKind kind() const { return kind_; }
  int width() const { return cfg_.width; }
  int vocab() const { return cfg_.vocab; }
  int feat_dim() const { return cfg_.feat_dim; }
  int frames_out(int frames_in) const { return output_frames(frames_in, cfg_.conv_strides); }

  /// Training mode gates dropout. Off (the default), forward is pure and
  /// safe to call concurrently.
  void set_training(bool t) { training_ = t; }
  bool training() const { return training_; }

 private:
  TeacherConfig cfg_;
  ModelKind kind_;
  ParameterStore store_;
  std::vector<ConvBlock> src_blocks_;
  std::optional<Linear> src_proj_;
  Tensor* embed_ = nullptr;
  std::vector<detail::EncoderLayer> enc_layers_;
  std::optional<LayerNormModule> enc_final_;
  std::vector<detail::DecoderLayer> dec_layers_;
  std::optional<LayerNormModule> dec_final_;
  std::optional<Linear> head_;
  bool training_ = false;
  mutable StreamRng drop_rng_;
};

struct StudentOutput {
  Tensor grid;    // frames x (vocab+1), log probabilities
  Tensor hidden;  // frames x last channel count, pre-head
};

/// Plain convolutional grid predictor over source features. Serves as both
/// the compact student (separable, narrow) and the conventional teacher
/// (dense, wide) depending on its config.
class ConvCtcModel {
 public:
  ConvCtcModel(StudentConfig cfg, ModelKind kind, StreamRng& rng)
      : cfg_(cfg), kind_(kind), drop_rng_(rng.next_u64(), "dropout") {
    if (kind != ModelKind::Student && kind != ModelKind::Conventional) {
      throw UsageError("conv model: kind must be student or conventional, got " +
                       kind_name(kind));
    }
    if (cfg.vocab < 1 || cfg.feat_dim < 1) {
      throw ConfigError("conv model: dimensions must be positive");
    }
    detail::validate_conv_spec(cfg.conv_channels, cfg.conv_strides, cfg.kernel);
    int cin = cfg.feat_dim;
    for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
      blocks_.emplace_back(store_, "conv" + std::to_string(i), cin, cfg.conv_channels[i],
                           cfg.kernel, cfg.conv_strides[i], cfg.separable, rng);
      cin = cfg.conv_channels[i];
    }
    head_.emplace(store_, "head", cin, cfg.vocab + 1, rng);
  }

  StudentOutput forward(const Tensor& x) const {
    if (x.ndim() != 2 || x.dim(1) != cfg_.feat_dim) {
      throw ShapeError("conv model: source must be frames x " + std::to_string(cfg_.feat_dim) +
                       ", got " + shape_str(x.shape()));
    }
    if (x.dim(0) < 1) throw UsageError("conv model: source has no frames");
    Tensor h = x;
    for (const auto& block : blocks_) h = block.forward(h);
    if (training_ && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, drop_rng_);
    StudentOutput res;
    res.hidden = h;
    res.grid = log_softmax(head_->forward(h));
    return res;
  }

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const StudentConfig& config() const { return cfg_; }
  ModelKind kind() const { return kind_; }
  int hidden_width() const { return cfg_.conv_channels.back(); }
  int vocab() const { return cfg_.vocab; }
  int feat_dim() const { return cfg_.feat_dim; }
  int frames_out(int frames_in) const { return output_frames(frames_in, cfg_.conv_strides); }

  void set_training(bool t) { training_ = t; }
  bool training() const { return training_; }

 private:
  StudentConfig cfg_;
  ModelKind kind_;
  ParameterStore store_;
  std::vector<ConvBlock> blocks_;
  std::optional<Linear> head_;
  bool training_ = false;
  mutable StreamRng drop_rng_;
};

// ---------------------------------------------------------------------------
// Checkpoint glue. The architecture rides along as a small integer vector
// stored under a reserved tensor name, so a saved file is self-describing.
// Small integers are exact in f32.
// ---------------------------------------------------------------------------

inline constexpr const char* kArchTensorName = "meta.arch";

namespace detail {

inline Tensor encode_teacher_arch(const TeacherConfig& c, ModelKind kind) {
  std::vector<double> v{static_cast<double>(static_cast<int>(kind)),
                        static_cast<double>(c.vocab),
                        static_cast<double>(c.feat_dim),
                        static_cast<double>(c.width),
                        static_cast<double>(c.heads),
                        static_cast<double>(c.ffn),
                        static_cast<double>(c.enc_layers),
                        static_cast<double>(c.dec_layers),
                        static_cast<double>(c.kernel),
                        static_cast<double>(c.conv_channels.size())};
  for (int s : c.conv_strides) v.push_back(static_cast<double>(s));
  for (int ch : c.conv_channels) v.push_back(static_cast<double>(ch));
  const int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

inline Tensor encode_student_arch(const StudentConfig& c, ModelKind kind) {
  std::vector<double> v{static_cast<double>(static_cast<int>(kind)),
                        static_cast<double>(c.vocab),
                        static_cast<double>(c.feat_dim),
                        static_cast<double>(c.kernel),
                        c.separable ? 1.0 : 0.0,
                        static_cast<double>(c.conv_channels.size())};
  for (int s : c.conv_strides) v.push_back(static_cast<double>(s));
  for (int ch : c.conv_channels) v.push_back(static_cast<double>(ch));
  const int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

class ArchReader {
 public:
  explicit ArchReader(const Tensor& t) : t_(t) {}

  int next() {
    if (i_ >= t_.size()) throw CompatError("checkpoint: architecture record too short");
    return static_cast<int>(t_.at(i_++));
  }

  std::vector<int> take(int n) {
    std::vector<int> out(static_cast<std::size_t>(n));
    for (auto& v : out) v = next();
    return out;
  }

  void expect_end() const {
    if (i_ != t_.size()) throw CompatError("checkpoint: architecture record too long");
  }

 private:
  const Tensor& t_;
  std::int64_t i_ = 0;
};

}  // namespace detail

inline void save_model(const std::string& path, const OracleTeacher& model) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : model.params().all()) out.emplace(name, t.detached());
  out.emplace(kArchTensorName, detail::encode_teacher_arch(model.config(), model.kind()));
  save_checkpoint(path, out);
}

inline void save_model(const std::string& path, const ConvCtcModel& model) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : model.params().all()) out.emplace(name, t.detached());
  out.emplace(kArchTensorName, detail::encode_student_arch(model.config(), model.kind()));
  save_checkpoint(path, out);
}

/// A loaded model of whichever family the checkpoint holds. grid() hides
/// the dispatch: oracle variants consume the target, conv models ignore it.
struct GridHidden {
  Tensor grid;
  Tensor hidden;
};

struct AnyModel {
  ModelKind kind = ModelKind::Student;
  std::shared_ptr<OracleTeacher> teacher;
  std::shared_ptr<ConvCtcModel> conv;

  Tensor grid(const Tensor& x, const std::vector<int>& y) const {
    if (teacher) return teacher->forward(x, y).grid;
    return conv->forward(x).grid;
  }

  GridHidden grid_and_hidden(const Tensor& x, const std::vector<int>& y) const {
    if (teacher) {
      TeacherOutput out = teacher->forward(x, y);
      return {out.grid, out.hidden};
    }
    StudentOutput out = conv->forward(x);
    return {out.grid, out.hidden};
  }

  ParameterStore& params() const { return teacher ? teacher->params() : conv->params(); }
  void set_training(bool t) const {
    if (teacher) {
      teacher->set_training(t);
    } else {
      conv->set_training(t);
    }
  }
  int vocab() const { return teacher ? teacher->vocab() : conv->vocab(); }
  int feat_dim() const { return teacher ? teacher->feat_dim() : conv->feat_dim(); }
  int hidden_width() const { return teacher ? teacher->width() : conv->hidden_width(); }
  int downsample() const {
    return downsample_factor(teacher ? teacher->config().conv_strides
                                     : conv->config().conv_strides);
  }
};

inline AnyModel load_model(const std::string& path) {
  auto loaded = load_checkpoint(path);
  auto it = loaded.find(kArchTensorName);
  if (it == loaded.end()) {
    throw CompatError(path + ": checkpoint has no architecture record");
  }
  detail::ArchReader r(it->second);
  const int kind_int = r.next();
  if (kind_int < 0 || kind_int > 4) {
    throw CompatError(path + ": unknown model kind " + std::to_string(kind_int));
  }
  const ModelKind kind = static_cast<ModelKind>(kind_int);
  StreamRng rng(0, "load-scratch");
  AnyModel any;
  any.kind = kind;
  if (is_oracle_kind(kind)) {
    TeacherConfig c;
    c.vocab = r.next();
    c.feat_dim = r.next();
    c.width = r.next();
    c.heads = r.next();
    c.ffn = r.next();
    c.enc_layers = r.next();
    c.dec_layers = r.next();
    c.kernel = r.next();
    const int n_conv = r.next();
    c.conv_strides = r.take(n_conv);
    c.conv_channels = r.take(n_conv);
    r.expect_end();
    any.teacher = std::make_shared<OracleTeacher>(c, kind, rng);
    restore_parameters(any.teacher->params(), loaded);
  } else {
    StudentConfig c;
    c.vocab = r.next();
    c.feat_dim = r.next();
    c.kernel = r.next();
    c.separable = r.next() != 0;
    const int n_conv = r.next();
    c.conv_strides = r.take(n_conv);
    c.conv_channels = r.take(n_conv);
    r.expect_end();
    any.conv = std::make_shared<ConvCtcModel>(c, kind, rng);
    restore_parameters(any.conv->params(), loaded);
  }
  return any;
}

}  // namespace otkd
