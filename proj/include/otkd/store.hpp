#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "otkd/error.hpp"
#include "otkd/tensor.hpp"

namespace otkd {

/// Ordered collection of named trainable tensors. Registration order is
/// deterministic (std::map by name), which the checkpoint format relies on.
class ParameterStore {
 public:
  Tensor& create(const std::string& name, Shape shape, StreamRng& rng, double stddev) {
    check_fresh(name);
    Tensor t = Tensor::randn(std::move(shape), rng, stddev);
    t.set_requires_grad(true).set_name(name);
    return params_.emplace(name, std::move(t)).first->second;
  }

  Tensor& create_zeros(const std::string& name, Shape shape) {
    check_fresh(name);
    Tensor t = Tensor::zeros(std::move(shape));
    t.set_requires_grad(true).set_name(name);
    return params_.emplace(name, std::move(t)).first->second;
  }

  Tensor& create_full(const std::string& name, Shape shape, double v) {
    check_fresh(name);
    Tensor t = Tensor::full(std::move(shape), v);
    t.set_requires_grad(true).set_name(name);
    return params_.emplace(name, std::move(t)).first->second;
  }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("parameter store: no parameter named " + name);
    return it->second;
  }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("parameter store: no parameter named " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::map<std::string, Tensor>& all() { return params_; }
  const std::map<std::string, Tensor>& all() const { return params_; }

  /// Marks every parameter frozen (or trainable again). Frozen parameters
  /// record no graph history, so a teacher inside a distillation loss
  /// contributes values but never gradients.
  void set_trainable(bool trainable) {
    for (auto& [name, t] : params_) t.set_requires_grad(trainable);
  }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

 private:
  void check_fresh(const std::string& name) {
    if (params_.count(name)) throw UsageError("parameter store: duplicate parameter " + name);
  }

  std::map<std::string, Tensor> params_;
};

// ---------------------------------------------------------------------------
// Checkpoint format. Little-endian throughout:
//   magic "OTKD" | u32 version (=1) | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u32 dims... |
//               f32 payload (row-major)
// Values are stored as f32; loading them back gives f64 tensors that agree
// with the originals to f32 rounding.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

/// Cursor over an in-memory byte buffer with truncation checks.
class ByteReader {
 public:
  ByteReader(const std::string& buf, const std::string& what) : buf_(buf), what_(what) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = static_cast<std::uint8_t>(buf_[pos_]) |
                      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + 1])) << 8) |
                      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + 2])) << 16) |
                      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + 3])) << 24);
    pos_ += 4;
    return v;
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) {
      throw TruncatedError(what_ + ": truncated at byte " + std::to_string(pos_) + ", needed " +
                           std::to_string(n) + " more of " + std::to_string(buf_.size()));
    }
  }

  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed on " + path);
  return buf;
}

inline void write_file(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  out.flush();
  if (!out) throw IoError("write failed on " + path);
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const std::map<std::string, Tensor>& tensors) {
  std::string buf;
  buf += "OTKD";
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put_u32(buf, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_f32(buf, static_cast<float>(v));
  }
  return buf;
}

inline std::map<std::string, Tensor> deserialize_checkpoint(const std::string& buf,
                                                            const std::string& what) {
  detail::ByteReader r(buf, what);
  if (r.bytes(4) != "OTKD") throw BadMagicError(what + ": not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw BadVersionError(what + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(r.u32());
      n *= shape[d];
    }
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = static_cast<double>(r.f32());
    if (out.count(name)) throw IoError(what + ": duplicate tensor name " + name);
    out.emplace(name, Tensor(std::move(shape), std::move(data)));
  }
  if (!r.at_end()) {
    throw IoError(what + ": trailing bytes after tensor " + std::to_string(count));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  detail::write_file(path, serialize_checkpoint(tensors));
}

inline std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(detail::read_file(path), path);
}

/// Loads checkpoint values into an existing store. Every stored parameter
/// must be present with a matching shape; extra tensors in the file are
/// ignored unless strict.
inline void restore_parameters(ParameterStore& store, const std::map<std::string, Tensor>& loaded,
                               bool strict = false) {
  for (auto& [name, param] : store.all()) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw CompatError("checkpoint is missing parameter " + name);
    if (it->second.shape() != param.shape()) {
      throw CompatError("checkpoint parameter " + name + " has shape " +
                        shape_str(it->second.shape()) + ", expected " + shape_str(param.shape()));
    }
    param.mutable_data() = it->second.data();
  }
  if (strict) {
    for (const auto& [name, t] : loaded) {
      if (!store.has(name)) throw CompatError("checkpoint has unknown parameter " + name);
    }
  }
}

}  // namespace otkd
