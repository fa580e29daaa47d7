#pragma once

// Plain key=value run configuration. One assignment per line, full-line
// '#' comments, no sections. Unknown keys are rejected so that typos fail
// loudly instead of silently falling back to defaults.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "otkd/data.hpp"
#include "otkd/distill.hpp"
#include "otkd/error.hpp"
#include "otkd/model.hpp"

namespace otkd {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

class Config {
 public:
  static Config from_text(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      const std::size_t eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                          t + "'");
      }
      const std::string key = detail::trim(t.substr(0, eq));
      const std::string value = detail::trim(t.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      }
      if (cfg.index_.count(key)) {
        throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key +
                          "'");
      }
      cfg.index_[key] = cfg.entries_.size();
      cfg.entries_.emplace_back(key, value);
    }
    return cfg;
  }

  static Config from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str());
  }

  bool has(const std::string& key) const { return index_.count(key) != 0; }

  /// Entries in file order, for echoing into run logs.
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  void reject_unknown_keys(const std::set<std::string>& allowed) const {
    for (const auto& [key, value] : entries_) {
      if (!allowed.count(key)) throw ConfigError("unknown config key: " + key);
    }
  }

  std::string get_string(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw ConfigError("missing config key: " + key);
    return entries_[it->second].second;
  }
  std::string get_string(const std::string& key, const std::string& def) const {
    return has(key) ? get_string(key) : def;
  }

  long long get_int(const std::string& key) const { return parse_int(key, get_string(key)); }
  long long get_int(const std::string& key, long long def) const {
    return has(key) ? get_int(key) : def;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string v = get_string(key);
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      const std::uint64_t out = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": expected unsigned integer, got '" + v + "'");
    }
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const {
    return has(key) ? get_u64(key) : def;
  }

  double get_double(const std::string& key) const {
    const std::string v = get_string(key);
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": expected number, got '" + v + "'");
    }
  }
  double get_double(const std::string& key, double def) const {
    return has(key) ? get_double(key) : def;
  }

  bool get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key " + key + ": expected true/false, got '" + v + "'");
  }
  bool get_bool(const std::string& key, bool def) const {
    return has(key) ? get_bool(key) : def;
  }

  std::vector<int> get_int_list(const std::string& key) const {
    const std::string v = get_string(key);
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos <= v.size()) {
      const std::size_t comma = v.find(',', pos);
      const std::string piece = detail::trim(
          comma == std::string::npos ? v.substr(pos) : v.substr(pos, comma - pos));
      out.push_back(static_cast<int>(parse_int(key, piece)));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    return out;
  }
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& def) const {
    return has(key) ? get_int_list(key) : def;
  }

 private:
  static long long parse_int(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const long long out = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": expected integer, got '" + v + "'");
    }
  }

  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Every key any command understands. Commands share one namespace so a
/// config file can drive a whole experiment.
inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      // task
      "seed", "vocab", "feat_dim", "min_duration", "max_duration", "noise_sigma",
      "min_len", "max_len", "downsample", "train_count", "eval_count",
      // teacher dims
      "teacher_width", "teacher_heads", "teacher_ffn", "teacher_enc_layers",
      "teacher_dec_layers", "teacher_kernel", "teacher_channels", "teacher_strides",
      "dropout",
      // student dims
      "student_kernel", "student_channels", "student_strides", "student_separable",
      "student_dropout",
      // optimization
      "epochs", "batch", "lr", "clip",
      // distillation
      "phase1_epochs", "phase2_epochs", "kd", "fitnets_sum",
  };
  return keys;
}

inline TaskSpec task_from_config(const Config& c) {
  TaskSpec spec;  // defaults double as documentation
  spec.seed = c.get_u64("seed");
  spec.vocab = static_cast<int>(c.get_int("vocab", spec.vocab));
  spec.feat_dim = static_cast<int>(c.get_int("feat_dim", spec.feat_dim));
  spec.min_duration = static_cast<int>(c.get_int("min_duration", spec.min_duration));
  spec.max_duration = static_cast<int>(c.get_int("max_duration", spec.max_duration));
  spec.noise_sigma = c.get_double("noise_sigma", spec.noise_sigma);
  spec.min_len = static_cast<int>(c.get_int("min_len", spec.min_len));
  spec.max_len = static_cast<int>(c.get_int("max_len", spec.max_len));
  spec.downsample = static_cast<int>(c.get_int("downsample", spec.downsample));
  spec.train_count = static_cast<int>(c.get_int("train_count", spec.train_count));
  spec.eval_count = static_cast<int>(c.get_int("eval_count", spec.eval_count));
  return spec;
}

inline TeacherConfig teacher_from_config(const Config& c) {
  const TaskSpec task = task_from_config(c);
  TeacherConfig cfg;
  cfg.vocab = task.vocab;
  cfg.feat_dim = task.feat_dim;
  cfg.width = static_cast<int>(c.get_int("teacher_width", cfg.width));
  cfg.heads = static_cast<int>(c.get_int("teacher_heads", cfg.heads));
  cfg.ffn = static_cast<int>(c.get_int("teacher_ffn", cfg.ffn));
  cfg.enc_layers = static_cast<int>(c.get_int("teacher_enc_layers", cfg.enc_layers));
  cfg.dec_layers = static_cast<int>(c.get_int("teacher_dec_layers", cfg.dec_layers));
  cfg.kernel = static_cast<int>(c.get_int("teacher_kernel", cfg.kernel));
  cfg.conv_channels = c.get_int_list("teacher_channels", cfg.conv_channels);
  cfg.conv_strides = c.get_int_list("teacher_strides", cfg.conv_strides);
  cfg.dropout = c.get_double("dropout", cfg.dropout);
  return cfg;
}

inline StudentConfig student_from_config(const Config& c) {
  const TaskSpec task = task_from_config(c);
  StudentConfig cfg;
  cfg.vocab = task.vocab;
  cfg.feat_dim = task.feat_dim;
  cfg.kernel = static_cast<int>(c.get_int("student_kernel", cfg.kernel));
  cfg.separable = c.get_bool("student_separable", cfg.separable);
  cfg.conv_channels = c.get_int_list("student_channels", cfg.conv_channels);
  cfg.conv_strides = c.get_int_list("student_strides", cfg.conv_strides);
  cfg.dropout = c.get_double("student_dropout", cfg.dropout);
  return cfg;
}

/// Dense conv model sized at twice the student's channels, same strides.
/// Trains under the teacher recipe, so it takes the teacher dropout key.
inline StudentConfig conventional_from_config(const Config& c) {
  StudentConfig cfg = student_from_config(c);
  cfg.separable = false;
  for (int& ch : cfg.conv_channels) ch *= 2;
  cfg.dropout = c.get_double("dropout", 0.0);
  return cfg;
}

inline TrainPlan train_plan_from_config(const Config& c) {
  TrainPlan plan;
  plan.epochs = static_cast<int>(c.get_int("epochs", plan.epochs));
  plan.batch = static_cast<int>(c.get_int("batch", plan.batch));
  plan.lr = c.get_double("lr", plan.lr);
  plan.clip = c.get_double("clip", plan.clip);
  return plan;
}

inline DistillPlan distill_plan_from_config(const Config& c) {
  DistillPlan plan;
  plan.kd = kd_from_name(c.get_string("kd", kd_name(plan.kd)));
  plan.fitnets_sum = c.get_bool("fitnets_sum", plan.fitnets_sum);
  plan.phase1_epochs = static_cast<int>(c.get_int("phase1_epochs", plan.phase1_epochs));
  plan.phase2_epochs = static_cast<int>(c.get_int("phase2_epochs", plan.phase2_epochs));
  plan.batch = static_cast<int>(c.get_int("batch", plan.batch));
  plan.lr = c.get_double("lr", plan.lr);
  plan.clip = c.get_double("clip", plan.clip);
  plan.seed = c.get_u64("seed");
  return plan;
}

}  // namespace otkd
