#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "otkd/error.hpp"
#include "otkd/store.hpp"
#include "otkd/tensor.hpp"

namespace otkd {

/// SGD with classical momentum: v = m*v + g; p -= lr*v.
class Sgd {
 public:
  Sgd(ParameterStore& store, double lr, double momentum = 0.0)
      : store_(store), lr_(lr), momentum_(momentum) {}

  void step(const GradTable& grads) {
    for (auto& [name, param] : store_.all()) {
      Tensor g = grads.grad(param);
      auto& v = velocity_[name];
      if (v.empty()) v.assign(param.data().size(), 0.0);
      auto& p = param.mutable_data();
      const auto& gv = g.data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + gv[i];
        p[i] -= lr_ * v[i];
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  ParameterStore& store_;
  double lr_;
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

/// Adam with bias correction. Parameters absent from a gradient table take
/// a zero-gradient step (their moments still decay).
class Adam {
 public:
  Adam(ParameterStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : store_(store), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const GradTable& grads) {
    ++t_;
    for (auto& [name, param] : store_.all()) {
      Tensor g = grads.grad(param);
      apply(name, param, g.data());
    }
  }

  /// Step from a raw name-to-gradient map (the named() view of a gradient
  /// table, possibly rescaled by clipping). Missing names take a zero step.
  void step(const std::map<std::string, Tensor>& grads) {
    ++t_;
    for (auto& [name, param] : store_.all()) {
      auto it = grads.find(name);
      if (it == grads.end()) {
        apply(name, param, std::vector<double>(param.data().size(), 0.0));
      } else {
        apply(name, param, it->second.data());
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };

  void apply(const std::string& name, Tensor& param, const std::vector<double>& gv) {
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    auto& st = state_[name];
    if (st.m.empty()) {
      st.m.assign(param.data().size(), 0.0);
      st.v.assign(param.data().size(), 0.0);
    }
    auto& p = param.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * gv[i];
      st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * gv[i] * gv[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }

  ParameterStore& store_;
  double lr_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Global gradient-norm clipping applied in place to a raw gradient map.
/// Returns the pre-clip norm.
inline double clip_grad_norm(std::map<std::string, Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& v : g.mutable_data()) v *= scale;
    }
  }
  return norm;
}

}  // namespace otkd
