#pragma once

// Training loops. train_ctc covers any model that emits a classification
// grid; distill_student adds a warm-up phase that pulls the student towards
// a frozen teacher before plain CTC refinement takes over.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "otkd/ctc.hpp"
#include "otkd/data.hpp"
#include "otkd/error.hpp"
#include "otkd/eval.hpp"
#include "otkd/model.hpp"
#include "otkd/nn.hpp"
#include "otkd/optim.hpp"
#include "otkd/random.hpp"
#include "otkd/store.hpp"
#include "otkd/tensor.hpp"

namespace otkd {

enum class KdKind {
  FitNets = 0,   // match teacher hidden frames through a learned projection
  FrameKl = 1,   // per-frame KL from teacher posteriors to student posteriors
  SoftmaxL2 = 2  // per-frame squared distance between posteriors
};

inline const char* kd_name(KdKind k) {
  switch (k) {
    case KdKind::FitNets: return "fitnets";
    case KdKind::FrameKl: return "kl";
    case KdKind::SoftmaxL2: return "l2";
  }
  return "?";
}

inline KdKind kd_from_name(const std::string& name) {
  for (KdKind k : {KdKind::FitNets, KdKind::FrameKl, KdKind::SoftmaxL2}) {
    if (name == kd_name(k)) return k;
  }
  throw ConfigError("unknown transfer loss name: " + name);
}

struct TrainLogEntry {
  int epoch = 0;  // 1-based, numbered continuously across phases
  int phase = 0;  // 1 = warm-up (or single-phase training), 2 = CTC refinement
  double loss = 0.0;
  double cer = 0.0;
};

struct TrainPlan {
  int epochs = 10;
  int batch = 8;
  double lr = 3e-3;
  double clip = 5.0;
  int eval_threads = 1;
};

struct DistillPlan {
  KdKind kd = KdKind::FitNets;
  bool fitnets_sum = false;  // keep the raw frame sum instead of the mean
  int phase1_epochs = 2;
  int phase2_epochs = 20;
  int batch = 8;
  double lr = 3e-3;
  double clip = 5.0;
  int eval_threads = 1;
  std::uint64_t seed = 1;  // projection init
};

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not match");
  }
}

}  // namespace detail

/// Squared distance between teacher frames and projected student frames.
/// Gradient reaches only the student side. Mean over frames by default; the
/// raw sum weighs long sequences proportionally harder.
inline Tensor fitnets_loss(const Tensor& teacher_hidden, const Tensor& projected_student,
                           bool mean_per_frame = true) {
  detail::require_same_shape("fitnets_loss", teacher_hidden, projected_student);
  Tensor d = sub(teacher_hidden.detached(), projected_student);
  Tensor s = sum(mul(d, d));
  if (mean_per_frame) s = s / static_cast<double>(teacher_hidden.shape()[0]);
  return s;
}

/// Mean per-frame KL(teacher || student) over log-probability grids.
inline Tensor frame_kl_loss(const Tensor& teacher_grid, const Tensor& student_grid) {
  detail::require_same_shape("frame_kl_loss", teacher_grid, student_grid);
  Tensor t = teacher_grid.detached();
  Tensor s = sum(mul(exp(t), sub(t, student_grid)));
  return s / static_cast<double>(teacher_grid.shape()[0]);
}

/// Mean per-frame squared distance between teacher and student posteriors.
inline Tensor softmax_l2_loss(const Tensor& teacher_grid, const Tensor& student_grid) {
  detail::require_same_shape("softmax_l2_loss", teacher_grid, student_grid);
  Tensor d = sub(exp(teacher_grid.detached()), exp(student_grid));
  return sum(mul(d, d)) / static_cast<double>(teacher_grid.shape()[0]);
}

namespace detail {

inline void check_positive(const char* what, double v) {
  if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
}

/// One pass over the training set in fixed order. sample_loss(i) must return
/// the scalar loss of sample i; batches average it before one backward pass.
/// Returns the mean per-sample loss.
inline double run_epoch(std::size_t count, const std::function<Tensor(std::size_t)>& sample_loss,
                        const std::vector<Adam*>& opts, int batch, double clip) {
  if (count == 0) throw UsageError("training set is empty");
  double total = 0.0;
  std::size_t i = 0;
  while (i < count) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch), count - i);
    Tensor batch_loss = sample_loss(i);
    for (std::size_t j = 1; j < n; ++j) batch_loss = batch_loss + sample_loss(i + j);
    batch_loss = batch_loss / static_cast<double>(n);
    GradTable grads = backward(batch_loss);
    std::map<std::string, Tensor> g = grads.named();
    clip_grad_norm(g, clip);
    for (Adam* opt : opts) opt->step(g);
    total += batch_loss.item() * static_cast<double>(n);
    i += n;
  }
  return total / static_cast<double>(count);
}

}  // namespace detail

/// Plain CTC training of any model against its own grid. Logs one entry per
/// epoch with the mean training loss and the greedy eval CER.
inline std::vector<TrainLogEntry> train_ctc(const AnyModel& model,
                                            const std::vector<Sample>& train,
                                            const std::vector<Sample>& eval_set,
                                            const TrainPlan& plan) {
  if (plan.epochs < 0) throw ConfigError("epochs must not be negative");
  detail::check_positive("batch", plan.batch);
  detail::check_positive("lr", plan.lr);
  Vocab vocab(model.vocab());
  Adam opt(model.params(), plan.lr);
  std::vector<Adam*> opts{&opt};
  auto loss_at = [&](std::size_t i) {
    const Sample& s = train[i];
    return ctc_loss_op(model.grid(s.features, s.labels), s.labels, vocab);
  };
  std::vector<TrainLogEntry> log;
  for (int e = 0; e < plan.epochs; ++e) {
    model.set_training(true);
    const double loss = detail::run_epoch(train.size(), loss_at, opts, plan.batch, plan.clip);
    model.set_training(false);
    const EvalReport rep = evaluate(model, eval_set, plan.eval_threads);
    log.push_back({e + 1, 1, loss, rep.cer});
  }
  return log;
}

/// Two-phase student training. With a teacher, phase 1 minimises the chosen
/// transfer loss against the frozen teacher (FitNets adds a throwaway linear
/// projection bridging the hidden widths); phase 2 restarts the optimiser
/// and trains on CTC alone. A null teacher skips phase 1, which makes the
/// run an exact no-transfer baseline for the same plan.
inline std::vector<TrainLogEntry> distill_student(const AnyModel& student,
                                                  const AnyModel* teacher,
                                                  const std::vector<Sample>& train,
                                                  const std::vector<Sample>& eval_set,
                                                  const DistillPlan& plan) {
  if (plan.phase1_epochs < 0) throw ConfigError("phase1_epochs must not be negative");
  if (plan.phase2_epochs < 0) throw ConfigError("phase2_epochs must not be negative");
  detail::check_positive("batch", plan.batch);
  detail::check_positive("lr", plan.lr);
  if (teacher) {
    if (teacher->vocab() != student.vocab()) {
      throw CompatError("teacher and student vocabulary sizes differ: " +
                        std::to_string(teacher->vocab()) + " vs " +
                        std::to_string(student.vocab()));
    }
    if (teacher->feat_dim() != student.feat_dim()) {
      throw CompatError("teacher and student feature widths differ: " +
                        std::to_string(teacher->feat_dim()) + " vs " +
                        std::to_string(student.feat_dim()));
    }
    if (teacher->downsample() != student.downsample()) {
      throw CompatError("teacher and student downsample factors differ: " +
                        std::to_string(teacher->downsample()) + " vs " +
                        std::to_string(student.downsample()));
    }
  }

  std::vector<TrainLogEntry> log;
  int epoch = 0;

  if (teacher && plan.phase1_epochs > 0) {
    teacher->params().set_trainable(false);
    // The teacher never moves, so its targets are computed once up front.
    std::vector<GridHidden> targets;
    targets.reserve(train.size());
    for (const auto& s : train) targets.push_back(teacher->grid_and_hidden(s.features, s.labels));

    ParameterStore proj_store;
    std::unique_ptr<Linear> proj;
    if (plan.kd == KdKind::FitNets) {
      StreamRng rng(plan.seed, "kd-projection");
      proj = std::make_unique<Linear>(proj_store, "proj", student.hidden_width(),
                                      teacher->hidden_width(), rng);
    }
    Adam stu_opt(student.params(), plan.lr);
    Adam proj_opt(proj_store, plan.lr);
    std::vector<Adam*> opts{&stu_opt, &proj_opt};
    auto loss_at = [&](std::size_t i) -> Tensor {
      const Sample& s = train[i];
      const GridHidden stu = student.grid_and_hidden(s.features, s.labels);
      const GridHidden& tea = targets[i];
      switch (plan.kd) {
        case KdKind::FitNets:
          return fitnets_loss(tea.hidden, proj->forward(stu.hidden), !plan.fitnets_sum);
        case KdKind::FrameKl:
          return frame_kl_loss(tea.grid, stu.grid);
        case KdKind::SoftmaxL2:
          return softmax_l2_loss(tea.grid, stu.grid);
      }
      throw ConfigError("unknown transfer loss");
    };
    for (int e = 0; e < plan.phase1_epochs; ++e) {
      student.set_training(true);
      const double loss = detail::run_epoch(train.size(), loss_at, opts, plan.batch, plan.clip);
      student.set_training(false);
      const EvalReport rep = evaluate(student, eval_set, plan.eval_threads);
      log.push_back({++epoch, 1, loss, rep.cer});
    }
    // proj_store goes out of scope here: the bridge is scaffolding, not
    // part of the student.
  }

  Vocab vocab(student.vocab());
  Adam opt(student.params(), plan.lr);
  std::vector<Adam*> opts{&opt};
  auto ctc_at = [&](std::size_t i) {
    const Sample& s = train[i];
    return ctc_loss_op(student.grid(s.features, s.labels), s.labels, vocab);
  };
  for (int e = 0; e < plan.phase2_epochs; ++e) {
    student.set_training(true);
    const double loss = detail::run_epoch(train.size(), ctc_at, opts, plan.batch, plan.clip);
    student.set_training(false);
    const EvalReport rep = evaluate(student, eval_set, plan.eval_threads);
    log.push_back({++epoch, 2, loss, rep.cer});
  }
  return log;
}

}  // namespace otkd
