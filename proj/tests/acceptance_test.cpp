// Release gate. Every check here is an end-to-end claim about the library:
// exact agreement with brute-force CTC, finite-difference gradients, the
// alignment algebra, and the trained-model comparisons (oracle teacher vs
// conventional, distilled student vs baseline, input-reliance guards).
// Each test prints one "[ACCEPTANCE] <name>: PASS|FAIL" line so the verdict
// is readable straight off the log.
//
// The trained-model checks share one environment (same data, teachers and
// students) built lazily on first use; everything is seeded, so the numbers
// asserted against are reproduced bit-for-bit on every run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "otkd/config.hpp"
#include "otkd/distill.hpp"
#include "otkd/eval.hpp"
#include "testing_util.hpp"

namespace otkd {
namespace {

class Acceptance : public ::testing::Test {
 protected:
  void Criterion(const char* name) { name_ = name; }
  void TearDown() override {
    std::printf("[ACCEPTANCE] %s: %s\n", name_, HasFailure() ? "FAIL" : "PASS");
    std::fflush(stdout);
  }

 private:
  const char* name_ = "unnamed";
};

// ---------------------------------------------------------------------------
// Shared trained environment
// ---------------------------------------------------------------------------

constexpr int kSeedRuns = 3;

AnyModel make_teacher(ModelKind kind, std::uint64_t seed, double dropout) {
  TeacherConfig cfg;
  cfg.dropout = dropout;
  StreamRng rng(seed, "teacher-init");
  AnyModel m;
  m.kind = kind;
  m.teacher = std::make_shared<OracleTeacher>(cfg, kind, rng);
  return m;
}

AnyModel make_conv_teacher(std::uint64_t seed, double dropout) {
  StudentConfig cfg = conventional_config(10, 8);
  cfg.dropout = dropout;
  StreamRng rng(seed, "teacher-init");
  AnyModel m;
  m.kind = ModelKind::Conventional;
  m.conv = std::make_shared<ConvCtcModel>(cfg, ModelKind::Conventional, rng);
  return m;
}

AnyModel make_student(std::uint64_t seed) {
  StudentConfig cfg;
  StreamRng rng(seed, "student-init");
  AnyModel m;
  m.kind = ModelKind::Student;
  m.conv = std::make_shared<ConvCtcModel>(cfg, ModelKind::Student, rng);
  return m;
}

struct TrainedEnv {
  std::vector<Sample> train;
  std::vector<Sample> eval;
  std::vector<AnyModel> oracle, conv, wo_target;
  AnyModel wo_source;
  std::vector<double> oracle_cer, conv_cer;
  std::vector<double> baseline_cer, oracle_kd_cer, wo_target_kd_cer;
  double wo_source_cer = 0.0;
  std::vector<double> wo_source_kd_cer;
};

const TrainedEnv& trained_env() {
  static const TrainedEnv* env = [] {
    auto* e = new TrainedEnv();

    TaskSpec spec;
    spec.train_count = 512;
    spec.eval_count = 64;
    spec.seed = 9;
    // Round-trip through the wire format: training consumes f32 features,
    // exactly as it would from a dataset file.
    auto samples = deserialize_dataset(serialize_dataset(generate_dataset(spec)), "env");
    SplitView split = split_dataset(std::move(samples), spec.train_count, spec.eval_count);
    e->train = std::move(split.train);
    e->eval = std::move(split.eval);

    TrainPlan teach;
    teach.epochs = 30;
    teach.batch = 8;
    teach.lr = 1e-3;
    const double dropout = 0.7;

    for (std::uint64_t s = 1; s <= kSeedRuns; ++s) {
      AnyModel o = make_teacher(ModelKind::Oracle, s, dropout);
      e->oracle_cer.push_back(train_ctc(o, e->train, e->eval, teach).back().cer);
      e->oracle.push_back(o);

      AnyModel c = make_conv_teacher(s, dropout);
      e->conv_cer.push_back(train_ctc(c, e->train, e->eval, teach).back().cer);
      e->conv.push_back(c);

      AnyModel w = make_teacher(ModelKind::OracleWithoutTarget, s, dropout);
      train_ctc(w, e->train, e->eval, teach);
      e->wo_target.push_back(w);
      std::printf("[env] teachers seed %llu done\n", static_cast<unsigned long long>(s));
      std::fflush(stdout);
    }

    // The source branch of this ablation is zeroed anyway, so it trains
    // without dropout.
    e->wo_source = make_teacher(ModelKind::OracleWithoutSource, 1, 0.0);
    e->wo_source_cer = train_ctc(e->wo_source, e->train, e->eval, teach).back().cer;

    DistillPlan dp;
    dp.phase1_epochs = 10;
    dp.phase2_epochs = 20;
    dp.batch = 8;
    dp.lr = 3e-3;
    for (int s = 1; s <= kSeedRuns; ++s) {
      dp.seed = static_cast<std::uint64_t>(20 + s);
      AnyModel base = make_student(dp.seed);
      e->baseline_cer.push_back(distill_student(base, nullptr, e->train, e->eval, dp).back().cer);
      AnyModel okd = make_student(dp.seed);
      e->oracle_kd_cer.push_back(
          distill_student(okd, &e->oracle[static_cast<std::size_t>(s - 1)], e->train, e->eval, dp)
              .back()
              .cer);
      AnyModel wkd = make_student(dp.seed);
      e->wo_target_kd_cer.push_back(
          distill_student(wkd, &e->wo_target[static_cast<std::size_t>(s - 1)], e->train, e->eval,
                          dp)
              .back()
              .cer);
      AnyModel skd = make_student(dp.seed);
      e->wo_source_kd_cer.push_back(
          distill_student(skd, &e->wo_source, e->train, e->eval, dp).back().cer);
    }
    std::printf("[env] students done\n");
    std::fflush(stdout);
    return e;
  }();
  return *env;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  char buf[32];
  for (double x : v) {
    std::snprintf(buf, sizeof buf, "%s%.6f", out.empty() ? "" : " ", x);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact CTC agreement with path enumeration
// ---------------------------------------------------------------------------

TEST_F(Acceptance, CtcLossMatchesBruteForce) {
  Criterion("ctc-brute-force-equivalence");
  StreamRng rng(501, "ctc-acceptance");
  for (int case_i = 0; case_i < 200; ++case_i) {
    const int K = rng.uniform_int(1, 3);
    Vocab vocab(K);
    const int T = rng.uniform_int(1, 6);
    std::vector<int> y(static_cast<std::size_t>(rng.uniform_int(0, 3)));
    for (auto& l : y) l = rng.uniform_int(0, K - 1);
    while (min_frames(y) > T) y.pop_back();

    const int C = vocab.num_classes();
    std::vector<double> logits(static_cast<std::size_t>(T * C));
    for (auto& v : logits) v = rng.normal();
    Tensor grid = log_softmax(Tensor({T, C}, logits));

    const double dp = ctc_loss(grid.data(), T, C, y, vocab);
    const double brute = ctc_loss_brute(grid.data(), T, C, y, vocab);
    ASSERT_NEAR(dp, brute, 1e-6) << "case " << case_i << " T=" << T << " L=" << y.size();
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient suite over every differentiable primitive
// ---------------------------------------------------------------------------

Tensor leaf(StreamRng& rng, Shape shape, const std::string& name, double kink_guard = 0.0) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) {
    x = rng.normal();
    if (kink_guard > 0.0 && std::abs(x) < kink_guard) x = x < 0 ? -kink_guard : kink_guard;
  }
  Tensor t(shape, std::move(v));
  t.set_name(name);
  t.set_requires_grad(true);
  return t;
}

// loss = sum(out * w) so that every output element gets a distinct weight and
// a wrong gradient cannot hide behind a uniform reduction.
void check_weighted(const std::function<Tensor()>& out_fn, std::vector<Tensor> leaves,
                    StreamRng& rng) {
  Tensor probe = out_fn();
  Tensor w = leaf(rng, probe.shape(), "w");
  auto loss = [&] { return sum(mul(out_fn(), w)); };
  leaves.push_back(w);
  testing::expect_matches_finite_difference(loss, leaves);
}

TEST_F(Acceptance, GradientsMatchFiniteDifferences) {
  Criterion("gradient-finite-difference-suite");
  constexpr int kCases = 50;

  for (int i = 0; i < kCases; ++i) {
    StreamRng rng(600 + static_cast<std::uint64_t>(i), "grad-acceptance");

    {
      Tensor a = leaf(rng, {2, 3}, "a"), b = leaf(rng, {2, 3}, "b");
      check_weighted([&] { return add(a, b); }, {a, b}, rng);
      check_weighted([&] { return sub(a, b); }, {a, b}, rng);
      check_weighted([&] { return mul(a, b); }, {a, b}, rng);
      check_weighted([&] { return div_scalar(a, 1.7); }, {a}, rng);
    }
    {
      Tensor a = leaf(rng, {2, 4}, "a");
      check_weighted([&] { return exp(a); }, {a}, rng);
      check_weighted([&] { return log(add(mul(a, a), exp(a))); }, {a}, rng);
      check_weighted([&] { return tanh(a); }, {a}, rng);
    }
    {
      Tensor a = leaf(rng, {3, 4}, "a", 0.05);
      check_weighted([&] { return relu(a); }, {a}, rng);
    }
    {
      Tensor a = leaf(rng, {3, 4}, "a");
      check_weighted([&] { return softmax(a); }, {a}, rng);
      check_weighted([&] { return log_softmax(a); }, {a}, rng);
    }
    {
      Tensor x = leaf(rng, {3, 4}, "x"), g = leaf(rng, {4}, "g"), b = leaf(rng, {4}, "b");
      check_weighted([&] { return layer_norm(x, g, b); }, {x, g, b}, rng);
    }
    {
      Tensor a = leaf(rng, {2, 3}, "a");
      testing::expect_matches_finite_difference([&] { return sum(a); }, {a});
      testing::expect_matches_finite_difference([&] { return mean(a); }, {a});
      check_weighted([&] { return transpose(a); }, {a}, rng);
      check_weighted([&] { return reshape(a, {3, 2}); }, {a}, rng);
    }
    {
      Tensor a = leaf(rng, {3, 4}, "a"), b = leaf(rng, {4, 2}, "b");
      check_weighted([&] { return matmul(a, b); }, {a, b}, rng);
    }
    {
      Tensor a = leaf(rng, {2, 3}, "a"), b = leaf(rng, {2, 3}, "b");
      const int axis = i % 2;
      check_weighted([&] { return concat({a, b}, axis); }, {a, b}, rng);
    }
    {
      Tensor a = leaf(rng, {4, 5}, "a");
      const int axis = i % 2;
      const int len = 2 + (i % 2);
      check_weighted([&] { return slice(a, axis, 1, len); }, {a}, rng);
    }
    {
      Tensor table = leaf(rng, {5, 3}, "table");
      // repeated id checks gradient accumulation into one row
      std::vector<int> ids{rng.uniform_int(0, 4), rng.uniform_int(0, 4), 2, 2};
      check_weighted([&] { return embedding_gather(table, ids); }, {table}, rng);
    }
    {
      Tensor x = leaf(rng, {6, 3}, "x"), w = leaf(rng, {4, 3, 3}, "w"), b = leaf(rng, {4}, "b");
      const int stride = 1 + i % 2;
      check_weighted([&] { return conv1d(x, w, b, stride); }, {x, w, b}, rng);
    }
    {
      Tensor x = leaf(rng, {6, 4}, "x"), w = leaf(rng, {4, 1, 3}, "w"), b = leaf(rng, {4}, "b");
      check_weighted([&] { return conv1d(x, w, b, 1, 4); }, {x, w, b}, rng);
    }
    {
      Tensor a = leaf(rng, {3, 4}, "a");
      std::vector<std::uint8_t> mask(12);
      for (auto& m : mask) m = rng.uniform() < 0.4 ? 1 : 0;
      mask[0] = 0;
      check_weighted([&] { return masked_fill(a, mask, 0.3); }, {a}, rng);
    }
    {
      Tensor a = leaf(rng, {4, 4}, "a");
      const std::uint64_t mask_seed = 700 + static_cast<std::uint64_t>(i);
      check_weighted(
          [&] {
            StreamRng drop(mask_seed, "drop-mask");
            return dropout(a, 0.35, drop);
          },
          {a}, rng);
    }
  }

  // CTC gradient against the same harness: the grid enters through
  // log_softmax exactly as a model head produces it.
  for (int i = 0; i < kCases; ++i) {
    StreamRng rng(800 + static_cast<std::uint64_t>(i), "ctc-grad-acceptance");
    const int K = rng.uniform_int(1, 3);
    Vocab vocab(K);
    const int T = rng.uniform_int(2, 5);
    std::vector<int> y(static_cast<std::size_t>(rng.uniform_int(1, 2)));
    for (auto& l : y) l = rng.uniform_int(0, K - 1);
    while (min_frames(y) > T) y.pop_back();
    if (y.empty()) y.push_back(0);

    Tensor logits = leaf(rng, {T, vocab.num_classes()}, "logits");
    testing::expect_matches_finite_difference(
        [&] { return ctc_loss_op(log_softmax(logits), y, vocab); }, {logits});
  }

  // One composed attention block per case: exercises the full primitive
  // chain the way the models wire it.
  for (int i = 0; i < kCases; ++i) {
    StreamRng rng(900 + static_cast<std::uint64_t>(i), "attn-grad-acceptance");
    ParameterStore store;
    MultiHeadAttention mha(store, "attn", 8, 2, rng);
    Tensor q = leaf(rng, {3, 8}, "q"), k = leaf(rng, {4, 8}, "k"), v = leaf(rng, {4, 8}, "v");
    std::vector<Tensor> leaves{q, k, v};
    for (auto& [name, t] : store.all()) leaves.push_back(t);
    check_weighted([&] { return mha.forward(q, k, v).output; }, leaves, rng);
  }
}

// ---------------------------------------------------------------------------
// Alignment algebra: enumeration, collapse, feasibility, counting
// ---------------------------------------------------------------------------

TEST_F(Acceptance, AlignmentAlgebraSelfConsistent) {
  Criterion("alignment-algebra");
  Vocab v2(2);
  EXPECT_EQ(enumerate_paths({0, 1}, 3, v2).size(), 5u);
  EXPECT_EQ(count_paths({0, 1}, 3, v2), 5u);
  EXPECT_EQ(enumerate_paths({0, 0}, 3, v2).size(), 1u);
  EXPECT_EQ(count_paths({0, 0}, 3, v2), 1u);

  StreamRng rng(502, "algebra-acceptance");
  for (int case_i = 0; case_i < 300; ++case_i) {
    const int K = rng.uniform_int(1, 3);
    Vocab vocab(K);
    const int T = rng.uniform_int(0, 8);
    std::vector<int> y(static_cast<std::size_t>(rng.uniform_int(0, 4)));
    for (auto& l : y) l = rng.uniform_int(0, K - 1);

    const auto paths = enumerate_paths(y, T, vocab);
    EXPECT_EQ(paths.empty(), T < min_frames(y)) << "feasibility, case " << case_i;
    EXPECT_EQ(paths.size(), count_paths(y, T, vocab)) << "count, case " << case_i;

    std::set<std::vector<int>> distinct;
    for (const auto& p : paths) {
      EXPECT_EQ(static_cast<int>(p.size()), T);
      EXPECT_EQ(collapse(p, vocab), y) << "collapse, case " << case_i;
      distinct.insert(p);
    }
    EXPECT_EQ(distinct.size(), paths.size()) << "duplicates, case " << case_i;
  }
}

// ---------------------------------------------------------------------------
// Grid length follows the source alone
// ---------------------------------------------------------------------------

TEST_F(Acceptance, GridLengthFollowsSourceOnly) {
  Criterion("grid-length-source-only");
  AnyModel m = make_teacher(ModelKind::Oracle, 77, 0.0);
  const auto& strides = m.teacher->config().conv_strides;

  StreamRng rng(503, "length-acceptance");
  for (int case_i = 0; case_i < 20; ++case_i) {
    const int T = rng.uniform_int(4, 24);
    Tensor x = leaf(rng, {T, 8}, "x");
    std::vector<int> y(static_cast<std::size_t>(rng.uniform_int(1, 6)));
    std::vector<int> y2(static_cast<std::size_t>(rng.uniform_int(1, 6)));
    for (auto& l : y) l = rng.uniform_int(0, 9);
    for (auto& l : y2) l = rng.uniform_int(0, 9);

    int expected = T;
    for (int s : strides) expected = (expected + s - 1) / s;

    const Tensor g1 = m.grid(x, y);
    const Tensor g2 = m.grid(x, y2);
    ASSERT_EQ(g1.dim(0), expected) << "case " << case_i;
    ASSERT_EQ(g2.dim(0), expected) << "case " << case_i;
  }
}

// ---------------------------------------------------------------------------
// Trained-model comparisons
// ---------------------------------------------------------------------------

TEST_F(Acceptance, OracleTeacherBeatsConventional) {
  Criterion("teacher-quality");
  const TrainedEnv& env = trained_env();
  std::printf("[env] oracle teacher cer: %s\n", fmt_list(env.oracle_cer).c_str());
  std::printf("[env] conventional   cer: %s\n", fmt_list(env.conv_cer).c_str());
  for (int s = 0; s < kSeedRuns; ++s) {
    EXPECT_LT(env.oracle_cer[static_cast<std::size_t>(s)],
              env.conv_cer[static_cast<std::size_t>(s)])
        << "seed run " << s + 1;
  }
}

TEST_F(Acceptance, DistilledStudentBeatsBaseline) {
  Criterion("distillation-benefit");
  const TrainedEnv& env = trained_env();
  const double base = mean(env.baseline_cer);
  const double okd = mean(env.oracle_kd_cer);
  const double wkd = mean(env.wo_target_kd_cer);
  std::printf("[env] baseline      cer: %s (mean %.6f)\n", fmt_list(env.baseline_cer).c_str(),
              base);
  std::printf("[env] distilled     cer: %s (mean %.6f)\n", fmt_list(env.oracle_kd_cer).c_str(),
              okd);
  std::printf("[env] wo-target kd  cer: %s (mean %.6f)\n", fmt_list(env.wo_target_kd_cer).c_str(),
              wkd);

  EXPECT_LT(okd, 0.9 * base) << "needs at least a 10% relative improvement";
  EXPECT_LE(okd, wkd);
  EXPECT_LE(wkd, base);
}

// ---------------------------------------------------------------------------
// Input-reliance guards on the oracle family
// ---------------------------------------------------------------------------

double plain_spearman(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) rank[idx[i]] = static_cast<double>(i);
  const double n = static_cast<double>(v.size());
  const double m = (n - 1) / 2.0;
  double num = 0, dt = 0, dr = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t = static_cast<double>(i) - m;
    num += t * (rank[i] - m);
    dt += t * t;
    dr += (rank[i] - m) * (rank[i] - m);
  }
  return num / std::sqrt(dt * dr);
}

TEST_F(Acceptance, TeacherUsesBothInputs) {
  Criterion("input-reliance-guards");
  const TrainedEnv& env = trained_env();
  Vocab vocab(10);

  // (a) With the source zeroed, the decoder can only transcribe the target
  // in order, so the attention read position must sweep the keys
  // monotonically across the frames that emit labels.
  double spearman_sum = 0.0;
  int spearman_n = 0, pairs = 0, good_pairs = 0;
  for (int i = 0; i < 20; ++i) {
    const Sample& s = env.eval[static_cast<std::size_t>(i)];
    TeacherOutput out = env.wo_source.teacher->forward(s.features, s.labels);
    const auto path = argmax_path(out.grid);
    const auto wk_all = weighted_key_positions(out.attn);
    std::vector<double> wk;
    for (std::size_t t = 0; t < path.size(); ++t) {
      if (!vocab.is_blank(path[t])) wk.push_back(wk_all[t]);
    }
    if (wk.size() >= 3) {
      spearman_sum += plain_spearman(wk);
      ++spearman_n;
    }
    for (std::size_t j = 1; j < wk.size(); ++j) {
      ++pairs;
      if (wk[j] >= wk[j - 1] - 0.5) ++good_pairs;
    }
  }
  const double mean_spearman = spearman_sum / static_cast<double>(spearman_n);
  const double pair_frac = static_cast<double>(good_pairs) / static_cast<double>(pairs);
  std::printf("[env] wo-source teacher cer %.6f, attention sweep: mean spearman %.3f over %d, "
              "nondecreasing pairs %.3f\n",
              env.wo_source_cer, mean_spearman, spearman_n, pair_frac);
  EXPECT_GE(mean_spearman, 0.7);
  EXPECT_GE(pair_frac, 0.8);

  // (b) The full teacher must still read the source: swapping in another
  // utterance's features at fixed target has to move the decoded alignment.
  // Fixed durations make every grid the same length so paths compare 1:1.
  TaskSpec probe;
  probe.min_duration = 5;
  probe.max_duration = 5;
  probe.min_len = 4;
  probe.max_len = 4;
  probe.train_count = 50;
  probe.eval_count = 0;
  probe.seed = 4242;
  const auto fixed = generate_dataset(probe);
  int changed = 0;
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    const Sample& own = fixed[i];
    const Sample& other = fixed[(i + 1) % fixed.size()];
    const auto p_own = argmax_path(env.oracle[0].grid(own.features, own.labels));
    const auto p_sub = argmax_path(env.oracle[0].grid(other.features, own.labels));
    ASSERT_EQ(p_own.size(), p_sub.size());
    if (p_own != p_sub) ++changed;
  }
  std::printf("[env] source substitution changed %d/50 alignments\n", changed);
  EXPECT_GE(changed, 25);

  // (c) Hidden states built without looking at the source carry no
  // sample-specific information, so distilling from that teacher should not
  // beat the baseline. Individual seeds scatter a few edits either way (the
  // targets still encode an average label-timing prior), so the comparison is
  // mean against mean and only a clear win fails the gate.
  const double ws_kd_mean = mean(env.wo_source_kd_cer);
  const double base_mean = mean(env.baseline_cer);
  std::printf("[env] wo-source distilled cer %s mean %.6f vs baseline mean %.6f\n",
              fmt_list(env.wo_source_kd_cer).c_str(), ws_kd_mean, base_mean);
  EXPECT_GE(ws_kd_mean, 0.9 * base_mean);
}

// ---------------------------------------------------------------------------
// Blank dominance
// ---------------------------------------------------------------------------

TEST_F(Acceptance, OracleTeacherEmitsFewerBlanks) {
  Criterion("blank-dominance");
  const TrainedEnv& env = trained_env();
  Vocab vocab(10);
  for (int s = 0; s < kSeedRuns; ++s) {
    double oracle_frac = 0.0, conv_frac = 0.0;
    for (int i = 0; i < 50; ++i) {
      const Sample& sample = env.eval[static_cast<std::size_t>(i)];
      oracle_frac += blank_argmax_fraction(
          env.oracle[static_cast<std::size_t>(s)].grid(sample.features, sample.labels), vocab);
      conv_frac += blank_argmax_fraction(
          env.conv[static_cast<std::size_t>(s)].grid(sample.features, sample.labels), vocab);
    }
    oracle_frac /= 50.0;
    conv_frac /= 50.0;
    std::printf("[env] blank fraction seed %d: oracle %.4f conventional %.4f\n", s + 1,
                oracle_frac, conv_frac);
    EXPECT_LT(oracle_frac, conv_frac) << "seed run " << s + 1;
  }
}

// ---------------------------------------------------------------------------
// Determinism and exact round-trips
// ---------------------------------------------------------------------------

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  return std::string(std::istreambuf_iterator<char>(in), {});
}

TEST_F(Acceptance, DeterministicRunsAndExactRoundTrips) {
  Criterion("determinism-and-roundtrips");

  TaskSpec spec;
  spec.vocab = 5;
  spec.feat_dim = 4;
  spec.min_duration = 3;
  spec.max_duration = 5;
  spec.min_len = 2;
  spec.max_len = 4;
  spec.train_count = 48;
  spec.eval_count = 16;
  spec.seed = 31;

  // Dataset round-trip: same bytes both times, f32-exact values back.
  const auto data = generate_dataset(spec);
  const std::string wire = serialize_dataset(data);
  ASSERT_EQ(wire, serialize_dataset(generate_dataset(spec)));
  const auto back = deserialize_dataset(wire, "roundtrip");
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_EQ(back[i].labels, data[i].labels);
    ASSERT_EQ(back[i].features.shape(), data[i].features.shape());
    for (std::int64_t j = 0; j < data[i].features.size(); ++j) {
      EXPECT_EQ(back[i].features.at(j),
                static_cast<double>(static_cast<float>(data[i].features.at(j))));
    }
  }

  // Two identical end-to-end runs: teacher training, then a distilled
  // student on top. Logs, parameters and checkpoint bytes must all agree.
  TeacherConfig tc;
  tc.vocab = 5;
  tc.feat_dim = 4;
  tc.width = 8;
  tc.heads = 2;
  tc.ffn = 16;
  tc.enc_layers = 1;
  tc.dec_layers = 1;
  tc.kernel = 3;
  tc.conv_channels = {8, 8};
  tc.conv_strides = {1, 2};
  tc.dropout = 0.3;

  StudentConfig sc;
  sc.vocab = 5;
  sc.feat_dim = 4;
  sc.kernel = 3;
  sc.conv_channels = {6, 6};
  sc.conv_strides = {1, 2};

  TrainPlan teach;
  teach.epochs = 3;
  teach.batch = 8;
  teach.lr = 1e-3;
  DistillPlan dp;
  dp.phase1_epochs = 2;
  dp.phase2_epochs = 2;
  dp.seed = 7;

  SplitView split = split_dataset(back, spec.train_count, spec.eval_count);

  auto run_once = [&](const std::string& tag) {
    StreamRng trng(11, "teacher-init");
    AnyModel teacher;
    teacher.kind = ModelKind::Oracle;
    teacher.teacher = std::make_shared<OracleTeacher>(tc, ModelKind::Oracle, trng);
    auto tlog = train_ctc(teacher, split.train, split.eval, teach);

    StreamRng srng(7, "student-init");
    AnyModel student;
    student.kind = ModelKind::Student;
    student.conv = std::make_shared<ConvCtcModel>(sc, ModelKind::Student, srng);
    auto slog = distill_student(student, &teacher, split.train, split.eval, dp);

    const std::string tpath = ::testing::TempDir() + "accept_teacher_" + tag + ".otkd";
    const std::string spath = ::testing::TempDir() + "accept_student_" + tag + ".otkd";
    save_model(tpath, *teacher.teacher);
    save_model(spath, *student.conv);
    return std::tuple{tlog, slog, slurp(tpath), slurp(spath), teacher};
  };

  auto [tlog1, slog1, tbytes1, sbytes1, teacher1] = run_once("a");
  auto [tlog2, slog2, tbytes2, sbytes2, teacher2] = run_once("b");

  ASSERT_EQ(tlog1.size(), tlog2.size());
  for (std::size_t i = 0; i < tlog1.size(); ++i) {
    EXPECT_EQ(tlog1[i].epoch, tlog2[i].epoch);
    EXPECT_EQ(tlog1[i].phase, tlog2[i].phase);
    EXPECT_EQ(tlog1[i].loss, tlog2[i].loss);
    EXPECT_EQ(tlog1[i].cer, tlog2[i].cer);
  }
  ASSERT_EQ(slog1.size(), slog2.size());
  for (std::size_t i = 0; i < slog1.size(); ++i) {
    EXPECT_EQ(slog1[i].loss, slog2[i].loss);
    EXPECT_EQ(slog1[i].cer, slog2[i].cer);
  }
  EXPECT_EQ(tbytes1, tbytes2);
  EXPECT_EQ(sbytes1, sbytes2);

  // Checkpoint round-trip: same architecture back, every value f32-exact.
  const std::string tpath = ::testing::TempDir() + "accept_teacher_a.otkd";
  AnyModel loaded = load_model(tpath);
  ASSERT_EQ(loaded.kind, ModelKind::Oracle);
  ASSERT_NE(loaded.teacher, nullptr);
  EXPECT_EQ(loaded.vocab(), 5);
  EXPECT_EQ(loaded.feat_dim(), 4);
  EXPECT_EQ(loaded.hidden_width(), 8);
  EXPECT_EQ(loaded.downsample(), 2);
  const auto& orig = teacher1.params().all();
  const auto& got = loaded.params().all();
  ASSERT_EQ(orig.size(), got.size());
  for (const auto& [name, t] : orig) {
    const auto it = got.find(name);
    ASSERT_NE(it, got.end()) << name;
    ASSERT_EQ(it->second.shape(), t.shape()) << name;
    for (std::int64_t j = 0; j < t.size(); ++j) {
      EXPECT_EQ(it->second.at(j), static_cast<double>(static_cast<float>(t.at(j)))) << name;
    }
  }
}

}  // namespace
}  // namespace otkd
