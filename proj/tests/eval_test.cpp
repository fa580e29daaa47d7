#include "otkd/eval.hpp"

#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "otkd/random.hpp"
#include "testing_util.hpp"

using namespace otkd;

namespace {

// grid whose greedy decode follows the given class path exactly
Tensor grid_for_path(const std::vector<int>& path, int classes) {
  std::vector<double> g(path.size() * static_cast<std::size_t>(classes), -50.0);
  for (std::size_t t = 0; t < path.size(); ++t) {
    g[t * static_cast<std::size_t>(classes) + static_cast<std::size_t>(path[t])] = -0.001;
  }
  return Tensor({static_cast<int>(path.size()), classes}, std::move(g));
}

std::vector<Sample> toy_samples(const TaskSpec& spec, int n) {
  auto protos = make_prototypes(spec);
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(gen_sample(spec, protos, static_cast<std::uint32_t>(i)));
  return out;
}

}  // namespace

TEST(EditDistanceTest, KnownValues) {
  EXPECT_EQ(edit_distance({}, {}), 0);
  EXPECT_EQ(edit_distance({1, 2, 3}, {1, 2, 3}), 0);
  EXPECT_EQ(edit_distance({}, {4, 5}), 2);
  EXPECT_EQ(edit_distance({4, 5}, {}), 2);
  // "kitten" vs "sitting" over character codes
  const std::vector<int> kitten{'k', 'i', 't', 't', 'e', 'n'};
  const std::vector<int> sitting{'s', 'i', 't', 't', 'i', 'n', 'g'};
  EXPECT_EQ(edit_distance(kitten, sitting), 3);
}

TEST(EditDistanceTest, AgreesWithReferenceAndIsAMetric) {
  StreamRng rng(401, "edit-metric");
  std::vector<std::vector<int>> seqs;
  for (int i = 0; i < 40; ++i) {
    std::vector<int> s(static_cast<std::size_t>(rng.uniform_int(0, 6)));
    for (auto& v : s) v = rng.uniform_int(0, 2);
    seqs.push_back(std::move(s));
  }
  for (const auto& a : seqs) {
    for (const auto& b : seqs) {
      const int d = edit_distance(a, b);
      EXPECT_EQ(d, otkd::testing::reference_edit_distance(a, b));
      EXPECT_EQ(d, edit_distance(b, a));
      EXPECT_EQ(d == 0, a == b);
      for (const auto& c : seqs) {
        EXPECT_LE(edit_distance(a, c), d + edit_distance(b, c));
      }
    }
  }
}

TEST(EvaluateTest, PerfectGridsScoreZeroCer) {
  TaskSpec spec;
  spec.vocab = 3;
  spec.feat_dim = 4;
  spec.train_count = 4;
  spec.eval_count = 0;
  spec.seed = 11;
  auto samples = toy_samples(spec, 4);
  Vocab vocab(3);
  // emit each sample's labels one frame per label with blanks between repeats
  auto perfect = [&](const Sample& s) {
    std::vector<int> path;
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      if (i > 0 && s.labels[i] == s.labels[i - 1]) path.push_back(vocab.blank());
      path.push_back(vocab.class_of(s.labels[i]));
    }
    return grid_for_path(path, vocab.num_classes());
  };
  EvalReport rep = evaluate_grids(samples, perfect, vocab);
  EXPECT_EQ(rep.count, 4);
  EXPECT_DOUBLE_EQ(rep.cer, 0.0);
  EXPECT_DOUBLE_EQ(rep.accuracy, 1.0);
  EXPECT_EQ(rep.total_edits, 0);
}

TEST(EvaluateTest, AllBlankGridsScoreFullDeletionCer) {
  TaskSpec spec;
  spec.vocab = 3;
  spec.feat_dim = 4;
  spec.seed = 13;
  auto samples = toy_samples(spec, 5);
  Vocab vocab(3);
  auto all_blank = [&](const Sample& s) {
    return grid_for_path(std::vector<int>(4, vocab.blank()), vocab.num_classes());
  };
  EvalReport rep = evaluate_grids(samples, all_blank, vocab);
  EXPECT_DOUBLE_EQ(rep.cer, 1.0);
  EXPECT_DOUBLE_EQ(rep.accuracy, 0.0);
  EXPECT_EQ(rep.total_edits, rep.total_ref_len);
}

TEST(EvaluateTest, ThreadCountDoesNotChangeTheReport) {
  TaskSpec spec;
  spec.vocab = 4;
  spec.feat_dim = 5;
  spec.seed = 17;
  auto samples = toy_samples(spec, 9);
  Vocab vocab(4);
  StreamRng rng(19, "grids");
  // arbitrary but deterministic grids keyed by sample id
  auto grids = [&](const Sample& s) {
    StreamRng g(7, "grid", s.id);
    std::vector<double> v(static_cast<std::size_t>(6 * vocab.num_classes()));
    for (auto& x : v) x = g.normal();
    return log_softmax(Tensor({6, vocab.num_classes()}, std::move(v)));
  };
  EvalReport one = evaluate_grids(samples, grids, vocab, 1);
  EvalReport four = evaluate_grids(samples, grids, vocab, 4);
  EXPECT_EQ(one.total_edits, four.total_edits);
  EXPECT_EQ(one.per_sample_cer, four.per_sample_cer);
  EXPECT_DOUBLE_EQ(one.cer, four.cer);
  EXPECT_DOUBLE_EQ(one.accuracy, four.accuracy);
}

TEST(EvaluateTest, ModelDatasetMismatchesAreRejected) {
  StreamRng rng(421, "mismatch");
  StudentConfig cfg;
  cfg.vocab = 3;
  cfg.feat_dim = 4;
  cfg.kernel = 3;
  cfg.conv_channels = {6, 6};
  cfg.conv_strides = {1, 2};
  AnyModel model;
  model.kind = ModelKind::Student;
  model.conv = std::make_shared<ConvCtcModel>(cfg, ModelKind::Student, rng);

  Sample bad_width;
  bad_width.id = 0;
  bad_width.labels = {0};
  bad_width.features = Tensor::randn({8, 5}, rng);
  EXPECT_THROW(evaluate(model, {bad_width}), CompatError);

  Sample bad_label;
  bad_label.id = 1;
  bad_label.labels = {3};
  bad_label.features = Tensor::randn({8, 4}, rng);
  EXPECT_THROW(evaluate(model, {bad_label}), CompatError);

  Sample good;
  good.id = 2;
  good.labels = {0, 2};
  good.features = Tensor::randn({12, 4}, rng);
  EXPECT_NO_THROW(evaluate(model, {good}));
}

TEST(HeatmapTest, HeaderRowsAndSixDecimals) {
  Vocab vocab(1);
  Tensor grid({2, 2}, {std::log(0.25), std::log(0.75), std::log(0.5), std::log(0.5)});
  const std::string csv = render_posterior_heatmap(grid, vocab);
  EXPECT_EQ(csv, "frame,class_0,blank\n0,0.250000,0.750000\n1,0.500000,0.500000\n");
  int lines = 0;
  for (char c : csv) lines += c == '\n' ? 1 : 0;
  EXPECT_EQ(lines, 3);
}

TEST(HeatmapTest, RowsSumToOneAfterRounding) {
  StreamRng rng(431, "heatmap");
  Vocab vocab(6);
  Tensor grid = log_softmax(Tensor::randn({10, 7}, rng));
  const std::string csv = render_posterior_heatmap(grid, vocab);
  std::size_t pos = csv.find('\n') + 1;
  while (pos < csv.size()) {
    const std::size_t end = csv.find('\n', pos);
    const std::string line = csv.substr(pos, end - pos);
    double sum = 0.0;
    std::size_t field = line.find(',') + 1;  // skip the frame index
    while (field != std::string::npos && field < line.size()) {
      sum += std::stod(line.substr(field));
      const std::size_t next = line.find(',', field);
      field = next == std::string::npos ? std::string::npos : next + 1;
    }
    EXPECT_NEAR(sum, 1.0, 1e-5);
    pos = end + 1;
  }
}

TEST(HeatmapTest, BlankColumnTracksTheBlankClassForBothLayouts) {
  // same probabilities, two class layouts: the CSV must be identical
  Vocab last(2, BlankPosition::Last);
  Vocab first(2, BlankPosition::First);
  Tensor grid_last({1, 3}, {std::log(0.2), std::log(0.3), std::log(0.5)});
  Tensor grid_first({1, 3}, {std::log(0.5), std::log(0.2), std::log(0.3)});
  EXPECT_EQ(render_posterior_heatmap(grid_last, last), render_posterior_heatmap(grid_first, first));
}

TEST(AttentionExportTest, PlainMatrixSixDecimals) {
  Tensor attn({2, 3}, {0.1, 0.2, 0.7, 0.5, 0.25, 0.25});
  EXPECT_EQ(render_attention(attn),
            "0.100000,0.200000,0.700000\n0.500000,0.250000,0.250000\n");
}

TEST(DiagonalityTest, WeightedKeyPositionsOnKnownMatrices) {
  Tensor identity({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(weighted_key_positions(identity), (std::vector<double>{0, 1, 2}));
  EXPECT_TRUE(is_monotone_nondecreasing({0, 1, 2}));
  EXPECT_TRUE(is_monotone_nondecreasing({0, 1, 0.999}, 1e-2));
  EXPECT_FALSE(is_monotone_nondecreasing({0, 1, 0.5}));
  Tensor anti({2, 2}, {0, 1, 1, 0});
  EXPECT_FALSE(is_monotone_nondecreasing(weighted_key_positions(anti)));
}

TEST(BlankFractionTest, CountsArgmaxBlanks) {
  Vocab vocab(2);
  Tensor grid({4, 3}, {
      -0.1, -5, -5,   // label 0
      -5, -5, -0.1,   // blank
      -5, -0.1, -5,   // label 1
      -5, -5, -0.1,   // blank
  });
  EXPECT_DOUBLE_EQ(blank_argmax_fraction(grid, vocab), 0.5);
}
