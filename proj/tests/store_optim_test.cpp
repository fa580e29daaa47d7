#include <cmath>
#include <cstdio>
#include <string>

#include <gtest/gtest.h>

#include "otkd/optim.hpp"
#include "otkd/store.hpp"
#include "otkd/tensor.hpp"

using namespace otkd;

namespace {

std::string temp_path(const std::string& stem) {
  return ::testing::TempDir() + stem;
}

}  // namespace

TEST(ParameterStoreTest, CreateGetAndDuplicateRejection) {
  StreamRng rng(1, "params");
  ParameterStore store;
  Tensor& w = store.create("enc.w", {3, 3}, rng, 0.1);
  EXPECT_TRUE(w.requires_grad());
  EXPECT_EQ(w.name(), "enc.w");
  EXPECT_TRUE(store.has("enc.w"));
  EXPECT_THROW(store.create("enc.w", {2}, rng, 0.1), UsageError);
  EXPECT_THROW(store.get("missing"), UsageError);
  store.create_zeros("enc.b", {3});
  EXPECT_EQ(store.size(), 2u);
  EXPECT_EQ(store.total_elements(), 12);
}

TEST(ParameterStoreTest, FreezeClearsRequiresGrad) {
  StreamRng rng(2, "params");
  ParameterStore store;
  store.create("w", {2}, rng, 1.0);
  store.set_trainable(false);
  EXPECT_FALSE(store.get("w").requires_grad());
  store.set_trainable(true);
  EXPECT_TRUE(store.get("w").requires_grad());
}

TEST(CheckpointTest, RoundTripPreservesShapesAndF32Values) {
  StreamRng rng(3, "ckpt");
  std::map<std::string, Tensor> tensors;
  tensors.emplace("a.weight", Tensor::randn({4, 5}, rng, 2.0));
  tensors.emplace("b.bias", Tensor::randn({7}, rng, 0.01));
  tensors.emplace("meta", Tensor({1}, {42.0}));
  const std::string path = temp_path("roundtrip.otkd");
  save_checkpoint(path, tensors);
  auto loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.size(), 3u);
  for (const auto& [name, orig] : tensors) {
    ASSERT_TRUE(loaded.count(name)) << name;
    const Tensor& got = loaded.at(name);
    ASSERT_EQ(got.shape(), orig.shape()) << name;
    for (std::int64_t i = 0; i < orig.size(); ++i) {
      const double rel_tol = std::abs(orig.at(i)) * 0x1.0p-23 + 1e-300;
      EXPECT_NEAR(got.at(i), orig.at(i), rel_tol) << name << " element " << i;
    }
  }
}

TEST(CheckpointTest, SavingIsByteDeterministic) {
  StreamRng rng(4, "ckpt");
  std::map<std::string, Tensor> tensors;
  tensors.emplace("w", Tensor::randn({8, 8}, rng));
  const std::string b1 = serialize_checkpoint(tensors);
  const std::string b2 = serialize_checkpoint(tensors);
  EXPECT_EQ(b1, b2);
}

TEST(CheckpointTest, RejectsBadMagicVersionAndTruncation) {
  std::map<std::string, Tensor> tensors;
  tensors.emplace("w", Tensor({2}, {1.0, 2.0}));
  std::string buf = serialize_checkpoint(tensors);

  std::string bad_magic = buf;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic, "t"), BadMagicError);

  std::string bad_version = buf;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version, "t"), BadVersionError);

  std::string truncated = buf.substr(0, buf.size() - 3);
  EXPECT_THROW(deserialize_checkpoint(truncated, "t"), TruncatedError);

  std::string trailing = buf + "xx";
  EXPECT_THROW(deserialize_checkpoint(trailing, "t"), IoError);

  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.otkd")), IoError);
}

TEST(CheckpointTest, RestoreChecksNamesAndShapes) {
  StreamRng rng(5, "ckpt");
  ParameterStore store;
  store.create("w", {2, 2}, rng, 1.0);
  std::map<std::string, Tensor> good;
  good.emplace("w", Tensor({2, 2}, {1, 2, 3, 4}));
  restore_parameters(store, good);
  EXPECT_EQ(store.get("w").data(), (std::vector<double>{1, 2, 3, 4}));

  std::map<std::string, Tensor> missing;
  EXPECT_THROW(restore_parameters(store, missing), CompatError);

  std::map<std::string, Tensor> wrong_shape;
  wrong_shape.emplace("w", Tensor({4}, {1, 2, 3, 4}));
  EXPECT_THROW(restore_parameters(store, wrong_shape), CompatError);

  std::map<std::string, Tensor> extra = good;
  extra.emplace("stranger", Tensor::scalar(0.0));
  restore_parameters(store, extra, /*strict=*/false);
  EXPECT_THROW(restore_parameters(store, extra, /*strict=*/true), CompatError);
}

TEST(SgdTest, TwoStepsOnSquareLoss) {
  // p=1, loss p^2, lr 0.1: after two steps p = 0.64
  ParameterStore store;
  Tensor& p = store.create_full("p", {1}, 1.0);
  Sgd opt(store, 0.1);
  for (int i = 0; i < 2; ++i) {
    GradTable g = backward(mul(p, p));
    opt.step(g);
  }
  EXPECT_NEAR(p.item(), 0.64, 1e-12);
}

TEST(SgdTest, MomentumAccumulatesVelocity) {
  ParameterStore store;
  Tensor& p = store.create_full("p", {1}, 1.0);
  Sgd opt(store, 0.1, 0.9);
  opt.step(backward(mul(p, p)));       // v=2,   p=0.8
  opt.step(backward(mul(p, p)));       // v=3.4, p=0.46
  EXPECT_NEAR(p.item(), 0.46, 1e-12);
}

TEST(SgdTest, MissingGradientLeavesParameterAlone) {
  ParameterStore store;
  Tensor& a = store.create_full("a", {1}, 1.0);
  Tensor& b = store.create_full("b", {1}, 5.0);
  Sgd opt(store, 0.1);
  opt.step(backward(mul(a, a)));
  EXPECT_NEAR(a.item(), 0.8, 1e-12);
  EXPECT_DOUBLE_EQ(b.item(), 5.0);
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  // with bias correction the first Adam step is lr * g/|g| up to eps
  ParameterStore store;
  Tensor& p = store.create_full("p", {1}, 1.0);
  Adam opt(store, 0.01);
  opt.step(backward(mul(p, p)));
  EXPECT_NEAR(p.item(), 1.0 - 0.01, 1e-6);
}

TEST(AdamTest, ConvergesOnQuadraticBowl) {
  StreamRng rng(6, "adam");
  ParameterStore store;
  Tensor& p = store.create("p", {4}, rng, 1.0);
  Adam opt(store, 0.05);
  double first_loss = 0.0, last_loss = 0.0;
  for (int i = 0; i < 200; ++i) {
    Tensor loss = sum(mul(p, p));
    if (i == 0) first_loss = loss.item();
    last_loss = loss.item();
    opt.step(backward(loss));
  }
  EXPECT_LT(last_loss, first_loss * 1e-3);
}

TEST(ClipTest, RescalesOnlyWhenAboveThreshold) {
  std::map<std::string, Tensor> grads;
  grads.emplace("g", Tensor({2}, {3.0, 4.0}));  // norm 5
  double norm = clip_grad_norm(grads, 10.0);
  EXPECT_DOUBLE_EQ(norm, 5.0);
  EXPECT_EQ(grads.at("g").data(), (std::vector<double>{3.0, 4.0}));
  norm = clip_grad_norm(grads, 1.0);
  EXPECT_DOUBLE_EQ(norm, 5.0);
  EXPECT_NEAR(grads.at("g").at(0), 0.6, 1e-12);
  EXPECT_NEAR(grads.at("g").at(1), 0.8, 1e-12);
}
