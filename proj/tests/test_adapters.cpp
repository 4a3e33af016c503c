#include <gtest/gtest.h>

#include <filesystem>

#include "helpers.hpp"
#include "mjlab/adapters.hpp"

using namespace mjlab;
using mjlab::testing::bitwise_equal;
using mjlab::testing::max_grad_error;
using mjlab::testing::probe_sum;
using mjlab::testing::randn;

namespace {

AdapterVariant variant(AdapterKind k, std::size_t r = 2, double dropout = 0.0) {
  return AdapterVariant{.kind = k, .rank = r, .alpha = 5.0, .dropout = dropout};
}

void perturb(Adapter& a, std::uint64_t seed) {
  if (a.variant().kind == AdapterKind::Propulsion) {
    a.scale_vector() = randn(a.scale_vector().shape(), seed, 0.5, true);
  } else {
    a.lora_b() = randn(a.lora_b().shape(), seed, 0.5, true);
  }
}

ModelConfig small() {
  return ModelConfig{.d_model = 8, .d_ff = 12, .n_layers = 2, .n_heads = 2, .vocab_size = 10, .max_seq_len = 8};
}

}  // namespace

TEST(Adapters, ZeroCoefficientGivesZerosAndNoGradient) {
  Adapter a(variant(AdapterKind::LoRA), {4, 4}, 1);
  perturb(a, 2);
  const Tensor x = randn({3, 4}, 3);
  const Tensor w = randn({3, 4}, 4);
  const Tensor y = a.apply(x, w, 0.0);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  EXPECT_FALSE(y.requires_grad());
  a.lora_a().clear_grad();
  a.lora_b().clear_grad();
  const Tensor other = randn({2}, 5, 1.0, true);
  backward(add(sum(y), sum(other)));
  EXPECT_TRUE(other.has_grad());
  EXPECT_FALSE(a.lora_a().has_grad());
  EXPECT_FALSE(a.lora_b().has_grad());
}

TEST(Adapters, FreshAdaptersContributeExactZero) {
  for (auto k : {AdapterKind::LoRA, AdapterKind::LoRAFA, AdapterKind::Propulsion}) {
    const Adapter a(variant(k), {6, 5}, 7);
    const Tensor x = randn({4, 5}, 8);
    const Tensor fo = randn({4, 6}, 9);
    const Tensor y = a.apply(x, fo, 1.0);
    for (double v : y.data()) EXPECT_EQ(v, 0.0) << to_string(k);
  }
}

TEST(Adapters, RankOneUpdateAlongFirstAxis) {
  // dW = [[1,0],[0,0]] via A = [1,0], B = [1;0], alpha/r = 1
  Adapter a(AdapterVariant{.kind = AdapterKind::LoRA, .rank = 1, .alpha = 1.0, .dropout = 0.0}, {2, 2}, 0);
  a.lora_a() = Tensor::matrix(1, 2, {1, 0});
  a.lora_b() = Tensor::matrix(2, 1, {1, 0});
  const Tensor dw = a.delta_weight();
  EXPECT_EQ(dw.values(), (std::vector<double>{1, 0, 0, 0}));
  const Tensor y = a.apply(Tensor::matrix(1, 2, {1, 0}), Tensor::zeros({1, 2}), 1.0);
  EXPECT_EQ(y.values(), (std::vector<double>{1, 0}));
  const Tensor y2 = a.apply(Tensor::matrix(1, 2, {0, 1}), Tensor::zeros({1, 2}), 1.0);
  EXPECT_EQ(y2.values(), (std::vector<double>{0, 0}));
}

TEST(Adapters, ApplyMatchesExplicitDeltaWeight) {
  Adapter a(variant(AdapterKind::LoRA, 3), {5, 4}, 11);
  perturb(a, 12);
  const Tensor x = randn({6, 4}, 13);
  const Tensor y = a.apply(x, Tensor::zeros({6, 5}), 0.7);
  const Tensor want = scale(matmul_nt(x, a.delta_weight()), 0.7);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
}

TEST(Adapters, PropulsionScalesFrozenOutput) {
  Adapter a(variant(AdapterKind::Propulsion), {3, 4}, 1);
  a.scale_vector() = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  const Tensor fo = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor y = a.apply(randn({2, 4}, 2), fo, 2.0);
  EXPECT_EQ(y.values(), (std::vector<double>{2, -8, 3, 8, -20, 6}));
}

TEST(Adapters, ApplyRowsSkipsZeroRows) {
  Adapter a(variant(AdapterKind::LoRA), {4, 4}, 3);
  perturb(a, 4);
  const Tensor x = randn({3, 4}, 5);
  const Tensor coeff = Tensor::matrix(3, 2, {0.0, 0.3, 0.5, 0.0, 0.0, 1.0});
  const Tensor y = a.apply_rows(x, Tensor::zeros({3, 4}), coeff, 1);
  const Tensor full = a.apply(x, Tensor::zeros({3, 4}), 1.0);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(y.at(0, c), 0.3 * full.at(0, c), 1e-12);
    EXPECT_EQ(y.at(1, c), 0.0);
    EXPECT_NEAR(y.at(2, c), full.at(2, c), 1e-12);
  }
}

TEST(Adapters, TrainableCountsMatchClosedForms) {
  const ModelConfig one{.d_model = 8, .d_ff = 8, .n_layers = 1, .n_heads = 2, .vocab_size = 10, .max_seq_len = 8};
  const std::vector<ProjectionId> four{ProjectionId::q, ProjectionId::k, ProjectionId::v, ProjectionId::o};
  const AdapterBank lora(one, variant(AdapterKind::LoRA, 2), four, 1);
  // enumerate tensors independently: A r x d plus B d x r per adapter
  std::size_t enumerated = 0;
  for (auto& [name, t] : lora.named_tensors()) enumerated += t.numel();
  EXPECT_EQ(enumerated, 128u);
  EXPECT_EQ(count_trainable(lora), 2u * 4 * 8 * 2);

  const AdapterBank fa(one, variant(AdapterKind::LoRAFA, 2), four, 1);
  EXPECT_EQ(count_trainable(fa), 4u * 8 * 2);

  const ModelConfig wide{.d_model = 32, .d_ff = 32, .n_layers = 4, .n_heads = 4, .vocab_size = 10, .max_seq_len = 8};
  const std::vector<ProjectionId> five{ProjectionId::q, ProjectionId::k, ProjectionId::v, ProjectionId::o,
                                       ProjectionId::gate};
  const AdapterBank prop(wide, variant(AdapterKind::Propulsion), five, 1);
  EXPECT_EQ(count_trainable(prop), 640u);
  EXPECT_EQ(count_trainable(AdapterBank{}), 0u);
}

TEST(Adapters, BankCoversExactlyTargets) {
  const AdapterBank bank(small(), variant(AdapterKind::LoRA), {ProjectionId::q, ProjectionId::gate}, 1, {1});
  EXPECT_EQ(bank.size(), 2u);
  EXPECT_TRUE(bank.has(1, ProjectionId::q));
  EXPECT_TRUE(bank.has(1, ProjectionId::gate));
  EXPECT_FALSE(bank.has(0, ProjectionId::q));
  EXPECT_FALSE(bank.has(1, ProjectionId::k));
  EXPECT_EQ(bank.at(1, ProjectionId::gate).shape().d_out, 12u);
}

TEST(Adapters, ZeroInitForwardEqualsFrozenForward) {
  Backbone m(small(), 2);
  m.freeze();
  const auto batch = PackedSequences::pack({{1, 2, 3}, {4, 5, 6, 7}});
  NoGradGuard g;
  const auto base = m.forward(batch, nullptr, true);
  for (auto k : {AdapterKind::LoRA, AdapterKind::LoRAFA, AdapterKind::Propulsion}) {
    const AdapterBank bank(small(), variant(k), std::vector<ProjectionId>(kAllProjections.begin(), kAllProjections.end()), 3);
    PeftHooks hooks(bank);
    const auto out = m.forward(batch, &hooks, true);
    EXPECT_TRUE(bitwise_equal(base.logits.data(), out.logits.data())) << to_string(k);
  }
}

TEST(Adapters, GradientsMatchFiniteDifferences) {
  for (auto k : {AdapterKind::LoRA, AdapterKind::LoRAFA, AdapterKind::Propulsion}) {
    Adapter a(variant(k, 2), {4, 3}, 21);
    perturb(a, 22);
    const Tensor x = randn({5, 3}, 23, 1.0, true);
    const Tensor fo = randn({5, 4}, 24, 1.0, true);
    auto params = a.trainable();
    params.push_back(k == AdapterKind::Propulsion ? fo : x);
    const double err = max_grad_error([&] { return probe_sum(a.apply(x, fo, 0.8)); }, params);
    EXPECT_LT(err, 1e-6) << to_string(k);
  }
}

TEST(Adapters, LoraFaKeepsAFrozen) {
  const Adapter a(variant(AdapterKind::LoRAFA), {4, 4}, 1);
  EXPECT_EQ(a.trainable().size(), 1u);
  EXPECT_EQ(a.trainable()[0].shape(), Shape({4, 2}));
  EXPECT_EQ(a.trainable_count(), 8u);
}

TEST(Adapters, DropoutOnlyInTrainingAndDeterministic) {
  Adapter a(variant(AdapterKind::LoRA, 2, 0.5), {4, 4}, 1);
  perturb(a, 2);
  const Tensor x = randn({8, 4}, 3);
  const Tensor fo = Tensor::zeros({8, 4});
  const Tensor eval = a.apply(x, fo, 1.0);
  const Tensor clean = a.apply(x, fo, 1.0, DropoutContext{false, 5});
  EXPECT_TRUE(bitwise_equal(eval.data(), clean.data()));
  const Tensor t1 = a.apply(x, fo, 1.0, DropoutContext{true, 5}, 3);
  const Tensor t2 = a.apply(x, fo, 1.0, DropoutContext{true, 5}, 3);
  const Tensor t3 = a.apply(x, fo, 1.0, DropoutContext{true, 6}, 3);
  EXPECT_TRUE(bitwise_equal(t1.data(), t2.data()));
  EXPECT_FALSE(bitwise_equal(t1.data(), t3.data()));
  EXPECT_FALSE(bitwise_equal(t1.data(), eval.data()));
}

TEST(Adapters, VariantValidation) {
  EXPECT_THROW((AdapterVariant{.kind = AdapterKind::LoRA, .rank = 0}.validate()), std::invalid_argument);
  EXPECT_THROW((AdapterVariant{.kind = AdapterKind::LoRA, .alpha = 0.0}.validate()), std::invalid_argument);
  EXPECT_THROW((AdapterVariant{.kind = AdapterKind::LoRA, .dropout = 1.0}.validate()), std::invalid_argument);
  EXPECT_EQ(adapter_kind_from_string("lora_fa"), AdapterKind::LoRAFA);
}

TEST(Adapters, ShapeMismatchThrows) {
  const Adapter a(variant(AdapterKind::LoRA), {4, 4}, 1);
  EXPECT_THROW(a.apply(randn({2, 3}, 1), Tensor::zeros({2, 4}), 1.0), ShapeError);
}

TEST(Adapters, BankSaveLoadRoundTrip) {
  AdapterBank bank(small(), variant(AdapterKind::LoRA), {ProjectionId::q, ProjectionId::v}, 5);
  for (std::size_t l = 0; l < 2; ++l)
    for (auto p : {ProjectionId::q, ProjectionId::v}) perturb(bank.at(l, p), 10 * l + ordinal(p));
  const auto dir = std::filesystem::temp_directory_path() / "mjlab_bank_rt";
  std::filesystem::remove_all(dir);
  bank.save(dir);
  AdapterBank other(small(), variant(AdapterKind::LoRA), {ProjectionId::q, ProjectionId::v}, 6);
  other.load_tensors(dir);
  const auto a = bank.named_tensors(), b = other.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i].second.data(), b[i].second.data()));
  std::filesystem::remove_all(dir);
}
