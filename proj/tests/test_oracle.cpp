#include <gtest/gtest.h>

#include "helpers.hpp"
#include "mjlab/linalg.hpp"
#include "mjlab/oracle.hpp"

using namespace mjlab;
using namespace mjlab::oracle;
using mjlab::testing::randn;

TEST(Oracle, CancellingExample) {
  const RankInstance inst = cancelling_example();
  ASSERT_EQ(inst.adapters.size(), 2u);
  EXPECT_EQ(inst.adapters[0].values(), (std::vector<double>{1, 0, 0, 0}));
  EXPECT_EQ(inst.adapters[1].values(), (std::vector<double>{0, 0, -1, 0}));
  const auto r = rank_compare(inst);
  EXPECT_EQ(r.rank_mj, 2u);
  EXPECT_EQ(r.rank_peft, 1u);
  EXPECT_EQ(r.dim_c_all, 2u);
  EXPECT_TRUE(r.hypothesis_holds);
}

TEST(Oracle, SingleExpertRanksAgree) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    RankInstance inst;
    const Tensor b = randn({5, 2}, 100 + s), a = randn({2, 5}, 200 + s);
    inst.adapters = {matmul(b, a)};
    inst.inputs = randn({5, 4}, 300 + s);
    inst.assignment.assign(4, 0);
    const auto r = rank_compare(inst);
    EXPECT_EQ(r.rank_mj, r.rank_peft);
    EXPECT_EQ(r.rank_mj, 2u);
  }
}

TEST(Oracle, FailedHypothesisIsReported) {
  RankInstance inst = cancelling_example();
  inst.assignment = {0, 0};  // expert 1 sees no tokens
  EXPECT_FALSE(rank_compare(inst).hypothesis_holds);
}

TEST(Oracle, ExpressivitySuiteHasNoViolations) {
  const auto r = expressivity_suite(100, 7);
  EXPECT_EQ(r.instances, 100u);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_GE(r.strict, 1u);
}

TEST(Oracle, SoftTopOneOnCancellingInstance) {
  RankInstance inst = cancelling_example();
  inst.coeff = Tensor::matrix(2, 2, {0.7, 0.0, 0.0, 0.6});
  const auto b = soft_rank_bound(inst);
  EXPECT_LE(b.rank_mj, 2u);
  EXPECT_EQ(b.rank_mj, 2u);
  EXPECT_EQ(b.bound, 2u);
  EXPECT_TRUE(b.holds);
}

TEST(Oracle, UniformSoftIsProportionalToPeft) {
  RankInstance inst;
  for (std::uint64_t e = 0; e < 3; ++e) inst.adapters.push_back(matmul(randn({6, 1}, 10 + e), randn({1, 6}, 20 + e)));
  inst.inputs = randn({6, 5}, 30);
  inst.coeff = Tensor::full({5, 3}, 1.0 / 3);
  const auto b = soft_rank_bound(inst);
  const Tensor sum_w = add(add(inst.adapters[0], inst.adapters[1]), inst.adapters[2]);
  EXPECT_EQ(b.rank_mj, linalg::numeric_rank(matmul(sum_w, inst.inputs)));
  EXPECT_TRUE(b.holds);
}

TEST(Oracle, SoftSuiteHasNoViolations) {
  const auto r = soft_bound_suite(100, 11);
  EXPECT_EQ(r.instances, 100u);
  EXPECT_EQ(r.violations, 0u);
}

TEST(Oracle, ComplexityExamples) {
  const auto lora = complexity_table(AdapterKind::LoRA, Family::Base, 5, 1, 32, 2);
  EXPECT_EQ(lora.trainable, 640u);
  EXPECT_EQ(lora.router_params, 0u);
  EXPECT_TRUE(lora.matches());
  const auto mj = complexity_table(AdapterKind::LoRA, Family::MonkeyJump, 5, 1, 32, 2);
  EXPECT_EQ(mj.trainable, 640u);
  EXPECT_EQ(mj.router_params, 0u);
  EXPECT_TRUE(mj.matches());
  EXPECT_EQ(mj.method, "MJ-LoRA");
  const auto moe = complexity_table(AdapterKind::LoRA, Family::MoE, 5, 4, 32, 2);
  EXPECT_EQ(moe.trainable, 2560u);
  EXPECT_EQ(moe.router_params, 128u);
  EXPECT_TRUE(moe.matches());
  EXPECT_THROW(complexity_table(AdapterKind::LoRA, Family::Base, 8, 1, 8, 2), std::invalid_argument);
}

TEST(Oracle, ComplexityGridFormulaEqualsEnumeration) {
  for (auto kind : {AdapterKind::LoRA, AdapterKind::LoRAFA, AdapterKind::Propulsion})
    for (auto fam : {Family::Base, Family::MoE, Family::MonkeyJump})
      for (std::size_t e = 1; e <= 7; ++e)
        for (std::size_t r = 1; r <= 4; ++r)
          for (std::size_t d : {8u, 32u}) {
            const auto row = complexity_table(kind, fam, e, 4, d, r);
            EXPECT_TRUE(row.matches()) << row.method << " E=" << e << " r=" << r << " d=" << d;
          }
}

TEST(Oracle, ReportsPass) {
  EXPECT_TRUE(rank_report(30, 1)["pass"].get<bool>());
  EXPECT_TRUE(soft_report(30, 1)["pass"].get<bool>());
  EXPECT_TRUE(params_report()["pass"].get<bool>());
}
