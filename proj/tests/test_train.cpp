#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "helpers.hpp"
#include "mjlab/optim.hpp"
#include "mjlab/rng.hpp"
#include "mjlab/train.hpp"

using namespace mjlab;
using mjlab::testing::bitwise_equal;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.model = ModelConfig{.d_model = 16, .d_ff = 24, .n_layers = 2, .n_heads = 2, .vocab_size = 64, .max_seq_len = 48};
  c.pretrain.steps = 0;
  c.data.n_per_task = 24;
  c.routing.kmeans_samples = 60;
  c.routing.kmeans_iters = 5;
  c.train.epochs = 1;
  c.train.batch_size = 8;
  c.seeds = {0};
  return c;
}

struct Fixture {
  ExperimentConfig cfg;
  SplitData data;
  Backbone backbone;
  explicit Fixture(ExperimentConfig c)
      : cfg(std::move(c)), data(prepare_data(cfg)), backbone(prepare_backbone(cfg, data.train)) {}
};

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> out;
  for (const auto& t : ts) out.push_back(t.values());
  return out;
}

}  // namespace

TEST(Train, ZeroLearningRateKeepsInitAndMatchesHeadOnly) {
  ExperimentConfig cfg = small_config();
  cfg.train.lr = 0.0;
  Fixture f(cfg);
  Learner mj(f.cfg, f.backbone, 0);
  mj.init_centers(f.data.train);
  const auto before = snapshot(mj.trainable());
  const auto res = train_learner(mj, f.cfg, f.data, 0);
  const auto after = snapshot(mj.trainable());
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(bitwise_equal(before[i], after[i]));

  ExperimentConfig head_cfg = f.cfg;
  head_cfg.train.method = Method::Head;
  Learner head(head_cfg, f.backbone, 0);
  const auto head_res = train_learner(head, head_cfg, f.data, 0);
  EXPECT_EQ(res.task_accuracy, head_res.task_accuracy);
}

TEST(Train, GradientAccumulationTakesOneStep) {
  ExperimentConfig cfg = small_config();
  cfg.train.method = Method::Peft;
  cfg.adapter.dropout = 0.0;
  cfg.train.warmup_ratio = 0.0;
  cfg.train.grad_accum = 2;
  cfg.train.batch_size = 4;
  Fixture f(cfg);
  SplitData d = f.data;
  d.train.resize(8);  // two micro-batches, one optimizer step

  Learner a(f.cfg, f.backbone, 3);
  const auto res = train_learner(a, f.cfg, d, 3);
  EXPECT_EQ(res.steps, 1u);

  Learner b(f.cfg, f.backbone, 3);
  std::vector<std::size_t> order(8);
  std::iota(order.begin(), order.end(), 0);
  Rng(derive_seed(3, {5, 0})).shuffle(order);
  AdamW opt(b.trainable(), AdamWOptions{.weight_decay = f.cfg.train.weight_decay});
  for (std::size_t m = 0; m < 2; ++m) {
    const Batch batch = make_batch(d.train, std::span(order).subspan(m * 4, 4));
    backward(scale(b.loss(batch, DropoutContext{}), 0.5));
  }
  opt.step(warmup_cosine_lr(f.cfg.train.lr, 0, 1, 0.0));
  const auto ta = a.trainable(), tb = b.trainable();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i)
    for (std::size_t j = 0; j < ta[i].numel(); ++j) EXPECT_NEAR(ta[i][j], tb[i][j], 1e-12);
}

TEST(Train, DeterministicCheckpoints) {
  Fixture f(small_config());
  const auto root = std::filesystem::temp_directory_path() / "mjlab_det";
  std::filesystem::remove_all(root);
  run_pipeline(f.cfg, f.backbone, f.data, 1, root / "a");
  run_pipeline(f.cfg, f.backbone, f.data, 1, root / "b");
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root / "a" / "checkpoint")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = std::filesystem::relative(e.path(), root / "a");
    std::ifstream x(e.path(), std::ios::binary), y(root / "b" / rel, std::ios::binary);
    const std::string sx(std::istreambuf_iterator<char>(x), {}), sy(std::istreambuf_iterator<char>(y), {});
    EXPECT_EQ(sx, sy) << rel;
  }
  EXPECT_GT(files, 0u);
  for (const char* name : {"metrics.jsonl", "report.json", "usage.csv", "config.json"})
    EXPECT_TRUE(std::filesystem::exists(root / "a" / name)) << name;
  std::filesystem::remove_all(root);
}

TEST(Train, BackboneUntouchedAndCentersOnlyMovedByEma) {
  Fixture f(small_config());
  const auto backbone_before = snapshot(f.backbone.parameters());
  Learner mj(f.cfg, f.backbone, 2);
  mj.init_centers(f.data.train);
  for (auto l : mj.routed_layers()) EXPECT_FALSE(mj.routers()[l]->centers.requires_grad());
  train_learner(mj, f.cfg, f.data, 2);
  EXPECT_EQ(snapshot(f.backbone.parameters()), backbone_before);
  for (auto l : mj.routed_layers()) EXPECT_FALSE(mj.routers()[l]->centers.has_grad());
  // centers are not among the optimizer's tensors
  for (const auto& t : mj.trainable())
    for (auto l : mj.routed_layers()) EXPECT_NE(t.impl(), mj.routers()[l]->centers.impl());
}

TEST(Train, EmaStopsAtConfiguredFraction) {
  ExperimentConfig cfg = small_config();
  cfg.routing.stop_fraction = 0.0;
  Fixture f(cfg);
  Learner mj(f.cfg, f.backbone, 4);
  mj.init_centers(f.data.train);
  std::vector<std::vector<double>> before;
  for (auto l : mj.routed_layers()) before.push_back(mj.routers()[l]->centers.values());
  train_learner(mj, f.cfg, f.data, 4);
  std::size_t i = 0;
  for (auto l : mj.routed_layers()) EXPECT_TRUE(bitwise_equal(mj.routers()[l]->centers.values(), before[i++]));
}

TEST(Train, ParameterParityWithPlainBank) {
  Fixture f(small_config());
  Learner mj(f.cfg, f.backbone, 0);
  ExperimentConfig peft = f.cfg;
  peft.train.method = Method::Peft;
  peft.train.targets = f.cfg.adapter_targets();
  Learner plain(peft, f.backbone, 0);
  EXPECT_EQ(count_trainable(mj.bank()), count_trainable(plain.bank()));
  EXPECT_EQ(mj.trainable_count(), plain.trainable_count());
}

TEST(Train, CheckpointRoundTrip) {
  Fixture f(small_config());
  Learner a(f.cfg, f.backbone, 5);
  a.init_centers(f.data.train);
  train_learner(a, f.cfg, f.data, 5);
  const auto dir = std::filesystem::temp_directory_path() / "mjlab_ckpt";
  std::filesystem::remove_all(dir);
  a.save_checkpoint(dir);
  Learner b(f.cfg, f.backbone, 99);
  b.load_checkpoint(dir);
  const auto na = a.named_tensors(), nb = b.named_tensors();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].first, nb[i].first);
    EXPECT_TRUE(bitwise_equal(na[i].second.data(), nb[i].second.data())) << na[i].first;
  }
  EXPECT_EQ(evaluate(a, f.data.val, 3), evaluate(b, f.data.val, 3));
  std::filesystem::remove_all(dir);
}

TEST(Train, IdentityPermutationMatchesBase) {
  Fixture f(small_config());
  const auto base = ablate(f.cfg, f.backbone, f.data, "permutation", {"none"});
  const auto ident = ablate(f.cfg, f.backbone, f.data, "permutation", {"0+1+2"});
  ASSERT_EQ(base.size(), 1u);
  ASSERT_EQ(ident.size(), 1u);
  EXPECT_EQ(base[0].task_accuracy, ident[0].task_accuracy);
  EXPECT_EQ(base[0].mean_rho, ident[0].mean_rho);
}

TEST(Train, TopKEqualExpertsIsDense) {
  Fixture f(small_config());
  const ExperimentConfig c = apply_ablation(f.cfg, "topk", "3");
  EXPECT_EQ(c.routing.router.top_k, 3u);
  Learner mj(c, f.backbone, 0);
  mj.init_centers(f.data.train);
  NoGradGuard g;
  const std::vector<std::size_t> idx{0, 1, 2};
  mj.predict(make_batch(f.data.val, idx));
  for (const auto& d : mj.last_decisions()) {
    if (!d) continue;
    for (std::size_t i = 0; i < d->m.numel(); ++i) EXPECT_EQ(d->m[i], d->p[i]);
  }
}

TEST(Train, BetaSweepRowCount) {
  ExperimentConfig cfg = small_config();
  cfg.seeds = {0, 1};
  cfg.data.n_per_task = 12;
  Fixture f(cfg);
  const std::vector<std::string> values{"0.2", "0.5", "0.7", "0.9", "0.99"};
  const auto rows = ablate(f.cfg, f.backbone, f.data, "beta", values);
  EXPECT_EQ(rows.size(), values.size() * 2);
  const auto path = std::filesystem::temp_directory_path() / "mjlab_beta.csv";
  write_ablation_csv(rows, "beta", 3, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "axis,value,seed,acc_task0,acc_task1,acc_task2,mean_rho");
  std::size_t lines = 0;
  for (std::string s; std::getline(in, s);) ++lines;
  EXPECT_EQ(lines, 10u);
  std::filesystem::remove(path);
}

TEST(Train, UnknownAxisAndBadValues) {
  const ExperimentConfig c = small_config();
  EXPECT_THROW(apply_ablation(c, "colour", "red"), ConfigError);
  EXPECT_THROW(apply_ablation(c, "beta", "lots"), ConfigError);
  EXPECT_THROW(apply_ablation(c, "topk", "9"), ConfigError);
  EXPECT_EQ(ablation_axes().size(), 12u);
}

TEST(Train, BudgetNotDivisibleAcrossTasks) {
  ExperimentConfig cfg = small_config();
  cfg.adapter.rank = 2;
  cfg.train.partition = Partition::Rank;
  Fixture f(cfg);
  EXPECT_THROW(shared_vs_specific(f.cfg, f.backbone, f.data), ConfigError);
  f.cfg.train.partition = Partition::Layer;
  EXPECT_THROW(shared_vs_specific(f.cfg, f.backbone, f.data), ConfigError);
}

TEST(Train, SharedAndSpecificArmsHaveEqualBudgets) {
  ExperimentConfig cfg = small_config();
  cfg.adapter.rank = 3;
  cfg.train.targets = {ProjectionId::q, ProjectionId::k, ProjectionId::v};
  Fixture f(cfg);
  const auto rows = shared_vs_specific(f.cfg, f.backbone, f.data);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].shared_trainable, rows[0].specific_trainable);
  EXPECT_EQ(rows[0].shared.size(), 3u);
}

TEST(Train, DivergenceNamesStep) {
  ExperimentConfig cfg = small_config();
  cfg.train.method = Method::Peft;
  cfg.train.lr = 1e300;
  cfg.train.warmup_ratio = 0.0;
  cfg.train.epochs = 3;
  Fixture f(cfg);
  Learner l(f.cfg, f.backbone, 0);
  try {
    train_learner(l, f.cfg, f.data, 0);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Train, RunRootIgnoresSeedsAndOutDir) {
  ExperimentConfig a = small_config(), b = small_config();
  b.seeds = {5, 6};
  b.out_dir = a.out_dir;
  EXPECT_EQ(run_root(a), run_root(b));
  b.train.lr = 0.123;
  EXPECT_NE(run_root(a), run_root(b));
}
