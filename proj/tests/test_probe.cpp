#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "mjlab/probe.hpp"

using namespace mjlab;
using mjlab::testing::bitwise_equal;
using mjlab::testing::randn;

namespace {

ModelConfig cfg() {
  return ModelConfig{.d_model = 8, .d_ff = 16, .n_layers = 2, .n_heads = 2, .vocab_size = 64, .max_seq_len = 48};
}

}  // namespace

TEST(Probe, SelectorNamesRoundTrip) {
  for (const char* s : {"abs:3", "end:8", "mean", "max", "last"})
    EXPECT_EQ(PositionSelector::parse(s).name(), s);
  EXPECT_THROW(PositionSelector::parse("middle"), std::invalid_argument);
}

TEST(Probe, LadderForLength32) {
  std::vector<std::string> names;
  for (const auto& s : position_ladder(32)) names.push_back(s.name());
  EXPECT_EQ(names, (std::vector<std::string>{"abs:0", "end:24", "end:16", "end:8", "last", "mean", "max"}));
}

TEST(Probe, FeaturesPickTheRightRows) {
  Backbone m(cfg(), 1);
  m.freeze();
  const auto data = generate({majority_task(20)}, 6, 2);
  const std::vector<PositionSelector> sel{PositionSelector::parse("abs:2"), PositionSelector::parse("end:1"),
                                          PositionSelector::parse("last"), PositionSelector::parse("mean"),
                                          PositionSelector::parse("max")};
  const auto feats = probe_features(m, data, 1, sel);
  NoGradGuard g;
  const auto fw = m.forward(PackedSequences::pack({data[3].tokens}));
  const Tensor& h = fw.hidden[1];
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_NEAR(feats[0].at(3, j), h.at(2, j), 1e-12);
    EXPECT_NEAR(feats[1].at(3, j), h.at(18, j), 1e-12);
    EXPECT_NEAR(feats[2].at(3, j), h.at(19, j), 1e-12);
    double mean = 0, mx = -1e300;
    for (std::size_t t = 0; t < 20; ++t) {
      mean += h.at(t, j) / 20;
      mx = std::max(mx, h.at(t, j));
    }
    EXPECT_NEAR(feats[3].at(3, j), mean, 1e-12);
    EXPECT_NEAR(feats[4].at(3, j), mx, 1e-12);
  }
  EXPECT_THROW(probe_features(m, data, 1, {PositionSelector::parse("abs:20")}), std::out_of_range);
}

TEST(Probe, RandomLabelsStayNearChance) {
  Backbone m(cfg(), 3);
  m.freeze();
  auto data = generate({majority_task(24)}, 600, 4);
  Rng rng(5);
  for (auto& ex : data) ex.label = static_cast<int>(rng.index(3));
  ProbeSpec spec;
  spec.layer = 2;
  spec.seed = 1;
  const auto r = run_probe(spec, m, data);
  EXPECT_NEAR(r.val_acc, 1.0 / 3, 0.10);
}

TEST(Probe, SeparableFeaturesAreLearned) {
  const Tensor x = randn({200, 4}, 6);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) y[i] = x.at(i, 0) + 0.5 * x.at(i, 2) > 0 ? 1 : 0;
  const auto r = fit_linear_probe(x, y, x, y, 2, 100, 0.5, 1);
  EXPECT_GT(r.train_acc, 0.95);
  EXPECT_THROW(fit_linear_probe(Tensor::zeros({0, 4}), {}, x, y, 2, 10, 0.5, 1), std::invalid_argument);
}

TEST(Probe, BackboneUntouchedAndDeterministic) {
  Backbone m(cfg(), 7);
  m.freeze();
  const Backbone before = m.clone();
  const auto data = generate(default_tasks(), 30, 8);
  ProbeSpec spec;
  spec.layer = 1;
  spec.selector = PositionSelector::parse("mean");
  spec.seed = 3;
  const auto a = run_probe(spec, m, data);
  const auto b = run_probe(spec, m, data);
  EXPECT_EQ(a.train_acc, b.train_acc);
  EXPECT_EQ(a.val_acc, b.val_acc);
  const auto p = m.parameters(), q = before.parameters();
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_TRUE(bitwise_equal(p[i].data(), q[i].data()));
}

TEST(Probe, EmptySplitErrors) {
  Backbone m(cfg(), 1);
  m.freeze();
  const auto data = generate({majority_task(20)}, 3, 1);
  ProbeSpec spec;
  spec.val_fraction = 0.0;
  EXPECT_THROW(run_probe(spec, m, data), std::invalid_argument);
}

TEST(Probe, SweepMatchesSingleRunsAndWritesCsv) {
  Backbone m(cfg(), 9);
  m.freeze();
  const auto data = generate({majority_task(16)}, 60, 10);
  const auto ladder = position_ladder(16);
  const auto rows = probe_sweep(m, data, {0, 2}, ladder, {0, 1}, 20);
  EXPECT_EQ(rows.size(), 2u * ladder.size() * 2);
  ProbeSpec spec;
  spec.layer = 2;
  spec.selector = ladder[4];
  spec.seed = 1;
  spec.epochs = 20;
  const auto single = run_probe(spec, m, data);
  bool found = false;
  for (const auto& r : rows)
    if (r.layer == 2 && r.selector == ladder[4].name() && r.seed == 1) {
      found = true;
      EXPECT_EQ(r.result.val_acc, single.val_acc);
    }
  EXPECT_TRUE(found);
  const auto path = std::filesystem::temp_directory_path() / "mjlab_probe.csv";
  write_probe_csv(rows, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "layer,selector,seed,train_acc,val_acc");
  std::filesystem::remove(path);
}
