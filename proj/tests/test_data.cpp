#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "helpers.hpp"
#include "mjlab/data.hpp"

using namespace mjlab;
using mjlab::testing::bitwise_equal;

namespace {

// Rule-following classifier written against raw symbols only.
int classify(const Example& ex) {
  auto count = [&](int sym) { return std::count(ex.tokens.begin(), ex.tokens.end(), sym); };
  switch (ex.task) {
    case 0: {
      int best = 0;
      for (int m = 1; m < 3; ++m)
        if (count(m) > count(best)) best = m;
      return best;
    }
    case 1: {
      for (auto it = ex.tokens.rbegin(); it != ex.tokens.rend(); ++it)
        if (*it >= 3 && *it <= 5) return *it - 3;
      return -1;
    }
    default:
      return count(6) + count(7) >= 4 ? 1 : 0;
  }
}

}  // namespace

TEST(Data, DefaultTasksHaveDisjointMarkers) {
  const auto tasks = default_tasks();
  ASSERT_EQ(tasks.size(), 3u);
  std::set<int> seen;
  for (const auto& t : tasks)
    for (int m : t.markers) EXPECT_TRUE(seen.insert(m).second);
  EXPECT_EQ(tasks[0].classes(), 3u);
  EXPECT_EQ(tasks[2].classes(), 2u);
}

TEST(Data, AllOneSymbolMajority) {
  const TaskSpec t = default_tasks()[0];
  EXPECT_EQ(reference_label(t, std::vector<int>(20, t.markers[1])), 1);
  EXPECT_EQ(reference_label(t, std::vector<int>(20, t.markers[2])), 2);
  EXPECT_THROW(reference_label(t, std::vector<int>(20, 9)), std::domain_error);
}

TEST(Data, DeterministicBytes) {
  const auto tasks = default_tasks();
  const auto a = generate(tasks, 50, 3), b = generate(tasks, 50, 3), c = generate(tasks, 50, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  const auto pa = std::filesystem::temp_directory_path() / "mjlab_a.jsonl";
  const auto pb = std::filesystem::temp_directory_path() / "mjlab_b.jsonl";
  write_jsonl(a, pa);
  write_jsonl(b, pb);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(pa), slurp(pb));
  EXPECT_EQ(read_jsonl(pa), a);
  std::filesystem::remove(pa);
  std::filesystem::remove(pb);
}

TEST(Data, ReferenceClassifierIsPerfect) {
  const auto data = generate(default_tasks(), 500, 11);
  ASSERT_EQ(data.size(), 1500u);
  std::size_t correct = 0;
  for (const auto& ex : data) correct += classify(ex) == ex.label;
  EXPECT_EQ(correct, data.size());
}

TEST(Data, LabelsStratifiedAndInRange) {
  const auto tasks = default_tasks();
  const auto data = generate(tasks, 101, 5);
  std::map<std::pair<int, int>, int> counts;
  for (const auto& ex : data) {
    ++counts[{ex.task, ex.label}];
    EXPECT_GE(ex.tokens.size(), 16u);
    EXPECT_LE(ex.tokens.size(), 48u);
    for (int tok : ex.tokens) EXPECT_LT(tok, 64);
  }
  for (const auto& t : tasks) {
    int lo = 1 << 30, hi = 0;
    for (std::size_t c = 0; c < t.classes(); ++c) {
      const int n = counts[{t.task_id, static_cast<int>(c)}];
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    EXPECT_LE(hi - lo, 1);
  }
}

TEST(Data, VocabularyOverflowAndOverlapRejected) {
  auto tasks = default_tasks();
  tasks[1].markers = {3, 4, 70};
  EXPECT_THROW(generate(tasks, 10, 1), std::invalid_argument);
  tasks = default_tasks();
  tasks[1].markers = {2, 4, 5};
  EXPECT_THROW(generate(tasks, 10, 1), std::invalid_argument);
  EXPECT_THROW(generate(default_tasks(), 0, 1), std::invalid_argument);
}

TEST(Data, SplitIsPerTask) {
  const auto data = generate(default_tasks(), 40, 2);
  const auto [train, val] = split_dataset(data, 0.25, 3);
  EXPECT_EQ(train.size() + val.size(), data.size());
  std::map<int, int> per;
  for (const auto& ex : val) ++per[ex.task];
  for (int t = 0; t < 3; ++t) EXPECT_EQ(per[t], 10);
}

TEST(Data, BudgetEqualToTotalIsPermutation) {
  const auto data = generate(default_tasks(), 5, 4);
  std::size_t total = 0;
  for (const auto& ex : data) total += ex.tokens.size();
  auto pos = sample_positions(data, total, 9);
  ASSERT_EQ(pos.size(), total);
  std::set<std::pair<std::size_t, std::size_t>> uniq(pos.begin(), pos.end());
  EXPECT_EQ(uniq.size(), total);
  for (auto [s, p] : pos) EXPECT_LT(p, data[s].tokens.size());
  EXPECT_THROW(sample_positions(data, 0, 1), std::invalid_argument);
  EXPECT_THROW(sample_positions(data, total + 1, 1), std::invalid_argument);
}

TEST(Data, SampledTaskSharesTrackCorpus) {
  const auto data = generate(default_tasks(), 400, 6);
  std::vector<double> corpus(3, 0.0), sampled(3, 0.0);
  double total = 0;
  for (const auto& ex : data) {
    corpus[ex.task] += ex.tokens.size();
    total += ex.tokens.size();
  }
  const auto pos = sample_positions(data, 5000, 7);
  for (auto [s, p] : pos) sampled[data[s].task] += 1;
  for (int t = 0; t < 3; ++t) EXPECT_NEAR(sampled[t] / 5000.0, corpus[t] / total, 0.03);
}

TEST(Data, InitTokensMatchDirectForward) {
  const ModelConfig cfg{.d_model = 8, .d_ff = 8, .n_layers = 2, .n_heads = 2, .vocab_size = 64, .max_seq_len = 48};
  Backbone m(cfg, 1);
  m.freeze();
  const auto data = generate(default_tasks(), 4, 8);
  const auto sample = sample_init_tokens(m, data, 30, 9);
  ASSERT_EQ(sample.per_layer.size(), 2u);
  NoGradGuard g;
  for (std::size_t i = 0; i < 30; i += 7) {
    const auto [s, p] = sample.positions[i];
    const auto fw = m.forward(PackedSequences::pack({data[s].tokens}));
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(sample.per_layer[l].at(i, j), fw.hidden[l].at(p, j), 1e-12);
  }
}

TEST(Data, MakeBatchPacksSelection) {
  const auto data = generate(default_tasks(), 3, 1);
  const std::vector<std::size_t> idx{4, 0};
  const Batch b = make_batch(data, idx);
  EXPECT_EQ(b.seqs.count(), 2u);
  EXPECT_EQ(b.labels, (std::vector<int>{data[4].label, data[0].label}));
  EXPECT_EQ(b.tasks, (std::vector<int>{data[4].task, data[0].task}));
  EXPECT_EQ(b.seqs.length(0), data[4].tokens.size());
}
