#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <utility>
#include <vector>

#include "mjlab/model.hpp"
#include "mjlab/tensor.hpp"

namespace mjlab {

enum class LabelRule { Majority, LastMarker, CountThreshold };

std::string_view to_string(LabelRule r);
LabelRule label_rule_from_string(std::string_view name);

/// One synthetic classification task.
///   Majority:       label = index of the most frequent marker (unique by construction)
///   LastMarker:     label = index of the last marker in the sequence
///   CountThreshold: label = 1 when the number of marker tokens is >= threshold
struct TaskSpec {
  int task_id = 0;
  LabelRule rule = LabelRule::Majority;
  std::vector<int> markers;
  std::vector<int> fillers;
  std::size_t min_len = 16;
  std::size_t max_len = 48;
  std::size_t threshold = 4;

  std::size_t classes() const { return rule == LabelRule::CountThreshold ? 2 : markers.size(); }
  void validate(std::size_t vocab_size) const;
  bool operator==(const TaskSpec&) const = default;
};

struct Example {
  std::vector<int> tokens;
  int label = 0;
  int task = 0;
  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

/// Majority over {0,1,2}, last-marker over {3,4,5}, count-threshold over {6,7};
/// every task draws fillers from 8..vocab-1.
std::vector<TaskSpec> default_tasks(std::size_t vocab_size = 64);
/// Single-task majority set with every sequence exactly `length` long.
TaskSpec majority_task(std::size_t length, std::size_t vocab_size = 64);

/// The task's labelling rule applied to raw tokens; throws when the sequence
/// has no defined label.
int reference_label(const TaskSpec& spec, const std::vector<int>& tokens);

/// Labels cycle through the classes so each class gets n/classes or one more.
/// Throws std::invalid_argument on overlapping marker slices or ids >= vocab_size.
Dataset generate(const std::vector<TaskSpec>& specs, std::size_t n_per_task, std::uint64_t seed,
                 std::size_t vocab_size = 64);

/// Per-task shuffled split; val gets round(val_fraction * n_task) of each task.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed);

void write_jsonl(const Dataset& data, const std::filesystem::path& path);
Dataset read_jsonl(const std::filesystem::path& path);

std::vector<std::vector<int>> token_sequences(const Dataset& data);

struct Batch {
  PackedSequences seqs;
  std::vector<int> labels;
  std::vector<int> tasks;
};
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// (sequence, position) pairs drawn uniformly without replacement.
std::vector<std::pair<std::size_t, std::size_t>> sample_positions(const Dataset& data, std::size_t budget,
                                                                  std::uint64_t seed);

struct InitSample {
  std::vector<std::pair<std::size_t, std::size_t>> positions;
  std::vector<Tensor> per_layer;  // [layer] budget x d, residual stream entering the block
};

/// Forwards the sampled sequences through the frozen backbone and gathers the
/// block inputs at the sampled positions.
InitSample sample_init_tokens(const Backbone& model, const Dataset& data, std::size_t budget, std::uint64_t seed);

}  // namespace mjlab
