#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mjlab/data.hpp"
#include "mjlab/model.hpp"

namespace mjlab {

enum class SelectorKind { Absolute, OffsetFromEnd, Mean, Max, Last };

struct PositionSelector {
  SelectorKind kind = SelectorKind::Last;
  std::size_t index = 0;  // position for Absolute, distance from the last token for OffsetFromEnd

  std::string name() const;  // "abs:3", "end:8", "mean", "max", "last"
  static PositionSelector parse(const std::string& text);
  bool operator==(const PositionSelector&) const = default;
};

struct ProbeSpec {
  std::size_t layer = 0;  // hidden[layer]; n_layers selects the last block's output
  PositionSelector selector;
  double val_fraction = 0.25;
  std::size_t epochs = 100;
  double lr = 0.5;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double train_acc = 0.0;
  double val_acc = 0.0;
};

/// One feature row per sequence for each selector, read from hidden[layer]
/// under no-grad. Throws std::out_of_range when a selector does not fit a sequence.
std::vector<Tensor> probe_features(const Backbone& model, const Dataset& data, std::size_t layer,
                                   const std::vector<PositionSelector>& selectors);

/// Softmax-regression head trained by full-batch gradient descent on
/// standardised features. Throws std::invalid_argument on an empty split.
ProbeResult fit_linear_probe(const Tensor& x_train, const std::vector<int>& y_train, const Tensor& x_val,
                             const std::vector<int>& y_val, std::size_t classes, std::size_t epochs, double lr,
                             std::uint64_t seed);

/// Splits `data` per task with spec.seed, extracts features and fits the head.
ProbeResult run_probe(const ProbeSpec& spec, const Backbone& model, const Dataset& data);

struct ProbeRow {
  std::size_t layer;
  std::string selector;
  std::uint64_t seed;
  ProbeResult result;
};
/// Every (layer, selector, seed) combination. Features are extracted once per
/// layer; each seed draws its own per-task split and head init.
std::vector<ProbeRow> probe_sweep(const Backbone& model, const Dataset& data, const std::vector<std::size_t>& layers,
                                  const std::vector<PositionSelector>& selectors,
                                  const std::vector<std::uint64_t>& seeds, std::size_t epochs = 100, double lr = 0.5,
                                  double val_fraction = 0.25);

/// Earliest position, three offsets from the end spaced a quarter apart, the
/// last token, then mean and max pooling, for sequences of exactly `length`.
std::vector<PositionSelector> position_ladder(std::size_t length);

void write_probe_csv(const std::vector<ProbeRow>& rows, const std::filesystem::path& path);

}  // namespace mjlab
