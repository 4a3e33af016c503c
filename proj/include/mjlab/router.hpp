#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "mjlab/adapters.hpp"
#include "mjlab/model.hpp"
#include "mjlab/tensor.hpp"

namespace mjlab {

enum class Similarity { Cosine, Dot, Euclidean, L1 };
enum class Granularity { Token, Sequence, Task };

std::string_view to_string(Similarity s);
std::string_view to_string(Granularity g);
Similarity similarity_from_string(std::string_view name);
Granularity granularity_from_string(std::string_view name);

/// Routing hyperparameters shared by every routed block.
struct RouterConfig {
  double tau = 1.0;
  std::size_t top_k = 2;
  double beta = 0.5;
  std::size_t update_every = 2;
  std::size_t stop_step = 0;
  Similarity similarity = Similarity::Cosine;
  Granularity granularity = Granularity::Token;
  std::vector<ProjectionId> routed{ProjectionId::q, ProjectionId::k, ProjectionId::v};
  std::vector<ProjectionId> shared{ProjectionId::o, ProjectionId::gate};
  /// routed index -> center index; empty means identity.
  std::vector<std::size_t> permutation;
  /// task id -> routed expert indices, used by task granularity. Empty means
  /// task t uses experts t, t+1, ... (mod E).
  std::vector<std::vector<std::size_t>> task_experts;

  std::size_t experts() const { return routed.size(); }
  std::size_t center_of(std::size_t routed_index) const {
    return permutation.empty() ? routed_index : permutation[routed_index];
  }
  std::vector<std::size_t> experts_for_task(int task) const;
  void validate() const;
};

/// Centers of one block. Never owns a gradient buffer.
struct RouterState {
  RouterConfig config;
  Tensor centers;  // experts x d

  RouterState(RouterConfig cfg, Tensor c);
};

struct RoutingDecision {
  Tensor z;  // T x E logits
  Tensor p;  // T x E probabilities
  Tensor m;  // T x E sparse coefficients
  std::vector<std::vector<std::size_t>> selected;  // per row, descending p
};

/// Extra inputs for sequence and task granularity.
struct RouteContext {
  const PackedSequences* sequences = nullptr;
  std::span<const int> sequence_tasks;  // one task id per sequence
};

/// Similarity routing of the rows of H. When H carries gradient, z, p and m
/// are differentiable in H; centers are always constants.
RoutingDecision route(const RouterState& state, const Tensor& hidden, const RouteContext& ctx = {});

/// Stable top-k over a probability row: highest first, lowest index on ties.
std::vector<std::size_t> top_k_indices(std::span<const double> probs, std::size_t k);

/// Sums of routed hidden states per expert, possibly over several micro-batches.
class EmaAccumulator {
 public:
  explicit EmaAccumulator(const RouterState& state);
  void add(const RoutingDecision& decision, const Tensor& hidden);
  /// Applies c <- beta c + (1 - beta) mean when `step` is on the schedule.
  /// Returns whether an update fired.
  bool apply(RouterState& state, std::size_t step) const;
  void reset();

 private:
  std::size_t d_;
  std::vector<std::vector<double>> sums_;
  std::vector<std::size_t> counts_;
};

bool ema_scheduled(const RouterConfig& cfg, std::size_t step);
bool ema_update(RouterState& state, const RoutingDecision& decision, const Tensor& hidden, std::size_t step);

struct KMeansResult {
  Tensor centers;                      // k x d, unit rows
  std::vector<double> objective;       // sum of (1 - cos) after each assignment pass
  std::vector<std::size_t> assignment;
};

/// Spherical k-means with k-means++ seeding on L2-normalised samples.
KMeansResult kmeans_init(const Tensor& samples, std::size_t k, std::size_t iters, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Usage statistics

class UsageCounter {
 public:
  UsageCounter(std::size_t n_layers, std::size_t experts);
  void record(std::size_t layer, const RoutingDecision& decision);
  /// Fraction of tokens routed to each expert, per layer.
  std::vector<std::vector<double>> fractions() const;
  bool empty() const;

 private:
  std::vector<std::vector<std::size_t>> counts_;
  std::vector<std::size_t> tokens_;
};

struct UsageStats {
  std::vector<std::vector<double>> init;   // [layer][expert]
  std::vector<std::vector<double>> final;  // [layer][expert]
  std::vector<double> rho;                 // per expert, correlation across layers

  void write_csv(const std::filesystem::path& path) const;
};

UsageStats usage_report(const UsageCounter& init, const UsageCounter& final);
/// Pearson correlation; 1 for identical inputs, 0 when either side is constant.
double pearson(std::span<const double> a, std::span<const double> b);

/// CSV rows of (layer, token_index, expert, d floats) for external embedding plots.
void append_embeddings_csv(std::ostream& out, std::size_t layer, std::size_t first_token_index,
                           const Tensor& hidden, const RoutingDecision& decision);

// ---------------------------------------------------------------------------
// Model hooks

/// Routes each block's tokens among the bank's routed adapters; shared (and
/// any other targeted) adapters stay always-on. Blocks without a router state
/// behave as plain PEFT.
class MonkeyJumpHooks : public ProjectionHooks {
 public:
  MonkeyJumpHooks(const AdapterBank& bank, const std::vector<std::optional<RouterState>>& routers,
                  DropoutContext drop = {}, std::span<const int> sequence_tasks = {});

  void begin_block(std::size_t layer, const Tensor& block_input, const PackedSequences& seqs) override;
  std::optional<Tensor> contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                     const Tensor& frozen_output) override;

  const std::optional<RoutingDecision>& decision(std::size_t layer) const { return decisions_.at(layer); }
  const Tensor& block_input(std::size_t layer) const { return inputs_.at(layer); }

 private:
  const AdapterBank& bank_;
  const std::vector<std::optional<RouterState>>& routers_;
  DropoutContext drop_;
  std::vector<int> tasks_;
  std::vector<std::optional<RoutingDecision>> decisions_;
  std::vector<Tensor> inputs_;
};

void save_routers(const std::vector<std::optional<RouterState>>& routers, const std::filesystem::path& dir);
std::vector<std::optional<RouterState>> load_routers(const std::filesystem::path& dir);

}  // namespace mjlab
