#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mjlab/adapters.hpp"
#include "mjlab/config.hpp"
#include "mjlab/data.hpp"
#include "mjlab/model.hpp"
#include "mjlab/moe.hpp"
#include "mjlab/router.hpp"

namespace mjlab {

struct SplitData {
  Dataset train;
  Dataset val;
};

/// Generates the configured tasks and splits them per task.
SplitData prepare_data(const ExperimentConfig& cfg);

/// Loads cfg.backbone_dir when set. Otherwise pretrains on the training split;
/// when `cache_root` is non-empty the result is stored under
/// cache_root/backbone-<hash> and reused by later calls with the same settings.
Backbone prepare_backbone(const ExperimentConfig& cfg, const Dataset& train,
                          const std::filesystem::path& cache_root = {});

/// Trainable state on top of a frozen backbone: adapters (plain, routed or
/// mixture), routing centers and one last-token classification head per task.
class Learner {
 public:
  /// `partition` turns the bank into per-task slices of one adapter budget.
  Learner(const ExperimentConfig& cfg, const Backbone& backbone, std::uint64_t seed,
          std::optional<Partition> partition = std::nullopt);

  Method method() const { return method_; }
  /// Stage one: k-means over block inputs sampled from `train`, per routed block.
  void init_centers(const Dataset& train);

  /// Mean cross-entropy over the batch; records on the tape unless under NoGradGuard.
  Tensor loss(const Batch& batch, const DropoutContext& drop);
  std::vector<int> predict(const Batch& batch);

  /// Routing decisions of the last forward, per block (MJ only).
  std::vector<std::optional<RoutingDecision>> last_decisions() const;
  std::vector<Tensor> last_block_inputs() const;

  std::vector<Tensor> trainable() const;
  /// Every tensor a checkpoint holds, under stable names.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::size_t trainable_count() const;

  void save_checkpoint(const std::filesystem::path& dir) const;
  void load_checkpoint(const std::filesystem::path& dir);

  const AdapterBank& bank() const { return bank_; }
  AdapterBank& bank() { return bank_; }
  std::vector<std::optional<RouterState>>& routers() { return routers_; }
  const std::vector<std::optional<RouterState>>& routers() const { return routers_; }
  const MoEAdapterBank* moe() const { return moe_.get(); }
  std::vector<std::size_t> routed_layers() const;
  std::size_t task_count() const { return heads_w_.size(); }

 private:
  ForwardResult forward(const Batch& batch, const DropoutContext& drop);
  std::vector<Tensor> head_logits(const Tensor& last_hidden, const Batch& batch,
                                  std::vector<std::vector<std::size_t>>& groups) const;

  const ExperimentConfig& cfg_;
  const Backbone& backbone_;
  std::uint64_t seed_;
  Method method_;
  std::optional<Partition> partition_;
  AdapterBank bank_;
  std::vector<AdapterBank> task_banks_;  // rank partition only
  std::unique_ptr<MoEAdapterBank> moe_;
  std::vector<std::optional<RouterState>> routers_;
  std::vector<Tensor> heads_w_, heads_b_;
  std::unique_ptr<ProjectionHooks> last_hooks_;
};

struct RunResult {
  std::uint64_t seed = 0;
  std::vector<double> task_accuracy;
  double mean_accuracy = 0.0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::vector<double> step_losses;
  std::size_t steps = 0;
  std::size_t trainable = 0;
  std::optional<UsageStats> usage;
  double mean_rho = 0.0;
  std::filesystem::path dir;  // empty when nothing was written
};

/// Per-task accuracy over `data` with frozen centers and no dropout.
std::vector<double> evaluate(Learner& learner, const Dataset& data, std::size_t n_tasks);
/// Mean cross-entropy over `data` in eval mode.
double mean_loss(Learner& learner, const Dataset& data);

/// Stages two and three on an initialised learner: optimizer steps with
/// gradient accumulation and the EMA schedule, then evaluation. Writes
/// metrics.jsonl, report.json, usage.csv and checkpoint/ under `out` when
/// non-empty. A non-finite loss raises TrainingDiverged naming the step.
RunResult train_learner(Learner& learner, const ExperimentConfig& cfg, const SplitData& data, std::uint64_t seed,
                        const std::filesystem::path& out = {});

/// Fresh learner, center init, training and evaluation for one seed.
RunResult run_pipeline(const ExperimentConfig& cfg, const Backbone& backbone, const SplitData& data,
                       std::uint64_t seed, const std::filesystem::path& out = {});

/// Directory for a config's runs: out_dir/<hash of everything but seeds and out_dir>.
std::filesystem::path run_root(const ExperimentConfig& cfg);

nlohmann::ordered_json run_report(const RunResult& r, const ExperimentConfig& cfg);

struct ArmComparison {
  std::uint64_t seed;
  std::vector<double> shared;    // per-task accuracy, one bank on the mixture
  std::vector<double> specific;  // per-task accuracy, budget partitioned across tasks
  std::size_t shared_trainable;
  std::size_t specific_trainable;
};

/// Plain PEFT on cfg.train.targets for both arms; the specific arm gives each
/// task its own slice of the same budget (rank r/T banks, or projection or
/// layer subsets of one bank). Throws ConfigError when the budget does not
/// divide across the tasks.
std::vector<ArmComparison> shared_vs_specific(const ExperimentConfig& cfg, const Backbone& backbone,
                                              const SplitData& data);

struct AblationRow {
  std::string value;
  std::uint64_t seed;
  std::vector<double> task_accuracy;
  double mean_rho;
};

/// Known axes: similarity, tau, beta, update_every, stop_fraction, shared,
/// rank, combination, permutation, routed_layers, kmeans_samples, topk.
const std::vector<std::string>& ablation_axes();
/// Copy of `base` with one knob set; throws ConfigError for unknown axes or values.
ExperimentConfig apply_ablation(const ExperimentConfig& base, const std::string& axis, const std::string& value);
std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const Backbone& backbone, const SplitData& data,
                                const std::string& axis, const std::vector<std::string>& values);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& axis, std::size_t n_tasks,
                        const std::filesystem::path& path);

}  // namespace mjlab
