#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mjlab/adapters.hpp"
#include "mjlab/data.hpp"
#include "mjlab/model.hpp"
#include "mjlab/moe.hpp"
#include "mjlab/router.hpp"

namespace mjlab {

/// Invalid or unreadable configuration; the CLI maps it to exit code 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Method { Head, Peft, MonkeyJump, MoE };
std::string_view to_string(Method m);
Method method_from_string(std::string_view name);

/// How the task-specific arm splits one adapter budget across tasks:
/// rank r/T banks per task, one projection slice per task, or one layer slice per task.
enum class Partition { Rank, Projection, Layer };
std::string_view to_string(Partition p);
Partition partition_from_string(std::string_view name);

struct DataConfig {
  std::vector<TaskSpec> tasks = default_tasks();
  std::size_t n_per_task = 1800;
  double val_fraction = 0.25;
  std::uint64_t seed = 7;
};

struct PretrainConfig {
  std::size_t steps = 300;
  double lr = 3e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
};

/// Router hyperparameters plus the pipeline knobs around them.
struct RoutingSetup {
  RouterConfig router;
  double stop_fraction = 0.6;  // EMA stops at this fraction of optimizer steps
  std::size_t routed_layers = 0;  // route only the last n blocks; 0 means all
  std::size_t kmeans_samples = 2000;
  std::size_t kmeans_iters = 25;
};

struct TrainConfig {
  Method method = Method::MonkeyJump;
  /// Adapter targets for PEFT and MoE; MJ targets its routed and shared projections.
  std::vector<ProjectionId> targets{ProjectionId::q, ProjectionId::k, ProjectionId::v, ProjectionId::o,
                                    ProjectionId::gate};
  double lr = 1e-2;
  double weight_decay = 0.1;
  double warmup_ratio = 0.1;
  std::size_t epochs = 2;
  std::size_t batch_size = 16;
  std::size_t grad_accum = 1;
  Partition partition = Partition::Rank;
  bool dump_embeddings = false;

  void validate() const;
};

struct ExperimentConfig {
  ModelConfig model;
  std::uint64_t model_seed = 0;
  PretrainConfig pretrain;
  DataConfig data;
  AdapterVariant adapter;
  RoutingSetup routing;
  MoEConfig moe;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out_dir = "runs";
  /// Load a saved backbone instead of pretraining when non-empty.
  std::string backbone_dir;

  /// Checks every section; throws ConfigError naming the first problem.
  void validate() const;
  /// Projections carrying adapters for the configured method.
  std::vector<ProjectionId> adapter_targets() const;
};

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys and bad values raise ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a of the canonical JSON, as 16 hex digits.
std::string config_hash(const nlohmann::ordered_json& j);

}  // namespace mjlab
