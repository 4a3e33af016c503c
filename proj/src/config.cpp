#include "mjlab/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

namespace mjlab {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Method m) {
  switch (m) {
    case Method::Head:
      return "head";
    case Method::Peft:
      return "peft";
    case Method::MonkeyJump:
      return "mj";
    case Method::MoE:
      return "moe";
  }
  return "?";
}

Method method_from_string(std::string_view name) {
  if (name == "head") return Method::Head;
  if (name == "peft") return Method::Peft;
  if (name == "mj") return Method::MonkeyJump;
  if (name == "moe") return Method::MoE;
  throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Partition p) {
  switch (p) {
    case Partition::Rank:
      return "rank";
    case Partition::Projection:
      return "projection";
    case Partition::Layer:
      return "layer";
  }
  return "?";
}

Partition partition_from_string(std::string_view name) {
  if (name == "rank") return Partition::Rank;
  if (name == "projection") return Partition::Projection;
  if (name == "layer") return Partition::Layer;
  throw std::invalid_argument("unknown partition '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("train.warmup_ratio must lie in [0, 1)");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (grad_accum < 1) throw ConfigError("train.grad_accum must be >= 1");
  if (targets.empty() && method != Method::Head && method != Method::MonkeyJump)
    throw ConfigError("train.targets must not be empty");
}

std::vector<ProjectionId> ExperimentConfig::adapter_targets() const {
  if (train.method == Method::Head) return {};
  if (train.method != Method::MonkeyJump) return train.targets;
  std::vector<ProjectionId> out = routing.router.routed;
  out.insert(out.end(), routing.router.shared.begin(), routing.router.shared.end());
  return out;
}

void ExperimentConfig::validate() const {
  try {
    model.validate();
    adapter.validate();
    moe.validate();
    std::set<int> markers;
    for (const auto& t : data.tasks) {
      t.validate(model.vocab_size);
      if (t.max_len > model.max_seq_len) throw ConfigError("data: task sequences exceed model.max_seq_len");
      for (int m : t.markers)
        if (!markers.insert(m).second) throw ConfigError("data: marker slices overlap across tasks");
    }
    if (data.tasks.empty()) throw ConfigError("data.tasks must not be empty");
    for (std::size_t i = 0; i < data.tasks.size(); ++i)
      if (data.tasks[i].task_id != static_cast<int>(i)) throw ConfigError("data.tasks ids must be 0, 1, ... in order");
    if (data.n_per_task < 1) throw ConfigError("data.n_per_task must be >= 1");
    if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) throw ConfigError("data.val_fraction must lie in (0, 1)");
    if (pretrain.batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
    if (!(pretrain.lr >= 0.0)) throw ConfigError("pretrain.lr must be >= 0");
    train.validate();
    if (train.method == Method::MonkeyJump) {
      routing.router.validate();
      const auto t = adapter_targets();
      if (std::set<ProjectionId>(t.begin(), t.end()).size() != t.size())
        throw ConfigError("router: a projection is both routed and shared");
      if (!(routing.stop_fraction >= 0.0 && routing.stop_fraction <= 1.0))
        throw ConfigError("router.stop_fraction must lie in [0, 1]");
      if (routing.routed_layers > model.n_layers) throw ConfigError("router.routed_layers exceeds model.n_layers");
      if (routing.kmeans_samples < routing.router.experts())
        throw ConfigError("router.kmeans_samples must be at least the number of experts");
      if (routing.router.granularity == Granularity::Task)
        for (std::size_t i = 0; i < data.tasks.size(); ++i) (void)routing.router.experts_for_task(static_cast<int>(i));
    }
    if (train.method == Method::MoE && moe.top_k > moe.experts) throw ConfigError("moe.top_k exceeds moe.experts");
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------

namespace {

/// Reads keys from one JSON object and rejects any it did not ask for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void opt(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <typename T, typename F>
  void opt_as(const char* key, T& out, F convert) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = convert(j_.at(key));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.contains(k)) throw ConfigError("unknown key '" + where(k) + "'");
  }

  std::string where(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

std::vector<ProjectionId> projections(const json& j) {
  std::vector<ProjectionId> out;
  for (const auto& p : j) out.push_back(projection_from_string(p.get<std::string>()));
  return out;
}

ordered_json names(const std::vector<ProjectionId>& ps) {
  ordered_json a = ordered_json::array();
  for (auto p : ps) a.push_back(to_string(p));
  return a;
}

ordered_json task_json(const TaskSpec& t) {
  return {{"task_id", t.task_id}, {"rule", to_string(t.rule)}, {"markers", t.markers},  {"fillers", t.fillers},
          {"min_len", t.min_len}, {"max_len", t.max_len},      {"threshold", t.threshold}};
}

TaskSpec task_from(const json& j, const std::string& path) {
  TaskSpec t;
  Section s(j, path);
  s.opt("task_id", t.task_id);
  s.opt_as("rule", t.rule, [](const json& v) { return label_rule_from_string(v.get<std::string>()); });
  s.opt("markers", t.markers);
  s.opt("fillers", t.fillers);
  s.opt("min_len", t.min_len);
  s.opt("max_len", t.max_len);
  s.opt("threshold", t.threshold);
  s.finish();
  return t;
}

}  // namespace

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["model"] = {{"d_model", c.model.d_model},     {"d_ff", c.model.d_ff},
                {"n_layers", c.model.n_layers},   {"n_heads", c.model.n_heads},
                {"vocab_size", c.model.vocab_size}, {"max_seq_len", c.model.max_seq_len},
                {"seed", c.model_seed}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"lr", c.pretrain.lr},
                   {"batch_size", c.pretrain.batch_size},
                   {"seed", c.pretrain.seed}};
  ordered_json tasks = ordered_json::array();
  for (const auto& t : c.data.tasks) tasks.push_back(task_json(t));
  j["data"] = {{"n_per_task", c.data.n_per_task},
               {"val_fraction", c.data.val_fraction},
               {"seed", c.data.seed},
               {"tasks", tasks}};
  j["adapter"] = {{"variant", to_string(c.adapter.kind)},
                  {"rank", c.adapter.rank},
                  {"alpha", c.adapter.alpha},
                  {"dropout", c.adapter.dropout}};
  const RouterConfig& r = c.routing.router;
  j["router"] = {{"similarity", to_string(r.similarity)},
                 {"granularity", to_string(r.granularity)},
                 {"tau", r.tau},
                 {"top_k", r.top_k},
                 {"beta", r.beta},
                 {"update_every", r.update_every},
                 {"stop_fraction", c.routing.stop_fraction},
                 {"routed", names(r.routed)},
                 {"shared", names(r.shared)},
                 {"permutation", r.permutation},
                 {"task_experts", r.task_experts},
                 {"routed_layers", c.routing.routed_layers},
                 {"kmeans_samples", c.routing.kmeans_samples},
                 {"kmeans_iters", c.routing.kmeans_iters}};
  j["moe"] = {{"experts", c.moe.experts}, {"top_k", c.moe.top_k}};
  j["train"] = {{"method", to_string(c.train.method)},
                {"targets", names(c.train.targets)},
                {"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"warmup_ratio", c.train.warmup_ratio},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"grad_accum", c.train.grad_accum},
                {"partition", to_string(c.train.partition)},
                {"dump_embeddings", c.train.dump_embeddings}};
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  j["backbone_dir"] = c.backbone_dir;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "");
  if (const json* m = root.child("model")) {
    Section s(*m, "model");
    s.opt("d_model", c.model.d_model);
    s.opt("d_ff", c.model.d_ff);
    s.opt("n_layers", c.model.n_layers);
    s.opt("n_heads", c.model.n_heads);
    s.opt("vocab_size", c.model.vocab_size);
    s.opt("max_seq_len", c.model.max_seq_len);
    s.opt("seed", c.model_seed);
    s.finish();
  }
  if (const json* p = root.child("pretrain")) {
    Section s(*p, "pretrain");
    s.opt("steps", c.pretrain.steps);
    s.opt("lr", c.pretrain.lr);
    s.opt("batch_size", c.pretrain.batch_size);
    s.opt("seed", c.pretrain.seed);
    s.finish();
  }
  if (const json* d = root.child("data")) {
    Section s(*d, "data");
    s.opt("n_per_task", c.data.n_per_task);
    s.opt("val_fraction", c.data.val_fraction);
    s.opt("seed", c.data.seed);
    if (const json* t = s.child("tasks")) {
      if (!t->is_array()) throw ConfigError("data.tasks must be an array");
      c.data.tasks.clear();
      for (std::size_t i = 0; i < t->size(); ++i)
        c.data.tasks.push_back(task_from((*t)[i], "data.tasks[" + std::to_string(i) + "]"));
    }
    s.finish();
  }
  if (const json* a = root.child("adapter")) {
    Section s(*a, "adapter");
    s.opt_as("variant", c.adapter.kind, [](const json& v) { return adapter_kind_from_string(v.get<std::string>()); });
    s.opt("rank", c.adapter.rank);
    s.opt("alpha", c.adapter.alpha);
    s.opt("dropout", c.adapter.dropout);
    s.finish();
  }
  if (const json* r = root.child("router")) {
    Section s(*r, "router");
    RouterConfig& rc = c.routing.router;
    s.opt_as("similarity", rc.similarity, [](const json& v) { return similarity_from_string(v.get<std::string>()); });
    s.opt_as("granularity", rc.granularity,
             [](const json& v) { return granularity_from_string(v.get<std::string>()); });
    s.opt("tau", rc.tau);
    s.opt("top_k", rc.top_k);
    s.opt("beta", rc.beta);
    s.opt("update_every", rc.update_every);
    s.opt("stop_fraction", c.routing.stop_fraction);
    s.opt_as("routed", rc.routed, projections);
    s.opt_as("shared", rc.shared, projections);
    s.opt("permutation", rc.permutation);
    s.opt("task_experts", rc.task_experts);
    s.opt("routed_layers", c.routing.routed_layers);
    s.opt("kmeans_samples", c.routing.kmeans_samples);
    s.opt("kmeans_iters", c.routing.kmeans_iters);
    s.finish();
  }
  if (const json* m = root.child("moe")) {
    Section s(*m, "moe");
    s.opt("experts", c.moe.experts);
    s.opt("top_k", c.moe.top_k);
    s.finish();
  }
  if (const json* t = root.child("train")) {
    Section s(*t, "train");
    s.opt_as("method", c.train.method, [](const json& v) { return method_from_string(v.get<std::string>()); });
    s.opt_as("targets", c.train.targets, projections);
    s.opt("lr", c.train.lr);
    s.opt("weight_decay", c.train.weight_decay);
    s.opt("warmup_ratio", c.train.warmup_ratio);
    s.opt("epochs", c.train.epochs);
    s.opt("batch_size", c.train.batch_size);
    s.opt("grad_accum", c.train.grad_accum);
    s.opt_as("partition", c.train.partition, [](const json& v) { return partition_from_string(v.get<std::string>()); });
    s.opt("dump_embeddings", c.train.dump_embeddings);
    s.finish();
  }
  root.opt("seeds", c.seeds);
  root.opt("out_dir", c.out_dir);
  root.opt("backbone_dir", c.backbone_dir);
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config file '" + path.string() + "': " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ordered_json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mjlab
