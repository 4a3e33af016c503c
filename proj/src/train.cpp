#include "mjlab/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>

#include "mjlab/optim.hpp"
#include "mjlab/rng.hpp"
#include "mjlab/snapshot.hpp"

namespace mjlab {

using nlohmann::ordered_json;

SplitData prepare_data(const ExperimentConfig& cfg) {
  const Dataset all = generate(cfg.data.tasks, cfg.data.n_per_task, cfg.data.seed, cfg.model.vocab_size);
  auto [train, val] = split_dataset(all, cfg.data.val_fraction, derive_seed(cfg.data.seed, {1}));
  return {std::move(train), std::move(val)};
}

Backbone prepare_backbone(const ExperimentConfig& cfg, const Dataset& train, const std::filesystem::path& cache_root) {
  if (!cfg.backbone_dir.empty()) {
    Backbone b = Backbone::load(cfg.backbone_dir);
    if (b.config() != cfg.model) throw ConfigError("backbone in '" + cfg.backbone_dir + "' does not match the model section");
    return b;
  }
  const ordered_json full = to_json(cfg);
  ordered_json key;
  key["model"] = full["model"];
  key["pretrain"] = full["pretrain"];
  key["data"] = full["data"];
  const std::string hash = config_hash(key);

  static std::mutex mu;
  static std::map<std::string, Backbone> memo;
  {
    std::lock_guard lock(mu);
    if (auto it = memo.find(hash); it != memo.end()) return it->second;
  }
  const auto dir = cache_root.empty() ? std::filesystem::path() : cache_root / ("backbone-" + hash);
  std::optional<Backbone> out;
  if (!dir.empty() && std::filesystem::exists(dir / "manifest.json")) {
    out.emplace(Backbone::load(dir));
  } else {
    out.emplace(cfg.model, cfg.model_seed);
    auto corpus = token_sequences(train);
    Rng rng(derive_seed(cfg.pretrain.seed, {9}));
    rng.shuffle(corpus);
    const PretrainReport rep =
        pretrain_backbone(*out, corpus, cfg.pretrain.steps, cfg.pretrain.lr, cfg.pretrain.batch_size, cfg.pretrain.seed);
    if (!dir.empty()) {
      out->save(dir);
      ordered_json j;
      j["initial_heldout_ppl"] = rep.initial_heldout_ppl;
      j["final_heldout_ppl"] = rep.final_heldout_ppl;
      j["steps"] = rep.losses.size();
      std::ofstream(dir / "pretrain.json") << j.dump(2) << '\n';
    }
  }
  std::lock_guard lock(mu);
  memo.emplace(hash, *out);
  return *out;
}

// ---------------------------------------------------------------------------

namespace {

/// Each (layer, projection) adapter serves exactly one task; rows of other
/// tasks get a zero coefficient.
class PartitionHooks : public ProjectionHooks {
 public:
  PartitionHooks(const AdapterBank& bank, Partition part, std::vector<ProjectionId> targets, std::size_t n_layers,
                 std::size_t n_tasks, DropoutContext drop, std::vector<int> seq_tasks)
      : bank_(bank),
        part_(part),
        targets_(std::move(targets)),
        n_layers_(n_layers),
        n_tasks_(n_tasks),
        drop_(drop),
        seq_tasks_(std::move(seq_tasks)) {}

  void begin_block(std::size_t, const Tensor&, const PackedSequences& seqs) override {
    if (!coeff_.empty()) return;
    const auto owner = seqs.row_owner();
    for (std::size_t t = 0; t < n_tasks_; ++t) {
      std::vector<double> c(owner.size());
      for (std::size_t i = 0; i < owner.size(); ++i) c[i] = seq_tasks_.at(owner[i]) == static_cast<int>(t) ? 1.0 : 0.0;
      coeff_.push_back(Tensor::matrix(owner.size(), 1, std::move(c)));
    }
  }

  std::optional<Tensor> contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                     const Tensor& frozen_output) override {
    if (!bank_.has(layer, p)) return std::nullopt;
    std::size_t task = 0;
    if (part_ == Partition::Projection) {
      const auto idx = static_cast<std::size_t>(std::find(targets_.begin(), targets_.end(), p) - targets_.begin());
      task = idx / (targets_.size() / n_tasks_);
    } else {
      task = layer / (n_layers_ / n_tasks_);
    }
    return bank_.at(layer, p).apply_rows(input, frozen_output, coeff_.at(task), 0, drop_, site_id({layer, p}));
  }

 private:
  const AdapterBank& bank_;
  Partition part_;
  std::vector<ProjectionId> targets_;
  std::size_t n_layers_, n_tasks_;
  DropoutContext drop_;
  std::vector<int> seq_tasks_;
  std::vector<Tensor> coeff_;
};

/// Task t's rows go through its own bank only.
class TaskBankHooks : public ProjectionHooks {
 public:
  TaskBankHooks(const std::vector<AdapterBank>& banks, DropoutContext drop, std::vector<int> seq_tasks)
      : banks_(banks), drop_(drop), seq_tasks_(std::move(seq_tasks)) {}

  void begin_block(std::size_t, const Tensor&, const PackedSequences& seqs) override {
    if (!coeff_.empty()) return;
    const auto owner = seqs.row_owner();
    for (std::size_t t = 0; t < banks_.size(); ++t) {
      std::vector<double> c(owner.size());
      for (std::size_t i = 0; i < owner.size(); ++i) c[i] = seq_tasks_.at(owner[i]) == static_cast<int>(t) ? 1.0 : 0.0;
      coeff_.push_back(Tensor::matrix(owner.size(), 1, std::move(c)));
    }
  }

  std::optional<Tensor> contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                     const Tensor& frozen_output) override {
    if (!banks_.front().has(layer, p)) return std::nullopt;
    Tensor total;
    for (std::size_t t = 0; t < banks_.size(); ++t) {
      const Tensor part =
          banks_[t].at(layer, p).apply_rows(input, frozen_output, coeff_[t], 0, drop_, site_id({layer, p}) + 1000 * t);
      total = total.defined() ? add(total, part) : part;
    }
    return total;
  }

 private:
  const std::vector<AdapterBank>& banks_;
  DropoutContext drop_;
  std::vector<int> seq_tasks_;
  std::vector<Tensor> coeff_;
};

void save_named(const std::vector<std::pair<std::string, Tensor>>& named, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ordered_json names = ordered_json::array();
  for (const auto& [name, t] : named) {
    save_tensor(t, dir / (name + ".bin"));
    names.push_back(name);
  }
  std::ofstream(dir / "tensors.json") << names.dump(2) << '\n';
}

void load_named(const std::vector<std::pair<std::string, Tensor>>& named, const std::filesystem::path& dir) {
  for (auto [name, t] : named) {
    const Tensor loaded = load_tensor(dir / (name + ".bin"));
    if (loaded.shape() != t.shape()) throw SnapshotError("checkpoint shape mismatch for " + name);
    std::copy(loaded.data().begin(), loaded.data().end(), t.mutable_data().begin());
  }
}

}  // namespace

Learner::Learner(const ExperimentConfig& cfg, const Backbone& backbone, std::uint64_t seed,
                 std::optional<Partition> partition)
    : cfg_(cfg),
      backbone_(backbone),
      seed_(seed),
      method_(partition ? Method::Peft : cfg.train.method),
      partition_(partition) {
  if (!backbone.frozen()) throw std::logic_error("learner: backbone must be frozen");
  const std::size_t n_tasks = cfg.data.tasks.size();
  const std::vector<ProjectionId> targets = partition ? cfg.train.targets : cfg.adapter_targets();
  if (partition == Partition::Projection && (targets.empty() || targets.size() % n_tasks != 0))
    throw ConfigError("shared_vs_specific: " + std::to_string(targets.size()) + " target projections do not divide across " +
                      std::to_string(n_tasks) + " tasks");
  if (partition == Partition::Rank &&
      (cfg.adapter.kind == AdapterKind::Propulsion || cfg.adapter.rank % n_tasks != 0))
    throw ConfigError("shared_vs_specific: adapter rank " + std::to_string(cfg.adapter.rank) +
                      " does not divide across " + std::to_string(n_tasks) + " tasks");
  if (partition == Partition::Layer && cfg.model.n_layers % n_tasks != 0)
    throw ConfigError("shared_vs_specific: " + std::to_string(cfg.model.n_layers) + " layers do not divide across " +
                      std::to_string(n_tasks) + " tasks");

  const std::uint64_t adapter_seed = derive_seed(seed, {1});
  if (partition == Partition::Rank) {
    AdapterVariant slice = cfg.adapter;
    slice.rank /= n_tasks;
    for (std::size_t t = 0; t < n_tasks; ++t)
      task_banks_.emplace_back(cfg.model, slice, targets, derive_seed(adapter_seed, {t}));
  } else if (method_ == Method::Peft || method_ == Method::MonkeyJump) {
    bank_ = AdapterBank(cfg.model, cfg.adapter, targets, adapter_seed);
  }
  if (method_ == Method::MoE) moe_ = std::make_unique<MoEAdapterBank>(cfg.model, cfg.adapter, targets, cfg.moe, adapter_seed);
  routers_.resize(cfg.model.n_layers);

  const std::size_t d = cfg.model.d_model;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    const std::size_t c = cfg.data.tasks[t].classes();
    Rng rng(derive_seed(seed, {2, t}));
    heads_w_.push_back(Tensor::from({c, d}, rng.normals(c * d, 0.01), true));
    heads_b_.push_back(Tensor::zeros({c}, true));
  }
}

std::vector<std::size_t> Learner::routed_layers() const {
  std::vector<std::size_t> out;
  if (method_ != Method::MonkeyJump) return out;
  const std::size_t n = cfg_.model.n_layers;
  const std::size_t k = cfg_.routing.routed_layers == 0 ? n : cfg_.routing.routed_layers;
  for (std::size_t l = n - k; l < n; ++l) out.push_back(l);
  return out;
}

void Learner::init_centers(const Dataset& train) {
  if (method_ != Method::MonkeyJump) return;
  const InitSample sample = sample_init_tokens(backbone_, train, cfg_.routing.kmeans_samples, derive_seed(seed_, {3}));
  const RouterConfig& rc = cfg_.routing.router;
  for (auto l : routed_layers()) {
    const KMeansResult km =
        kmeans_init(sample.per_layer[l], rc.experts(), cfg_.routing.kmeans_iters, derive_seed(seed_, {4, l}));
    routers_[l].emplace(rc, km.centers);
  }
}

ForwardResult Learner::forward(const Batch& batch, const DropoutContext& drop) {
  last_hooks_.reset();
  if (partition_ == Partition::Rank) {
    last_hooks_ = std::make_unique<TaskBankHooks>(task_banks_, drop, batch.tasks);
  } else if (partition_) {
    last_hooks_ = std::make_unique<PartitionHooks>(bank_, *partition_, cfg_.train.targets, cfg_.model.n_layers,
                                                   cfg_.data.tasks.size(), drop, batch.tasks);
  } else {
    switch (method_) {
      case Method::Head:
        break;
      case Method::Peft:
        last_hooks_ = std::make_unique<PeftHooks>(bank_, drop);
        break;
      case Method::MonkeyJump:
        last_hooks_ = std::make_unique<MonkeyJumpHooks>(bank_, routers_, drop, batch.tasks);
        break;
      case Method::MoE:
        last_hooks_ = std::make_unique<MoEHooks>(*moe_, drop);
        break;
    }
  }
  return backbone_.forward(batch.seqs, last_hooks_.get());
}

std::vector<Tensor> Learner::head_logits(const Tensor& last_hidden, const Batch& batch,
                                         std::vector<std::vector<std::size_t>>& groups) const {
  groups.assign(heads_w_.size(), {});
  for (std::size_t i = 0; i < batch.tasks.size(); ++i) {
    const int t = batch.tasks[i];
    if (t < 0 || static_cast<std::size_t>(t) >= heads_w_.size())
      throw std::out_of_range("learner: task id " + std::to_string(t) + " has no head");
    groups[static_cast<std::size_t>(t)].push_back(i);
  }
  std::vector<Tensor> out(heads_w_.size());
  for (std::size_t t = 0; t < groups.size(); ++t) {
    if (groups[t].empty()) continue;
    out[t] = add_rowvec(matmul_nt(index_rows(last_hidden, groups[t]), heads_w_[t]), heads_b_[t]);
  }
  return out;
}

Tensor Learner::loss(const Batch& batch, const DropoutContext& drop) {
  const ForwardResult fr = forward(batch, drop);
  const auto last_rows = batch.seqs.last_rows();
  const Tensor last = index_rows(fr.final_hidden, last_rows);
  std::vector<std::vector<std::size_t>> groups;
  const auto logits = head_logits(last, batch, groups);
  Tensor total;
  const double n = static_cast<double>(batch.labels.size());
  for (std::size_t t = 0; t < groups.size(); ++t) {
    if (groups[t].empty()) continue;
    std::vector<int> labels;
    for (auto i : groups[t]) labels.push_back(batch.labels[i]);
    const Tensor term = scale(cross_entropy(logits[t], labels), static_cast<double>(groups[t].size()) / n);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

std::vector<int> Learner::predict(const Batch& batch) {
  NoGradGuard guard;
  const ForwardResult fr = forward(batch, {});
  const Tensor last = index_rows(fr.final_hidden, batch.seqs.last_rows());
  std::vector<std::vector<std::size_t>> groups;
  const auto logits = head_logits(last, batch, groups);
  std::vector<int> out(batch.labels.size(), 0);
  for (std::size_t t = 0; t < groups.size(); ++t) {
    for (std::size_t r = 0; r < groups[t].size(); ++r) {
      const auto row = logits[t].row(r);
      out[groups[t][r]] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
  }
  return out;
}

std::vector<std::optional<RoutingDecision>> Learner::last_decisions() const {
  std::vector<std::optional<RoutingDecision>> out(cfg_.model.n_layers);
  if (const auto* h = dynamic_cast<const MonkeyJumpHooks*>(last_hooks_.get()))
    for (std::size_t l = 0; l < out.size(); ++l) out[l] = h->decision(l);
  return out;
}

std::vector<Tensor> Learner::last_block_inputs() const {
  std::vector<Tensor> out(cfg_.model.n_layers);
  if (const auto* h = dynamic_cast<const MonkeyJumpHooks*>(last_hooks_.get()))
    for (std::size_t l = 0; l < out.size(); ++l) out[l] = h->block_input(l);
  return out;
}

std::vector<Tensor> Learner::trainable() const {
  std::vector<Tensor> out = moe_ ? moe_->trainable() : bank_.trainable();
  for (const auto& b : task_banks_)
    for (auto& t : b.trainable()) out.push_back(t);
  for (std::size_t t = 0; t < heads_w_.size(); ++t) {
    out.push_back(heads_w_[t]);
    out.push_back(heads_b_[t]);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Learner::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, t] : moe_ ? moe_->named_tensors() : bank_.named_tensors()) out.emplace_back("adapter." + name, t);
  for (std::size_t b = 0; b < task_banks_.size(); ++b)
    for (auto& [name, t] : task_banks_[b].named_tensors())
      out.emplace_back("task" + std::to_string(b) + ".adapter." + name, t);
  for (std::size_t t = 0; t < heads_w_.size(); ++t) {
    out.emplace_back("head" + std::to_string(t) + ".W", heads_w_[t]);
    out.emplace_back("head" + std::to_string(t) + ".b", heads_b_[t]);
  }
  return out;
}

std::size_t Learner::trainable_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.numel();
  return n;
}

void Learner::save_checkpoint(const std::filesystem::path& dir) const {
  save_named(named_tensors(), dir);
  if (method_ == Method::MonkeyJump) save_routers(routers_, dir / "routers");
}

void Learner::load_checkpoint(const std::filesystem::path& dir) {
  load_named(named_tensors(), dir);
  if (method_ == Method::MonkeyJump) {
    auto loaded = load_routers(dir / "routers");
    if (loaded.size() != routers_.size()) throw SnapshotError("checkpoint router count does not match the model");
    routers_ = std::move(loaded);
  }
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kEvalBatch = 64;

template <typename F>
void for_batches(const Dataset& data, F&& fn) {
  for (std::size_t lo = 0; lo < data.size(); lo += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, data.size() - lo));
    std::iota(idx.begin(), idx.end(), lo);
    fn(make_batch(data, idx));
  }
}

std::vector<double> evaluate_impl(Learner& learner, const Dataset& data, std::size_t n_tasks, UsageCounter* usage,
                                  const std::vector<std::size_t>& routed) {
  std::vector<std::size_t> hit(n_tasks, 0), seen(n_tasks, 0);
  for_batches(data, [&](const Batch& b) {
    const auto pred = learner.predict(b);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const auto t = static_cast<std::size_t>(b.tasks[i]);
      ++seen.at(t);
      hit[t] += pred[i] == b.labels[i];
    }
    if (usage) {
      const auto dec = learner.last_decisions();
      for (std::size_t j = 0; j < routed.size(); ++j) usage->record(j, *dec[routed[j]]);
    }
  });
  std::vector<double> acc(n_tasks, 0.0);
  for (std::size_t t = 0; t < n_tasks; ++t)
    acc[t] = seen[t] ? static_cast<double>(hit[t]) / static_cast<double>(seen[t]) : 0.0;
  return acc;
}

Dataset strided(const Dataset& data, std::size_t max_n) {
  if (data.size() <= max_n) return data;
  Dataset out;
  const std::size_t stride = (data.size() + max_n - 1) / max_n;
  for (std::size_t i = 0; i < data.size(); i += stride) out.push_back(data[i]);
  return out;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> evaluate(Learner& learner, const Dataset& data, std::size_t n_tasks) {
  return evaluate_impl(learner, data, n_tasks, nullptr, {});
}

double mean_loss(Learner& learner, const Dataset& data) {
  NoGradGuard guard;
  double total = 0.0;
  for_batches(data, [&](const Batch& b) { total += learner.loss(b, {}).item() * static_cast<double>(b.labels.size()); });
  return data.empty() ? 0.0 : total / static_cast<double>(data.size());
}

nlohmann::ordered_json run_report(const RunResult& r, const ExperimentConfig& cfg) {
  ordered_json j;
  j["config_hash"] = run_root(cfg).filename().string();
  j["seed"] = r.seed;
  j["method"] = to_string(cfg.train.method);
  j["steps"] = r.steps;
  j["trainable"] = r.trainable;
  j["task_accuracy"] = r.task_accuracy;
  j["mean_accuracy"] = r.mean_accuracy;
  j["initial_train_loss"] = r.initial_train_loss;
  j["final_train_loss"] = r.final_train_loss;
  if (r.usage) j["mean_rho"] = r.mean_rho;
  return j;
}

RunResult train_learner(Learner& learner, const ExperimentConfig& cfg, const SplitData& data, std::uint64_t seed,
                        const std::filesystem::path& out) {
  const Dataset& train = data.train;
  if (train.empty()) throw std::invalid_argument("train: empty training split");
  const std::size_t n_tasks = cfg.data.tasks.size();
  const TrainConfig& tc = cfg.train;
  const std::size_t micro_per_epoch = (train.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t steps_per_epoch = (micro_per_epoch + tc.grad_accum - 1) / tc.grad_accum;
  const std::size_t total_steps = tc.epochs * steps_per_epoch;

  const auto routed = learner.routed_layers();
  const bool routing = !routed.empty() && learner.routers()[routed.front()].has_value();
  const std::size_t experts = cfg.routing.router.experts();
  for (auto l : routed)
    if (learner.routers()[l])
      learner.routers()[l]->config.stop_step =
          static_cast<std::size_t>(std::llround(cfg.routing.stop_fraction * static_cast<double>(total_steps)));

  RunResult res;
  res.seed = seed;
  res.trainable = learner.trainable_count();
  const Dataset loss_slice = strided(train, 256);
  res.initial_train_loss = mean_loss(learner, loss_slice);

  std::optional<UsageCounter> init_usage;
  if (routing) {
    init_usage.emplace(routed.size(), experts);
    evaluate_impl(learner, data.val, n_tasks, &*init_usage, routed);
  }

  std::ofstream metrics;
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    metrics.open(out / "metrics.jsonl");
    std::ofstream(out / "config.json") << to_json(cfg).dump(2) << '\n';
  }

  AdamW opt(learner.trainable(), AdamWOptions{.weight_decay = tc.weight_decay});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng(derive_seed(seed, {5, epoch})).shuffle(order);
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::size_t m_lo = s * tc.grad_accum, m_hi = std::min(micro_per_epoch, m_lo + tc.grad_accum);
      const double parts = static_cast<double>(m_hi - m_lo);
      std::vector<std::optional<EmaAccumulator>> acc(cfg.model.n_layers);
      std::vector<std::vector<double>> step_usage(routed.size(), std::vector<double>(experts, 0.0));
      std::size_t step_tokens = 0;
      double step_loss = 0.0;
      for (std::size_t m = m_lo; m < m_hi; ++m) {
        const std::size_t lo = m * tc.batch_size, hi = std::min(train.size(), lo + tc.batch_size);
        const Batch batch = make_batch(train, std::span(order).subspan(lo, hi - lo));
        const DropoutContext drop{.training = true, .seed = derive_seed(seed, {6, epoch, m})};
        try {
          const Tensor loss = learner.loss(batch, drop);
          step_loss += loss.item() / parts;
          backward(scale(loss, 1.0 / parts));
        } catch (const NonFiniteError& e) {
          Tape::active().clear();
          throw TrainingDiverged("training diverged at step " + std::to_string(step) + " (epoch " +
                                 std::to_string(epoch) + "): " + e.what());
        }
        if (routing) {
          const auto dec = learner.last_decisions();
          const auto inputs = learner.last_block_inputs();
          for (std::size_t j = 0; j < routed.size(); ++j) {
            const std::size_t l = routed[j];
            if (!acc[l]) acc[l].emplace(*learner.routers()[l]);
            acc[l]->add(*dec[l], inputs[l]);
            const Tensor& mm = dec[l]->m;
            for (std::size_t t = 0; t < mm.rows(); ++t)
              for (std::size_t e = 0; e < experts; ++e) step_usage[j][e] += mm.at(t, e) > 0.0;
          }
          step_tokens += batch.seqs.rows();
        }
      }
      if (!std::isfinite(step_loss))
        throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": loss is not finite");
      const double lr = warmup_cosine_lr(tc.lr, step, total_steps, tc.warmup_ratio);
      opt.step(lr);
      opt.zero_grad();
      for (auto l : routed)
        if (acc[l]) acc[l]->apply(*learner.routers()[l], step);
      res.step_losses.push_back(step_loss);

      if (metrics.is_open()) {
        ordered_json j;
        j["step"] = step;
        j["loss"] = step_loss;
        j["lr"] = lr;
        if (routing) {
          for (auto& row : step_usage)
            for (auto& v : row) v /= static_cast<double>(step_tokens);
          j["usage"] = step_usage;
        }
        metrics << j.dump() << '\n';
      }
    }
  }
  res.steps = step;

  std::optional<UsageCounter> final_usage;
  if (routing) final_usage.emplace(routed.size(), experts);
  res.task_accuracy = evaluate_impl(learner, data.val, n_tasks, final_usage ? &*final_usage : nullptr, routed);
  res.mean_accuracy = mean_of(res.task_accuracy);
  res.final_train_loss = mean_loss(learner, loss_slice);
  if (routing) {
    res.usage = usage_report(*init_usage, *final_usage);
    res.mean_rho = mean_of(res.usage->rho);
  }

  if (!out.empty()) {
    learner.save_checkpoint(out / "checkpoint");
    std::ofstream(out / "report.json") << run_report(res, cfg).dump(2) << '\n';
    if (res.usage) res.usage->write_csv(out / "usage.csv");
    if (routing && tc.dump_embeddings) {
      std::ofstream emb(out / "embeddings.csv");
      emb << "layer,token_index,expert";
      for (std::size_t j = 0; j < cfg.model.d_model; ++j) emb << ",h" << j;
      emb << '\n';
      const Dataset few(data.val.begin(), data.val.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(16, data.val.size())));
      std::vector<std::size_t> idx(few.size());
      std::iota(idx.begin(), idx.end(), 0);
      learner.predict(make_batch(few, idx));
      const auto dec = learner.last_decisions();
      const auto inputs = learner.last_block_inputs();
      for (auto l : routed) append_embeddings_csv(emb, l, 0, inputs[l], *dec[l]);
    }
    res.dir = out;
  }
  return res;
}

RunResult run_pipeline(const ExperimentConfig& cfg, const Backbone& backbone, const SplitData& data, std::uint64_t seed,
                       const std::filesystem::path& out) {
  Learner learner(cfg, backbone, seed);
  learner.init_centers(data.train);
  return train_learner(learner, cfg, data, seed, out);
}

std::filesystem::path run_root(const ExperimentConfig& cfg) {
  ordered_json j = to_json(cfg);
  j.erase("seeds");
  j.erase("out_dir");
  return std::filesystem::path(cfg.out_dir) / config_hash(j);
}

std::vector<ArmComparison> shared_vs_specific(const ExperimentConfig& cfg, const Backbone& backbone,
                                              const SplitData& data) {
  ExperimentConfig c = cfg;
  c.train.method = Method::Peft;
  std::vector<ArmComparison> out;
  for (auto seed : c.seeds) {
    Learner specific(c, backbone, seed, c.train.partition);
    Learner shared(c, backbone, seed);
    ArmComparison row{seed, {}, {}, shared.trainable_count(), specific.trainable_count()};
    row.shared = train_learner(shared, c, data, seed).task_accuracy;
    row.specific = train_learner(specific, c, data, seed).task_accuracy;
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"similarity", "tau",         "beta",        "update_every",
                                             "stop_fraction", "shared",   "rank",        "combination",
                                             "permutation", "routed_layers", "kmeans_samples", "topk"};
  return axes;
}

namespace {

std::size_t parse_count(const std::string& axis, const std::string& v) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("ablate " + axis + ": '" + v + "' is not a count");
  return out;
}

double parse_real(const std::string& axis, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError("ablate " + axis + ": '" + v + "' is not a number");
  return out;
}

std::vector<std::string> split_plus(const std::string& v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto end = v.find('+', start);
    out.push_back(v.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

std::vector<ProjectionId> parse_projections(const std::string& axis, const std::string& v) {
  if (v == "none") return {};
  std::vector<ProjectionId> out;
  try {
    for (const auto& s : split_plus(v)) out.push_back(projection_from_string(s));
  } catch (const std::exception& e) {
    throw ConfigError("ablate " + axis + ": " + e.what());
  }
  return out;
}

}  // namespace

ExperimentConfig apply_ablation(const ExperimentConfig& base, const std::string& axis, const std::string& value) {
  ExperimentConfig c = base;
  RouterConfig& r = c.routing.router;
  try {
    if (axis == "similarity") {
      r.similarity = similarity_from_string(value);
    } else if (axis == "tau") {
      r.tau = parse_real(axis, value);
    } else if (axis == "beta") {
      r.beta = parse_real(axis, value);
    } else if (axis == "update_every") {
      r.update_every = parse_count(axis, value);
    } else if (axis == "stop_fraction") {
      c.routing.stop_fraction = parse_real(axis, value);
    } else if (axis == "shared") {
      r.shared = parse_projections(axis, value);
    } else if (axis == "rank") {
      c.adapter.rank = parse_count(axis, value);
    } else if (axis == "combination") {
      r.routed = parse_projections(axis, value);
      r.top_k = std::min(r.top_k, std::max<std::size_t>(1, r.routed.size()));
      r.permutation.clear();
      r.task_experts.clear();
    } else if (axis == "permutation") {
      r.permutation.clear();
      if (value != "none")
        for (const auto& s : split_plus(value)) r.permutation.push_back(parse_count(axis, s));
    } else if (axis == "routed_layers") {
      c.routing.routed_layers = parse_count(axis, value);
    } else if (axis == "kmeans_samples") {
      c.routing.kmeans_samples = parse_count(axis, value);
    } else if (axis == "topk") {
      r.top_k = parse_count(axis, value);
    } else {
      throw ConfigError("unknown ablation axis '" + axis + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("ablate " + axis + ": " + e.what());
  }
  c.train.method = Method::MonkeyJump;
  c.validate();
  return c;
}

std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const Backbone& backbone, const SplitData& data,
                                const std::string& axis, const std::vector<std::string>& values) {
  if (std::find(ablation_axes().begin(), ablation_axes().end(), axis) == ablation_axes().end())
    throw ConfigError("unknown ablation axis '" + axis + "'");
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) configs.push_back(apply_ablation(cfg, axis, v));
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (auto seed : cfg.seeds) {
      const RunResult r = run_pipeline(configs[i], backbone, data, seed);
      rows.push_back({values[i], seed, r.task_accuracy, r.mean_rho});
    }
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& axis, std::size_t n_tasks,
                        const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "axis,value,seed";
  for (std::size_t t = 0; t < n_tasks; ++t) out << ",acc_task" << t;
  out << ",mean_rho\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << axis << ',' << r.value << ',' << r.seed;
    for (auto a : r.task_accuracy) out << ',' << a;
    out << ',' << r.mean_rho << '\n';
  }
}

}  // namespace mjlab
