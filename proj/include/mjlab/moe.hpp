#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "mjlab/adapters.hpp"
#include "mjlab/model.hpp"

namespace mjlab {

struct MoEConfig {
  std::size_t experts = 4;
  std::size_t top_k = 2;

  void validate() const;
  bool operator==(const MoEConfig&) const = default;
};

/// Learned-router mixture of adapters: N experts of the same variant per
/// targeted projection and one trainable router (N x d_model) per block.
class MoEAdapterBank {
 public:
  MoEAdapterBank(const ModelConfig& cfg, AdapterVariant variant, std::vector<ProjectionId> targets,
                 MoEConfig moe, std::uint64_t seed);

  const MoEConfig& moe() const { return moe_; }
  const AdapterVariant& variant() const { return variant_; }
  std::size_t layers() const { return routers_.size(); }
  bool has(std::size_t layer, ProjectionId p) const { return experts_.contains({layer, p}); }
  const Adapter& expert(std::size_t layer, ProjectionId p, std::size_t n) const { return experts_.at({layer, p}).at(n); }
  Adapter& expert(std::size_t layer, ProjectionId p, std::size_t n) { return experts_.at({layer, p}).at(n); }
  const Tensor& router(std::size_t layer) const { return routers_.at(layer); }
  Tensor& router(std::size_t layer) { return routers_.at(layer); }

  /// softmax(H R^T) restricted to each row's top-k logits (renormalised), T x N.
  Tensor gates(std::size_t layer, const Tensor& hidden) const;
  /// sum_n g[:, n] * expert_n(x)
  Tensor forward(std::size_t layer, ProjectionId p, const Tensor& x, const Tensor& frozen_output,
                 const Tensor& gates, const DropoutContext& drop = {}) const;

  std::vector<Tensor> trainable() const;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::size_t router_count() const;

 private:
  AdapterVariant variant_;
  MoEConfig moe_;
  std::map<AdapterKey, std::vector<Adapter>> experts_;
  std::vector<Tensor> routers_;
};

std::size_t count_trainable(const MoEAdapterBank& bank);

class MoEHooks : public ProjectionHooks {
 public:
  explicit MoEHooks(const MoEAdapterBank& bank, DropoutContext drop = {}) : bank_(bank), drop_(drop), gates_(bank.layers()) {}

  void begin_block(std::size_t layer, const Tensor& block_input, const PackedSequences& seqs) override;
  std::optional<Tensor> contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                     const Tensor& frozen_output) override;
  const Tensor& gates(std::size_t layer) const { return gates_.at(layer); }

 private:
  const MoEAdapterBank& bank_;
  DropoutContext drop_;
  std::vector<Tensor> gates_;
};

}  // namespace mjlab
