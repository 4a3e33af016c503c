#include "mjlab/moe.hpp"

#include <cmath>

#include "mjlab/rng.hpp"
#include "mjlab/router.hpp"

namespace mjlab {

namespace {
// Added to dropped logits; exp() of it underflows to exactly zero.
constexpr double kDroppedLogit = -1e9;
}  // namespace

void MoEConfig::validate() const {
  if (experts < 1) throw std::invalid_argument("moe: need at least one expert");
  if (top_k < 1 || top_k > experts) throw std::invalid_argument("moe: top_k must lie in [1, experts]");
}

MoEAdapterBank::MoEAdapterBank(const ModelConfig& cfg, AdapterVariant variant, std::vector<ProjectionId> targets,
                               MoEConfig moe, std::uint64_t seed)
    : variant_(variant), moe_(moe) {
  moe_.validate();
  Rng rng(derive_seed(seed, {0x726f75746572ULL}));
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    routers_.push_back(Tensor::from({moe_.experts, cfg.d_model}, rng.normals(moe_.experts * cfg.d_model, sd), true));
    for (auto p : targets) {
      const AdapterKey key{l, p};
      if (experts_.contains(key)) throw std::invalid_argument("moe bank: duplicate target projection");
      auto& list = experts_[key];
      for (std::size_t n = 0; n < moe_.experts; ++n)
        list.emplace_back(variant, projection_shape(cfg, p), derive_seed(seed, {site_id(key), n}));
    }
  }
}

Tensor MoEAdapterBank::gates(std::size_t layer, const Tensor& hidden) const {
  const Tensor logits = matmul_nt(hidden, routers_.at(layer));
  if (moe_.top_k == moe_.experts) return softmax(logits, 1);
  const std::size_t t = logits.rows(), n = logits.cols();
  std::vector<double> bias(t * n, kDroppedLogit);
  for (std::size_t i = 0; i < t; ++i)
    for (auto j : top_k_indices(logits.data().subspan(i * n, n), moe_.top_k)) bias[i * n + j] = 0.0;
  return softmax(add(logits, Tensor::matrix(t, n, std::move(bias))), 1);
}

Tensor MoEAdapterBank::forward(std::size_t layer, ProjectionId p, const Tensor& x, const Tensor& frozen_output,
                               const Tensor& gates, const DropoutContext& drop) const {
  const auto& list = experts_.at({layer, p});
  if (gates.rank() != 2 || gates.rows() != x.rows() || gates.cols() != list.size())
    throw ShapeError("moe: gate matrix does not match input");
  Tensor out;
  for (std::size_t n = 0; n < list.size(); ++n) {
    const Tensor part = list[n].apply_rows(x, frozen_output, gates, n, drop, derive_seed(site_id({layer, p}), {n}));
    out = out.defined() ? add(out, part) : part;
  }
  return out;
}

std::vector<Tensor> MoEAdapterBank::trainable() const {
  std::vector<Tensor> out(routers_.begin(), routers_.end());
  for (const auto& [key, list] : experts_)
    for (const auto& a : list)
      for (auto& t : a.trainable()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> MoEAdapterBank::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < routers_.size(); ++l) out.emplace_back("layer" + std::to_string(l) + ".router", routers_[l]);
  for (const auto& [key, list] : experts_) {
    const std::string pre = "layer" + std::to_string(key.layer) + "." + std::string(to_string(key.proj)) + ".expert";
    for (std::size_t n = 0; n < list.size(); ++n)
      for (auto& [name, t] : list[n].named_tensors()) out.emplace_back(pre + std::to_string(n) + "." + name, t);
  }
  return out;
}

std::size_t MoEAdapterBank::router_count() const {
  std::size_t n = 0;
  for (const auto& r : routers_) n += r.numel();
  return n;
}

std::size_t count_trainable(const MoEAdapterBank& bank) {
  std::size_t n = 0;
  for (const auto& t : bank.trainable()) n += t.numel();
  return n;
}

void MoEHooks::begin_block(std::size_t layer, const Tensor& block_input, const PackedSequences& seqs) {
  (void)seqs;
  if (layer < gates_.size()) gates_[layer] = bank_.gates(layer, block_input);
}

std::optional<Tensor> MoEHooks::contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                             const Tensor& frozen_output) {
  if (!bank_.has(layer, p)) return std::nullopt;
  return bank_.forward(layer, p, input, frozen_output, gates_.at(layer), drop_);
}

}  // namespace mjlab
