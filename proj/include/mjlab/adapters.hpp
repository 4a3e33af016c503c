#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mjlab/model.hpp"
#include "mjlab/tensor.hpp"

namespace mjlab {

enum class AdapterKind { LoRA, LoRAFA, Propulsion };

std::string_view to_string(AdapterKind k);
AdapterKind adapter_kind_from_string(std::string_view name);

struct AdapterVariant {
  AdapterKind kind = AdapterKind::LoRA;
  std::size_t rank = 2;
  double alpha = 5.0;
  double dropout = 0.05;

  void validate() const;
  bool operator==(const AdapterVariant&) const = default;
};

/// Per-forward dropout state. Masks are derived from `seed` and the adapter's
/// position, so a given step always draws the same masks.
struct DropoutContext {
  bool training = false;
  std::uint64_t seed = 0;
};

/// One trainable adapter on a frozen projection.
///   LoRA:       (alpha/r) B A x, A: r x d_in, B: d_out x r, both trainable, B = 0 at init
///   LoRA-FA:    same product with A frozen at its Gaussian init
///   Propulsion: s (.) (W x), s: d_out trainable, s = 0 at init
class Adapter {
 public:
  Adapter(AdapterVariant variant, ProjectionShape shape, std::uint64_t seed);

  const AdapterVariant& variant() const { return variant_; }
  ProjectionShape shape() const { return shape_; }

  /// m * dW x for every row of x. m == 0 yields zeros without touching the tape.
  Tensor apply(const Tensor& x, const Tensor& frozen_output, double m,
               const DropoutContext& drop = {}, std::uint64_t site = 0) const;

  /// Row i is scaled by coeff[i, col]; rows with a zero coefficient are
  /// skipped entirely and contribute exact zeros.
  Tensor apply_rows(const Tensor& x, const Tensor& frozen_output, const Tensor& coeff, std::size_t col,
                    const DropoutContext& drop = {}, std::uint64_t site = 0) const;

  std::vector<Tensor> trainable() const;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::size_t trainable_count() const;

  /// Explicit dW = (alpha/r) B A; LoRA-family only.
  Tensor delta_weight() const;

  // Factor access for tests and checkpoint loading.
  Tensor& lora_a() { return a_; }
  Tensor& lora_b() { return b_; }
  Tensor& scale_vector() { return s_; }

 private:
  Tensor delta(const Tensor& x, const Tensor& frozen_output, const DropoutContext& drop, std::uint64_t site) const;

  AdapterVariant variant_;
  ProjectionShape shape_;
  Tensor a_, b_, s_;
};

struct AdapterKey {
  std::size_t layer;
  ProjectionId proj;
  auto operator<=>(const AdapterKey&) const = default;
};

std::uint64_t site_id(AdapterKey key);

/// One adapter per targeted (layer, projection); nothing elsewhere.
class AdapterBank {
 public:
  AdapterBank() = default;
  /// Adapters on `targets` in each of `layers` (all layers when empty).
  AdapterBank(const ModelConfig& cfg, AdapterVariant variant, std::vector<ProjectionId> targets,
              std::uint64_t seed, std::vector<std::size_t> layers = {});

  bool has(std::size_t layer, ProjectionId p) const { return adapters_.contains({layer, p}); }
  const Adapter& at(std::size_t layer, ProjectionId p) const { return adapters_.at({layer, p}); }
  Adapter& at(std::size_t layer, ProjectionId p) { return adapters_.at({layer, p}); }
  const std::map<AdapterKey, Adapter>& adapters() const { return adapters_; }
  std::size_t size() const { return adapters_.size(); }
  const AdapterVariant& variant() const { return variant_; }

  std::vector<Tensor> trainable() const;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;

  void save(const std::filesystem::path& dir) const;
  /// Overwrites this bank's tensors from a directory written by save().
  void load_tensors(const std::filesystem::path& dir);

 private:
  AdapterVariant variant_;
  std::map<AdapterKey, Adapter> adapters_;
};

std::size_t count_trainable(const AdapterBank& bank);

/// Plain PEFT: every adapter applied to every token with coefficient 1.
class PeftHooks : public ProjectionHooks {
 public:
  explicit PeftHooks(const AdapterBank& bank, DropoutContext drop = {}) : bank_(bank), drop_(drop) {}
  std::optional<Tensor> contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                     const Tensor& frozen_output) override;

 private:
  const AdapterBank& bank_;
  DropoutContext drop_;
};

}  // namespace mjlab
