#include "mjlab/adapters.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mjlab/rng.hpp"
#include "mjlab/snapshot.hpp"

namespace mjlab {

std::string_view to_string(AdapterKind k) {
  switch (k) {
    case AdapterKind::LoRA:
      return "lora";
    case AdapterKind::LoRAFA:
      return "lora_fa";
    case AdapterKind::Propulsion:
      return "propulsion";
  }
  return "?";
}

AdapterKind adapter_kind_from_string(std::string_view name) {
  if (name == "lora") return AdapterKind::LoRA;
  if (name == "lora_fa") return AdapterKind::LoRAFA;
  if (name == "propulsion") return AdapterKind::Propulsion;
  throw std::invalid_argument("unknown adapter variant '" + std::string(name) + "'");
}

void AdapterVariant::validate() const {
  if (rank < 1) throw std::invalid_argument("adapter: rank must be >= 1");
  if (!(alpha > 0.0)) throw std::invalid_argument("adapter: alpha must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("adapter: dropout must lie in [0, 1)");
}

Adapter::Adapter(AdapterVariant variant, ProjectionShape shape, std::uint64_t seed)
    : variant_(variant), shape_(shape) {
  variant_.validate();
  Rng rng(seed);
  const std::size_t r = variant_.rank;
  const double sd = 1.0 / std::sqrt(static_cast<double>(shape_.d_in));
  switch (variant_.kind) {
    case AdapterKind::LoRA:
      a_ = Tensor::from({r, shape_.d_in}, rng.normals(r * shape_.d_in, sd), true);
      b_ = Tensor::zeros({shape_.d_out, r}, true);
      break;
    case AdapterKind::LoRAFA:
      a_ = Tensor::from({r, shape_.d_in}, rng.normals(r * shape_.d_in, sd), false);
      b_ = Tensor::zeros({shape_.d_out, r}, true);
      break;
    case AdapterKind::Propulsion:
      s_ = Tensor::zeros({shape_.d_out}, true);
      break;
  }
}

Tensor Adapter::delta(const Tensor& x, const Tensor& frozen_output, const DropoutContext& drop,
                      std::uint64_t site) const {
  if (variant_.kind == AdapterKind::Propulsion) return mul_rowvec(frozen_output, s_);
  Tensor in = x;
  if (drop.training && variant_.dropout > 0.0) {
    Rng rng(derive_seed(drop.seed, {site}));
    const double keep = 1.0 - variant_.dropout;
    std::vector<double> mask(x.numel());
    for (auto& v : mask) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
    in = mul(x, Tensor::from(x.shape(), std::move(mask)));
  }
  const Tensor low = matmul_nt(in, a_);
  return scale(matmul_nt(low, b_), variant_.alpha / static_cast<double>(variant_.rank));
}

namespace {

void check_io(const Adapter& a, const Tensor& x, const Tensor& frozen_output) {
  const auto [d_out, d_in] = a.shape();
  if (x.rank() != 2 || x.cols() != d_in)
    throw ShapeError("adapter: input width " + shape_str(x.shape()) + " does not match d_in " + std::to_string(d_in));
  if (frozen_output.rank() != 2 || frozen_output.rows() != x.rows() || frozen_output.cols() != d_out)
    throw ShapeError("adapter: frozen output shape " + shape_str(frozen_output.shape()) + " does not match");
}

}  // namespace

Tensor Adapter::apply(const Tensor& x, const Tensor& frozen_output, double m, const DropoutContext& drop,
                      std::uint64_t site) const {
  check_io(*this, x, frozen_output);
  if (!(m >= 0.0)) throw std::invalid_argument("adapter: coefficient must be non-negative");
  if (m == 0.0) return Tensor::zeros({x.rows(), shape_.d_out});
  Tensor out = delta(x, frozen_output, drop, site);
  return m == 1.0 ? out : scale(out, m);
}

Tensor Adapter::apply_rows(const Tensor& x, const Tensor& frozen_output, const Tensor& coeff, std::size_t col,
                           const DropoutContext& drop, std::uint64_t site) const {
  check_io(*this, x, frozen_output);
  if (coeff.rank() != 2 || coeff.rows() != x.rows() || col >= coeff.cols())
    throw ShapeError("adapter: coefficient matrix does not match input rows");
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double m = coeff.at(i, col);
    if (m < 0.0) throw std::invalid_argument("adapter: coefficient must be non-negative");
    if (m > 0.0) active.push_back(i);
  }
  if (active.empty()) return Tensor::zeros({x.rows(), shape_.d_out});
  if (active.size() == x.rows()) return scale_rows(delta(x, frozen_output, drop, site), coeff, col);
  const Tensor xs = index_rows(x, active);
  const Tensor fs = index_rows(frozen_output, active);
  const Tensor cs = index_rows(coeff, active);
  return scatter_rows(scale_rows(delta(xs, fs, drop, site), cs, col), active, x.rows());
}

std::vector<Tensor> Adapter::trainable() const {
  switch (variant_.kind) {
    case AdapterKind::LoRA:
      return {a_, b_};
    case AdapterKind::LoRAFA:
      return {b_};
    case AdapterKind::Propulsion:
      return {s_};
  }
  return {};
}

std::vector<std::pair<std::string, Tensor>> Adapter::named_tensors() const {
  if (variant_.kind == AdapterKind::Propulsion) return {{"s", s_}};
  return {{"A", a_}, {"B", b_}};
}

std::size_t Adapter::trainable_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.numel();
  return n;
}

Tensor Adapter::delta_weight() const {
  if (variant_.kind == AdapterKind::Propulsion)
    throw std::logic_error("delta_weight: propulsion adapters depend on the frozen weight");
  NoGradGuard guard;
  return scale(matmul(b_, a_), variant_.alpha / static_cast<double>(variant_.rank));
}

// ---------------------------------------------------------------------------

std::uint64_t site_id(AdapterKey key) { return key.layer * 16 + ordinal(key.proj); }

AdapterBank::AdapterBank(const ModelConfig& cfg, AdapterVariant variant, std::vector<ProjectionId> targets,
                         std::uint64_t seed, std::vector<std::size_t> layers)
    : variant_(variant) {
  if (layers.empty())
    for (std::size_t l = 0; l < cfg.n_layers; ++l) layers.push_back(l);
  for (auto l : layers) {
    if (l >= cfg.n_layers) throw std::invalid_argument("adapter bank: layer index out of range");
    for (auto p : targets) {
      const AdapterKey key{l, p};
      if (adapters_.contains(key)) throw std::invalid_argument("adapter bank: duplicate target projection");
      adapters_.emplace(key, Adapter(variant, projection_shape(cfg, p), derive_seed(seed, {site_id(key)})));
    }
  }
}

std::vector<Tensor> AdapterBank::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [key, a] : adapters_)
    for (auto& t : a.trainable()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> AdapterBank::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [key, a] : adapters_) {
    const std::string pre = "layer" + std::to_string(key.layer) + "." + std::string(to_string(key.proj)) + ".";
    for (auto& [name, t] : a.named_tensors()) out.emplace_back(pre + name, t);
  }
  return out;
}

void AdapterBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["variant"] = to_string(variant_.kind);
  manifest["rank"] = variant_.rank;
  manifest["alpha"] = variant_.alpha;
  manifest["dropout"] = variant_.dropout;
  manifest["trainable"] = count_trainable(*this);
  auto& files = manifest["tensors"] = nlohmann::ordered_json::array();
  for (const auto& [name, t] : named_tensors()) {
    save_tensor(t, dir / (name + ".bin"));
    files.push_back(name);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

void AdapterBank::load_tensors(const std::filesystem::path& dir) {
  for (auto& [name, t] : named_tensors()) {
    const Tensor loaded = load_tensor(dir / (name + ".bin"));
    if (loaded.shape() != t.shape()) throw SnapshotError("adapter shape mismatch for " + name);
    Tensor target = t;
    std::copy(loaded.data().begin(), loaded.data().end(), target.mutable_data().begin());
  }
}

std::size_t count_trainable(const AdapterBank& bank) {
  std::size_t n = 0;
  for (const auto& [key, a] : bank.adapters()) n += a.trainable_count();
  return n;
}

std::optional<Tensor> PeftHooks::contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                              const Tensor& frozen_output) {
  if (!bank_.has(layer, p)) return std::nullopt;
  return bank_.at(layer, p).apply(input, frozen_output, 1.0, drop_, site_id({layer, p}));
}

}  // namespace mjlab
