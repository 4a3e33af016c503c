#include "mjlab/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mjlab/optim.hpp"
#include "mjlab/rng.hpp"
#include "mjlab/snapshot.hpp"

namespace mjlab {

namespace {

constexpr std::array<std::string_view, 7> kProjectionNames = {"q", "k", "v", "o", "up", "gate", "down"};

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  return Tensor::from(std::move(shape), rng.normals(n, stddev), true);
}

}  // namespace

std::string_view to_string(ProjectionId p) { return kProjectionNames[ordinal(p)]; }

ProjectionId projection_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kProjectionNames.size(); ++i)
    if (kProjectionNames[i] == name) return static_cast<ProjectionId>(i);
  throw std::invalid_argument("unknown projection '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (d_model == 0 || d_ff == 0 || n_layers == 0 || n_heads == 0 || vocab_size == 0 || max_seq_len == 0)
    throw std::invalid_argument("model: all dimensions must be positive");
  if (d_model % n_heads != 0) throw std::invalid_argument("model: d_model must be divisible by n_heads");
}

ProjectionShape projection_shape(const ModelConfig& cfg, ProjectionId p) {
  switch (p) {
    case ProjectionId::up:
    case ProjectionId::gate:
      return {cfg.d_ff, cfg.d_model};
    case ProjectionId::down:
      return {cfg.d_model, cfg.d_ff};
    default:
      return {cfg.d_model, cfg.d_model};
  }
}

PackedSequences PackedSequences::pack(const std::vector<std::vector<int>>& seqs) {
  PackedSequences out;
  for (const auto& s : seqs) {
    if (s.empty()) throw std::invalid_argument("pack: empty sequence");
    out.tokens.insert(out.tokens.end(), s.begin(), s.end());
    out.offsets.push_back(out.tokens.size());
  }
  return out;
}

std::vector<std::size_t> PackedSequences::last_rows() const {
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < count(); ++s) rows.push_back(offsets[s + 1] - 1);
  return rows;
}

std::vector<std::size_t> PackedSequences::row_owner() const {
  std::vector<std::size_t> owner(rows());
  for (std::size_t s = 0; s < count(); ++s)
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) owner[r] = s;
  return owner;
}

// ---------------------------------------------------------------------------

Backbone::Backbone(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg_.d_model;
  tok_emb_ = gaussian({cfg_.vocab_size, d}, 1.0, rng);
  pos_emb_ = gaussian({cfg_.max_seq_len, d}, 0.2, rng);
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    BlockWeights b;
    for (auto p : kAllProjections) {
      const auto [d_out, d_in] = projection_shape(cfg_, p);
      double sd = 1.0 / std::sqrt(static_cast<double>(d_in));
      if (p == ProjectionId::o || p == ProjectionId::down) sd *= resid_scale;
      b.proj[ordinal(p)] = gaussian({d_out, d_in}, sd, rng);
    }
    b.ln1_gain = Tensor::full({d}, 1.0);
    b.ln1_offset = Tensor::zeros({d});
    b.ln2_gain = Tensor::full({d}, 1.0);
    b.ln2_offset = Tensor::zeros({d});
    for (auto* t : {&b.ln1_gain, &b.ln1_offset, &b.ln2_gain, &b.ln2_offset}) t->set_requires_grad(true);
    blocks_.push_back(std::move(b));
  }
  lnf_gain_ = Tensor::full({d}, 1.0);
  lnf_gain_.set_requires_grad(true);
  lnf_offset_ = Tensor::zeros({d}, true);
  lm_head_ = gaussian({cfg_.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
}

Tensor Backbone::project(std::size_t l, ProjectionId p, const Tensor& x, ProjectionHooks* hooks) const {
  Tensor y = matmul_nt(x, blocks_[l].weight(p));
  if (hooks != nullptr) {
    if (auto extra = hooks->contribution(l, p, x, y)) return add(y, *extra);
  }
  return y;
}

Tensor Backbone::block_forward(std::size_t l, const Tensor& h, const PackedSequences& batch,
                               ProjectionHooks* hooks) const {
  const BlockWeights& b = blocks_[l];
  if (hooks != nullptr) hooks->begin_block(l, h, batch);
  const Tensor x = layer_norm(h, b.ln1_gain, b.ln1_offset);
  const Tensor q = project(l, ProjectionId::q, x, hooks);
  const Tensor k = project(l, ProjectionId::k, x, hooks);
  const Tensor v = project(l, ProjectionId::v, x, hooks);
  const Tensor attn = causal_attention(q, k, v, batch.offsets, cfg_.n_heads);
  const Tensor h1 = add(h, project(l, ProjectionId::o, attn, hooks));
  const Tensor x2 = layer_norm(h1, b.ln2_gain, b.ln2_offset);
  const Tensor gate = project(l, ProjectionId::gate, x2, hooks);
  const Tensor up = project(l, ProjectionId::up, x2, hooks);
  const Tensor act = mul(silu(gate), up);
  return add(h1, project(l, ProjectionId::down, act, hooks));
}

ForwardResult Backbone::forward(const PackedSequences& batch, ProjectionHooks* hooks, bool want_logits) const {
  if (batch.count() == 0) throw std::invalid_argument("forward: empty batch");
  std::vector<int> positions(batch.rows());
  for (std::size_t s = 0; s < batch.count(); ++s) {
    if (batch.length(s) > cfg_.max_seq_len)
      throw std::length_error("forward: sequence of length " + std::to_string(batch.length(s)) +
                              " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    for (std::size_t r = batch.offsets[s]; r < batch.offsets[s + 1]; ++r)
      positions[r] = static_cast<int>(r - batch.offsets[s]);
  }
  ForwardResult out;
  Tensor h = add(embedding(tok_emb_, batch.tokens), embedding(pos_emb_, positions));
  out.hidden.push_back(h);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    h = block_forward(l, h, batch, hooks);
    out.hidden.push_back(h);
  }
  out.final_hidden = layer_norm(h, lnf_gain_, lnf_offset_);
  if (want_logits) out.logits = matmul_nt(out.final_hidden, lm_head_);
  return out;
}

void Backbone::freeze() {
  for (auto& [name, t] : named_parameters()) t.set_requires_grad(false);
  frozen_ = true;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    for (auto p : kAllProjections) out.emplace_back(pre + std::string(to_string(p)), blocks_[l].weight(p));
    out.emplace_back(pre + "ln1_gain", blocks_[l].ln1_gain);
    out.emplace_back(pre + "ln1_offset", blocks_[l].ln1_offset);
    out.emplace_back(pre + "ln2_gain", blocks_[l].ln2_gain);
    out.emplace_back(pre + "ln2_offset", blocks_[l].ln2_offset);
  }
  out.emplace_back("lnf_gain", lnf_gain_);
  out.emplace_back("lnf_offset", lnf_offset_);
  out.emplace_back("lm_head", lm_head_);
  return out;
}

std::vector<Tensor> Backbone::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

Backbone Backbone::clone() const {
  Backbone c = *this;
  c.tok_emb_ = tok_emb_.clone();
  c.pos_emb_ = pos_emb_.clone();
  for (auto& b : c.blocks_) {
    for (auto& w : b.proj) w = w.clone();
    for (auto* t : {&b.ln1_gain, &b.ln1_offset, &b.ln2_gain, &b.ln2_offset}) *t = t->clone();
  }
  c.lnf_gain_ = lnf_gain_.clone();
  c.lnf_offset_ = lnf_offset_.clone();
  c.lm_head_ = lm_head_.clone();
  return c;
}

void Backbone::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["config"] = {{"d_model", cfg_.d_model},       {"d_ff", cfg_.d_ff},
                        {"n_layers", cfg_.n_layers},     {"n_heads", cfg_.n_heads},
                        {"vocab_size", cfg_.vocab_size}, {"max_seq_len", cfg_.max_seq_len}};
  manifest["projections"] = kProjectionNames;
  manifest["frozen"] = frozen_;
  auto& files = manifest["tensors"] = nlohmann::ordered_json::array();
  for (const auto& [name, t] : named_parameters()) {
    save_tensor(t, dir / (name + ".bin"));
    files.push_back(name);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Backbone Backbone::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw SnapshotError("missing backbone manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  ModelConfig cfg;
  const auto& c = manifest.at("config");
  cfg.d_model = c.at("d_model");
  cfg.d_ff = c.at("d_ff");
  cfg.n_layers = c.at("n_layers");
  cfg.n_heads = c.at("n_heads");
  cfg.vocab_size = c.at("vocab_size");
  cfg.max_seq_len = c.at("max_seq_len");
  Backbone model(cfg, 0);
  for (auto& [name, t] : model.named_parameters()) {
    const Tensor loaded = load_tensor(dir / (name + ".bin"));
    if (loaded.shape() != t.shape())
      throw SnapshotError("shape mismatch for " + name + " in " + dir.string());
    std::copy(loaded.data().begin(), loaded.data().end(), t.mutable_data().begin());
  }
  if (manifest.at("frozen").get<bool>()) model.freeze();
  return model;
}

// ---------------------------------------------------------------------------

namespace {

struct LmBatch {
  PackedSequences packed;
  std::vector<std::size_t> rows;  // rows with a next token
  std::vector<int> targets;
};

LmBatch lm_batch(const std::vector<const std::vector<int>*>& seqs) {
  LmBatch b;
  std::vector<std::vector<int>> copy;
  for (const auto* s : seqs) copy.push_back(*s);
  b.packed = PackedSequences::pack(copy);
  for (std::size_t s = 0; s < b.packed.count(); ++s) {
    for (std::size_t r = b.packed.offsets[s]; r + 1 < b.packed.offsets[s + 1]; ++r) {
      b.rows.push_back(r);
      b.targets.push_back(b.packed.tokens[r + 1]);
    }
  }
  return b;
}

Tensor lm_loss(const Backbone& model, const LmBatch& b) {
  const ForwardResult fr = model.forward(b.packed, nullptr, true);
  return cross_entropy(index_rows(fr.logits, b.rows), b.targets);
}

}  // namespace

double perplexity(const Backbone& model, const std::vector<std::vector<int>>& seqs) {
  NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t i = 0; i < seqs.size(); i += kChunk) {
    std::vector<const std::vector<int>*> chunk;
    for (std::size_t j = i; j < std::min(seqs.size(), i + kChunk); ++j)
      if (seqs[j].size() > 1) chunk.push_back(&seqs[j]);
    if (chunk.empty()) continue;
    const LmBatch b = lm_batch(chunk);
    total += lm_loss(model, b).item() * static_cast<double>(b.rows.size());
    count += b.rows.size();
  }
  if (count == 0) throw std::invalid_argument("perplexity: no next-token targets");
  return std::exp(total / static_cast<double>(count));
}

PretrainReport pretrain_backbone(Backbone& model, const std::vector<std::vector<int>>& corpus,
                                 std::size_t steps, double lr, std::size_t batch_size, std::uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("pretrain: corpus is empty");
  if (model.frozen()) throw std::logic_error("pretrain: backbone is already frozen");
  std::size_t n_held = std::max<std::size_t>(1, corpus.size() / 10);
  if (n_held >= corpus.size()) n_held = corpus.size() > 1 ? 1 : 0;
  const std::vector<std::vector<int>> train(corpus.begin(), corpus.end() - static_cast<std::ptrdiff_t>(n_held));
  const std::vector<std::vector<int>> held =
      n_held > 0 ? std::vector<std::vector<int>>(corpus.end() - static_cast<std::ptrdiff_t>(n_held), corpus.end())
                 : corpus;

  PretrainReport report;
  report.initial_heldout_ppl = perplexity(model, held);
  AdamW opt(model.parameters(), AdamWOptions{.weight_decay = 0.0});
  Rng rng(derive_seed(seed, {0x707265ULL}));
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<const std::vector<int>*> picks;
    for (std::size_t i = 0; i < batch_size; ++i) picks.push_back(&train[rng.index(train.size())]);
    const LmBatch b = lm_batch(picks);
    if (b.rows.empty()) continue;
    double loss_value = 0.0;
    try {
      const Tensor loss = lm_loss(model, b);
      loss_value = loss.item();
      backward(loss);
    } catch (const NonFiniteError& e) {
      Tape::active().clear();
      throw TrainingDiverged("pretrain diverged at step " + std::to_string(step) + ": " + e.what());
    }
    opt.step(warmup_cosine_lr(lr, step, steps, 0.1));
    opt.zero_grad();
    report.losses.push_back(loss_value);
  }
  model.freeze();
  report.final_heldout_ppl = perplexity(model, held);
  return report;
}

}  // namespace mjlab
