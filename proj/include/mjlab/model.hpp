#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mjlab/tensor.hpp"

namespace mjlab {

/// The seven linear projections of a block, in their stable ordinal order.
enum class ProjectionId : std::uint8_t { q, k, v, o, up, gate, down };

inline constexpr std::array<ProjectionId, 7> kAllProjections = {
    ProjectionId::q,  ProjectionId::k,    ProjectionId::v,   ProjectionId::o,
    ProjectionId::up, ProjectionId::gate, ProjectionId::down};

inline constexpr std::size_t ordinal(ProjectionId p) { return static_cast<std::size_t>(p); }
std::string_view to_string(ProjectionId p);
ProjectionId projection_from_string(std::string_view name);

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 64;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct ProjectionShape {
  std::size_t d_out;
  std::size_t d_in;
};
ProjectionShape projection_shape(const ModelConfig& cfg, ProjectionId p);

/// Sequences packed row-wise: sequence s occupies rows [offsets[s], offsets[s+1]).
struct PackedSequences {
  std::vector<int> tokens;
  std::vector<std::size_t> offsets{0};

  static PackedSequences pack(const std::vector<std::vector<int>>& seqs);
  std::size_t count() const { return offsets.size() - 1; }
  std::size_t rows() const { return tokens.size(); }
  std::size_t length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
  std::vector<std::size_t> last_rows() const;
  /// Sequence index owning each row.
  std::vector<std::size_t> row_owner() const;
};

/// Per-(block, projection) callbacks through which adapters attach.
class ProjectionHooks {
 public:
  virtual ~ProjectionHooks() = default;
  /// Residual stream entering `layer`, before any of its projections.
  virtual void begin_block(std::size_t layer, const Tensor& block_input, const PackedSequences& seqs) {
    (void)layer, (void)block_input, (void)seqs;
  }
  /// Additive term for projection p given its input and frozen output W x.
  virtual std::optional<Tensor> contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                             const Tensor& frozen_output) = 0;
};

struct BlockWeights {
  std::array<Tensor, 7> proj;  // indexed by ordinal(ProjectionId), each d_out x d_in
  Tensor ln1_gain, ln1_offset, ln2_gain, ln2_offset;

  const Tensor& weight(ProjectionId p) const { return proj[ordinal(p)]; }
};

struct ForwardResult {
  /// hidden[l] is the residual stream entering block l; hidden[n_layers] is the last block's output.
  std::vector<Tensor> hidden;
  Tensor final_hidden;  // after the final layer norm
  Tensor logits;        // next-token logits when requested
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainReport {
  double initial_heldout_ppl = 0.0;
  double final_heldout_ppl = 0.0;
  std::vector<double> losses;
};

/// Small pre-LN causal Transformer with learned absolute positions and a
/// gated (SiLU) feed-forward.
class Backbone {
 public:
  Backbone(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const BlockWeights& block(std::size_t l) const { return blocks_.at(l); }

  ForwardResult forward(const PackedSequences& batch, ProjectionHooks* hooks = nullptr,
                        bool want_logits = false) const;

  /// Drops gradient tracking on every weight.
  void freeze();
  bool frozen() const { return frozen_; }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  Backbone clone() const;

  /// Directory of tensor snapshots plus manifest.json.
  void save(const std::filesystem::path& dir) const;
  static Backbone load(const std::filesystem::path& dir);

 private:
  Tensor block_forward(std::size_t l, const Tensor& h, const PackedSequences& batch,
                       ProjectionHooks* hooks) const;
  Tensor project(std::size_t l, ProjectionId p, const Tensor& x, ProjectionHooks* hooks) const;

  ModelConfig cfg_;
  Tensor tok_emb_, pos_emb_;
  std::vector<BlockWeights> blocks_;
  Tensor lnf_gain_, lnf_offset_, lm_head_;
  bool frozen_ = false;
};

/// Next-token pretraining on the given sequences, then freeze. The last tenth
/// of the corpus is held out for perplexity.
PretrainReport pretrain_backbone(Backbone& model, const std::vector<std::vector<int>>& corpus,
                                 std::size_t steps, double lr, std::size_t batch_size,
                                 std::uint64_t seed);

/// exp(mean next-token cross-entropy) over the sequences.
double perplexity(const Backbone& model, const std::vector<std::vector<int>>& seqs);

}  // namespace mjlab
