#include "mjlab/oracle.hpp"

#include <algorithm>
#include <set>

#include "mjlab/linalg.hpp"
#include "mjlab/moe.hpp"
#include "mjlab/router.hpp"
#include "mjlab/rng.hpp"

namespace mjlab::oracle {

namespace {

void check_instance(const RankInstance& inst) {
  if (inst.adapters.empty()) throw std::invalid_argument("rank instance: no adapters");
  const std::size_t d_out = inst.adapters.front().rows(), d_in = inst.adapters.front().cols();
  for (const auto& a : inst.adapters)
    if (a.rank() != 2 || a.rows() != d_out || a.cols() != d_in) throw ShapeError("rank instance: adapter shapes differ");
  if (inst.inputs.rank() != 2 || inst.inputs.rows() != d_in) throw ShapeError("rank instance: inputs must be d_in x T");
}

Tensor column(const Tensor& m, std::size_t j) {
  std::vector<double> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = m.at(i, j);
  return Tensor::matrix(m.rows(), 1, std::move(out));
}

Tensor columns(const Tensor& m, const std::vector<std::size_t>& idx) {
  std::vector<Tensor> cols;
  for (auto j : idx) cols.push_back(column(m, j));
  return linalg::hconcat(cols);
}

Tensor sum_of(const std::vector<Tensor>& mats) {
  Tensor acc = mats.front();
  for (std::size_t i = 1; i < mats.size(); ++i) acc = add(acc, mats[i]);
  return acc;
}

Tensor gaussian(std::size_t r, std::size_t c, Rng& rng) { return Tensor::matrix(r, c, rng.normals(r * c)); }

}  // namespace

RankComparison rank_compare(const RankInstance& inst) {
  NoGradGuard guard;
  check_instance(inst);
  const std::size_t e = inst.adapters.size(), t = inst.inputs.cols();
  if (inst.assignment.size() != t) throw std::invalid_argument("rank_compare: assignment must cover every token");
  RankComparison out;
  out.rank_peft = linalg::numeric_rank(matmul(sum_of(inst.adapters), inst.inputs));
  out.dim_c_all = linalg::numeric_rank(linalg::hconcat(inst.adapters));

  std::vector<Tensor> blocks;
  out.hypothesis_holds = true;
  for (std::size_t k = 0; k < e; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < t; ++j) {
      if (inst.assignment[j] >= e) throw std::invalid_argument("rank_compare: assignment names an unknown expert");
      if (inst.assignment[j] == k) idx.push_back(j);
    }
    if (idx.empty()) {
      out.hypothesis_holds = false;
      continue;
    }
    const Tensor block = matmul(inst.adapters[k], columns(inst.inputs, idx));
    if (linalg::numeric_rank(block) != linalg::numeric_rank(inst.adapters[k])) out.hypothesis_holds = false;
    blocks.push_back(block);
  }
  out.rank_mj = linalg::numeric_rank(linalg::hconcat(blocks));
  return out;
}

SoftBound soft_rank_bound(const RankInstance& inst) {
  NoGradGuard guard;
  check_instance(inst);
  const std::size_t e = inst.adapters.size(), t = inst.inputs.cols(), d_out = inst.adapters.front().rows();
  if (inst.coeff.rank() != 2 || inst.coeff.rows() != t || inst.coeff.cols() != e)
    throw ShapeError("soft_rank_bound: coefficients must be T x E");
  std::vector<double> u(d_out * t, 0.0);
  std::set<std::size_t> active;
  for (std::size_t j = 0; j < t; ++j) {
    const Tensor h = column(inst.inputs, j);
    for (std::size_t k = 0; k < e; ++k) {
      const double m = inst.coeff.at(j, k);
      if (m == 0.0) continue;
      if (m < 0.0) throw std::invalid_argument("soft_rank_bound: negative coefficient");
      active.insert(k);
      const Tensor out = matmul(inst.adapters[k], h);
      for (std::size_t i = 0; i < d_out; ++i) u[i * t + j] += m * out[i];
    }
  }
  SoftBound res;
  res.rank_mj = linalg::numeric_rank(Tensor::matrix(d_out, t, std::move(u)));
  std::vector<Tensor> act;
  for (auto k : active) act.push_back(inst.adapters[k]);
  res.bound = act.empty() ? 0 : linalg::numeric_rank(linalg::hconcat(act));
  res.holds = res.rank_mj <= res.bound;
  return res;
}

RankInstance cancelling_example() {
  RankInstance inst;
  inst.adapters = {Tensor::matrix(2, 2, {1, 0, 0, 0}), Tensor::matrix(2, 2, {0, 0, -1, 0})};
  inst.inputs = Tensor::matrix(2, 2, {1, 1, 0, 0});
  inst.assignment = {0, 1};
  return inst;
}

RankInstance random_hard_instance(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t e = 1 + rng.index(4);
  const std::size_t d = 2 + rng.index(7);
  // A third of the draws make the last adapter cancel its neighbour.
  const bool cancel = e >= 2 && rng.uniform() < 1.0 / 3.0;
  RankInstance inst;
  for (std::size_t k = 0; k < e; ++k) {
    const std::size_t r = 1 + rng.index(std::min<std::size_t>(2, d));
    inst.adapters.push_back(matmul(gaussian(d, r, rng), gaussian(r, d, rng)));
  }
  if (cancel) inst.adapters.back() = scale(inst.adapters[e - 2], -1.0);
  std::vector<double> cols;
  std::vector<std::size_t> assign;
  std::size_t t = 0;
  for (std::size_t k = 0; k < e; ++k) {
    const std::size_t tokens = linalg::numeric_rank(inst.adapters[k]) + rng.index(3);
    for (std::size_t j = 0; j < std::max<std::size_t>(tokens, 1); ++j) {
      assign.push_back(k);
      ++t;
    }
  }
  Rng order(derive_seed(seed, {1}));
  order.shuffle(assign);
  inst.inputs = gaussian(d, t, rng);
  inst.assignment = std::move(assign);
  return inst;
}

RankInstance random_soft_instance(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t e = 1 + rng.index(4);
  const std::size_t d = 2 + rng.index(7);
  const std::size_t k = 1 + rng.index(e);
  const std::size_t t = 2 + rng.index(10);
  RankInstance inst;
  for (std::size_t i = 0; i < e; ++i) {
    const std::size_t r = 1 + rng.index(std::min<std::size_t>(2, d));
    inst.adapters.push_back(matmul(gaussian(d, r, rng), gaussian(r, d, rng)));
  }
  inst.inputs = gaussian(d, t, rng);
  std::vector<double> m(t * e, 0.0);
  for (std::size_t j = 0; j < t; ++j) {
    std::vector<double> logits = rng.normals(e, 2.0);
    Tensor p = softmax(Tensor::from({e}, logits), 0);
    for (auto idx : top_k_indices(p.data(), k)) m[j * e + idx] = p[idx];
  }
  inst.coeff = Tensor::matrix(t, e, std::move(m));
  return inst;
}

SuiteResult expressivity_suite(std::size_t n, std::uint64_t seed) {
  SuiteResult res;
  std::uint64_t draw = 0;
  while (res.instances < n) {
    const RankInstance inst = random_hard_instance(derive_seed(seed, {draw++}));
    const RankComparison cmp = rank_compare(inst);
    if (!cmp.hypothesis_holds) {
      ++res.rejected;
      continue;
    }
    ++res.instances;
    if (cmp.rank_mj < cmp.rank_peft) ++res.violations;
    if (cmp.rank_mj > cmp.rank_peft) ++res.strict;
  }
  return res;
}

SuiteResult soft_bound_suite(std::size_t n, std::uint64_t seed) {
  SuiteResult res;
  for (std::size_t i = 0; i < n; ++i) {
    const SoftBound b = soft_rank_bound(random_soft_instance(derive_seed(seed, {i})));
    ++res.instances;
    if (!b.holds) ++res.violations;
  }
  return res;
}

// ---------------------------------------------------------------------------

std::string method_name(AdapterKind kind, Family family) {
  const char* base = kind == AdapterKind::LoRA ? "LoRA" : kind == AdapterKind::LoRAFA ? "LoRA-FA" : "Propulsion";
  switch (family) {
    case Family::Base:
      return base;
    case Family::MoE:
      return std::string("MoE-") + base;
    case Family::MonkeyJump:
      return std::string("MJ-") + base;
  }
  return base;
}

ComplexityRow complexity_table(AdapterKind kind, Family family, std::size_t e, std::size_t n, std::size_t d,
                               std::size_t r) {
  if (e < 1 || e > kAllProjections.size()) throw std::invalid_argument("complexity: E must lie in [1, 7]");
  if (d == 0 || r == 0 || (family == Family::MoE && n == 0))
    throw std::invalid_argument("complexity: arguments must be positive");
  ComplexityRow row;
  row.method = method_name(kind, family);

  std::size_t per_adapter = 0;
  switch (kind) {
    case AdapterKind::LoRA:
      per_adapter = 2 * d * r;
      break;
    case AdapterKind::LoRAFA:
      per_adapter = d * r;
      break;
    case AdapterKind::Propulsion:
      per_adapter = d;
      break;
  }
  row.trainable = e * per_adapter * (family == Family::MoE ? n : 1);
  row.router_params = family == Family::MoE ? n * d : 0;

  // One block whose seven projections are all d x d.
  const ModelConfig cfg{.d_model = d, .d_ff = d, .n_layers = 1, .n_heads = 1, .vocab_size = 2, .max_seq_len = 2};
  const std::vector<ProjectionId> targets(kAllProjections.begin(), kAllProjections.begin() + static_cast<std::ptrdiff_t>(e));
  const AdapterVariant variant{.kind = kind, .rank = r, .alpha = 5.0, .dropout = 0.0};
  if (family == Family::MoE) {
    const MoEAdapterBank bank(cfg, variant, targets, MoEConfig{.experts = n, .top_k = 1}, 0);
    row.enumerated_router = bank.router_count();
    row.enumerated_trainable = count_trainable(bank) - row.enumerated_router;
  } else {
    const AdapterBank bank(cfg, variant, targets, 0);
    row.enumerated_trainable = count_trainable(bank);
    if (family == Family::MonkeyJump) {
      RouterConfig rc;
      rc.routed = targets;
      rc.shared.clear();
      rc.top_k = 1;
      const RouterState state(rc, Tensor::full({e, d}, 1.0));
      row.enumerated_router = state.centers.requires_grad() ? state.centers.numel() : 0;
    }
  }
  return row;
}

nlohmann::ordered_json rank_report(std::size_t n, std::uint64_t seed) {
  const RankComparison ex = rank_compare(cancelling_example());
  const SuiteResult suite = expressivity_suite(n, seed);
  nlohmann::ordered_json j;
  j["example"] = {{"rank_mj", ex.rank_mj},
                  {"rank_peft", ex.rank_peft},
                  {"dim_c_all", ex.dim_c_all},
                  {"hypothesis_holds", ex.hypothesis_holds}};
  j["randomized"] = {{"instances", suite.instances},
                     {"violations", suite.violations},
                     {"strict", suite.strict},
                     {"rejected", suite.rejected},
                     {"seed", seed}};
  j["pass"] = ex.rank_mj == 2 && ex.rank_peft == 1 && ex.dim_c_all == 2 && suite.violations == 0;
  return j;
}

nlohmann::ordered_json soft_report(std::size_t n, std::uint64_t seed) {
  RankInstance ex = cancelling_example();
  ex.coeff = Tensor::matrix(2, 2, {0.7, 0.0, 0.0, 0.6});
  const SoftBound b = soft_rank_bound(ex);
  const SuiteResult suite = soft_bound_suite(n, seed);
  nlohmann::ordered_json j;
  j["example"] = {{"rank_mj", b.rank_mj}, {"bound", b.bound}, {"holds", b.holds}};
  j["randomized"] = {{"instances", suite.instances}, {"violations", suite.violations}, {"seed", seed}};
  j["pass"] = b.holds && suite.violations == 0;
  return j;
}

nlohmann::ordered_json params_report() {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  bool all = true;
  for (auto kind : {AdapterKind::LoRA, AdapterKind::LoRAFA, AdapterKind::Propulsion}) {
    for (auto family : {Family::Base, Family::MoE, Family::MonkeyJump}) {
      for (std::size_t e = 1; e <= 7; ++e) {
        for (std::size_t r = 1; r <= 4; ++r) {
          for (std::size_t d : {8, 32}) {
            const ComplexityRow row = complexity_table(kind, family, e, 4, d, r);
            all = all && row.matches();
            rows.push_back({{"method", row.method},
                            {"E", e},
                            {"N", family == Family::MoE ? 4 : 1},
                            {"d", d},
                            {"r", r},
                            {"trainable", row.trainable},
                            {"router_params", row.router_params},
                            {"enumerated_trainable", row.enumerated_trainable},
                            {"enumerated_router", row.enumerated_router},
                            {"match", row.matches()}});
          }
        }
      }
    }
  }
  nlohmann::ordered_json j;
  j["rows"] = std::move(rows);
  j["pass"] = all;
  return j;
}

}  // namespace mjlab::oracle
