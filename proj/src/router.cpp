#include "mjlab/router.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>

#include <json.hpp>

#include "mjlab/kernels.hpp"
#include "mjlab/rng.hpp"
#include "mjlab/snapshot.hpp"

namespace mjlab {

namespace {
constexpr double kCenterNormFloor = 1e-12;
}

std::string_view to_string(Similarity s) {
  switch (s) {
    case Similarity::Cosine:
      return "cosine";
    case Similarity::Dot:
      return "dot";
    case Similarity::Euclidean:
      return "euclidean";
    case Similarity::L1:
      return "l1";
  }
  return "?";
}

std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::Token:
      return "token";
    case Granularity::Sequence:
      return "sequence";
    case Granularity::Task:
      return "task";
  }
  return "?";
}

Similarity similarity_from_string(std::string_view name) {
  for (auto s : {Similarity::Cosine, Similarity::Dot, Similarity::Euclidean, Similarity::L1})
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown similarity '" + std::string(name) + "'");
}

Granularity granularity_from_string(std::string_view name) {
  for (auto g : {Granularity::Token, Granularity::Sequence, Granularity::Task})
    if (to_string(g) == name) return g;
  throw std::invalid_argument("unknown granularity '" + std::string(name) + "'");
}

std::vector<std::size_t> RouterConfig::experts_for_task(int task) const {
  if (task < 0) throw std::invalid_argument("router: negative task id");
  const auto t = static_cast<std::size_t>(task);
  if (!task_experts.empty()) {
    if (t >= task_experts.size()) throw std::invalid_argument("router: no experts mapped for task " + std::to_string(task));
    return task_experts[t];
  }
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < top_k; ++j) out.push_back((t + j) % experts());
  return out;
}

void RouterConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("router: tau must be positive");
  if (routed.empty()) throw std::invalid_argument("router: no routed projections");
  if (top_k < 1 || top_k > routed.size())
    throw std::invalid_argument("router: top_k must lie in [1, " + std::to_string(routed.size()) + "]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("router: beta must lie in [0, 1]");
  if (update_every < 1) throw std::invalid_argument("router: update_every must be positive");
  std::set<ProjectionId> seen(routed.begin(), routed.end());
  if (seen.size() != routed.size()) throw std::invalid_argument("router: duplicate routed projection");
  for (auto p : shared)
    if (seen.contains(p)) throw std::invalid_argument("router: projection both routed and shared");
  if (!permutation.empty()) {
    std::vector<std::size_t> sorted = permutation;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> iota(routed.size());
    std::iota(iota.begin(), iota.end(), 0);
    if (sorted != iota) throw std::invalid_argument("router: permutation is not a bijection over routed experts");
  }
  for (const auto& set : task_experts) {
    if (set.size() != top_k) throw std::invalid_argument("router: each task must map to exactly top_k experts");
    for (auto e : set)
      if (e >= routed.size()) throw std::invalid_argument("router: task expert index out of range");
  }
}

RouterState::RouterState(RouterConfig cfg, Tensor c) : config(std::move(cfg)), centers(std::move(c)) {
  config.validate();
  if (centers.rank() != 2 || centers.rows() != config.experts())
    throw ShapeError("router: centers must be experts x d, got " + shape_str(centers.shape()));
  centers.set_requires_grad(false);
}

// ---------------------------------------------------------------------------
// Routing

std::vector<std::size_t> top_k_indices(std::span<const double> probs, std::size_t k) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

namespace {

/// Centers reordered so row i is the center of routed expert i.
Tensor permuted_centers(const RouterState& state, bool normalise) {
  const std::size_t e = state.config.experts(), d = state.centers.cols();
  std::vector<double> out(e * d);
  for (std::size_t i = 0; i < e; ++i) {
    const std::size_t c = state.config.center_of(i);
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += state.centers.at(c, j) * state.centers.at(c, j);
    norm = normalise ? std::max(std::sqrt(norm), kCenterNormFloor) : 1.0;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = state.centers.at(c, j) / norm;
  }
  return Tensor::matrix(e, d, std::move(out));
}

Tensor logits(const RouterState& state, const Tensor& hidden) {
  const double inv_tau = 1.0 / state.config.tau;
  switch (state.config.similarity) {
    case Similarity::Cosine:
      return scale(matmul_nt(normalize_rows(hidden), permuted_centers(state, true)), inv_tau);
    case Similarity::Dot:
      return scale(matmul_nt(hidden, permuted_centers(state, false)), inv_tau);
    case Similarity::Euclidean:
      return scale(neg_distance(hidden, permuted_centers(state, false), DistanceKind::L2), inv_tau);
    case Similarity::L1:
      return scale(neg_distance(hidden, permuted_centers(state, false), DistanceKind::L1), inv_tau);
  }
  throw std::logic_error("unreachable similarity");
}

RoutingDecision finish(const Tensor& z, std::size_t top_k,
                       const std::vector<std::vector<std::size_t>>* forced = nullptr) {
  RoutingDecision dec;
  dec.z = z;
  dec.p = softmax(z, 1);
  const std::size_t t = z.rows(), e = z.cols();
  std::vector<double> mask(t * e, 0.0);
  dec.selected.resize(t);
  for (std::size_t i = 0; i < t; ++i) {
    dec.selected[i] = forced ? (*forced)[i] : top_k_indices(dec.p.data().subspan(i * e, e), top_k);
    for (auto j : dec.selected[i]) mask[i * e + j] = 1.0;
  }
  dec.m = mul(dec.p, Tensor::matrix(t, e, std::move(mask)));
  return dec;
}

RoutingDecision broadcast(const RoutingDecision& per_seq, const PackedSequences& seqs) {
  const auto owner = seqs.row_owner();
  RoutingDecision out;
  out.z = index_rows(per_seq.z, owner);
  out.p = index_rows(per_seq.p, owner);
  out.m = index_rows(per_seq.m, owner);
  for (auto s : owner) out.selected.push_back(per_seq.selected[s]);
  return out;
}

}  // namespace

RoutingDecision route(const RouterState& state, const Tensor& hidden, const RouteContext& ctx) {
  const RouterConfig& cfg = state.config;
  if (hidden.rank() != 2 || hidden.cols() != state.centers.cols())
    throw ShapeError("route: hidden width " + shape_str(hidden.shape()) + " does not match centers " +
                     shape_str(state.centers.shape()));
  switch (cfg.granularity) {
    case Granularity::Token:
      return finish(logits(state, hidden), cfg.top_k);
    case Granularity::Sequence: {
      if (ctx.sequences == nullptr || ctx.sequences->rows() != hidden.rows())
        throw std::invalid_argument("route: sequence granularity needs the packed sequence layout");
      const Tensor last = index_rows(hidden, ctx.sequences->last_rows());
      return broadcast(finish(logits(state, last), cfg.top_k), *ctx.sequences);
    }
    case Granularity::Task: {
      if (ctx.sequences == nullptr || ctx.sequence_tasks.size() != ctx.sequences->count() ||
          ctx.sequences->rows() != hidden.rows())
        throw std::invalid_argument("route: task granularity needs one task id per sequence");
      const std::size_t n = ctx.sequences->count(), e = cfg.experts();
      std::vector<double> z(n * e, 0.0);
      std::vector<std::vector<std::size_t>> chosen(n);
      for (std::size_t s = 0; s < n; ++s) {
        chosen[s] = cfg.experts_for_task(ctx.sequence_tasks[s]);
        for (auto j : chosen[s]) z[s * e + j] = 1.0 / cfg.tau;
      }
      return broadcast(finish(Tensor::matrix(n, e, std::move(z)), cfg.top_k, &chosen), *ctx.sequences);
    }
  }
  throw std::logic_error("unreachable granularity");
}

// ---------------------------------------------------------------------------
// EMA

bool ema_scheduled(const RouterConfig& cfg, std::size_t step) {
  return step % cfg.update_every == 0 && step < cfg.stop_step;
}

EmaAccumulator::EmaAccumulator(const RouterState& state)
    : d_(state.centers.cols()),
      sums_(state.config.experts(), std::vector<double>(d_, 0.0)),
      counts_(state.config.experts(), 0) {}

void EmaAccumulator::add(const RoutingDecision& decision, const Tensor& hidden) {
  const std::size_t e = sums_.size();
  if (decision.m.cols() != e || decision.m.rows() != hidden.rows() || hidden.cols() != d_)
    throw ShapeError("ema: decision does not match hidden states");
  for (std::size_t t = 0; t < hidden.rows(); ++t) {
    for (std::size_t i = 0; i < e; ++i) {
      if (decision.m.at(t, i) <= 0.0) continue;
      ++counts_[i];
      for (std::size_t j = 0; j < d_; ++j) sums_[i][j] += hidden.at(t, j);
    }
  }
}

bool EmaAccumulator::apply(RouterState& state, std::size_t step) const {
  if (!ema_scheduled(state.config, step)) return false;
  const double beta = state.config.beta;
  auto c = state.centers.mutable_data();
  for (std::size_t i = 0; i < sums_.size(); ++i) {
    if (counts_[i] == 0) continue;
    const std::size_t row = state.config.center_of(i);
    const double inv = 1.0 / static_cast<double>(counts_[i]);
    for (std::size_t j = 0; j < d_; ++j) {
      c[row * d_ + j] = beta * c[row * d_ + j] + (1.0 - beta) * (sums_[i][j] * inv);
    }
  }
  return true;
}

void EmaAccumulator::reset() {
  for (auto& s : sums_) std::fill(s.begin(), s.end(), 0.0);
  std::fill(counts_.begin(), counts_.end(), 0);
}

bool ema_update(RouterState& state, const RoutingDecision& decision, const Tensor& hidden, std::size_t step) {
  EmaAccumulator acc(state);
  acc.add(decision, hidden);
  return acc.apply(state, step);
}

// ---------------------------------------------------------------------------
// k-means

namespace {

std::vector<double> unit_rows(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += out[i * d + j] * out[i * d + j];
    const double norm = std::sqrt(s);
    if (norm > 0.0)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= norm;
  }
  return out;
}

void normalise(std::span<double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  const double norm = std::sqrt(s);
  if (norm > 0.0)
    for (double& x : v) x /= norm;
}

}  // namespace

KMeansResult kmeans_init(const Tensor& samples, std::size_t k, std::size_t iters, std::uint64_t seed) {
  if (samples.rank() != 2) throw ShapeError("kmeans: samples must be a matrix");
  const std::size_t n = samples.rows(), d = samples.cols();
  if (k == 0) throw std::invalid_argument("kmeans: need at least one center");
  if (n < k) throw std::invalid_argument("kmeans: " + std::to_string(n) + " samples for " + std::to_string(k) + " centers");
  const std::vector<double> x = unit_rows(samples);
  Rng rng(seed);

  // k-means++ seeding with distance 1 - cos.
  std::vector<double> centers(k * d);
  std::vector<std::size_t> assign(n, 0);
  std::vector<double> best(n);
  const std::size_t first = rng.index(n);
  std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(first * d), d, centers.begin());
  std::vector<double> dist(n);
  for (std::size_t c = 1; c < k; ++c) {
    kernels::nearest_center(x, std::span<const double>(centers).first(c * d), n, c, d, assign, best);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::max(0.0, 1.0 - best[i]);
      total += dist[i];
    }
    auto dst = std::span<double>(centers).subspan(c * d, d);
    if (total <= 0.0) {
      // Every sample coincides with a chosen center: jitter a random sample.
      const std::size_t pick = rng.index(n);
      for (std::size_t j = 0; j < d; ++j) dst[j] = x[pick * d + j] + 1e-3 * rng.normal();
      normalise(dst);
      continue;
    }
    double u = rng.uniform(0.0, total);
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (u < dist[i]) {
        pick = i;
        break;
      }
      u -= dist[i];
    }
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(pick * d), d, dst.begin());
  }

  KMeansResult res;
  std::vector<std::size_t> prev;
  for (std::size_t it = 0; it <= iters; ++it) {
    kernels::nearest_center(x, centers, n, k, d, assign, best);
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) obj += 1.0 - best[i];
    res.objective.push_back(obj);
    if (assign == prev || it == iters) break;
    prev = assign;
    std::vector<double> sums(k * d, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i] * d + j] += x[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto row = std::span<double>(sums).subspan(c * d, d);
      double s = 0.0;
      for (double v : row) s += v * v;
      if (s == 0.0) continue;
      normalise(row);
      std::copy(row.begin(), row.end(), centers.begin() + static_cast<std::ptrdiff_t>(c * d));
    }
  }
  res.centers = Tensor::matrix(k, d, std::move(centers));
  res.assignment = std::move(assign);
  return res;
}

// ---------------------------------------------------------------------------
// Usage

UsageCounter::UsageCounter(std::size_t n_layers, std::size_t experts)
    : counts_(n_layers, std::vector<std::size_t>(experts, 0)), tokens_(n_layers, 0) {}

void UsageCounter::record(std::size_t layer, const RoutingDecision& decision) {
  auto& row = counts_.at(layer);
  if (decision.m.cols() != row.size()) throw ShapeError("usage: expert count mismatch");
  for (std::size_t t = 0; t < decision.m.rows(); ++t)
    for (std::size_t e = 0; e < row.size(); ++e)
      if (decision.m.at(t, e) > 0.0) ++row[e];
  tokens_[layer] += decision.m.rows();
}

std::vector<std::vector<double>> UsageCounter::fractions() const {
  std::vector<std::vector<double>> out;
  for (std::size_t l = 0; l < counts_.size(); ++l) {
    std::vector<double> row(counts_[l].size(), 0.0);
    if (tokens_[l] > 0)
      for (std::size_t e = 0; e < row.size(); ++e)
        row[e] = static_cast<double>(counts_[l][e]) / static_cast<double>(tokens_[l]);
    out.push_back(std::move(row));
  }
  return out;
}

bool UsageCounter::empty() const {
  return std::all_of(tokens_.begin(), tokens_.end(), [](std::size_t t) { return t == 0; });
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("pearson: length mismatch");
  if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

UsageStats usage_report(const UsageCounter& init, const UsageCounter& final) {
  if (init.empty() && final.empty()) throw std::invalid_argument("usage_report: no recorded decisions");
  UsageStats stats{init.fractions(), final.fractions(), {}};
  if (stats.init.size() != stats.final.size()) throw ShapeError("usage_report: layer count mismatch");
  const std::size_t experts = stats.init.empty() ? 0 : stats.init.front().size();
  for (std::size_t e = 0; e < experts; ++e) {
    std::vector<double> a, b;
    for (std::size_t l = 0; l < stats.init.size(); ++l) {
      a.push_back(stats.init[l][e]);
      b.push_back(stats.final[l][e]);
    }
    stats.rho.push_back(pearson(a, b));
  }
  return stats;
}

void UsageStats::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "layer,expert,phase,fraction,rho\n";
  out.precision(17);
  for (const auto* phase : {&init, &final}) {
    const char* name = phase == &init ? "init" : "final";
    for (std::size_t l = 0; l < phase->size(); ++l)
      for (std::size_t e = 0; e < (*phase)[l].size(); ++e)
        out << l << ',' << e << ',' << name << ',' << (*phase)[l][e] << ',' << rho.at(e) << '\n';
  }
}

void append_embeddings_csv(std::ostream& out, std::size_t layer, std::size_t first_token_index,
                           const Tensor& hidden, const RoutingDecision& decision) {
  out.precision(17);
  for (std::size_t t = 0; t < hidden.rows(); ++t) {
    out << layer << ',' << first_token_index + t << ',' << decision.selected.at(t).front();
    for (std::size_t j = 0; j < hidden.cols(); ++j) out << ',' << hidden.at(t, j);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Hooks

MonkeyJumpHooks::MonkeyJumpHooks(const AdapterBank& bank, const std::vector<std::optional<RouterState>>& routers,
                                 DropoutContext drop, std::span<const int> sequence_tasks)
    : bank_(bank),
      routers_(routers),
      drop_(drop),
      tasks_(sequence_tasks.begin(), sequence_tasks.end()),
      decisions_(routers.size()),
      inputs_(routers.size()) {}

void MonkeyJumpHooks::begin_block(std::size_t layer, const Tensor& block_input, const PackedSequences& seqs) {
  if (layer >= routers_.size()) return;
  inputs_[layer] = block_input;
  decisions_[layer].reset();
  if (!routers_[layer]) return;
  decisions_[layer] = route(*routers_[layer], block_input, RouteContext{&seqs, tasks_});
}

std::optional<Tensor> MonkeyJumpHooks::contribution(std::size_t layer, ProjectionId p, const Tensor& input,
                                                    const Tensor& frozen_output) {
  if (!bank_.has(layer, p)) return std::nullopt;
  const Adapter& adapter = bank_.at(layer, p);
  const std::uint64_t site = site_id({layer, p});
  if (layer < routers_.size() && routers_[layer]) {
    const auto& routed = routers_[layer]->config.routed;
    if (auto it = std::find(routed.begin(), routed.end(), p); it != routed.end()) {
      const auto col = static_cast<std::size_t>(it - routed.begin());
      return adapter.apply_rows(input, frozen_output, decisions_[layer]->m, col, drop_, site);
    }
  }
  return adapter.apply(input, frozen_output, 1.0, drop_, site);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_routers(const std::vector<std::optional<RouterState>>& routers, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["layers"] = routers.size();
  auto& blocks = manifest["blocks"] = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < routers.size(); ++l) {
    if (!routers[l]) {
      blocks.push_back(nullptr);
      continue;
    }
    const RouterConfig& c = routers[l]->config;
    nlohmann::ordered_json b;
    b["tau"] = c.tau;
    b["top_k"] = c.top_k;
    b["beta"] = c.beta;
    b["update_every"] = c.update_every;
    b["stop_step"] = c.stop_step;
    b["similarity"] = to_string(c.similarity);
    b["granularity"] = to_string(c.granularity);
    for (auto p : c.routed) b["routed"].push_back(to_string(p));
    b["shared"] = nlohmann::ordered_json::array();
    for (auto p : c.shared) b["shared"].push_back(to_string(p));
    b["permutation"] = c.permutation;
    b["task_experts"] = c.task_experts;
    b["centers"] = "centers" + std::to_string(l) + ".bin";
    save_tensor(routers[l]->centers, dir / b["centers"].get<std::string>());
    blocks.push_back(std::move(b));
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<std::optional<RouterState>> load_routers(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw SnapshotError("missing router manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  std::vector<std::optional<RouterState>> out;
  for (const auto& b : manifest.at("blocks")) {
    if (b.is_null()) {
      out.emplace_back();
      continue;
    }
    RouterConfig c;
    c.tau = b.at("tau");
    c.top_k = b.at("top_k");
    c.beta = b.at("beta");
    c.update_every = b.at("update_every");
    c.stop_step = b.at("stop_step");
    c.similarity = similarity_from_string(b.at("similarity").get<std::string>());
    c.granularity = granularity_from_string(b.at("granularity").get<std::string>());
    c.routed.clear();
    for (const auto& p : b.at("routed")) c.routed.push_back(projection_from_string(p.get<std::string>()));
    c.shared.clear();
    for (const auto& p : b.at("shared")) c.shared.push_back(projection_from_string(p.get<std::string>()));
    c.permutation = b.at("permutation").get<std::vector<std::size_t>>();
    c.task_experts = b.at("task_experts").get<std::vector<std::vector<std::size_t>>>();
    out.emplace_back(RouterState(std::move(c), load_tensor(dir / b.at("centers").get<std::string>())));
  }
  return out;
}

}  // namespace mjlab
