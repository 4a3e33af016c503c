#include "mjlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "mjlab/rng.hpp"

namespace mjlab {

std::string_view to_string(LabelRule r) {
  switch (r) {
    case LabelRule::Majority:
      return "majority";
    case LabelRule::LastMarker:
      return "last_marker";
    case LabelRule::CountThreshold:
      return "count_threshold";
  }
  return "?";
}

LabelRule label_rule_from_string(std::string_view name) {
  if (name == "majority") return LabelRule::Majority;
  if (name == "last_marker") return LabelRule::LastMarker;
  if (name == "count_threshold") return LabelRule::CountThreshold;
  throw std::invalid_argument("unknown label rule '" + std::string(name) + "'");
}

void TaskSpec::validate(std::size_t vocab_size) const {
  const std::string tag = "task " + std::to_string(task_id) + ": ";
  if (markers.empty()) throw std::invalid_argument(tag + "no marker symbols");
  if (fillers.empty()) throw std::invalid_argument(tag + "no filler symbols");
  if (rule != LabelRule::CountThreshold && markers.size() < 2)
    throw std::invalid_argument(tag + "needs at least two markers");
  if (min_len < 1 || min_len > max_len) throw std::invalid_argument(tag + "bad length range");
  if (rule == LabelRule::CountThreshold && (threshold < 1 || threshold + 4 > min_len))
    throw std::invalid_argument(tag + "threshold must be >= 1 and leave room in the shortest sequence");
  if (rule == LabelRule::Majority && 4 * markers.size() + 3 > min_len)
    throw std::invalid_argument(tag + "sequences too short for the marker counts");
  std::set<int> seen;
  for (int s : markers) {
    if (s < 0 || static_cast<std::size_t>(s) >= vocab_size)
      throw std::invalid_argument(tag + "marker " + std::to_string(s) + " outside vocabulary");
    if (!seen.insert(s).second) throw std::invalid_argument(tag + "duplicate marker");
  }
  for (int s : fillers) {
    if (s < 0 || static_cast<std::size_t>(s) >= vocab_size)
      throw std::invalid_argument(tag + "filler " + std::to_string(s) + " outside vocabulary");
    if (seen.contains(s)) throw std::invalid_argument(tag + "filler overlaps a marker");
  }
}

namespace {

std::vector<int> range_of(int lo, int hi) {
  std::vector<int> v(static_cast<std::size_t>(hi - lo));
  std::iota(v.begin(), v.end(), lo);
  return v;
}

int marker_index(const TaskSpec& spec, int tok) {
  auto it = std::find(spec.markers.begin(), spec.markers.end(), tok);
  return it == spec.markers.end() ? -1 : static_cast<int>(it - spec.markers.begin());
}

// Sequence of fillers with the given marker tokens at distinct random positions,
// in the order given (first marker at the earliest chosen position).
std::vector<int> place(const TaskSpec& spec, std::size_t len, const std::vector<int>& marks, Rng& rng) {
  std::vector<int> seq(len);
  for (auto& t : seq) t = spec.fillers[rng.index(spec.fillers.size())];
  std::vector<std::size_t> pos(len);
  std::iota(pos.begin(), pos.end(), 0);
  rng.shuffle(pos);
  pos.resize(marks.size());
  std::sort(pos.begin(), pos.end());
  for (std::size_t i = 0; i < marks.size(); ++i) seq[pos[i]] = marks[i];
  return seq;
}

std::vector<int> draw(const TaskSpec& spec, int label, Rng& rng) {
  const std::size_t len = spec.min_len + rng.index(spec.max_len - spec.min_len + 1);
  std::vector<int> marks;
  switch (spec.rule) {
    case LabelRule::Majority: {
      std::vector<std::size_t> counts(spec.markers.size());
      std::size_t top = 0;
      for (std::size_t j = 0; j < counts.size(); ++j)
        if (static_cast<int>(j) != label) top = std::max(top, counts[j] = rng.index(5));
      counts[static_cast<std::size_t>(label)] = top + 1 + rng.index(3);
      for (std::size_t j = 0; j < counts.size(); ++j) marks.insert(marks.end(), counts[j], spec.markers[j]);
      rng.shuffle(marks);
      break;
    }
    case LabelRule::LastMarker: {
      const std::size_t n = 1 + rng.index(4);
      for (std::size_t i = 0; i + 1 < n; ++i) marks.push_back(spec.markers[rng.index(spec.markers.size())]);
      marks.push_back(spec.markers[static_cast<std::size_t>(label)]);
      break;
    }
    case LabelRule::CountThreshold: {
      const std::size_t t = spec.threshold;
      const std::size_t n = label == 1 ? t + rng.index(4) : (t >= 4 ? t - 4 : 0) + rng.index(std::min<std::size_t>(t, 4));
      for (std::size_t i = 0; i < n; ++i) marks.push_back(spec.markers[rng.index(spec.markers.size())]);
      break;
    }
  }
  return place(spec, len, marks, rng);
}

}  // namespace

std::vector<TaskSpec> default_tasks(std::size_t vocab_size) {
  if (vocab_size < 16) throw std::invalid_argument("default tasks need a vocabulary of at least 16");
  const auto fill = range_of(8, static_cast<int>(vocab_size));
  return {
      TaskSpec{.task_id = 0, .rule = LabelRule::Majority, .markers = {0, 1, 2}, .fillers = fill},
      TaskSpec{.task_id = 1, .rule = LabelRule::LastMarker, .markers = {3, 4, 5}, .fillers = fill},
      TaskSpec{.task_id = 2, .rule = LabelRule::CountThreshold, .markers = {6, 7}, .fillers = fill, .threshold = 4},
  };
}

TaskSpec majority_task(std::size_t length, std::size_t vocab_size) {
  TaskSpec t = default_tasks(vocab_size).front();
  t.min_len = t.max_len = length;
  return t;
}

int reference_label(const TaskSpec& spec, const std::vector<int>& tokens) {
  switch (spec.rule) {
    case LabelRule::Majority: {
      std::vector<std::size_t> counts(spec.markers.size());
      for (int t : tokens)
        if (int j = marker_index(spec, t); j >= 0) ++counts[static_cast<std::size_t>(j)];
      const auto top = std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), *top) != 1) throw std::domain_error("majority label is tied");
      return static_cast<int>(top - counts.begin());
    }
    case LabelRule::LastMarker:
      for (auto it = tokens.rbegin(); it != tokens.rend(); ++it)
        if (int j = marker_index(spec, *it); j >= 0) return j;
      throw std::domain_error("sequence has no marker");
    case LabelRule::CountThreshold: {
      std::size_t n = 0;
      for (int t : tokens) n += marker_index(spec, t) >= 0;
      return n >= spec.threshold ? 1 : 0;
    }
  }
  throw std::logic_error("unreachable");
}

Dataset generate(const std::vector<TaskSpec>& specs, std::size_t n_per_task, std::uint64_t seed,
                 std::size_t vocab_size) {
  if (n_per_task < 1) throw std::invalid_argument("generate: n_per_task must be >= 1");
  if (specs.empty()) throw std::invalid_argument("generate: no tasks");
  std::set<int> used;
  for (const auto& s : specs) {
    s.validate(vocab_size);
    for (int m : s.markers)
      if (!used.insert(m).second) throw std::invalid_argument("generate: marker slices overlap across tasks");
  }
  Dataset out;
  out.reserve(specs.size() * n_per_task);
  for (const auto& s : specs) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(s.task_id)}));
    for (std::size_t i = 0; i < n_per_task; ++i) {
      const int label = static_cast<int>(i % s.classes());
      out.push_back(Example{draw(s, label, rng), label, s.task_id});
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("split: fraction must lie in [0, 1)");
  std::map<int, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < data.size(); ++i) by_task[data[i].task].push_back(i);
  Dataset train, val;
  for (auto& [task, idx] : by_task) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(task), 7}));
    rng.shuffle(idx);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::sort(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    for (std::size_t j = 0; j < idx.size(); ++j) (j < n_val ? val : train).push_back(data[idx[j]]);
  }
  return {std::move(train), std::move(val)};
}

void write_jsonl(const Dataset& data, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : data) {
    nlohmann::ordered_json j;
    j["tokens"] = ex.tokens;
    j["label"] = ex.label;
    j["task"] = ex.task;
    out << j.dump() << '\n';
  }
}

Dataset read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back(Example{j.at("tokens").get<std::vector<int>>(), j.at("label").get<int>(), j.at("task").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::vector<int>> token_sequences(const Dataset& data) {
  std::vector<std::vector<int>> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back(ex.tokens);
  return out;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  Batch b;
  std::vector<std::vector<int>> seqs;
  for (auto i : indices) {
    seqs.push_back(data.at(i).tokens);
    b.labels.push_back(data[i].label);
    b.tasks.push_back(data[i].task);
  }
  b.seqs = PackedSequences::pack(seqs);
  return b;
}

std::vector<std::pair<std::size_t, std::size_t>> sample_positions(const Dataset& data, std::size_t budget,
                                                                  std::uint64_t seed) {
  std::vector<std::size_t> start(data.size() + 1, 0);
  for (std::size_t s = 0; s < data.size(); ++s) start[s + 1] = start[s] + data[s].tokens.size();
  const std::size_t total = start.back();
  if (budget == 0) throw std::invalid_argument("sample_init_tokens: budget must be positive");
  if (budget > total)
    throw std::invalid_argument("sample_init_tokens: budget " + std::to_string(budget) + " exceeds the " +
                                std::to_string(total) + " tokens in the corpus");
  std::vector<std::size_t> flat(total);
  std::iota(flat.begin(), flat.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < budget; ++i) std::swap(flat[i], flat[i + rng.index(total - i)]);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(budget);
  for (std::size_t i = 0; i < budget; ++i) {
    const auto s = static_cast<std::size_t>(std::upper_bound(start.begin(), start.end(), flat[i]) - start.begin()) - 1;
    out.emplace_back(s, flat[i] - start[s]);
  }
  return out;
}

InitSample sample_init_tokens(const Backbone& model, const Dataset& data, std::size_t budget, std::uint64_t seed) {
  InitSample res;
  res.positions = sample_positions(data, budget, seed);
  const std::size_t n_layers = model.config().n_layers, d = model.config().d_model;

  // Which sampled slots each sequence feeds.
  std::map<std::size_t, std::vector<std::size_t>> wanted;
  for (std::size_t i = 0; i < budget; ++i) wanted[res.positions[i].first].push_back(i);
  std::vector<std::size_t> seqs;
  for (const auto& [s, _] : wanted) seqs.push_back(s);

  std::vector<std::vector<double>> out(n_layers, std::vector<double>(budget * d));
  constexpr std::size_t kChunk = 32;
  const auto n_chunks = static_cast<std::ptrdiff_t>((seqs.size() + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t c = 0; c < n_chunks; ++c) {
    NoGradGuard guard;
    const std::size_t lo = static_cast<std::size_t>(c) * kChunk, hi = std::min(seqs.size(), lo + kChunk);
    std::vector<std::vector<int>> batch;
    for (std::size_t j = lo; j < hi; ++j) batch.push_back(data[seqs[j]].tokens);
    const PackedSequences packed = PackedSequences::pack(batch);
    const ForwardResult fr = model.forward(packed);
    for (std::size_t j = lo; j < hi; ++j) {
      const std::size_t base = packed.offsets[j - lo];
      for (auto slot : wanted.at(seqs[j])) {
        const std::size_t row = base + res.positions[slot].second;
        for (std::size_t l = 0; l < n_layers; ++l) {
          const auto src = fr.hidden[l].data().subspan(row * d, d);
          std::copy(src.begin(), src.end(), out[l].begin() + static_cast<std::ptrdiff_t>(slot * d));
        }
      }
    }
  }
  for (auto& v : out) res.per_layer.push_back(Tensor::matrix(budget, d, std::move(v)));
  return res;
}

}  // namespace mjlab
