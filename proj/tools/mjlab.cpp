// Command-line front end for the routing lab.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mjlab/config.hpp"
#include "mjlab/data.hpp"
#include "mjlab/kernels.hpp"
#include "mjlab/oracle.hpp"
#include "mjlab/probe.hpp"
#include "mjlab/rng.hpp"
#include "mjlab/router.hpp"
#include "mjlab/train.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace mjlab;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool dump = false;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON experiment config");
  app->add_option("--seed", c.seed, "Run a single seed instead of the config's list");
  app->add_option("--out", c.out, "Output directory");
  app->add_flag("--dump-config", c.dump, "Print the effective config and exit");
  app->add_flag("--quiet", c.quiet, "Suppress progress output");
}

ExperimentConfig effective(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

/// Prints the config when --dump-config was given; returns true in that case.
bool dumped(const Common& c, const ExperimentConfig& cfg) {
  if (!c.dump) return false;
  std::cout << to_json(cfg).dump(2) << '\n';
  return true;
}

void note(const Common& c, const std::string& msg) {
  if (!c.quiet) std::cerr << msg << '\n';
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

ordered_json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return ordered_json::parse(in);
}

void emit(const ordered_json& j, const std::string& out, const std::string& file) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  fs::create_directories(out);
  std::ofstream(fs::path(out) / file) << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  const ExperimentConfig cfg = effective(c);
  if (dumped(c, cfg)) return 0;
  const SplitData data = prepare_data(cfg);
  const fs::path dir = c.out.empty() ? fs::path(cfg.out_dir) / "data" : fs::path(c.out);
  write_jsonl(data.train, dir / "train.jsonl");
  write_jsonl(data.val, dir / "val.jsonl");
  note(c, "wrote " + std::to_string(data.train.size()) + " train and " + std::to_string(data.val.size()) +
              " val examples to " + dir.string());
  return 0;
}

int cmd_pretrain(const Common& c) {
  const ExperimentConfig cfg = effective(c);
  if (dumped(c, cfg)) return 0;
  const SplitData data = prepare_data(cfg);
  const Backbone b = prepare_backbone(cfg, data.train, cfg.out_dir);
  if (!c.out.empty()) b.save(fs::path(c.out) / "backbone");
  note(c, "backbone ready, validation perplexity " + std::to_string(perplexity(b, token_sequences(data.val))));
  return 0;
}

int cmd_init_centers(const Common& c) {
  const ExperimentConfig cfg = effective(c);
  if (dumped(c, cfg)) return 0;
  if (cfg.train.method != Method::MonkeyJump) throw ConfigError("init-centers needs train.method \"mj\"");
  const SplitData data = prepare_data(cfg);
  const Backbone b = prepare_backbone(cfg, data.train, cfg.out_dir);
  const fs::path dir = c.out.empty() ? run_root(cfg) / "centers" : fs::path(c.out) / "centers";
  for (auto seed : cfg.seeds) {
    Learner learner(cfg, b, seed);
    learner.init_centers(data.train);
    save_routers(learner.routers(), dir / ("seed" + std::to_string(seed)));
  }
  note(c, "centers written to " + dir.string());
  return 0;
}

int cmd_train(const Common& c) {
  const ExperimentConfig cfg = effective(c);
  if (dumped(c, cfg)) return 0;
  const SplitData data = prepare_data(cfg);
  const Backbone b = prepare_backbone(cfg, data.train, cfg.out_dir);
  const fs::path root = run_root(cfg);
  ordered_json runs = ordered_json::array();
  for (auto seed : cfg.seeds) {
    note(c, "training seed " + std::to_string(seed));
    const RunResult r = run_pipeline(cfg, b, data, seed, root / ("seed" + std::to_string(seed)));
    runs.push_back(run_report(r, cfg));
  }
  if (!c.quiet) std::cout << ordered_json{{"run_dir", root.string()}, {"runs", runs}}.dump(2) << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& run) {
  const fs::path dir(run);
  if (!fs::exists(dir / "config.json")) throw ConfigError("'" + run + "' is not a run directory (no config.json)");
  ExperimentConfig cfg = config_from_json(read_json(dir / "config.json"));
  if (dumped(c, cfg)) return 0;
  const std::uint64_t seed = read_json(dir / "report.json").at("seed").get<std::uint64_t>();
  const SplitData data = prepare_data(cfg);
  const Backbone b = prepare_backbone(cfg, data.train, cfg.out_dir);
  Learner learner(cfg, b, seed);
  learner.load_checkpoint(dir / "checkpoint");
  ordered_json j;
  j["seed"] = seed;
  j["task_accuracy"] = evaluate(learner, data.val, cfg.data.tasks.size());
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_ablate(const Common& c, const std::string& axis, const std::string& values) {
  const ExperimentConfig cfg = effective(c);
  if (dumped(c, cfg)) return 0;
  const auto vals = split_csv(values);
  if (vals.empty()) throw ConfigError("ablate: --values is empty");
  const SplitData data = prepare_data(cfg);
  const Backbone b = prepare_backbone(cfg, data.train, cfg.out_dir);
  const auto rows = ablate(cfg, b, data, axis, vals);
  const fs::path path = run_root(cfg) / ("ablate-" + axis + ".csv");
  write_ablation_csv(rows, axis, cfg.data.tasks.size(), path);
  note(c, "wrote " + path.string());
  return 0;
}

int cmd_oracle(const Common& c, const std::string& which, std::size_t n) {
  const std::uint64_t seed = c.seed.value_or(0);
  ordered_json j;
  if (which == "rank") {
    j = oracle::rank_report(n, seed);
    std::cout << "rank_mj=" << j["example"]["rank_mj"] << " rank_peft=" << j["example"]["rank_peft"]
              << " dim_c_all=" << j["example"]["dim_c_all"] << '\n';
  } else if (which == "soft") {
    j = oracle::soft_report(n, seed);
  } else if (which == "params") {
    j = oracle::params_report();
  } else {
    throw ConfigError("oracle: expected rank, soft or params, got '" + which + "'");
  }
  if (!c.quiet || !c.out.empty()) emit(j, c.out, "oracle-" + which + ".json");
  return j["pass"].get<bool>() ? 0 : 2;
}

int cmd_probe(const Common& c, std::size_t length, std::size_t examples, std::size_t epochs,
              const std::string& layers_arg) {
  const ExperimentConfig cfg = effective(c);
  if (dumped(c, cfg)) return 0;
  const SplitData data = prepare_data(cfg);
  const Backbone b = prepare_backbone(cfg, data.train, cfg.out_dir);
  const Dataset probe_set = generate({majority_task(length, cfg.model.vocab_size)}, examples,
                                     derive_seed(cfg.data.seed, {21}), cfg.model.vocab_size);
  std::vector<std::size_t> layers;
  for (const auto& s : split_csv(layers_arg)) layers.push_back(std::stoul(s));
  if (layers.empty()) layers.push_back(cfg.model.n_layers);
  const auto rows = probe_sweep(b, probe_set, layers, position_ladder(length), cfg.seeds, epochs);
  const fs::path path = (c.out.empty() ? run_root(cfg) : fs::path(c.out)) / "probe.csv";
  write_probe_csv(rows, path);
  note(c, "wrote " + path.string());
  return 0;
}

int cmd_compare(const Common& c) {
  const ExperimentConfig cfg = effective(c);
  if (dumped(c, cfg)) return 0;
  const SplitData data = prepare_data(cfg);
  const Backbone b = prepare_backbone(cfg, data.train, cfg.out_dir);
  ordered_json rows = ordered_json::array();
  for (const auto& r : shared_vs_specific(cfg, b, data))
    rows.push_back({{"seed", r.seed},
                    {"shared", r.shared},
                    {"specific", r.specific},
                    {"shared_trainable", r.shared_trainable},
                    {"specific_trainable", r.specific_trainable}});
  emit(ordered_json{{"partition", to_string(cfg.train.partition)}, {"rows", rows}},
       c.out.empty() ? std::string() : c.out, "shared_vs_specific.json");
  return 0;
}

int cmd_report(const Common& c, const std::string& run) {
  const fs::path root(run);
  if (!fs::is_directory(root)) throw ConfigError("report: '" + run + "' is not a directory");
  std::vector<fs::path> seeds;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "report.json")) seeds.push_back(e.path());
  std::sort(seeds.begin(), seeds.end());
  if (seeds.empty()) throw ConfigError("report: no finished runs under '" + run + "'");

  ordered_json runs = ordered_json::array();
  std::map<std::tuple<std::size_t, std::size_t, std::string>, std::pair<double, std::size_t>> heat;
  for (const auto& dir : seeds) {
    const ordered_json rep = read_json(dir / "report.json");
    ordered_json r;
    r["seed"] = rep.at("seed");
    r["task_accuracy"] = rep.at("task_accuracy");
    r["mean_accuracy"] = rep.at("mean_accuracy");
    runs.push_back(r);
    std::ifstream usage(dir / "usage.csv");
    std::string line;
    std::getline(usage, line);
    while (std::getline(usage, line)) {
      const auto f = split_csv(line);
      if (f.size() < 4) continue;
      auto& cell = heat[{std::stoul(f[0]), std::stoul(f[1]), f[2]}];
      cell.first += std::stod(f[3]);
      ++cell.second;
    }
  }
  ordered_json summary{{"run_dir", root.string()}, {"runs", runs}};
  if (!heat.empty()) {
    std::ofstream out(root / "usage_heatmap.csv");
    out << "layer,expert,phase,mean_fraction\n";
    out.precision(17);
    for (const auto& [key, v] : heat)
      out << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ','
          << v.first / static_cast<double>(v.second) << '\n';
  }
  emit(summary, c.out, "summary.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_threads();
  CLI::App app{"Routing lab: synthetic data, frozen backbones, routed adapters, oracles and probes"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic task splits as JSONL");
  auto* pre = app.add_subcommand("pretrain", "Pretrain and freeze the backbone");
  auto* init = app.add_subcommand("init-centers", "Run k-means center initialisation");
  auto* train = app.add_subcommand("train", "Run the full training pipeline for every seed");
  auto* eval = app.add_subcommand("eval", "Evaluate a saved run checkpoint");
  auto* abl = app.add_subcommand("ablate", "Sweep one routing knob");
  auto* orc = app.add_subcommand("oracle", "Rank and parameter-count oracles");
  auto* prb = app.add_subcommand("probe", "Linear probes over token positions");
  auto* rep = app.add_subcommand("report", "Summarise a finished run directory");
  auto* cmp = app.add_subcommand("shared-vs-specific", "Compare one shared adapter bank against per-task slices");
  for (auto* s : {gen, pre, init, train, eval, abl, orc, prb, rep, cmp}) add_common(s, common);

  std::string run_dir, axis, values, which, layers;
  std::size_t n_instances = 100, probe_len = 32, probe_examples = 3600, probe_epochs = 100;
  eval->add_option("--run", run_dir, "Seed directory of a finished run")->required();
  abl->add_option("axis", axis, "Knob to sweep")->required()->check(CLI::IsMember(ablation_axes()));
  abl->add_option("--values", values, "Comma-separated values")->required();
  orc->add_option("which", which, "rank, soft or params")->required()->check(CLI::IsMember({"rank", "soft", "params"}));
  orc->add_option("--instances", n_instances, "Random instances per suite");
  prb->add_option("--length", probe_len, "Sequence length of the probe dataset");
  prb->add_option("--examples", probe_examples, "Sequences in the probe dataset");
  prb->add_option("--epochs", probe_epochs, "Gradient-descent epochs per probe");
  prb->add_option("--layers", layers, "Comma-separated hidden-state indices (default: last block output)");
  rep->add_option("--run", run_dir, "Run directory holding seed subdirectories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*pre) return cmd_pretrain(common);
    if (*init) return cmd_init_centers(common);
    if (*train) return cmd_train(common);
    if (*eval) return cmd_eval(common, run_dir);
    if (*abl) return cmd_ablate(common, axis, values);
    if (*orc) return cmd_oracle(common, which, n_instances);
    if (*prb) return cmd_probe(common, probe_len, probe_examples, probe_epochs, layers);
    if (*rep) return cmd_report(common, run_dir);
    if (*cmp) return cmd_compare(common);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
