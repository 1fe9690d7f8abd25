#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gob/harness.hpp"

namespace fs = std::filesystem;
using namespace gob;

namespace {

struct Overrides {
  std::string config;
  std::string out = "results";
  std::vector<std::uint64_t> seeds;
  std::string policies;
  long t = 0;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON config file (comments allowed)")->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", o.out, "Output directory");
  cmd->add_option("-s,--seed", o.seeds, "Seed(s); replaces the configured list");
  cmd->add_option("-p,--policy", o.policies, "Comma-separated policy names; replaces the configured list");
  cmd->add_option("-t,--t", o.t, "Horizon T");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (o.t > 0) {
    cfg.T = o.t;
    cfg.validation_prefix = std::min(cfg.validation_prefix, o.t - 1);
    std::erase_if(cfg.checkpoints, [&](long c) { return c > o.t; });
  }
  if (!o.policies.empty()) {
    const PolicySpec base = cfg.policies.empty() ? PolicySpec{} : cfg.policies.front().spec;
    std::vector<PolicyEntry> picked;
    std::stringstream list(o.policies);
    std::string name;
    while (std::getline(list, name, ',')) {
      if (name.empty()) continue;
      const PolicyKind kind = parse_policy_kind(name);
      auto it = std::find_if(cfg.policies.begin(), cfg.policies.end(),
                             [&](const PolicyEntry& e) { return e.spec.kind == kind; });
      PolicyEntry e = it != cfg.policies.end() ? *it : PolicyEntry{base, {}};
      e.spec.kind = kind;
      picked.push_back(e);
    }
    cfg.policies = std::move(picked);
  }
  cfg.validate();
  return cfg;
}

int cmd_run(const Overrides& o) {
  const auto cfg = resolve(o);
  if (cfg.policies.empty()) fail("run: no policies (set them in the config or with --policy)");
  const auto res = run_experiment(cfg, o.out);
  std::cout << "policy,seeds_ok,mean_final_cum_regret,mean_final_ratio\n";
  for (const auto& entry : cfg.policies) {
    const std::string name(policy_name(entry.spec.kind));
    int ok = 0;
    for (const auto* c : res.for_policy(name)) ok += c->ok;
    if (ok == 0) {
      std::cout << name << ",0,,\n";
      continue;
    }
    double ratio = 0.0;
    const auto mean = res.mean_at(name, cfg.T, &ratio);
    std::cout << name << ',' << ok << ',' << mean.cum_regret << ',' << ratio << '\n';
  }
  std::cerr << "wrote " << o.out << '\n';
  for (const auto& c : res.cells)
    if (!c.ok) return 2;
  return 0;
}

int cmd_sweep(const Overrides& o, std::vector<int> n_values, std::vector<int> d_values) {
  auto cfg = resolve(o);
  if (!n_values.empty()) cfg.timing.n_values = n_values;
  if (!d_values.empty()) cfg.timing.d_values = d_values;
  if (cfg.timing.n_values.empty()) cfg.timing.n_values = {cfg.env.n};
  if (cfg.timing.d_values.empty()) cfg.timing.d_values = {cfg.env.d};
  if (!o.policies.empty()) {
    cfg.timing.policies.clear();
    for (const auto& e : cfg.policies) cfg.timing.policies.emplace_back(policy_name(e.spec.kind));
  }
  std::vector<std::pair<int, int>> sizes;
  for (int d : cfg.timing.d_values)
    for (int n : cfg.timing.n_values) sizes.emplace_back(n, d);
  const auto rows = timing_sweep(cfg, sizes);
  fs::create_directories(o.out);
  std::ofstream out(fs::path(o.out) / "timing.csv");
  write_timing_csv(out, rows);
  write_timing_csv(std::cout, rows);
  return 0;
}

int cmd_diagnose(const Overrides& o, const std::string& edges) {
  EdgeList g;
  if (!edges.empty()) {
    g = read_edge_list(edges);
  } else {
    const auto cfg = resolve(o);
    g = make_env_factory(cfg.env)(cfg.seeds.front())->graph();
  }
  std::cout << diagnostics(g).dump(2) << '\n';
  return 0;
}

int cmd_learn_graph(Overrides o) {
  if (o.policies.empty()) o.policies = "L-EG";
  const auto cfg = resolve(o);
  fs::create_directories(o.out);
  const auto envs = make_env_factory(cfg.env);
  int failures = 0;
  for (const auto& entry : cfg.policies) {
    if (entry.spec.kind != PolicyKind::leg && entry.spec.kind != PolicyKind::ueg)
      fail("learn-graph: ", policy_name(entry.spec.kind), " does not learn a graph");
    for (std::uint64_t seed : cfg.seeds) {
      const auto cell = run_cell(cfg, candidates_for(entry, cfg.learn), seed, envs);
      if (!cell.ok) {
        std::cerr << cell.policy << " seed " << seed << ": " << cell.error << '\n';
        ++failures;
        continue;
      }
      const auto& learner = dynamic_cast<const GraphLearningPolicy&>(*cell.trained);
      const auto stem = fs::path(o.out) / cell_file_stem(cell.policy, seed);
      export_learned(learner.precision(), stem.string() + ".edges", stem.string() + ".precision.csv");
      const auto planted = envs(seed)->graph();
      std::cout << cell.policy << " seed " << seed << ": " << learner.precision().edge_count << " edges, density "
                << learner.precision().density() << ", jaccard vs input graph "
                << jaccard(support_graph(learner.precision()), planted) << ", updates " << learner.updates()
                << '\n';
    }
  }
  return failures == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-regularized contextual bandits: experiments, timing sweeps and graph diagnostics"};
  app.require_subcommand(1);

  Overrides run_o, sweep_o, diag_o, learn_o;
  auto* run = app.add_subcommand("run", "Run every (policy, seed) cell and write CSV logs");
  add_common(run, run_o);

  std::vector<int> n_values, d_values;
  auto* sweep = app.add_subcommand("sweep", "Time per-round decision+update over sizes");
  add_common(sweep, sweep_o);
  sweep->add_option("--n", n_values, "Numbers of users");
  sweep->add_option("--d", d_values, "Feature dimensions");

  std::string edges;
  auto* diag = app.add_subcommand("diagnose", "Print spectral diagnostics of a user graph as JSON");
  add_common(diag, diag_o);
  diag->add_option("--edges", edges, "Edge-list file; otherwise the configured graph is generated")
      ->check(CLI::ExistingFile);

  auto* learn = app.add_subcommand("learn-graph", "Run L-EG / U-EG and export the learned precision");
  add_common(learn, learn_o);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(run_o);
    if (*sweep) return cmd_sweep(sweep_o, n_values, d_values);
    if (*diag) return cmd_diagnose(diag_o, edges);
    if (*learn) return cmd_learn_graph(learn_o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
