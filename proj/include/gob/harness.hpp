#pragma once

// Experiment runner: configuration, the round loop wiring environment -> policy ->
// state, paired regret accounting against a uniform-random baseline, timing sweeps and
// graph diagnostics.
//
// Each (policy, seed) cell draws from forked rng streams of its seed:
//   0 rounds, 1 policy, 2 random baseline, 3 environment construction.
// The round sequence therefore depends only on the seed, so every policy and the
// random baseline see identical rounds.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gob/common.hpp"
#include "gob/env.hpp"
#include "gob/gmrf.hpp"
#include "gob/graph.hpp"
#include "gob/graphlearn.hpp"
#include "gob/policies.hpp"

namespace gob {

using json = nlohmann::ordered_json;

inline constexpr int kCsvSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct GraphSpec {
  std::string kind = "erdos_renyi";  // erdos_renyi | kronecker | planted_clusters | empty | file
  double p = 0.05;                   // erdos_renyi
  double density = 0.005;            // kronecker
  int clusters = 5;                  // planted_clusters
  double p_in = 0.3;                 // planted_clusters
  std::string path;                  // file
};

struct EnvSpec {
  std::string type = "synthetic";  // synthetic | hetrec
  int n = 100;
  int d = 10;
  GraphSpec graph;
  SyntheticOptions synthetic;
  std::string path;                // hetrec directory
  std::string layout = "lastfm";
  HetrecOptions hetrec;
};

struct TimingSpec {
  std::vector<int> n_values;
  std::vector<int> d_values;
  std::vector<std::string> policies{"G-TS"};
  double rounds_per_node = 0.0;  // 0: use T rounds at every size
  long min_rounds = 20;
  int dense_max_n = 1024;
};

/// One policy of the experiment with optional grid for validation-prefix tuning.
struct PolicyEntry {
  PolicySpec spec;
  std::vector<std::pair<std::string, std::vector<double>>> grid;
};

struct ExperimentConfig {
  EnvSpec env;
  std::vector<PolicyEntry> policies;
  long T = 50000;
  long validation_prefix = 5000;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<long> checkpoints;
  long log_every = 1;
  LearnSchedule learn;
  TimingSpec timing;

  void validate() const {
    if (T < 1 || validation_prefix < 0 || validation_prefix >= T)
      fail("config: need T > validation_prefix >= 0, got T = ", T, ", validation_prefix = ", validation_prefix);
    if (seeds.empty()) fail("config: seeds must be nonempty");
    if (log_every < 1) fail("config: log_every must be >= 1");
    if (env.n < 1 || env.d < 1) fail("config: environment needs n >= 1 and d >= 1");
    for (long c : checkpoints)
      if (c < 1 || c > T) fail("config: checkpoint ", c, " outside [1, T]");
    for (const auto& p : policies) {
      p.spec.validate();
      for (const auto& [name, values] : p.grid)
        if (values.empty()) fail("config: empty tuning grid for ", name);
    }
    learn.validate();
    env.synthetic.validate();
  }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) fail("config: ", where, " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) fail("config: unknown key '", key, "' in ", where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void set_hyperparameter(PolicySpec& s, const std::string& name, double value) {
  if (name == "lambda") s.lambda = value;
  else if (name == "sigma") s.sigma = value;
  else if (name == "rho") s.rho = value;
  else if (name == "alpha") s.alpha = value;
  else if (name == "explore") s.explore = value;
  else if (name == "epoch_c") s.epoch_c = value;
  else if (name == "delta") s.delta = value;
  else if (name == "club_alpha2") s.club_alpha2 = value;
  else if (name == "club_edge_p") s.club_edge_p = value;
  else fail("config: unknown hyperparameter '", name, "'");
}

inline void read_hyperparameters(const json& j, PolicySpec& s) {
  for (const char* key : {"lambda", "sigma", "rho", "alpha", "explore", "epoch_c", "delta", "club_alpha2", "club_edge_p"})
    if (j.contains(key)) set_hyperparameter(s, key, j.at(key).get<double>());
  if (j.contains("eg_mode")) {
    const auto mode = j.at("eg_mode").get<std::string>();
    if (mode == "practical") s.eg_mode = EgMode::practical;
    else if (mode == "theoretical") s.eg_mode = EgMode::theoretical;
    else fail("config: eg_mode must be practical or theoretical, got ", mode);
  }
  if (j.contains("solver")) {
    const auto& o = j.at("solver");
    check_keys(o, {"rel_tol", "max_iters", "warm_start", "warm_max_iters", "precondition"}, "solver");
    read(o, "rel_tol", s.solve.rel_tol);
    read(o, "max_iters", s.solve.max_iters);
    read(o, "warm_start", s.solve.warm_start);
    read(o, "warm_max_iters", s.solve.warm_max_iters);
    read(o, "precondition", s.solve.precondition);
  }
}

inline const char* eg_mode_name(EgMode m) { return m == EgMode::practical ? "practical" : "theoretical"; }

}  // namespace detail

inline json hyperparameters_json(const PolicySpec& s) {
  return json{{"lambda", s.lambda},   {"sigma", s.sigma},
              {"rho", s.rho},         {"alpha", s.alpha},
              {"explore", s.explore}, {"eg_mode", detail::eg_mode_name(s.eg_mode)},
              {"epoch_c", s.epoch_c}, {"delta", s.delta},
              {"club_alpha2", s.club_alpha2}, {"club_edge_p", s.club_edge_p}};
}

inline ExperimentConfig config_from_json(const json& j) {
  using detail::check_keys;
  using detail::read;
  check_keys(j, {"environment", "policies", "T", "validation_prefix", "seeds", "checkpoints", "log_every", "lambda",
                 "sigma", "rho", "alpha", "explore", "solver", "learn", "timing"},
             "top level");
  ExperimentConfig c;
  read(j, "T", c.T);
  read(j, "validation_prefix", c.validation_prefix);
  read(j, "seeds", c.seeds);
  read(j, "checkpoints", c.checkpoints);
  read(j, "log_every", c.log_every);

  if (j.contains("environment")) {
    const auto& e = j.at("environment");
    check_keys(e, {"type", "n", "d", "k", "noise", "lambda_gen", "plant_shift", "independent", "clip_sigmas", "graph",
                   "path", "layout", "projection_seed", "drop_dangling"},
               "environment");
    read(e, "type", c.env.type);
    read(e, "n", c.env.n);
    read(e, "d", c.env.d);
    read(e, "k", c.env.synthetic.k);
    read(e, "noise", c.env.synthetic.noise);
    read(e, "lambda_gen", c.env.synthetic.lambda_gen);
    read(e, "plant_shift", c.env.synthetic.plant_shift);
    read(e, "independent", c.env.synthetic.independent);
    read(e, "clip_sigmas", c.env.synthetic.clip_sigmas);
    read(e, "path", c.env.path);
    read(e, "layout", c.env.layout);
    read(e, "projection_seed", c.env.hetrec.projection_seed);
    read(e, "drop_dangling", c.env.hetrec.drop_dangling);
    c.env.hetrec.d = c.env.d;
    c.env.hetrec.k = c.env.synthetic.k;
    if (c.env.type != "synthetic" && c.env.type != "hetrec")
      fail("config: environment type must be synthetic or hetrec, got ", c.env.type);
    if (e.contains("graph")) {
      const auto& g = e.at("graph");
      check_keys(g, {"kind", "p", "density", "clusters", "p_in", "path"}, "environment.graph");
      read(g, "kind", c.env.graph.kind);
      read(g, "p", c.env.graph.p);
      read(g, "density", c.env.graph.density);
      read(g, "clusters", c.env.graph.clusters);
      read(g, "p_in", c.env.graph.p_in);
      read(g, "path", c.env.graph.path);
    }
  }

  PolicySpec base;
  detail::read_hyperparameters(j, base);
  if (j.contains("policies")) {
    for (const auto& p : j.at("policies")) {
      PolicyEntry entry;
      entry.spec = base;
      if (p.is_string()) {
        entry.spec.kind = parse_policy_kind(p.get<std::string>());
      } else {
        check_keys(p, {"kind", "lambda", "sigma", "rho", "alpha", "explore", "eg_mode", "epoch_c", "delta",
                       "club_alpha2", "club_edge_p", "solver", "tune"},
                   "policy");
        entry.spec.kind = parse_policy_kind(p.at("kind").get<std::string>());
        detail::read_hyperparameters(p, entry.spec);
        if (p.contains("tune"))
          for (const auto& [name, values] : p.at("tune").items()) {
            PolicySpec probe;
            detail::set_hyperparameter(probe, name, 1.0);  // rejects unknown names
            entry.grid.emplace_back(name, values.get<std::vector<double>>());
          }
      }
      c.policies.push_back(std::move(entry));
    }
  }

  if (j.contains("learn")) {
    const auto& l = j.at("learn");
    check_keys(l, {"warmup_recs_per_user", "update_interval_rounds", "max_edges", "target_sparsity"}, "learn");
    read(l, "warmup_recs_per_user", c.learn.warmup_recs_per_user);
    read(l, "update_interval_rounds", c.learn.update_interval_rounds);
    read(l, "max_edges", c.learn.max_edges);
    read(l, "target_sparsity", c.learn.target_sparsity);
  }
  if (j.contains("timing")) {
    const auto& t = j.at("timing");
    check_keys(t, {"n_values", "d_values", "policies", "rounds_per_node", "min_rounds", "dense_max_n"}, "timing");
    read(t, "n_values", c.timing.n_values);
    read(t, "d_values", c.timing.d_values);
    read(t, "policies", c.timing.policies);
    read(t, "rounds_per_node", c.timing.rounds_per_node);
    read(t, "min_rounds", c.timing.min_rounds);
    read(t, "dense_max_n", c.timing.dense_max_n);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config ", path);
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    fail("config ", path, ": ", e.what());
  }
  try {
    return config_from_json(j);
  } catch (const json::exception& e) {
    fail("config ", path, ": ", e.what());
  }
}

inline json config_to_json(const ExperimentConfig& c) {
  json env{{"type", c.env.type}, {"n", c.env.n}, {"d", c.env.d}, {"k", c.env.synthetic.k}};
  if (c.env.type == "synthetic") {
    env["noise"] = c.env.synthetic.noise;
    env["lambda_gen"] = c.env.synthetic.lambda_gen;
    env["plant_shift"] = c.env.synthetic.plant_shift;
    env["independent"] = c.env.synthetic.independent;
    env["clip_sigmas"] = c.env.synthetic.clip_sigmas;
    env["graph"] = json{{"kind", c.env.graph.kind},         {"p", c.env.graph.p},
                        {"density", c.env.graph.density},   {"clusters", c.env.graph.clusters},
                        {"p_in", c.env.graph.p_in},         {"path", c.env.graph.path}};
  } else {
    env["path"] = c.env.path;
    env["layout"] = c.env.layout;
    env["projection_seed"] = c.env.hetrec.projection_seed;
    env["drop_dangling"] = c.env.hetrec.drop_dangling;
  }
  json policies = json::array();
  for (const auto& p : c.policies) {
    json e = hyperparameters_json(p.spec);
    e["kind"] = std::string(policy_name(p.spec.kind));
    if (!p.grid.empty()) {
      json grid = json::object();
      for (const auto& [name, values] : p.grid) grid[name] = values;
      e["tune"] = grid;
    }
    policies.push_back(std::move(e));
  }
  return json{{"environment", env},
              {"policies", policies},
              {"T", c.T},
              {"validation_prefix", c.validation_prefix},
              {"seeds", c.seeds},
              {"checkpoints", c.checkpoints},
              {"log_every", c.log_every},
              {"learn", json{{"warmup_recs_per_user", c.learn.warmup_recs_per_user},
                             {"update_interval_rounds", c.learn.update_interval_rounds},
                             {"max_edges", c.learn.max_edges},
                             {"target_sparsity", c.learn.target_sparsity}}}};
}

// ---------------------------------------------------------------------------
// Environments and policies
// ---------------------------------------------------------------------------

inline EdgeList make_graph(const GraphSpec& g, int n, Rng& rng) {
  if (g.kind == "erdos_renyi") return erdos_renyi(n, g.p, rng);
  if (g.kind == "empty") return EdgeList::from_pairs(n, {});
  if (g.kind == "planted_clusters") return planted_clusters(n, g.clusters, g.p_in, rng);
  if (g.kind == "kronecker") {
    int power = 0;
    while ((1 << power) < n) ++power;
    if ((1 << power) != n) fail("kronecker graph needs n to be a power of two, got ", n);
    return kronecker_graph(default_kronecker_seed, power, g.density, rng);
  }
  if (g.kind == "file") {
    EdgeList e = read_edge_list(g.path);
    if (e.n != n) fail("graph file ", g.path, " has ", e.n, " nodes, config says n = ", n);
    return e;
  }
  fail("unknown graph kind '", g.kind, "'");
}

using EnvFactory = std::function<std::unique_ptr<Environment>(std::uint64_t seed)>;

/// Synthetic environments are rebuilt per seed from stream 3; a dataset is loaded once
/// and copied per cell.
inline EnvFactory make_env_factory(const EnvSpec& spec) {
  if (spec.type == "hetrec") {
    auto layout = HetrecLayout::by_name(spec.layout);
    HetrecOptions o = spec.hetrec;
    o.d = spec.d;
    o.k = spec.synthetic.k;
    auto data = std::make_shared<HetrecData>(load_hetrec(spec.path, layout, o));
    return [data](std::uint64_t) -> std::unique_ptr<Environment> { return std::make_unique<DatasetEnv>(*data->env); };
  }
  return [spec](std::uint64_t seed) -> std::unique_ptr<Environment> {
    Rng rng = fork_rng(seed, 3);
    EdgeList g = make_graph(spec.graph, spec.n, rng);
    return std::make_unique<SyntheticEnv>(gen_synthetic(std::move(g), spec.d, spec.synthetic, rng));
  };
}

inline std::unique_ptr<Policy> make_policy(const PolicySpec& spec, const LearnSchedule& learn, const EdgeList& graph,
                                           int d, Rng& rng) {
  using Rule = GraphBandit::Rule;
  auto graph_prior = [&] { return PriorGraph::make(graph); };
  auto identity_prior = [&] { return PriorGraph::identity(graph.n); };
  switch (spec.kind) {
    case PolicyKind::gts: return std::make_unique<GraphBandit>(spec, Rule::thompson, graph_prior(), d);
    case PolicyKind::geg: return std::make_unique<GraphBandit>(spec, Rule::epoch_greedy, graph_prior(), d);
    case PolicyKind::goblinpp: return std::make_unique<GraphBandit>(spec, Rule::ucb, graph_prior(), d);
    case PolicyKind::ts_ind: return std::make_unique<GraphBandit>(spec, Rule::thompson, identity_prior(), d);
    case PolicyKind::eg_ind: return std::make_unique<GraphBandit>(spec, Rule::epoch_greedy, identity_prior(), d);
    case PolicyKind::linucb_ind: return std::make_unique<GraphBandit>(spec, Rule::ucb, identity_prior(), d);
    case PolicyKind::linucb_sin: return std::make_unique<LinUcbSin>(spec, d);
    case PolicyKind::club: return std::make_unique<Club>(spec, graph.n, d, rng);
    case PolicyKind::leg:
    case PolicyKind::ueg: {
      LearnSchedule s = learn;
      s.mode = spec.kind == PolicyKind::leg ? LearnMode::from_scratch : LearnMode::update_given;
      return std::make_unique<GraphLearningPolicy>(spec, s, graph, d);
    }
    case PolicyKind::random: return std::make_unique<RandomPolicy>();
  }
  fail("make_policy: unhandled policy kind");
}

/// The original GOBLIN update with an explicit dn x dn inverse precision, kept only as
/// a timing reference. Memory is (dn)^2 doubles.
class DenseGoblin : public Policy {
 public:
  DenseGoblin(const EdgeList& graph, int d, double lambda, double sigma, double alpha)
      : n_(graph.n), d_(d), sigma2_(sigma * sigma), alpha_(alpha) {
    const Matrix l_inv = Matrix(normalized_laplacian(graph).entries).inverse();
    const Eigen::Index dim = static_cast<Eigen::Index>(n_) * d_;
    m_inv_ = Matrix::Zero(dim, dim);
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < n_; ++j)
        if (l_inv(i, j) != 0.0)
          m_inv_.block(i * d_, j * d_, d_, d_).diagonal().setConstant(l_inv(i, j) / lambda);
    b_ = Vector::Zero(dim);
  }

  Decision select(const Round& round, Rng&) override {
    const Eigen::Index off = static_cast<Eigen::Index>(round.user) * d_;
    const Vector mean = m_inv_.middleRows(off, d_) * b_ / sigma2_;
    const auto block = m_inv_.block(off, off, d_, d_);
    Vector scores(round.k());
    for (int j = 0; j < round.k(); ++j) {
      const auto x = round.candidates.col(j);
      scores(j) = mean.dot(x) + alpha_ * std::sqrt(std::max(0.0, x.dot(block * x)));
    }
    return {argmax_lowest(scores), false};
  }

  void update(const Round& round, const Decision& decision, double reward) override {
    const Eigen::Index off = static_cast<Eigen::Index>(round.user) * d_;
    const Vector x = round.candidates.col(decision.index);
    const Vector u = m_inv_.middleCols(off, d_) * x;
    const double denom = sigma2_ + x.dot(u.segment(off, d_));
    m_inv_.selfadjointView<Eigen::Lower>().rankUpdate(u, -1.0 / denom);
    m_inv_.triangularView<Eigen::StrictlyUpper>() = m_inv_.transpose();
    b_.segment(off, d_) += reward * x;
  }

  std::string name() const override { return "GOBLIN"; }

 private:
  int n_, d_;
  double sigma2_, alpha_;
  Matrix m_inv_;
  Vector b_;
};

// ---------------------------------------------------------------------------
// Round loop
// ---------------------------------------------------------------------------

/// Cumulative values at one logged round.
struct LogPoint {
  long round = 0;
  double cum_regret = 0.0;
  double cum_random_regret = 0.0;
  double ratio() const {
    if (cum_random_regret > 0.0) return cum_regret / cum_random_regret;
    return cum_regret > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  }
};

struct CellResult {
  std::string policy;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  json hyperparameters;
  std::vector<LogPoint> log;  // every log_every rounds, at checkpoints and at T
  double median_s_per_iter = 0.0;
  std::shared_ptr<Policy> trained;  // the policy as it stood after the last round

  const LogPoint& final() const { return log.back(); }
  /// Log point at exactly `round`; throws when that round was not logged.
  const LogPoint& at(long round) const {
    for (const auto& p : log)
      if (p.round == round) return p;
    fail("round ", round, " was not logged");
  }
};

/// One candidate configuration of a policy.
struct Candidate {
  std::string name;
  json hyperparameters;
  std::function<std::unique_ptr<Policy>(const Environment&, Rng&)> make;
};

namespace detail {

inline std::string format_double(double x) {
  std::ostringstream s;
  s << std::setprecision(17) << x;
  return s.str();
}

inline void write_csv_header(std::ostream& out) {
  out << "# schema_version: " << kCsvSchemaVersion << '\n'
      << "round,policy,seed,user,item,reward,expected_reward,best_reward,regret,cum_regret,cum_random_regret\n";
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

struct Running {
  std::unique_ptr<Policy> policy;
  Rng rng;
  double cum = 0.0;
  std::vector<std::string> rows;
  std::vector<LogPoint> log;
  std::vector<double> seconds;
};

}  // namespace detail

/// Runs one (policy, seed) cell. With more than one candidate, each is run on the
/// first validation_prefix rounds and the one with the lowest cumulative regret there
/// continues to T. Rows go to `csv` and per-round decision+update seconds to `timing`.
inline CellResult run_cell(const ExperimentConfig& cfg, const std::vector<Candidate>& candidates, std::uint64_t seed,
                           const EnvFactory& envs, std::ostream* csv = nullptr, std::ostream* timing = nullptr) {
  if (candidates.empty()) fail("run_cell: no candidates");
  CellResult result;
  result.policy = candidates.front().name;
  result.seed = seed;
  result.hyperparameters = candidates.front().hyperparameters;

  auto env = envs(seed);
  Rng round_rng = fork_rng(seed, 0);
  Rng random_rng = fork_rng(seed, 2);
  RandomPolicy random;
  std::set<long> checkpoints(cfg.checkpoints.begin(), cfg.checkpoints.end());

  std::vector<detail::Running> runs;
  for (const auto& c : candidates) {
    detail::Running r{nullptr, fork_rng(seed, 1), 0.0, {}, {}, {}};
    r.policy = c.make(*env, r.rng);
    runs.push_back(std::move(r));
  }
  double cum_random = 0.0;
  const long prefix = candidates.size() > 1 ? cfg.validation_prefix : 0;

  auto step = [&](detail::Running& r, const Trial& trial, long t) {
    const auto start = std::chrono::steady_clock::now();
    const Decision dec = r.policy->select(trial.round, r.rng);
    r.policy->update(trial.round, dec, trial.realized(dec.index));
    r.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    const double regret = trial.best - trial.expected(dec.index);
    r.cum += regret;
    if (t % cfg.log_every == 0 || t == cfg.T || checkpoints.count(t)) {
      r.log.push_back({t, r.cum, cum_random});
      if (csv) {
        std::ostringstream row;
        const int item = trial.round.items.empty() ? dec.index : trial.round.items[dec.index];
        row << t << ',' << result.policy << ',' << seed << ',' << trial.round.user << ',' << item << ','
            << detail::format_double(trial.realized(dec.index)) << ','
            << detail::format_double(trial.expected(dec.index)) << ',' << detail::format_double(trial.best) << ','
            << detail::format_double(regret) << ',' << detail::format_double(r.cum) << ','
            << detail::format_double(cum_random) << '\n';
        r.rows.push_back(row.str());
      }
    }
  };

  try {
    for (long t = 1; t <= cfg.T; ++t) {
      Trial trial = env->next_round(round_rng);
      const Decision rd = random.select(trial.round, random_rng);
      cum_random += trial.best - trial.expected(rd.index);
      for (auto& r : runs) step(r, trial, t);
      if (t == prefix) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < runs.size(); ++c)
          if (runs[c].cum < runs[best].cum) best = c;
        result.hyperparameters = candidates[best].hyperparameters;
        detail::Running keep = std::move(runs[best]);
        runs.clear();
        runs.push_back(std::move(keep));
      }
    }
  } catch (const std::exception& e) {
    result.ok = false;
    result.error = e.what();
  }

  auto& r = runs.front();
  if (csv)
    for (const auto& row : r.rows) *csv << row;
  if (timing) {
    *timing << "round,seconds\n";
    for (std::size_t t = 0; t < r.seconds.size(); ++t) *timing << t + 1 << ',' << r.seconds[t] << '\n';
  }
  result.log = std::move(r.log);
  result.median_s_per_iter = detail::median(r.seconds);
  result.trained = std::move(r.policy);
  if (result.ok && result.log.empty()) {
    result.ok = false;
    result.error = "no rounds logged";
  }
  return result;
}

/// Expands a policy entry into its tuning candidates (the cartesian product of its grid).
inline std::vector<Candidate> candidates_for(const PolicyEntry& entry, const LearnSchedule& learn) {
  std::vector<PolicySpec> specs{entry.spec};
  for (const auto& [name, values] : entry.grid) {
    std::vector<PolicySpec> next;
    for (const auto& s : specs)
      for (double v : values) {
        PolicySpec t = s;
        detail::set_hyperparameter(t, name, v);
        next.push_back(t);
      }
    specs = std::move(next);
  }
  std::vector<Candidate> out;
  for (const auto& s : specs)
    out.push_back({std::string(policy_name(s.kind)), hyperparameters_json(s),
                   [s, learn](const Environment& env, Rng& rng) { return make_policy(s, learn, env.graph(), env.d(), rng); }});
  return out;
}

struct ExperimentResult {
  std::vector<CellResult> cells;

  std::vector<const CellResult*> for_policy(const std::string& name) const {
    std::vector<const CellResult*> out;
    for (const auto& c : cells)
      if (c.policy == name) out.push_back(&c);
    return out;
  }

  /// Seed means of cumulative regret, random regret and ratio at `round` over the
  /// successful cells of a policy.
  LogPoint mean_at(const std::string& name, long round, double* mean_ratio = nullptr) const {
    LogPoint acc{round, 0.0, 0.0};
    double ratio = 0.0;
    int count = 0;
    for (const auto* c : for_policy(name)) {
      if (!c->ok) continue;
      const auto& p = c->at(round);
      acc.cum_regret += p.cum_regret;
      acc.cum_random_regret += p.cum_random_regret;
      ratio += p.ratio();
      ++count;
    }
    if (count == 0) fail("no successful cells for ", name);
    acc.cum_regret /= count;
    acc.cum_random_regret /= count;
    if (mean_ratio) *mean_ratio = ratio / count;
    return acc;
  }
};

inline std::string cell_file_stem(const std::string& policy, std::uint64_t seed) {
  std::string stem;
  for (char ch : policy) stem += std::isalnum(static_cast<unsigned char>(ch)) ? static_cast<char>(std::tolower(ch)) : '_';
  return stem + "_seed" + std::to_string(seed);
}

inline void write_aggregate(std::ostream& out, const ExperimentResult& res) {
  out << "# schema_version: " << kCsvSchemaVersion << '\n'
      << "round,policy,seeds,mean_cum_regret,mean_cum_random_regret,mean_ratio\n";
  std::vector<std::string> names;
  for (const auto& c : res.cells)
    if (std::find(names.begin(), names.end(), c.policy) == names.end()) names.push_back(c.policy);
  for (const auto& name : names) {
    std::vector<const CellResult*> ok;
    for (const auto* c : res.for_policy(name))
      if (c->ok) ok.push_back(c);
    if (ok.empty()) continue;
    for (const auto& p : ok.front()->log) {
      double cum = 0.0, rnd = 0.0, ratio = 0.0;
      for (const auto* c : ok) {
        const auto& q = c->at(p.round);
        cum += q.cum_regret;
        rnd += q.cum_random_regret;
        ratio += q.ratio();
      }
      const double k = static_cast<double>(ok.size());
      out << p.round << ',' << name << ',' << ok.size() << ',' << detail::format_double(cum / k) << ','
          << detail::format_double(rnd / k) << ',' << detail::format_double(ratio / k) << '\n';
    }
  }
}

inline json summary_json(const ExperimentConfig& cfg, const ExperimentResult& res) {
  json cells = json::array();
  for (const auto& c : res.cells) {
    json cell{{"policy", c.policy}, {"seed", c.seed}, {"status", c.ok ? "ok" : "failed"}};
    if (!c.ok) cell["error"] = c.error;
    cell["hyperparameters"] = c.hyperparameters;
    if (!c.log.empty()) {
      const auto& f = c.final();
      cell["rounds"] = f.round;
      cell["final_cum_regret"] = f.cum_regret;
      cell["final_cum_random_regret"] = f.cum_random_regret;
      cell["final_ratio"] = f.ratio();
    }
    cell["median_s_per_iter"] = c.median_s_per_iter;
    json cps = json::array();
    for (long t : cfg.checkpoints)
      for (const auto& p : c.log)
        if (p.round == t) cps.push_back(json{{"round", t}, {"cum_regret", p.cum_regret}, {"ratio", p.ratio()}});
    cell["checkpoints"] = cps;
    cells.push_back(std::move(cell));
  }
  return json{{"schema_version", kCsvSchemaVersion}, {"config", config_to_json(cfg)}, {"cells", cells}};
}

/// Runs every (policy, seed) cell. With a nonempty `out_dir` writes one CSV per cell,
/// aggregate.csv, failures.csv and summary.json there.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir = {}) {
  cfg.validate();
  if (cfg.policies.empty()) fail("run_experiment: no policies configured");
  const EnvFactory envs = make_env_factory(cfg.env);
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  ExperimentResult res;
  for (const auto& entry : cfg.policies) {
    const auto candidates = candidates_for(entry, cfg.learn);
    for (std::uint64_t seed : cfg.seeds) {
      std::ofstream csv, timing;
      if (!out_dir.empty()) {
        const auto stem = cell_file_stem(candidates.front().name, seed);
        csv.open(fs::path(out_dir) / (stem + ".csv"));
        timing.open(fs::path(out_dir) / (stem + ".timing.csv"));
        if (!csv || !timing) fail("cannot write cell files in ", out_dir);
        detail::write_csv_header(csv);
      }
      res.cells.push_back(run_cell(cfg, candidates, seed, envs, out_dir.empty() ? nullptr : &csv,
                                   out_dir.empty() ? nullptr : &timing));
    }
  }

  if (!out_dir.empty()) {
    std::ofstream agg(fs::path(out_dir) / "aggregate.csv");
    write_aggregate(agg, res);
    std::ofstream failures(fs::path(out_dir) / "failures.csv");
    failures << "# schema_version: " << kCsvSchemaVersion << "\npolicy,seed,error\n";
    for (const auto& c : res.cells)
      if (!c.ok) {
        std::string msg = c.error;
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::replace(msg.begin(), msg.end(), '"', '\'');
        failures << c.policy << ',' << c.seed << ",\"" << msg << "\"\n";
      }
    std::ofstream(fs::path(out_dir) / "summary.json") << summary_json(cfg, res).dump(2) << '\n';
  }
  return res;
}

// ---------------------------------------------------------------------------
// Timing sweeps
// ---------------------------------------------------------------------------

struct TimingRow {
  int n = 0;
  int d = 0;
  std::string policy;
  long rounds = 0;
  std::size_t edges = 0;
  double median_s_per_iter = 0.0;
};

/// Median decision+update seconds per policy for each (n, d). Every size runs
/// max(min_rounds, rounds_per_node * n) rounds, or T rounds when rounds_per_node is 0.
/// "GOBLIN" selects the dense reference, refused above timing.dense_max_n.
inline std::vector<TimingRow> timing_sweep(const ExperimentConfig& base, const std::vector<std::pair<int, int>>& sizes) {
  std::vector<TimingRow> rows;
  const std::uint64_t seed = base.seeds.front();
  for (auto [n, d] : sizes) {
    EnvSpec spec = base.env;
    spec.n = n;
    spec.d = d;
    if (spec.type != "synthetic") fail("timing_sweep: needs a synthetic environment");
    const long rounds = base.timing.rounds_per_node > 0
                            ? std::max(base.timing.min_rounds, static_cast<long>(base.timing.rounds_per_node * n))
                            : base.T;
    const auto envs = make_env_factory(spec);
    for (const auto& name : base.timing.policies) {
      ExperimentConfig cfg = base;
      cfg.env = spec;
      cfg.T = rounds;
      cfg.validation_prefix = 0;
      cfg.checkpoints.clear();
      cfg.log_every = rounds;
      PolicySpec ps = base.policies.empty() ? PolicySpec{} : base.policies.front().spec;
      Candidate c;
      c.name = name;
      if (name == "GOBLIN") {
        if (n > base.timing.dense_max_n) fail("timing_sweep: dense GOBLIN is limited to n <= ", base.timing.dense_max_n);
        c.make = [ps](const Environment& env, Rng&) {
          return std::make_unique<DenseGoblin>(env.graph(), env.d(), ps.lambda, ps.sigma, ps.alpha);
        };
      } else {
        ps.kind = parse_policy_kind(name);
        c.make = [ps, learn = base.learn](const Environment& env, Rng& rng) {
          return make_policy(ps, learn, env.graph(), env.d(), rng);
        };
      }
      auto cell = run_cell(cfg, {c}, seed, envs);
      if (!cell.ok) fail("timing_sweep: ", name, " at n = ", n, " failed: ", cell.error);
      rows.push_back({n, d, name, rounds, envs(seed)->graph().size(), cell.median_s_per_iter});
    }
  }
  return rows;
}

inline void write_timing_csv(std::ostream& out, const std::vector<TimingRow>& rows) {
  out << "# schema_version: " << kCsvSchemaVersion << '\n' << "n,d,policy,rounds,edges,median_s_per_iter\n";
  for (const auto& r : rows)
    out << r.n << ',' << r.d << ',' << r.policy << ',' << r.rounds << ',' << r.edges << ','
        << detail::format_double(r.median_s_per_iter) << '\n';
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// nu_2, Tr(L^-1)/n, size and density. nu_2 needs a dense eigensolve and is null above
/// `max_dense_n`.
inline json diagnostics(const EdgeList& g, int max_dense_n = 4096) {
  const int n = g.n;
  const bool connected = g.components() <= 1;
  json out{{"n", n}, {"edges", g.size()}, {"density", g.density()}, {"connected", connected}};
  out["trace_inverse_over_n"] = n > 0 ? trace_inverse(normalized_laplacian(g)) / n : 0.0;
  if (n <= max_dense_n) {
    const double nu2 = connected && n > 1 ? algebraic_connectivity(normalized_graph_laplacian(g)) : 0.0;
    out["nu2"] = nu2;
    out["disconnected"] = !connected;
    if (connected && nu2 > 0.0) out["trace_bound"] = (1.0 - 1.0 / n) / nu2 + 1.0 / n;
  } else {
    out["nu2"] = nullptr;
    out["disconnected"] = !connected;
  }
  return out;
}

}  // namespace gob
