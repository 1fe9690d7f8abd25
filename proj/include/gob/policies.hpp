#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <vector>

#include "gob/common.hpp"
#include "gob/gmrf.hpp"
#include "gob/graph.hpp"

namespace gob {

/// One recommendation round: the target user and K candidate contexts (columns).
struct Round {
  long t = 0;
  int user = 0;
  Matrix candidates;       // d x K, each column has norm <= 1
  std::vector<int> items;  // catalog ids, or candidate positions for synthetic rounds

  int k() const { return static_cast<int>(candidates.cols()); }
  int d() const { return static_cast<int>(candidates.rows()); }
};

enum class PolicyKind { gts, geg, goblinpp, linucb_ind, ts_ind, eg_ind, linucb_sin, club, leg, ueg, random };

inline constexpr PolicyKind kAllPolicyKinds[] = {
    PolicyKind::gts,    PolicyKind::geg,        PolicyKind::goblinpp, PolicyKind::linucb_ind,
    PolicyKind::ts_ind, PolicyKind::eg_ind,     PolicyKind::linucb_sin, PolicyKind::club,
    PolicyKind::leg,    PolicyKind::ueg,        PolicyKind::random};

inline std::string_view policy_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::gts: return "G-TS";
    case PolicyKind::geg: return "G-EG";
    case PolicyKind::goblinpp: return "GOBLIN++";
    case PolicyKind::linucb_ind: return "LinUCB-IND";
    case PolicyKind::ts_ind: return "TS-IND";
    case PolicyKind::eg_ind: return "EG-IND";
    case PolicyKind::linucb_sin: return "LinUCB-SIN";
    case PolicyKind::club: return "CLUB";
    case PolicyKind::leg: return "L-EG";
    case PolicyKind::ueg: return "U-EG";
    case PolicyKind::random: return "Random";
  }
  return "?";
}

/// Case-insensitive match on the display names ("g-ts", "GOBLIN++", ...).
inline PolicyKind parse_policy_kind(std::string_view text) {
  auto lower = [](std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  const std::string want = lower(text);
  for (PolicyKind k : kAllPolicyKinds)
    if (lower(policy_name(k)) == want) return k;
  fail("unknown policy kind '", text, "'");
}

enum class EgMode { practical, theoretical };

struct PolicySpec {
  PolicyKind kind = PolicyKind::gts;
  double lambda = 0.01;  // prior strength
  double sigma = 1.0;    // noise scale
  double rho = 0.01;     // posterior reshaping for Thompson sampling
  double alpha = 0.01;   // UCB width discount
  double explore = 0.1;  // exploration fraction, practical epoch-greedy
  EgMode eg_mode = EgMode::practical;
  double epoch_c = 0.0;  // theoretical epoch-greedy constant; 0 derives it from Tr(L^-1)
  double delta = 0.1;    // confidence level in the derived constant
  double club_alpha2 = 1.0;
  double club_edge_p = -1.0;  // initial cluster-graph density; < 0 means 3 ln n / n
  SolveOptions solve;

  void validate() const {
    if (!(lambda > 0.0)) fail("policy ", policy_name(kind), ": lambda must be positive");
    if (!(sigma > 0.0)) fail("policy ", policy_name(kind), ": sigma must be positive");
    if (!(rho > 0.0 && rho <= 1.0)) fail("policy ", policy_name(kind), ": rho must lie in (0, 1]");
    if (!(alpha >= 0.0)) fail("policy ", policy_name(kind), ": alpha must be >= 0");
    if (!(explore >= 0.0 && explore <= 1.0)) fail("policy ", policy_name(kind), ": explore must lie in [0, 1]");
    if (!(epoch_c >= 0.0)) fail("policy ", policy_name(kind), ": epoch constant must be >= 0");
    if (!(delta > 0.0 && delta < 1.0)) fail("policy ", policy_name(kind), ": delta must lie in (0, 1)");
    if (!(club_alpha2 >= 0.0)) fail("policy ", policy_name(kind), ": CLUB alpha2 must be >= 0");
    if (club_edge_p > 1.0) fail("policy ", policy_name(kind), ": CLUB edge probability must be <= 1");
    solve.validate();
  }
};

struct Decision {
  int index = 0;
  bool explored = false;
};

/// Index of the largest score; ties go to the lowest index.
inline int argmax_lowest(const Vector& scores) {
  if (scores.size() == 0) fail("argmax over an empty candidate set");
  int best = 0;
  for (int j = 1; j < scores.size(); ++j)
    if (scores(j) > scores(best)) best = j;
  return best;
}

inline void check_round(const Round& round, int n, int d) {
  if (round.k() < 1) fail("round ", round.t, " has no candidates");
  if (round.d() != d) fail<DimensionError>("round ", round.t, " has context dimension ", round.d(), ", expected ", d);
  if (round.user < 0 || round.user >= n) fail("round ", round.t, " targets user ", round.user, " out of range");
}

inline auto user_block(const StackedVector& w, int user, int d) {
  return w.segment(static_cast<Eigen::Index>(user) * d, d);
}

// ---------------------------------------------------------------------------
// Decision rules on the shared GMRF posterior
// ---------------------------------------------------------------------------

/// Thompson sampling: argmax of the sampled preferences of the target user.
inline int select_gts(PosteriorState& s, const Round& round, double rho, const SolveOptions& opts, Rng& rng) {
  check_round(round, s.n(), s.d());
  StackedVector w = sample_posterior(s, rho, opts, rng);
  return argmax_lowest(round.candidates.transpose() * user_block(w, round.user, s.d()));
}

/// Greedy choice under the MAP estimate.
inline int select_greedy(PosteriorState& s, const Round& round, const SolveOptions& opts) {
  check_round(round, s.n(), s.d());
  if (!s.mean_is_current()) map_estimate(s, opts);
  return argmax_lowest(round.candidates.transpose() * user_block(s.mean_cache(), round.user, s.d()));
}

/// Exploration schedule of epoch-greedy. Practical mode explores each round with a fixed
/// probability. Theoretical mode runs epochs q = 1, 2, ... of one exploration round
/// followed by s_q = max(1, floor(sqrt(q) / C)) exploitation rounds.
class EpochSchedule {
 public:
  EpochSchedule(EgMode mode, double explore, double c) : mode_(mode), explore_(explore), c_(c) {
    if (mode == EgMode::theoretical && !(c > 0.0)) fail("epoch-greedy: constant C must be positive");
  }

  /// C = sqrt(48 Tr(L^-1) / lambda) + sqrt(9 ln(2 / delta) / 2).
  static double derived_constant(double trace_l_inv, double lambda, double delta) {
    return std::sqrt(48.0 * trace_l_inv / lambda) + std::sqrt(4.5 * std::log(2.0 / delta));
  }

  static int exploitation_rounds(int q, double c) {
    return std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(q)) / c)));
  }

  /// Decides whether the next round explores, advancing the schedule.
  bool next(Rng& rng) {
    if (mode_ == EgMode::practical) return explore_ > 0.0 && uniform01(rng) < explore_;
    if (remaining_ == 0) {
      ++epoch_;
      remaining_ = exploitation_rounds(epoch_, c_);
      return true;
    }
    --remaining_;
    return false;
  }

  EgMode mode() const { return mode_; }
  int epoch() const { return epoch_; }

 private:
  EgMode mode_;
  double explore_;
  double c_;
  int epoch_ = 0;
  int remaining_ = 0;
};

/// Epoch-greedy: a uniformly random candidate on exploration rounds, greedy otherwise.
inline Decision select_geg(PosteriorState& s, const Round& round, EpochSchedule& schedule, const SolveOptions& opts,
                           Rng& rng) {
  check_round(round, s.n(), s.d());
  if (schedule.next(rng)) return {uniform_index(rng, round.k()), true};
  return {select_greedy(s, round, opts), false};
}

/// UCB scores mean' phi + alpha sqrt(phi' Sigma^-1 phi) for every candidate.
inline Vector ucb_scores(PosteriorState& s, const Round& round, double alpha, const SolveOptions& opts) {
  if (!s.mean_is_current()) map_estimate(s, opts);
  const int d = s.d();
  Vector scores = round.candidates.transpose() * user_block(s.mean_cache(), round.user, d);
  if (alpha == 0.0) return scores;
  if (round.k() > d) {
    Matrix cov = posterior_covariance_block(s, round.user, opts);
    for (int j = 0; j < round.k(); ++j) {
      const double q = round.candidates.col(j).dot(cov * round.candidates.col(j));
      scores(j) += alpha * std::sqrt(std::max(0.0, q));
    }
  } else {
    for (int j = 0; j < round.k(); ++j)
      scores(j) += alpha * confidence_width(s, round.user, round.candidates.col(j), opts).value;
  }
  return scores;
}

/// GOBLIN++: UCB on the GMRF posterior with the width discounted by alpha.
inline int select_goblinpp(PosteriorState& s, const Round& round, double alpha, const SolveOptions& opts) {
  check_round(round, s.n(), s.d());
  return argmax_lowest(ucb_scores(s, round, alpha, opts));
}

// ---------------------------------------------------------------------------
// Policy objects
// ---------------------------------------------------------------------------

class Policy {
 public:
  virtual ~Policy() = default;
  virtual Decision select(const Round& round, Rng& rng) = 0;
  virtual void update(const Round& round, const Decision& decision, double reward) = 0;
  virtual std::string name() const = 0;
};

/// G-TS, G-EG and GOBLIN++ on a given prior; with the identity prior these are TS-IND,
/// EG-IND and LinUCB-IND.
class GraphBandit : public Policy {
 public:
  enum class Rule { thompson, epoch_greedy, ucb };

  GraphBandit(PolicySpec spec, Rule rule, std::shared_ptr<const PriorGraph> prior, int d)
      : spec_(std::move(spec)),
        rule_(rule),
        state_(std::move(prior), d, spec_.lambda, spec_.sigma),
        schedule_(EgMode::practical, spec_.explore, 1.0) {
    spec_.validate();
    if (rule_ == Rule::epoch_greedy && spec_.eg_mode == EgMode::theoretical) {
      double c = spec_.epoch_c;
      if (c == 0.0)
        c = EpochSchedule::derived_constant(trace_inverse(state_.prior().factor), spec_.lambda, spec_.delta);
      schedule_ = EpochSchedule(EgMode::theoretical, spec_.explore, c);
    }
  }

  Decision select(const Round& round, Rng& rng) override {
    switch (rule_) {
      case Rule::thompson: return {select_gts(state_, round, spec_.rho, spec_.solve, rng), false};
      case Rule::epoch_greedy: return select_geg(state_, round, schedule_, spec_.solve, rng);
      case Rule::ucb: return {select_goblinpp(state_, round, spec_.alpha, spec_.solve), false};
    }
    return {};
  }

  void update(const Round& round, const Decision& decision, double reward) override {
    // Theory-faithful epoch-greedy only learns from exploration rounds.
    if (rule_ == Rule::epoch_greedy && schedule_.mode() == EgMode::theoretical && !decision.explored) return;
    state_.observe(round.user, round.candidates.col(decision.index), reward);
  }

  std::string name() const override { return std::string(policy_name(spec_.kind)); }

  PosteriorState& state() { return state_; }
  const PosteriorState& state() const { return state_; }
  const PolicySpec& spec() const { return spec_; }

 private:
  PolicySpec spec_;
  Rule rule_;
  PosteriorState state_;
  EpochSchedule schedule_;
};

/// d-dimensional ridge summary M = lambda I + sum x x', b = sum r x.
struct RidgeSummary {
  Matrix m;
  Vector b;
  long plays = 0;

  RidgeSummary() = default;
  RidgeSummary(int d, double lambda) : m(lambda * Matrix::Identity(d, d)), b(Vector::Zero(d)) {}

  void add(const Eigen::Ref<const Vector>& x, double r) {
    m.noalias() += x * x.transpose();
    b += r * x;
    ++plays;
  }
};

/// Ridge UCB scores mean' x + alpha sqrt(x' M^-1 x) from a summary.
inline Vector ridge_ucb_scores(const Matrix& m, const Vector& b, const Matrix& candidates, double alpha) {
  Eigen::LLT<Matrix> llt(m);
  Vector mean = llt.solve(b);
  Vector scores = candidates.transpose() * mean;
  if (alpha == 0.0) return scores;
  Matrix half = llt.matrixL().solve(candidates);  // columns L^-1 x
  for (int j = 0; j < candidates.cols(); ++j) scores(j) += alpha * half.col(j).norm();
  return scores;
}

/// LinUCB-SIN: one ridge UCB model shared by all users.
class LinUcbSin : public Policy {
 public:
  LinUcbSin(PolicySpec spec, int d) : spec_(std::move(spec)), model_(d, spec_.lambda) { spec_.validate(); }

  Decision select(const Round& round, Rng&) override {
    if (round.k() < 1 || round.d() != model_.b.size()) fail("LinUCB-SIN: malformed round ", round.t);
    return {argmax_lowest(ridge_ucb_scores(model_.m, model_.b, round.candidates, spec_.alpha)), false};
  }

  void update(const Round& round, const Decision& decision, double reward) override {
    model_.add(round.candidates.col(decision.index), reward);
  }

  std::string name() const override { return "LinUCB-SIN"; }
  const RidgeSummary& model() const { return model_; }

 private:
  PolicySpec spec_;
  RidgeSummary model_;
};

/// CLUB state: per-user ridge summaries, an undirected cluster graph whose connected
/// components are the clusters, and per-cluster aggregated summaries.
class ClubState {
 public:
  ClubState(const EdgeList& init, int d, double lambda, double alpha2)
      : d_(d), lambda_(lambda), alpha2_(alpha2), adj_(init.n), cluster_of_(init.n, -1) {
    users_.assign(init.n, RidgeSummary(d, lambda));
    for (auto [i, j] : init.edges) {
      adj_[i].push_back(j);
      adj_[j].push_back(i);
    }
    for (int i = 0; i < init.n; ++i)
      if (cluster_of_[i] < 0) label_component(i);
  }

  int n() const { return static_cast<int>(users_.size()); }
  int cluster_of(int user) const { return cluster_of_[user]; }
  int cluster_count() const { return static_cast<int>(clusters_.size() - free_.size()); }
  const std::vector<int>& members(int cluster) const { return clusters_[cluster].members; }
  const RidgeSummary& user_summary(int user) const { return users_[user]; }
  const RidgeSummary& cluster_summary(int cluster) const { return clusters_[cluster].summary; }
  bool has_edge(int i, int j) const { return std::find(adj_[i].begin(), adj_[i].end(), j) != adj_[i].end(); }
  std::size_t edge_count() const {
    std::size_t total = 0;
    for (const auto& a : adj_) total += a.size();
    return total / 2;
  }

  Vector cluster_scores(int user, const Matrix& candidates, double alpha) const {
    const auto& c = clusters_[cluster_of_[user]].summary;
    return ridge_ucb_scores(c.m, c.b, candidates, alpha);
  }

  /// sqrt((1 + ln(1 + T)) / (1 + T)).
  static double confidence_bound(long plays) {
    const double t = static_cast<double>(plays);
    return std::sqrt((1.0 + std::log1p(t)) / (1.0 + t));
  }

  /// Records feedback for `user`, then deletes incident edges whose per-user estimates
  /// are too far apart and relabels the user's component if it split.
  void observe(int user, const Eigen::Ref<const Vector>& x, double r) {
    users_[user].add(x, r);
    auto& cs = clusters_[cluster_of_[user]].summary;
    cs.m.noalias() += x * x.transpose();
    cs.b += r * x;
    cs.plays += 1;

    const Vector wi = user_mean(user);
    const double cbi = confidence_bound(users_[user].plays);
    std::vector<int> kept;
    bool removed = false;
    for (int j : adj_[user]) {
      const double gap = (wi - user_mean(j)).norm();
      if (gap > alpha2_ * (cbi + confidence_bound(users_[j].plays))) {
        auto& aj = adj_[j];
        aj.erase(std::find(aj.begin(), aj.end(), user));
        removed = true;
      } else {
        kept.push_back(j);
      }
    }
    if (!removed) return;
    adj_[user] = std::move(kept);
    split_component(user);
  }

 private:
  struct Cluster {
    std::vector<int> members;
    RidgeSummary summary;
  };

  Vector user_mean(int user) const { return users_[user].m.llt().solve(users_[user].b); }

  int new_cluster() {
    if (!free_.empty()) {
      int id = free_.back();
      free_.pop_back();
      return id;
    }
    clusters_.emplace_back();
    return static_cast<int>(clusters_.size()) - 1;
  }

  // BFS from `start` over nodes whose label is `from`, relabelling them with a fresh
  // cluster and rebuilding its aggregate summary.
  int label_component(int start, int from = -1) {
    const int id = new_cluster();
    Cluster& c = clusters_[id];
    c.members.clear();
    c.summary = RidgeSummary(d_, lambda_);
    std::queue<int> queue;
    queue.push(start);
    cluster_of_[start] = id;
    while (!queue.empty()) {
      int u = queue.front();
      queue.pop();
      c.members.push_back(u);
      for (int v : adj_[u])
        if (cluster_of_[v] == from) {
          cluster_of_[v] = id;
          queue.push(v);
        }
    }
    std::sort(c.members.begin(), c.members.end());
    for (int u : c.members) {
      c.summary.m += users_[u].m - lambda_ * Matrix::Identity(d_, d_);
      c.summary.b += users_[u].b;
      c.summary.plays += users_[u].plays;
    }
    return id;
  }

  void split_component(int user) {
    const int old = cluster_of_[user];
    std::vector<int> old_members = std::move(clusters_[old].members);
    clusters_[old].members.clear();
    free_.push_back(old);
    // Mark the old component as unlabelled, then relabel piece by piece.
    constexpr int kPending = -2;
    for (int u : old_members) cluster_of_[u] = kPending;
    for (int u : old_members)
      if (cluster_of_[u] == kPending) label_component(u, kPending);
  }

  int d_;
  double lambda_;
  double alpha2_;
  std::vector<std::vector<int>> adj_;
  std::vector<int> cluster_of_;
  std::vector<RidgeSummary> users_;
  std::vector<Cluster> clusters_;
  std::vector<int> free_;
};

/// CLUB selection by cluster-level UCB, ties to the lowest index.
inline int club_select(const ClubState& club, const Round& round, double alpha) {
  check_round(round, club.n(), round.d());
  return argmax_lowest(club.cluster_scores(round.user, round.candidates, alpha));
}

/// One CLUB round given the reward of each candidate: select, observe, prune.
template <typename RewardFn>
int club_step(ClubState& club, const Round& round, double alpha, RewardFn&& reward) {
  const int j = club_select(club, round, alpha);
  club.observe(round.user, round.candidates.col(j), reward(j));
  return j;
}

class Club : public Policy {
 public:
  Club(PolicySpec spec, int n, int d, Rng& rng)
      : spec_(std::move(spec)),
        club_(erdos_renyi(n, initial_edge_probability(spec_, n), rng), d, spec_.lambda, spec_.club_alpha2) {
    spec_.validate();
  }

  static double initial_edge_probability(const PolicySpec& spec, int n) {
    if (spec.club_edge_p >= 0.0) return spec.club_edge_p;
    if (n < 2) return 0.0;
    return std::min(1.0, 3.0 * std::log(static_cast<double>(n)) / n);
  }

  Decision select(const Round& round, Rng&) override { return {club_select(club_, round, spec_.alpha), false}; }

  void update(const Round& round, const Decision& decision, double reward) override {
    club_.observe(round.user, round.candidates.col(decision.index), reward);
  }

  std::string name() const override { return "CLUB"; }
  const ClubState& state() const { return club_; }

 private:
  PolicySpec spec_;
  ClubState club_;
};

/// Uniformly random candidate; the regret-ratio denominator.
class RandomPolicy : public Policy {
 public:
  Decision select(const Round& round, Rng& rng) override { return {uniform_index(rng, round.k()), true}; }
  void update(const Round&, const Decision&, double) override {}
  std::string name() const override { return "Random"; }
};

}  // namespace gob
