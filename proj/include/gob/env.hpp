#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "gob/common.hpp"
#include "gob/gmrf.hpp"
#include "gob/graph.hpp"
#include "gob/policies.hpp"

namespace gob {

/// A generated round plus what the environment knows about it.
struct Trial {
  Round round;
  Vector expected;    // expected reward of each candidate
  Vector realized;    // reward revealed if that candidate is chosen
  double best = 0.0;  // best expected reward available this round
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual int n() const = 0;
  virtual int d() const = 0;
  virtual int k() const = 0;
  /// The user graph handed to graph-aware policies.
  virtual const EdgeList& graph() const = 0;
  virtual Trial next_round(Rng& rng) = 0;
};

// ---------------------------------------------------------------------------
// Synthetic environment
// ---------------------------------------------------------------------------

struct SyntheticOptions {
  int k = 25;
  double noise = 0.1;         // reward noise standard deviation
  double lambda_gen = 1.0;    // planting strength
  double plant_shift = 1.0;   // planting precision is L_G + plant_shift * I
  bool independent = false;   // ignore the graph when planting (misspecified prior)
  double clip_sigmas = 3.0;   // noise is clipped to +-clip_sigmas * noise

  void validate() const {
    if (k < 1) fail("synthetic env: K must be >= 1");
    if (!(noise >= 0.0)) fail("synthetic env: noise must be >= 0");
    if (!(lambda_gen > 0.0)) fail("synthetic env: lambda_gen must be positive");
    if (!(plant_shift > 0.0)) fail("synthetic env: plant_shift must be positive");
    if (!(clip_sigmas > 0.0)) fail("synthetic env: clip_sigmas must be positive");
  }
};

/// Linear rewards w*_i' x + clipped Gaussian noise on preferences planted smoothly on
/// the graph. Each round shows K fresh unit-norm contexts.
class SyntheticEnv : public Environment {
 public:
  SyntheticEnv(EdgeList graph, int d, StackedVector w_star, SyntheticOptions opts)
      : graph_(std::move(graph)), d_(d), w_star_(std::move(w_star)), opts_(opts) {
    opts_.validate();
    if (w_star_.size() != static_cast<Eigen::Index>(d_) * graph_.n)
      fail<DimensionError>("synthetic env: w* has the wrong length");
  }

  int n() const override { return graph_.n; }
  int d() const override { return d_; }
  int k() const override { return opts_.k; }
  const EdgeList& graph() const override { return graph_; }
  const StackedVector& w_star() const { return w_star_; }
  auto preference(int user) const { return w_star_.segment(static_cast<Eigen::Index>(user) * d_, d_); }
  const SyntheticOptions& options() const { return opts_; }

  double expected_reward(int user, const Eigen::Ref<const Vector>& x) const { return preference(user).dot(x); }

  double noise(Rng& rng) const {
    if (opts_.noise == 0.0) return 0.0;
    const double e = std::normal_distribution<double>(0.0, opts_.noise)(rng);
    const double c = opts_.clip_sigmas * opts_.noise;
    return std::clamp(e, -c, c);
  }

  double reward(int user, const Eigen::Ref<const Vector>& x, Rng& rng) const {
    return expected_reward(user, x) + noise(rng);
  }

  Trial next_round(Rng& rng) override {
    Trial trial;
    Round& r = trial.round;
    r.t = t_++;
    r.user = uniform_index(rng, graph_.n);
    r.candidates.resize(d_, opts_.k);
    fill_normal(r.candidates, rng);
    for (int j = 0; j < opts_.k; ++j) {
      const double norm = r.candidates.col(j).norm();
      if (norm > 0.0) r.candidates.col(j) /= norm;
      r.items.push_back(j);
    }
    trial.expected = r.candidates.transpose() * preference(r.user);
    trial.realized = trial.expected;
    for (int j = 0; j < opts_.k; ++j) trial.realized(j) += noise(rng);
    trial.best = trial.expected.maxCoeff();
    return trial;
  }

 private:
  EdgeList graph_;
  int d_;
  StackedVector w_star_;
  SyntheticOptions opts_;
  long t_ = 0;
};

/// Rescales each user block of w to norm at most one (blocks already inside are kept).
inline void clip_user_norms(StackedVector& w, int d) {
  for (Eigen::Index i = 0; i < w.size() / d; ++i) {
    auto block = w.segment(i * d, d);
    const double norm = block.norm();
    if (norm > 1.0) block /= norm;
  }
}

/// Plants w* ~ N(0, (lambda_gen (L_G + shift I) kron I_d)^-1), or N(0, I / lambda_gen)
/// when `independent`, then clips each user to norm <= 1.
inline SyntheticEnv gen_synthetic(EdgeList graph, int d, SyntheticOptions opts, Rng& rng) {
  opts.validate();
  if (d < 1) fail("synthetic env: d must be >= 1");
  auto planting = opts.independent ? PriorGraph::identity(graph.n)
                                   : PriorGraph::make(shifted_laplacian(graph, opts.plant_shift));
  StackedVector w = sample_prior(*planting, opts.lambda_gen, d, rng);
  clip_user_norms(w, d);
  return SyntheticEnv(std::move(graph), d, std::move(w), opts);
}

/// Sum over edges of ||w_i - w_j||^2.
inline double graph_roughness(const EdgeList& g, const StackedVector& w, int d) {
  double total = 0.0;
  for (auto [i, j] : g.edges)
    total += (w.segment(static_cast<Eigen::Index>(i) * d, d) - w.segment(static_cast<Eigen::Index>(j) * d, d))
                 .squaredNorm();
  return total;
}

// ---------------------------------------------------------------------------
// Dataset environment
// ---------------------------------------------------------------------------

/// Binary-reward environment over a tagged item catalog: an item is liked by a user
/// when the user interacted with it.
class DatasetEnv : public Environment {
 public:
  DatasetEnv(Matrix features, std::vector<std::vector<int>> liked, EdgeList social, int k)
      : features_(std::move(features)), liked_(std::move(liked)), social_(std::move(social)), k_(k) {
    if (static_cast<int>(liked_.size()) != social_.n) fail("dataset env: user count mismatch");
    if (k_ < 1 || k_ > features_.cols())
      fail("dataset env: K = ", k_, " needs at least that many catalog items, have ", features_.cols());
    for (auto& items : liked_) {
      std::sort(items.begin(), items.end());
      items.erase(std::unique(items.begin(), items.end()), items.end());
      if (items.empty()) fail("dataset env: every user needs at least one liked item");
    }
  }

  int n() const override { return social_.n; }
  int d() const override { return static_cast<int>(features_.rows()); }
  int k() const override { return k_; }
  const EdgeList& graph() const override { return social_; }
  int items() const { return static_cast<int>(features_.cols()); }
  const Matrix& features() const { return features_; }
  const std::vector<int>& liked(int user) const { return liked_[user]; }

  double reward(int user, int item) const {
    return std::binary_search(liked_[user].begin(), liked_[user].end(), item) ? 1.0 : 0.0;
  }

  /// One liked item at a uniform position plus K - 1 distinct other catalog items.
  Trial next_round(Rng& rng) override {
    Trial trial;
    Round& r = trial.round;
    r.t = t_++;
    r.user = uniform_index(rng, n());
    const auto& mine = liked_[r.user];
    const int liked_item = mine[uniform_index(rng, static_cast<int>(mine.size()))];
    std::vector<int> others;
    others.reserve(k_ - 1);
    // Floyd's sampling of K - 1 distinct items from the catalog minus the liked one.
    const int pool = items() - 1;
    std::vector<int> chosen;
    for (int j = pool - (k_ - 1); j < pool; ++j) {
      int v = std::uniform_int_distribution<int>(0, j)(rng);
      if (std::find(chosen.begin(), chosen.end(), v) != chosen.end()) v = j;
      chosen.push_back(v);
    }
    for (int v : chosen) others.push_back(v >= liked_item ? v + 1 : v);
    const int slot = uniform_index(rng, k_);
    r.items.resize(k_);
    for (int j = 0, o = 0; j < k_; ++j) r.items[j] = (j == slot) ? liked_item : others[o++];
    r.candidates.resize(d(), k_);
    trial.expected.resize(k_);
    for (int j = 0; j < k_; ++j) {
      r.candidates.col(j) = features_.col(r.items[j]);
      trial.expected(j) = reward(r.user, r.items[j]);
    }
    trial.realized = trial.expected;
    trial.best = 1.0;
    return trial;
  }

 private:
  Matrix features_;  // d x items
  std::vector<std::vector<int>> liked_;
  EdgeList social_;
  int k_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// HetRec loader
// ---------------------------------------------------------------------------

/// File names and column layout of a HetRec 2011 style directory.
struct HetrecLayout {
  std::string interactions;  // user, item, ...
  int interaction_cols;
  std::string tags;          // user, item, tag, ...
  int tag_cols;
  std::string social;        // user, user, ...
  int social_cols;

  static HetrecLayout lastfm() {
    return {"user_artists.dat", 3, "user_taggedartists.dat", 6, "user_friends.dat", 2};
  }
  /// Delicious has no separate interaction file: tagging a bookmark is the interaction.
  static HetrecLayout delicious() {
    return {"user_taggedbookmarks-timestamps.dat", 4, "user_taggedbookmarks-timestamps.dat", 4,
            "user_contacts-timestamps.dat", 3};
  }
  static HetrecLayout by_name(const std::string& name) {
    if (name == "lastfm") return lastfm();
    if (name == "delicious") return delicious();
    fail("unknown HetRec layout '", name, "' (expected lastfm or delicious)");
  }
};

struct HetrecOptions {
  int d = 25;
  int k = 25;
  std::uint64_t projection_seed = 0;
  bool drop_dangling = false;  // skip tag rows for items outside the interaction catalog
};

/// Loader output: the environment plus the pre-projection TF-IDF table.
struct HetrecData {
  std::shared_ptr<DatasetEnv> env;
  std::vector<long> user_ids;  // original id of each kept user
  std::vector<long> item_ids;  // original id of each catalog item
  std::vector<long> tag_ids;   // original id of each tag column
  SparseMatrix tfidf;          // items x tags, rows L2-normalized
};

namespace detail {

/// Reads integer rows with exactly `cols` columns after a header line.
template <typename Row>
void read_rows(const std::filesystem::path& path, int cols, Row&& on_row) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path.string());
  std::string line;
  long lineno = 0;
  std::vector<long> values;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ss(line);
    values.clear();
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        long v = std::stol(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        values.push_back(v);
      } catch (const std::exception&) {
        fail(path.string(), ":", lineno, ": expected an integer, got '", tok, "'");
      }
    }
    if (static_cast<int>(values.size()) != cols)
      fail(path.string(), ":", lineno, ": expected ", cols, " columns, got ", values.size());
    on_row(values, lineno);
  }
}

}  // namespace detail

/// Achlioptas sparse random projection: entries sqrt(3 / d) * {+1, 0, -1} with
/// probabilities {1/6, 2/3, 1/6}, generated column by column from `rng`.
inline Matrix sparse_random_projection(int d, int columns, Rng& rng) {
  Matrix r = Matrix::Zero(d, columns);
  const double scale = std::sqrt(3.0 / d);
  for (int c = 0; c < columns; ++c)
    for (int i = 0; i < d; ++i) {
      const double u = uniform01(rng);
      if (u < 1.0 / 6.0)
        r(i, c) = scale;
      else if (u < 1.0 / 3.0)
        r(i, c) = -scale;
    }
  return r;
}

/// TF-IDF rows (raw tag counts times log(N / df)), each row L2-normalized.
inline SparseMatrix tfidf_table(const std::vector<std::map<int, int>>& counts, int n_tags) {
  const int n_items = static_cast<int>(counts.size());
  std::vector<int> df(n_tags, 0);
  for (const auto& row : counts)
    for (auto [tag, c] : row) ++df[tag];
  std::vector<Triplet> trips;
  for (int item = 0; item < n_items; ++item) {
    double norm2 = 0.0;
    std::vector<std::pair<int, double>> row;
    for (auto [tag, c] : counts[item]) {
      const double w = c * std::log(static_cast<double>(n_items) / df[tag]);
      row.emplace_back(tag, w);
      norm2 += w * w;
    }
    if (norm2 == 0.0) continue;
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto [tag, w] : row)
      if (w != 0.0) trips.emplace_back(item, tag, w * inv);
  }
  SparseMatrix t(n_items, n_tags);
  t.setFromTriplets(trips.begin(), trips.end());
  t.makeCompressed();
  return t;
}

/// Loads a HetRec-style directory: catalog = items with at least one interaction,
/// features = TF-IDF over tags projected to d dimensions and renormalized, users =
/// those with at least one interaction, social graph reindexed onto them.
inline HetrecData load_hetrec(const std::filesystem::path& dir, const HetrecLayout& layout,
                              const HetrecOptions& opts) {
  if (opts.d < 1) fail("load_hetrec: d must be >= 1");
  for (const auto& f : {layout.interactions, layout.tags, layout.social})
    if (!std::filesystem::exists(dir / f)) fail("load_hetrec: missing file ", (dir / f).string());

  HetrecData out;
  std::map<long, std::vector<long>> user_items;
  std::map<long, int> item_index;
  detail::read_rows(dir / layout.interactions, layout.interaction_cols, [&](const std::vector<long>& v, long) {
    user_items[v[0]].push_back(v[1]);
    item_index.emplace(v[1], 0);
  });
  for (auto& [id, idx] : item_index) {
    idx = static_cast<int>(out.item_ids.size());
    out.item_ids.push_back(id);
  }

  std::map<long, int> tag_index;
  std::vector<std::tuple<int, long>> assignments;  // (item, tag id)
  const auto tag_path = dir / layout.tags;
  detail::read_rows(tag_path, layout.tag_cols, [&](const std::vector<long>& v, long lineno) {
    auto it = item_index.find(v[1]);
    if (it == item_index.end()) {
      if (opts.drop_dangling) return;
      fail(tag_path.string(), ":", lineno, ": item ", v[1], " has no interactions");
    }
    assignments.emplace_back(it->second, v[2]);
    tag_index.emplace(v[2], 0);
  });
  for (auto& [id, idx] : tag_index) {
    idx = static_cast<int>(out.tag_ids.size());
    out.tag_ids.push_back(id);
  }
  std::vector<std::map<int, int>> counts(out.item_ids.size());
  for (auto [item, tag] : assignments) ++counts[item][tag_index[tag]];
  out.tfidf = tfidf_table(counts, static_cast<int>(out.tag_ids.size()));

  Rng proj_rng(mix_seed(opts.projection_seed, 0x70726f6a));
  Matrix r = sparse_random_projection(opts.d, static_cast<int>(out.tag_ids.size()), proj_rng);
  Matrix features = r * out.tfidf.transpose();  // d x items
  for (int j = 0; j < features.cols(); ++j) {
    const double norm = features.col(j).norm();
    if (norm > 0.0) features.col(j) /= norm;
  }

  std::map<long, int> user_index;
  std::vector<std::vector<int>> liked;
  for (const auto& [uid, items] : user_items) {
    user_index.emplace(uid, static_cast<int>(out.user_ids.size()));
    out.user_ids.push_back(uid);
    std::vector<int> mine;
    for (long item : items) mine.push_back(item_index[item]);
    liked.push_back(std::move(mine));
  }

  std::vector<std::pair<int, int>> pairs;
  detail::read_rows(dir / layout.social, layout.social_cols, [&](const std::vector<long>& v, long) {
    auto a = user_index.find(v[0]), b = user_index.find(v[1]);
    if (a == user_index.end() || b == user_index.end()) return;  // user without interactions
    pairs.emplace_back(a->second, b->second);
  });
  EdgeList social = EdgeList::from_pairs(static_cast<int>(out.user_ids.size()), std::move(pairs));
  out.env = std::make_shared<DatasetEnv>(std::move(features), std::move(liked), std::move(social), opts.k);
  return out;
}

}  // namespace gob
