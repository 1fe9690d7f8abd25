#pragma once

// Learning the user precision on the fly. Preference estimation and a graphical-lasso
// update of the n x n precision V alternate:
//
//   V_t = argmin_V  Tr(V S) + lambda2 sum_{i != j} |V_ij| - log det V,
//   S   = lambda W_bar' W_bar + V_{t-1}^-1
//
// W_bar holds the current per-user means with each dimension centred across users.
// The learned V then replaces L in the prior lambda (V kron I_d).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "gob/common.hpp"
#include "gob/gmrf.hpp"
#include "gob/graph.hpp"
#include "gob/policies.hpp"

namespace gob {

struct LearnedPrecision {
  SparseMatrix v;
  Matrix v_inv;
  long edge_count = 0;

  int n() const { return static_cast<int>(v.rows()); }
  double density() const {
    const double pairs = 0.5 * n() * (n() - 1.0);
    return pairs > 0 ? edge_count / pairs : 0.0;
  }

  /// Wraps a PD precision and computes its dense inverse.
  static LearnedPrecision from_dense(const Matrix& v) {
    Eigen::LLT<Matrix> llt(v);
    if (llt.info() != Eigen::Success)
      throw NotPositiveDefinite(-1, Eigen::SelfAdjointEigenSolver<Matrix>(v).eigenvalues().minCoeff());
    LearnedPrecision out;
    out.v = v.sparseView(0.0, 0.0);
    out.v.makeCompressed();
    out.v_inv = llt.solve(Matrix::Identity(v.rows(), v.cols()));
    out.v_inv = 0.5 * (out.v_inv + out.v_inv.transpose()).eval();
    for (int j = 0; j < v.cols(); ++j)
      for (int i = 0; i < j; ++i) out.edge_count += v(i, j) != 0.0;
    return out;
  }
  static LearnedPrecision from_sparse(const SparseMatrix& v) { return from_dense(Matrix(v)); }
};

enum class LearnMode { from_scratch, update_given };  // L-EG, U-EG

struct LearnSchedule {
  int warmup_recs_per_user = 10;
  long update_interval_rounds = 1000;
  long max_edges = 100000;
  double target_sparsity = 0.05;
  LearnMode mode = LearnMode::from_scratch;

  void validate() const {
    if (warmup_recs_per_user < 1 || update_interval_rounds < 1 || max_edges < 1)
      fail("LearnSchedule: counts must be positive");
    if (!(target_sparsity > 0.0 && target_sparsity < 1.0)) fail("LearnSchedule: target_sparsity must lie in (0, 1)");
  }
};

struct GlassoOptions {
  double tol = 1e-7;       // max entry change of V over one sweep
  int max_sweeps = 500;
  int max_inner = 1000;    // coordinate passes per column
};

// ---------------------------------------------------------------------------
// Graphical lasso
// ---------------------------------------------------------------------------

/// lambda W_bar' W_bar + prev^-1 for a d x n matrix W of per-user means.
inline Matrix empirical_cov(const Eigen::Ref<const Matrix>& w, const LearnedPrecision& prev, double lambda) {
  if (w.cols() != prev.n()) fail<DimensionError>("empirical_cov: W has ", w.cols(), " users, precision has ", prev.n());
  Matrix centred = w.colwise() - w.rowwise().mean();
  Matrix s = prev.v_inv;
  s.noalias() += lambda * centred.transpose() * centred;
  return 0.5 * (s + s.transpose());
}

inline double glasso_objective(const Matrix& s, const Matrix& v, double lambda2) {
  Eigen::LLT<Matrix> llt(v);
  if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double offdiag = v.cwiseAbs().sum() - v.diagonal().cwiseAbs().sum();
  return (s.cwiseProduct(v)).sum() + lambda2 * offdiag - logdet;
}

namespace detail {

inline double soft_threshold(double x, double t) { return x > t ? x - t : (x < -t ? x + t : 0.0); }

}  // namespace detail

/// Primal block coordinate descent. Each column step minimizes the objective exactly
/// over (V_12, V_22) with the rest of V fixed, which keeps V PD and the objective
/// non-increasing. `trace`, when given, receives the objective after every sweep.
inline LearnedPrecision graphical_lasso(const Matrix& s, double lambda2, const GlassoOptions& opts = {},
                                        std::vector<double>* trace = nullptr) {
  const int n = static_cast<int>(s.rows());
  if (s.cols() != n) fail<DimensionError>("graphical_lasso: S must be square");
  if (!(lambda2 >= 0.0)) fail("graphical_lasso: lambda2 must be nonnegative, got ", lambda2);
  for (int i = 0; i < n; ++i)
    if (!(s(i, i) > 0.0)) fail("graphical_lasso: S has nonpositive diagonal entry ", s(i, i), " at ", i);

  Matrix v = s.diagonal().cwiseInverse().asDiagonal();
  Matrix w = s.diagonal().asDiagonal();  // w = v^-1 throughout
  std::vector<int> others(std::max(n - 1, 0));
  const double inner_tol = 0.1 * opts.tol;

  for (int sweep = 0; sweep < opts.max_sweeps && n > 1; ++sweep) {
    double change = 0.0;
    for (int j = 0; j < n; ++j) {
      for (int k = 0, c = 0; k < n; ++k)
        if (k != j) others[c++] = k;
      const double s22 = s(j, j);
      Matrix a = w(others, others);
      Vector w12 = w(others, j);
      a.noalias() -= w12 * w12.transpose() / w(j, j);  // inverse of V_11
      Vector s12 = s(others, j);
      Vector theta = v(others, j);
      Vector a_theta = a * theta;

      for (int pass = 0; pass < opts.max_inner; ++pass) {
        double delta = 0.0;
        for (int k = 0; k < n - 1; ++k) {
          const double akk = a(k, k);
          const double c = s12(k) + s22 * (a_theta(k) - akk * theta(k));
          const double next = -detail::soft_threshold(c, lambda2) / (s22 * akk);
          const double step = next - theta(k);
          if (step != 0.0) {
            a_theta.noalias() += step * a.col(k);
            theta(k) = next;
            delta = std::max(delta, std::abs(step));
          }
        }
        if (delta <= inner_tol) break;
      }

      const double v22 = 1.0 / s22 + theta.dot(a_theta);
      change = std::max(change, (theta - v(others, j)).cwiseAbs().maxCoeff());
      change = std::max(change, std::abs(v22 - v(j, j)));
      v(others, j) = theta;
      v(j, others) = theta.transpose();
      v(j, j) = v22;
      // Block inverse with Schur complement 1 / s22.
      w(others, others) = a + s22 * a_theta * a_theta.transpose();
      w(others, j) = -s22 * a_theta;
      w(j, others) = -s22 * a_theta.transpose();
      w(j, j) = s22;
    }
    if (trace) trace->push_back(glasso_objective(s, v, lambda2));
    if (change <= opts.tol) break;
  }
  if (n == 1 && trace) trace->push_back(glasso_objective(s, v, lambda2));
  return LearnedPrecision::from_dense(v);
}

struct TunedGlasso {
  double lambda2 = 0.0;
  LearnedPrecision precision;
};

/// Bisection on lambda2 until the off-diagonal density is within 20% of the target and
/// the edge count is within max_edges.
inline TunedGlasso tune_lambda2(const Matrix& s, double target_sparsity, long max_edges,
                                const GlassoOptions& opts = {}) {
  if (!(target_sparsity > 0.0 && target_sparsity < 1.0)) fail("tune_lambda2: target_sparsity must lie in (0, 1)");
  const int n = static_cast<int>(s.rows());
  const double pairs = 0.5 * n * (n - 1.0);
  const double lo_edges = 0.8 * target_sparsity * pairs;
  const double hi_edges = std::min(1.2 * target_sparsity * pairs, static_cast<double>(max_edges));
  auto ok = [&](const LearnedPrecision& p) { return p.edge_count >= lo_edges && p.edge_count <= hi_edges; };

  double lo = 0.0;
  double hi = 0.0;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < j; ++i) hi = std::max(hi, std::abs(s(i, j)));
  auto dense = graphical_lasso(s, lo, opts);
  if (ok(dense)) return {lo, std::move(dense)};
  auto sparse = graphical_lasso(s, hi, opts);
  if (ok(sparse)) return {hi, std::move(sparse)};
  if (dense.edge_count < lo_edges || sparse.edge_count > hi_edges)
    fail("tune_lambda2: bracket failure, densities ", dense.density(), " at lambda2 = 0 and ", sparse.density(),
         " at lambda2 = ", hi, " for target ", target_sparsity);

  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    auto p = graphical_lasso(s, mid, opts);
    if (ok(p)) return {mid, std::move(p)};
    (p.edge_count > hi_edges ? lo : hi) = mid;
  }
  fail("tune_lambda2: bisection did not reach the density window around ", target_sparsity,
       "; bracket [", lo, ", ", hi, "]");
}

// ---------------------------------------------------------------------------
// Alternating updates
// ---------------------------------------------------------------------------

inline std::shared_ptr<const PriorGraph> prior_from(const LearnedPrecision& p) { return PriorGraph::make(p.v); }

/// Runs one graph update when the schedule calls for it: every user has at least
/// warmup_recs_per_user observations and round_index is a multiple of the interval.
/// Replaces the prior of `s` and returns true in that case.
inline bool learn_step(PosteriorState& s, LearnedPrecision& prev, const LearnSchedule& sched, long round_index,
                       const SolveOptions& solve = {}, const GlassoOptions& glasso = {}) {
  sched.validate();
  if (round_index <= 0 || round_index % sched.update_interval_rounds != 0) return false;
  for (int i = 0; i < s.n(); ++i)
    if (s.observations(i) < sched.warmup_recs_per_user) return false;
  if (!s.mean_is_current()) map_estimate(s, solve);
  Matrix w = as_columns(s.mean_cache(), s.d());
  Matrix cov = empirical_cov(w, prev, s.lambda());
  prev = tune_lambda2(cov, sched.target_sparsity, sched.max_edges, glasso).precision;
  s.set_prior(prior_from(prev));
  return true;
}

/// Off-diagonal support of V as an edge list.
inline EdgeList support_graph(const LearnedPrecision& p) {
  std::vector<std::pair<int, int>> pairs;
  for (int j = 0; j < p.v.outerSize(); ++j)
    for (SparseMatrix::InnerIterator it(p.v, j); it; ++it)
      if (it.row() < j && it.value() != 0.0) pairs.emplace_back(static_cast<int>(it.row()), j);
  return EdgeList::from_pairs(p.n(), std::move(pairs));
}

/// The k pairs with largest |V_ij|, ties broken by (i, j).
inline EdgeList top_edges(const LearnedPrecision& p, std::size_t k) {
  const Matrix v(p.v);
  std::vector<std::pair<int, int>> pairs;
  for (int j = 0; j < v.cols(); ++j)
    for (int i = 0; i < j; ++i) pairs.emplace_back(i, j);
  k = std::min(k, pairs.size());
  std::partial_sort(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(k), pairs.end(),
                    [&](auto a, auto b) {
                      const double x = std::abs(v(a.first, a.second)), y = std::abs(v(b.first, b.second));
                      return x != y ? x > y : a < b;
                    });
  pairs.resize(k);
  return EdgeList::from_pairs(p.n(), std::move(pairs));
}

inline double jaccard(const EdgeList& a, const EdgeList& b) {
  std::vector<std::pair<int, int>> both;
  std::set_intersection(a.edges.begin(), a.edges.end(), b.edges.begin(), b.edges.end(), std::back_inserter(both));
  const double uni = static_cast<double>(a.size() + b.size() - both.size());
  return uni > 0 ? both.size() / uni : 1.0;
}

/// Writes the support as an edge list and the full matrix as whitespace-separated rows.
inline void export_learned(const LearnedPrecision& p, const std::string& edges_path, const std::string& dense_path) {
  write_edge_list(edges_path, support_graph(p));
  std::ofstream out(dense_path);
  if (!out) fail("cannot write ", dense_path);
  out << std::setprecision(17);
  const Matrix v(p.v);
  for (int i = 0; i < v.rows(); ++i) {
    for (int j = 0; j < v.cols(); ++j) out << (j ? " " : "") << v(i, j);
    out << '\n';
  }
}

/// Epoch-greedy GOB with a learned prior: L-EG starts from V_0 = I, U-EG from the
/// given regularized Laplacian.
class GraphLearningPolicy : public Policy {
 public:
  GraphLearningPolicy(PolicySpec spec, LearnSchedule sched, const EdgeList& graph, int d,
                      GlassoOptions glasso = {})
      : sched_(std::move(sched)),
        glasso_(glasso),
        current_(LearnedPrecision::from_sparse(sched_.mode == LearnMode::from_scratch
                                                   ? identity_laplacian(graph.n).entries
                                                   : normalized_laplacian(graph).entries)),
        inner_(std::move(spec), GraphBandit::Rule::epoch_greedy, prior_from(current_), d) {
    sched_.validate();
  }

  Decision select(const Round& round, Rng& rng) override { return inner_.select(round, rng); }

  void update(const Round& round, const Decision& decision, double reward) override {
    inner_.update(round, decision, reward);
    ++rounds_;
    if (learn_step(inner_.state(), current_, sched_, rounds_, inner_.spec().solve, glasso_)) ++updates_;
  }

  std::string name() const override { return inner_.name(); }

  const LearnedPrecision& precision() const { return current_; }
  const PosteriorState& state() const { return inner_.state(); }
  int updates() const { return updates_; }

 private:
  LearnSchedule sched_;
  GlassoOptions glasso_;
  LearnedPrecision current_;
  GraphBandit inner_;
  long rounds_ = 0;
  int updates_ = 0;
};

}  // namespace gob
