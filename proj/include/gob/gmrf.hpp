#pragma once

// Posterior over stacked user preferences in the GMRF view of the gang-of-bandits model:
//
//   w ~ N(0, (lambda L kron I_d)^-1),   r | w ~ N(w_i' x, sigma^2)
//   Sigma_t = (1/sigma^2) Phi' Phi + lambda (L kron I_d),   w_hat = Sigma_t^-1 b / sigma^2
//
// Phi' Phi is block diagonal with one d x d Gram block per user, so Sigma_t is applied
// in O(n d^2 + d nnz(L)) without ever being formed.

#include <cmath>
#include <cstdint>
#include <istream>
#include <memory>
#include <ostream>
#include <utility>
#include <vector>

#include "gob/cg.hpp"
#include "gob/common.hpp"
#include "gob/graph.hpp"

namespace gob {

/// Prior precision P over users (a regularized Laplacian or a learned precision) with
/// its sparse Cholesky factor and a sparse root R (n x m) with R R' = P.
///
/// Built from an edge list, R = [M | I] where column e of M is e_i / sqrt(d_i) -
/// e_j / sqrt(d_j) for edge e = (i, j), so R has |E| + n columns and no fill. Otherwise R
/// is the Cholesky factor with rows returned to the original node order.
struct PriorGraph {
  SparseMatrix precision;
  CholeskyFactor factor;
  SparseMatrix root;

  int n() const { return static_cast<int>(precision.rows()); }

  static std::shared_ptr<const PriorGraph> make(SparseMatrix precision, SparseMatrix root = {}) {
    if (precision.rows() != precision.cols()) fail<DimensionError>("PriorGraph: precision must be square");
    precision.makeCompressed();
    auto g = std::make_shared<PriorGraph>();
    g->factor = sparse_cholesky(precision);
    if (root.size() == 0) {
      std::vector<Triplet> trips;
      trips.reserve(g->factor.nnz());
      for (int k = 0; k < g->factor.lower.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(g->factor.lower, k); it; ++it)
          trips.emplace_back(g->factor.perm[it.row()], k, it.value());
      root.resize(precision.rows(), precision.rows());
      root.setFromTriplets(trips.begin(), trips.end());
    } else if (root.rows() != precision.rows()) {
      fail<DimensionError>("PriorGraph: root must have ", precision.rows(), " rows");
    }
    root.makeCompressed();
    g->root = std::move(root);
    g->precision = std::move(precision);
    return g;
  }

  static std::shared_ptr<const PriorGraph> make(const Laplacian& l) { return make(l.entries); }

  /// L = L_G + I for the graph, with the incidence root.
  static std::shared_ptr<const PriorGraph> make(const EdgeList& g) {
    const auto deg = g.degrees();
    std::vector<Triplet> trips;
    trips.reserve(2 * g.size() + g.n);
    int col = 0;
    for (auto [i, j] : g.edges) {
      trips.emplace_back(i, col, 1.0 / std::sqrt(static_cast<double>(deg[i])));
      trips.emplace_back(j, col, -1.0 / std::sqrt(static_cast<double>(deg[j])));
      ++col;
    }
    for (int i = 0; i < g.n; ++i) trips.emplace_back(i, col++, 1.0);
    SparseMatrix root(g.n, col);
    root.setFromTriplets(trips.begin(), trips.end());
    return make(normalized_laplacian(g).entries, std::move(root));
  }

  static std::shared_ptr<const PriorGraph> identity(int n) { return make(EdgeList::from_pairs(n, {})); }
};

/// Sufficient statistics of the posterior: per-user Gram blocks with their Cholesky
/// factors, b = Phi' r, and the cached MAP estimate used to warm-start CG.
///
/// Factors are kept for gram_i + kGramJitter * I so that rank-1 updates stay well posed
/// while a block is still singular. Users that were never observed have a zero factor.
class PosteriorState {
 public:
  static constexpr double kGramJitter = 1e-10;

  PosteriorState(std::shared_ptr<const PriorGraph> prior, int d, double lambda, double sigma)
      : prior_(std::move(prior)), d_(d), lambda_(lambda), sigma_(sigma) {
    if (!prior_) fail("PosteriorState: missing prior");
    if (d < 1) fail("PosteriorState: dimension must be >= 1, got ", d);
    if (!(lambda > 0.0)) fail("PosteriorState: lambda must be positive, got ", lambda);
    if (!(sigma > 0.0)) fail("PosteriorState: sigma must be positive, got ", sigma);
    n_ = prior_->n();
    gram_ = Matrix::Zero(d_, static_cast<Eigen::Index>(d_) * n_);
    factor_ = gram_;
    counts_.assign(n_, 0);
    b_ = Vector::Zero(dim());
    mean_ = Vector::Zero(dim());
    rebuild_preconditioner();
  }

  int n() const { return n_; }
  int d() const { return d_; }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(d_) * n_; }
  double lambda() const { return lambda_; }
  double sigma() const { return sigma_; }
  long t() const { return t_; }
  const PriorGraph& prior() const { return *prior_; }
  const std::shared_ptr<const PriorGraph>& prior_ptr() const { return prior_; }

  auto gram_block(int user) const { return gram_.middleCols(static_cast<Eigen::Index>(user) * d_, d_); }
  auto gram_factor(int user) const { return factor_.middleCols(static_cast<Eigen::Index>(user) * d_, d_); }
  /// Lower factor of gram_i + lambda sigma^2 prior_ii I, i.e. of sigma^2 times the
  /// user's diagonal block of Sigma_t.
  auto block_factor(int user) const { return precond_.middleCols(static_cast<Eigen::Index>(user) * d_, d_); }
  int observations(int user) const { return counts_[user]; }
  const Vector& b() const { return b_; }

  /// Last MAP estimate; valid for the current data only when mean_is_current().
  const StackedVector& mean_cache() const { return mean_; }
  bool mean_is_current() const { return mean_current_; }
  bool has_warm_start() const { return warm_; }

  void store_mean(StackedVector mean) {
    mean_ = std::move(mean);
    mean_current_ = true;
    warm_ = true;
  }

  /// Adds one observation (x, r) for `user`: rank-1 update of that user's Gram block
  /// and its factor, b_user += r x.
  void observe(int user, const Eigen::Ref<const Vector>& x, double r) {
    check_user(user);
    if (x.size() != d_) fail<DimensionError>("observe: context has size ", x.size(), ", expected ", d_);
    if (!std::isfinite(r)) fail("observe: reward must be finite");
    if (!x.allFinite()) fail("observe: context must be finite");
    if (x.norm() > 1.0 + 1e-9) fail("observe: context norm ", x.norm(), " exceeds 1");
    ++t_;
    mean_current_ = false;
    if (x.isZero(0.0)) return;
    auto g = gram_.middleCols(static_cast<Eigen::Index>(user) * d_, d_);
    auto f = factor_.middleCols(static_cast<Eigen::Index>(user) * d_, d_);
    if (counts_[user] == 0) f.diagonal().setConstant(std::sqrt(kGramJitter));
    ++counts_[user];
    g.noalias() += x * x.transpose();
    cholesky_rank1_update(f, x);
    cholesky_rank1_update(precond_.middleCols(static_cast<Eigen::Index>(user) * d_, d_), x);
    b_.segment(static_cast<Eigen::Index>(user) * d_, d_) += r * x;
  }

  /// Swaps the prior precision (graph learning). The cached mean is kept as a value but
  /// no longer used as a warm start.
  void set_prior(std::shared_ptr<const PriorGraph> prior) {
    if (!prior || prior->n() != n_) fail<DimensionError>("set_prior: prior must have n = ", n_);
    prior_ = std::move(prior);
    mean_current_ = false;
    warm_ = false;
    rebuild_preconditioner();
  }

  /// Binary snapshot of the data summaries (the prior is not included). Round-trips
  /// bit-exactly through load().
  void save(std::ostream& out) const {
    out.write(kMagic, sizeof(kMagic));
    put(out, std::int32_t{n_});
    put(out, std::int32_t{d_});
    put(out, lambda_);
    put(out, sigma_);
    put(out, std::int64_t{t_});
    put(out, static_cast<std::uint8_t>(mean_current_));
    put(out, static_cast<std::uint8_t>(warm_));
    out.write(reinterpret_cast<const char*>(counts_.data()), static_cast<std::streamsize>(counts_.size() * sizeof(int)));
    put_array(out, gram_.data(), gram_.size());
    put_array(out, factor_.data(), factor_.size());
    put_array(out, precond_.data(), precond_.size());
    put_array(out, b_.data(), b_.size());
    put_array(out, mean_.data(), mean_.size());
    if (!out) fail("PosteriorState::save: write failed");
  }

  static PosteriorState load(std::istream& in, std::shared_ptr<const PriorGraph> prior) {
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + sizeof(magic), kMagic)) fail("PosteriorState::load: bad magic");
    auto n = get<std::int32_t>(in);
    auto d = get<std::int32_t>(in);
    auto lambda = get<double>(in);
    auto sigma = get<double>(in);
    if (!prior || prior->n() != n) fail<DimensionError>("PosteriorState::load: prior does not match snapshot n = ", n);
    PosteriorState s(std::move(prior), d, lambda, sigma);
    s.t_ = get<std::int64_t>(in);
    s.mean_current_ = get<std::uint8_t>(in) != 0;
    s.warm_ = get<std::uint8_t>(in) != 0;
    in.read(reinterpret_cast<char*>(s.counts_.data()), static_cast<std::streamsize>(s.counts_.size() * sizeof(int)));
    get_array(in, s.gram_.data(), s.gram_.size());
    get_array(in, s.factor_.data(), s.factor_.size());
    get_array(in, s.precond_.data(), s.precond_.size());
    get_array(in, s.b_.data(), s.b_.size());
    get_array(in, s.mean_.data(), s.mean_.size());
    if (!in) fail("PosteriorState::load: truncated snapshot");
    return s;
  }

 private:
  static constexpr char kMagic[8] = {'G', 'O', 'B', 'S', 'T', 'v', '0', '1'};

  void rebuild_preconditioner() {
    precond_.resize(d_, static_cast<Eigen::Index>(d_) * n_);
    const double scale = lambda_ * sigma_ * sigma_;
    for (int i = 0; i < n_; ++i) {
      Matrix block = gram_.middleCols(static_cast<Eigen::Index>(i) * d_, d_);
      block.diagonal().array() += scale * prior_->precision.coeff(i, i);
      Eigen::LLT<Matrix> llt(block);
      if (llt.info() != Eigen::Success) fail<SolverBreakdown>("preconditioner block of user ", i, " is not PD");
      precond_.middleCols(static_cast<Eigen::Index>(i) * d_, d_) = llt.matrixL();
    }
  }

  void check_user(int user) const {
    if (user < 0 || user >= n_) fail("user index ", user, " out of range [0, ", n_, ")");
  }

  // L L' + x x' -> updated lower factor, O(d^2).
  template <typename Block>
  static void cholesky_rank1_update(Block&& l, Vector x) {
    const Eigen::Index d = x.size();
    for (Eigen::Index k = 0; k < d; ++k) {
      const double lkk = l(k, k);
      const double r = std::hypot(lkk, x(k));
      const double c = r / lkk, s = x(k) / lkk;
      l(k, k) = r;
      for (Eigen::Index i = k + 1; i < d; ++i) {
        l(i, k) = (l(i, k) + s * x(i)) / c;
        x(i) = c * x(i) - s * l(i, k);
      }
    }
  }

  template <typename T>
  static void put(std::ostream& out, T v) { out.write(reinterpret_cast<const char*>(&v), sizeof(T)); }
  template <typename T>
  static T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }
  static void put_array(std::ostream& out, const double* p, Eigen::Index count) {
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(count * sizeof(double)));
  }
  static void get_array(std::istream& in, double* p, Eigen::Index count) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(count * sizeof(double)));
  }

  std::shared_ptr<const PriorGraph> prior_;
  int n_ = 0;
  int d_ = 0;
  double lambda_ = 1.0;
  double sigma_ = 1.0;
  long t_ = 0;
  Matrix gram_;    // d x (d n), user blocks side by side
  Matrix factor_;  // lower-triangular blocks, same layout
  Matrix precond_; // factors of the diagonal blocks of sigma^2 Sigma_t, same layout
  std::vector<int> counts_;
  Vector b_;
  StackedVector mean_;
  bool mean_current_ = true;
  bool warm_ = false;
};

/// Embeds context x for `user` as the stacked vector phi (x in the user's block).
inline StackedVector embed(int n, int user, const Eigen::Ref<const Vector>& x) {
  StackedVector phi = StackedVector::Zero(static_cast<Eigen::Index>(n) * x.size());
  phi.segment(static_cast<Eigen::Index>(user) * x.size(), x.size()) = x;
  return phi;
}

/// Column view of the stacked vector as the d x n matrix of per-user preferences.
inline Eigen::Map<const Matrix> as_columns(const StackedVector& v, int d) {
  return Eigen::Map<const Matrix>(v.data(), d, v.size() / d);
}

/// out = Sigma_t v = (1/sigma^2) blockdiag(gram) v + lambda vec(V L^T), V the d x n
/// reshaping of v.
inline void precision_matvec(const PosteriorState& s, const Vector& v, Vector& out) {
  if (v.size() != s.dim()) fail<DimensionError>("precision_matvec: vector has size ", v.size(), ", expected ", s.dim());
  const int n = s.n(), d = s.d();
  out.resize(v.size());
  Eigen::Map<const Matrix> V(v.data(), d, n);
  Eigen::Map<Matrix> O(out.data(), d, n);
  // L is symmetric, so V L^T = V L.
  O.noalias() = V * s.prior().precision;
  O *= s.lambda();
  const double inv_s2 = 1.0 / (s.sigma() * s.sigma());
  for (int i = 0; i < n; ++i) {
    if (s.observations(i) == 0) continue;
    O.col(i).noalias() += inv_s2 * (s.gram_block(i) * V.col(i));
  }
}

inline StackedVector precision_matvec(const PosteriorState& s, const Vector& v) {
  Vector out;
  precision_matvec(s, v, out);
  return out;
}

/// z = blockdiag(Sigma_t)^-1 r, the block-Jacobi preconditioner.
inline void block_jacobi(const PosteriorState& s, const Vector& r, Vector& z) {
  const int n = s.n(), d = s.d();
  const double s2 = s.sigma() * s.sigma();
  z.resize(r.size());
  for (int i = 0; i < n; ++i) {
    auto zi = z.segment(static_cast<Eigen::Index>(i) * d, d);
    if (s.observations(i) == 0) {  // the block is lambda P_ii I
      zi = r.segment(static_cast<Eigen::Index>(i) * d, d) / (s.lambda() * s.prior().precision.coeff(i, i));
      continue;
    }
    zi = s2 * r.segment(static_cast<Eigen::Index>(i) * d, d);
    const auto f = s.block_factor(i);
    f.triangularView<Eigen::Lower>().solveInPlace(zi);
    f.triangularView<Eigen::Lower>().transpose().solveInPlace(zi);
  }
}

/// Solves Sigma_t x = rhs by (block-Jacobi preconditioned) CG from x0.
inline CgResult solve_precision(const PosteriorState& s, const Vector& rhs, Vector x0, double rel_tol,
                                int max_iters, bool precondition = true) {
  auto apply = [&s](const Vector& v, Vector& out) { precision_matvec(s, v, out); };
  if (!precondition) return cg_solve(apply, rhs, std::move(x0), rel_tol, max_iters);
  return pcg_solve(apply, [&s](const Vector& r, Vector& z) { block_jacobi(s, r, z); }, rhs, std::move(x0), rel_tol,
                   max_iters);
}

/// MAP estimate w_hat with Sigma_t w_hat = b / sigma^2, warm-started from the previous
/// mean when available. Updates the state's mean cache.
inline CgResult map_estimate(PosteriorState& s, const SolveOptions& opts = {}) {
  opts.validate();
  const bool warm = opts.warm_start && s.has_warm_start();
  Vector x0 = warm ? s.mean_cache() : Vector::Zero(s.dim());
  Vector rhs = s.b() / (s.sigma() * s.sigma());
  CgResult res = solve_precision(s, rhs, std::move(x0), opts.rel_tol, opts.cap(warm), opts.precondition);
  s.store_mean(res.x);
  return res;
}

/// Draws w0 ~ N(0, (lambda L kron I_d)^-1) by solving (S^T kron I_d) w0 = z / sqrt(lambda)
/// with the sparse factor S of L, one triangular sweep over d-vectors.
inline StackedVector sample_prior(const PriorGraph& prior, double lambda, int d, Rng& rng) {
  if (!(lambda > 0.0)) fail("sample_prior: lambda must be positive");
  const int n = prior.n();
  Matrix z(d, n);
  fill_normal(z, rng);
  const auto& f = prior.factor;
  Matrix zp(d, n);
  for (int k = 0; k < n; ++k) zp.col(k) = z.col(f.perm[k]);
  zp /= std::sqrt(lambda);
  f.backward_solve(zp);
  StackedVector w(static_cast<Eigen::Index>(d) * n);
  Eigen::Map<Matrix> W(w.data(), d, n);
  for (int k = 0; k < n; ++k) W.col(f.perm[k]) = zp.col(k);
  return w;
}

/// Draws g ~ N(0, Phi' Phi) blockwise as g_i = P_i z_i; cost O(n d^2), independent of t.
inline StackedVector sample_gram_noise(const PosteriorState& s, Rng& rng) {
  const int n = s.n(), d = s.d();
  Matrix z(d, n);
  fill_normal(z, rng);
  StackedVector g = StackedVector::Zero(s.dim());
  Eigen::Map<Matrix> G(g.data(), d, n);
  for (int i = 0; i < n; ++i) {
    if (s.observations(i) == 0) continue;
    G.col(i).noalias() = s.gram_factor(i).triangularView<Eigen::Lower>() * z.col(i);
  }
  return g;
}

/// Draws u ~ N(0, lambda (P kron I_d)) as sqrt(lambda) (R kron I_d) z. This is the term
/// lambda (P kron I_d) w0 of the perturbed right-hand side, without a triangular solve.
inline StackedVector sample_prior_term(const PriorGraph& prior, double lambda, int d, Rng& rng) {
  if (!(lambda > 0.0)) fail("sample_prior_term: lambda must be positive");
  const auto& root = prior.root;
  Matrix z(d, root.cols());
  fill_normal(z, rng);
  z *= std::sqrt(lambda);
  StackedVector u = StackedVector::Zero(static_cast<Eigen::Index>(d) * prior.n());
  Eigen::Map<Matrix> U(u.data(), d, prior.n());
  for (int c = 0; c < root.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(root, c); it; ++it) U.col(it.row()).noalias() += it.value() * z.col(c);
  return u;
}

/// Solves Sigma_t w = u + b / sigma^2 + g / sigma for fixed perturbations. With
/// u ~ N(0, lambda (P kron I_d)) and g ~ N(0, Phi'Phi) the solution is an exact draw
/// from N(w_hat, Sigma_t^-1).
inline CgResult solve_perturbed_term(const PosteriorState& s, const StackedVector& prior_term,
                                     const StackedVector& gram_noise, const SolveOptions& opts) {
  opts.validate();
  Vector rhs = prior_term + s.b() / (s.sigma() * s.sigma()) + gram_noise / s.sigma();
  const bool warm = opts.warm_start && s.has_warm_start();
  Vector x0 = warm ? s.mean_cache() : Vector::Zero(s.dim());
  return solve_precision(s, rhs, std::move(x0), opts.rel_tol, opts.cap(warm), opts.precondition);
}

/// As solve_perturbed_term with the prior perturbation given as a prior sample
/// w0 ~ N(0, (lambda P kron I_d)^-1).
inline CgResult solve_perturbed(const PosteriorState& s, const StackedVector& prior_sample,
                                const StackedVector& gram_noise, const SolveOptions& opts) {
  StackedVector u(s.dim());
  Eigen::Map<const Matrix> W0(prior_sample.data(), s.d(), s.n());
  Eigen::Map<Matrix> U(u.data(), s.d(), s.n());
  U.noalias() = W0 * s.prior().precision;
  U *= s.lambda();
  return solve_perturbed_term(s, u, gram_noise, opts);
}

/// Posterior reshaping: w_hat + sqrt(rho) (w - w_hat).
inline StackedVector reshape_sample(const StackedVector& mean, const StackedVector& sample, double rho) {
  return mean + std::sqrt(rho) * (sample - mean);
}

/// Perturbation-based posterior sample, reshaped by rho in (0, 1]. Refreshes the MAP
/// estimate first if observations arrived since it was computed.
inline StackedVector sample_posterior(PosteriorState& s, double rho, const SolveOptions& opts, Rng& rng) {
  if (!(rho > 0.0 && rho <= 1.0)) fail("sample_posterior: rho must lie in (0, 1], got ", rho);
  if (!s.mean_is_current()) map_estimate(s, opts);
  StackedVector u = sample_prior_term(s.prior(), s.lambda(), s.d(), rng);
  StackedVector g = sample_gram_noise(s, rng);
  CgResult res = solve_perturbed_term(s, u, g, opts);
  return reshape_sample(s.mean_cache(), res.x, rho);
}

struct Width {
  double value = 0.0;
  bool clamped = false;  // phi' Sigma^-1 phi came out negative from CG noise
  int iterations = 0;
};

/// sqrt(phi' Sigma_t^-1 phi) for the stacked embedding of (user, x), one CG solve.
inline Width confidence_width(const PosteriorState& s, int user, const Eigen::Ref<const Vector>& x,
                              const SolveOptions& opts = {}) {
  opts.validate();
  if (user < 0 || user >= s.n()) fail("confidence_width: user ", user, " out of range");
  if (x.size() != s.d()) fail<DimensionError>("confidence_width: context has wrong size");
  Width w;
  if (x.isZero(0.0)) return w;
  StackedVector phi = embed(s.n(), user, x);
  CgResult res = solve_precision(s, phi, Vector::Zero(s.dim()), opts.rel_tol, opts.max_iters, opts.precondition);
  const double q = x.dot(res.x.segment(static_cast<Eigen::Index>(user) * s.d(), s.d()));
  w.iterations = res.iterations;
  if (q < 0.0) {
    w.clamped = true;
    return w;
  }
  w.value = std::sqrt(q);
  return w;
}

/// The user's d x d diagonal block of Sigma_t^-1 (d CG solves). Widths of any number of
/// candidates for that user follow as sqrt(x' B x).
inline Matrix posterior_covariance_block(const PosteriorState& s, int user, const SolveOptions& opts = {}) {
  opts.validate();
  const int d = s.d();
  Matrix block(d, d);
  for (int k = 0; k < d; ++k) {
    Vector e = Vector::Zero(s.dim());
    e(static_cast<Eigen::Index>(user) * d + k) = 1.0;
    CgResult res = solve_precision(s, e, Vector::Zero(s.dim()), opts.rel_tol, opts.max_iters, opts.precondition);
    block.col(k) = res.x.segment(static_cast<Eigen::Index>(user) * d, d);
  }
  return 0.5 * (block + block.transpose());
}

}  // namespace gob
