#pragma once

// Dense reference computations shared by the unit and acceptance tests. Everything
// here forms full matrices and is only meant for small instances.

#include <cmath>
#include <vector>

#include "gob/gmrf.hpp"
#include "gob/graph.hpp"

namespace gob::oracle {

/// Dense regularized Laplacian straight from the adjacency matrix.
inline Matrix dense_laplacian(const EdgeList& g) {
  Matrix a = Matrix::Zero(g.n, g.n);
  for (auto [i, j] : g.edges) a(i, j) = a(j, i) = 1.0;
  Vector deg = a.rowwise().sum();
  Matrix l = Matrix::Identity(g.n, g.n);
  for (int i = 0; i < g.n; ++i) {
    if (deg(i) == 0) continue;
    l(i, i) += 1.0;
    for (int j = 0; j < g.n; ++j)
      if (a(i, j) != 0.0) l(i, j) -= 1.0 / std::sqrt(deg(i) * deg(j));
  }
  return l;
}

/// Observation history kept explicitly, so the oracle never touches the structured state.
struct History {
  std::vector<int> users;
  std::vector<Vector> xs;
  std::vector<double> rs;
};

/// Phi' Phi assembled from the raw history.
inline Matrix dense_gram(const History& h, int n, int d) {
  Matrix g = Matrix::Zero(n * d, n * d);
  for (std::size_t k = 0; k < h.users.size(); ++k) {
    Vector phi = embed(n, h.users[k], h.xs[k]);
    g += phi * phi.transpose();
  }
  return g;
}

inline Vector dense_b(const History& h, int n, int d) {
  Vector b = Vector::Zero(n * d);
  for (std::size_t k = 0; k < h.users.size(); ++k) b += h.rs[k] * embed(n, h.users[k], h.xs[k]);
  return b;
}

/// Sigma_t = Phi'Phi / sigma^2 + lambda (L kron I_d).
inline Matrix dense_precision(const History& h, const Matrix& l, int d, double lambda, double sigma) {
  const int n = static_cast<int>(l.rows());
  Matrix kron = Matrix::Zero(n * d, n * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) kron.block(i * d, j * d, d, d) = l(i, j) * Matrix::Identity(d, d);
  return dense_gram(h, n, d) / (sigma * sigma) + lambda * kron;
}

/// Minimizer of sum_k (r_k - w' phi_k)^2 / sigma^2 + lambda w'(L kron I)w.
inline Vector dense_map(const History& h, const Matrix& l, int d, double lambda, double sigma) {
  Matrix sigma_t = dense_precision(h, l, d, lambda, sigma);
  Vector rhs = dense_b(h, static_cast<int>(l.rows()), d) / (sigma * sigma);
  return sigma_t.llt().solve(rhs);
}

/// Draws a context with norm at most one: Gaussian direction, uniform radius.
inline Vector random_context(int d, Rng& rng) {
  Vector x(d);
  fill_normal(x, rng);
  return x.normalized() * uniform01(rng);
}

/// Random small instance: graph, structured state and the matching raw history.
struct Instance {
  EdgeList graph;
  Matrix l;
  PosteriorState state;
  History history;
};

inline Instance random_instance(int n, int d, int t, double lambda, double sigma, Rng& rng, double p = 0.5) {
  EdgeList g = erdos_renyi(n, p, rng);
  auto prior = PriorGraph::make(normalized_laplacian(g));
  Instance inst{g, dense_laplacian(g), PosteriorState(prior, d, lambda, sigma), {}};
  for (int k = 0; k < t; ++k) {
    int user = uniform_index(rng, n);
    Vector x = random_context(d, rng);
    double r = std::normal_distribution<double>(0.0, 1.0)(rng);
    inst.state.observe(user, x, r);
    inst.history.users.push_back(user);
    inst.history.xs.push_back(x);
    inst.history.rs.push_back(r);
  }
  return inst;
}

/// One perturbation sample with dense linear algebra for fixed (w0, g).
inline Vector dense_perturbed_sample(const Instance& inst, const Vector& w0, const Vector& g) {
  const auto& s = inst.state;
  const int n = s.n(), d = s.d();
  Matrix kron = Matrix::Zero(n * d, n * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) kron.block(i * d, j * d, d, d) = inst.l(i, j) * Matrix::Identity(d, d);
  Matrix sigma_t = dense_precision(inst.history, inst.l, d, s.lambda(), s.sigma());
  Vector rhs = s.lambda() * kron * w0 + dense_b(inst.history, n, d) / (s.sigma() * s.sigma()) + g / s.sigma();
  return sigma_t.llt().solve(rhs);
}

/// Same with the prior perturbation given directly as u = lambda (L kron I_d) w0.
inline Vector dense_perturbed_term(const Instance& inst, const Vector& u, const Vector& g) {
  const auto& s = inst.state;
  Matrix sigma_t = dense_precision(inst.history, inst.l, s.d(), s.lambda(), s.sigma());
  Vector rhs = u + dense_b(inst.history, s.n(), s.d()) / (s.sigma() * s.sigma()) + g / s.sigma();
  return sigma_t.llt().solve(rhs);
}

/// Glasso objective minimized by proximal gradient with Barzilai-Borwein steps and
/// backtracking that keeps the iterate PD. Slow but independent of the column solver.
inline Matrix prox_gradient_glasso(const Matrix& s, double lambda2, int max_iters = 200000, double tol = 1e-13) {
  const int n = static_cast<int>(s.rows());
  auto smooth = [&](const Matrix& v, double& f) {
    Eigen::LLT<Matrix> llt(v);
    if (llt.info() != Eigen::Success) return false;
    f = s.cwiseProduct(v).sum() - 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return true;
  };
  auto prox = [&](Matrix v, double t) {
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        if (i == j) continue;
        const double x = v(i, j), k = t * lambda2;
        v(i, j) = x > k ? x - k : (x < -k ? x + k : 0.0);
      }
    return v;
  };
  Matrix v = s.diagonal().cwiseInverse().asDiagonal();
  double f = 0.0;
  smooth(v, f);
  Matrix grad = s - v.inverse();
  double step = 1.0;
  for (int it = 0; it < max_iters; ++it) {
    Matrix next;
    double f_next = 0.0;
    for (double t = step;; t *= 0.5) {
      next = prox(v - t * grad, t);
      const Matrix delta = next - v;
      if (smooth(next, f_next) && f_next <= f + grad.cwiseProduct(delta).sum() + delta.squaredNorm() / (2.0 * t)) break;
      if (t < 1e-20) return v;
    }
    const Matrix delta = next - v;
    Matrix grad_next = s - next.inverse();
    grad_next = 0.5 * (grad_next + grad_next.transpose()).eval();
    const Matrix dg = grad_next - grad;
    v = next;
    f = f_next;
    grad = grad_next;
    if (delta.cwiseAbs().maxCoeff() < tol) break;
    const double denom = delta.cwiseProduct(dg).sum();
    step = denom > 0 ? delta.squaredNorm() / denom : 1.0;
  }
  return v;
}

/// Random SPD matrix with eigenvalues in [0.5, 2.5].
inline Matrix random_spd(int n, Rng& rng) {
  Matrix g(n, n);
  fill_normal(g, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  Vector eig(n);
  for (int i = 0; i < n; ++i) eig(i) = 0.5 + 2.0 * uniform01(rng);
  Matrix out = q * eig.asDiagonal() * q.transpose();
  return 0.5 * (out + out.transpose());
}

}  // namespace gob::oracle
