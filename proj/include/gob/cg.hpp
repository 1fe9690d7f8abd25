#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>

#include "gob/common.hpp"

namespace gob {

/// Stopping rule for conjugate gradient.
struct SolveOptions {
  double rel_tol = 1e-6;    // stop when ||A x - b|| <= rel_tol * ||b||
  int max_iters = 200;      // cap for cold starts
  bool warm_start = true;   // start from the previous solution when one exists
  int warm_max_iters = 20;  // cap when warm-started
  bool precondition = true; // block-Jacobi on the per-user blocks

  void validate() const {
    if (!(rel_tol > 0.0)) fail("SolveOptions: rel_tol must be positive");
    if (max_iters < 1 || warm_max_iters < 1) fail("SolveOptions: iteration caps must be >= 1");
  }

  int cap(bool warm) const { return warm ? std::min(max_iters, warm_max_iters) : max_iters; }

  static SolveOptions exact(double tol = 1e-12, int iters = 5000) { return {tol, iters, false, iters, true}; }
};

struct CgResult {
  Vector x;
  int iterations = 0;
  double rel_residual = 0.0;
  bool converged = false;
};

/// Signals an indefinite operator or corrupted state.
class SolverBreakdown : public Error {
 public:
  using Error::Error;
};

template <typename F>
concept LinearOperator = requires(F f, const Vector& v, Vector& out) { f(v, out); };

/// Preconditioned conjugate gradient for a symmetric positive definite operator
/// `apply(v, out)` (out = A v) with an SPD preconditioner `precond(r, z)` (z ~ A^-1 r).
/// Starts from x0 and stops when ||b - A x|| <= rel_tol ||b|| or after `max_iters`,
/// returning the last iterate with converged = false in that case.
template <LinearOperator Apply, LinearOperator Precond>
CgResult pcg_solve(Apply&& apply, Precond&& precond, const Vector& rhs, Vector x0, double rel_tol, int max_iters) {
  CgResult res;
  const Eigen::Index dim = rhs.size();
  if (x0.size() != dim) fail<DimensionError>("cg_solve: start vector has size ", x0.size(), ", expected ", dim);
  const double rhs_norm = rhs.norm();
  if (!std::isfinite(rhs_norm)) fail<SolverBreakdown>("cg_solve: non-finite right-hand side");
  if (rhs_norm == 0.0) {
    res.x = Vector::Zero(dim);
    res.converged = true;
    return res;
  }
  res.x = std::move(x0);
  Vector r(dim), z(dim), p(dim), ap(dim);
  apply(res.x, ap);
  r = rhs - ap;
  double rr = r.squaredNorm();
  const double stop = rel_tol * rel_tol * rhs_norm * rhs_norm;
  int it = 0;
  double rz = 0.0;
  if (rr > stop) {
    precond(r, z);
    p = z;
    rz = r.dot(z);
  }
  while (rr > stop && it < max_iters) {
    apply(p, ap);
    const double pap = p.dot(ap);
    if (!std::isfinite(pap) || pap <= 0.0)
      fail<SolverBreakdown>("cg_solve: non-positive curvature p'Ap = ", pap, " at iteration ", it);
    const double alpha = rz / pap;
    res.x.noalias() += alpha * p;
    r.noalias() -= alpha * ap;
    rr = r.squaredNorm();
    if (!std::isfinite(rr)) fail<SolverBreakdown>("cg_solve: residual became non-finite");
    ++it;
    if (rr <= stop) break;
    precond(r, z);
    const double rz_next = r.dot(z);
    p = z + (rz_next / rz) * p;
    rz = rz_next;
  }
  res.iterations = it;
  res.rel_residual = std::sqrt(rr) / rhs_norm;
  res.converged = rr <= stop;
  return res;
}

/// Unpreconditioned conjugate gradient.
template <LinearOperator Apply>
CgResult cg_solve(Apply&& apply, const Vector& rhs, Vector x0, double rel_tol, int max_iters) {
  return pcg_solve(std::forward<Apply>(apply), [](const Vector& r, Vector& z) { z = r; }, rhs, std::move(x0),
                   rel_tol, max_iters);
}

template <LinearOperator Apply>
CgResult cg_solve(Apply&& apply, const Vector& rhs, Vector x0, const SolveOptions& opts) {
  opts.validate();
  return cg_solve(std::forward<Apply>(apply), rhs, std::move(x0), opts.rel_tol, opts.max_iters);
}

}  // namespace gob
