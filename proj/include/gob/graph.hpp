#pragma once

// User graphs and the prior precision built from them.
//
// The prior over stacked preferences is N(0, (lambda * L kron I_d)^-1) with
// L = L_G + I_n, L_G the normalized graph Laplacian. Isolated nodes keep a zero
// row/column in L_G, so L stays positive definite with unit diagonal there.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/OrderingMethods>

#include "gob/common.hpp"

namespace gob {

// ---------------------------------------------------------------------------
// Edge lists
// ---------------------------------------------------------------------------

/// Undirected simple graph on nodes [0, n). Pairs are stored as (i, j) with i < j,
/// sorted and unique.
struct EdgeList {
  int n = 0;
  std::vector<std::pair<int, int>> edges;

  /// Canonicalizes arbitrary pairs: orders each pair, drops self-loops and duplicates.
  static EdgeList from_pairs(int n, std::vector<std::pair<int, int>> pairs) {
    if (n < 0) fail("EdgeList: negative node count ", n);
    EdgeList out;
    out.n = n;
    out.edges.reserve(pairs.size());
    for (auto [i, j] : pairs) {
      if (i < 0 || j < 0 || i >= n || j >= n)
        fail("EdgeList: edge (", i, ", ", j, ") out of range for n = ", n);
      if (i == j) continue;
      if (i > j) std::swap(i, j);
      out.edges.emplace_back(i, j);
    }
    std::sort(out.edges.begin(), out.edges.end());
    out.edges.erase(std::unique(out.edges.begin(), out.edges.end()), out.edges.end());
    return out;
  }

  std::size_t size() const { return edges.size(); }

  /// Fraction of the n(n-1)/2 possible pairs that are present.
  double density() const {
    if (n < 2) return 0.0;
    return static_cast<double>(edges.size()) / (0.5 * n * (n - 1.0));
  }

  std::vector<int> degrees() const {
    std::vector<int> deg(n, 0);
    for (auto [i, j] : edges) {
      ++deg[i];
      ++deg[j];
    }
    return deg;
  }

  /// Number of connected components (union-find).
  int components() const {
    std::vector<int> parent(n);
    for (int i = 0; i < n; ++i) parent[i] = i;
    auto find = [&](int x) {
      while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
      }
      return x;
    };
    int count = n;
    for (auto [i, j] : edges) {
      int a = find(i), b = find(j);
      if (a != b) {
        parent[a] = b;
        --count;
      }
    }
    return count;
  }
};

/// Reads the edge-list text format: a header line "n <count>", then one "i j" pair per
/// line, 0-based. Blank lines and lines starting with '#' are skipped.
inline EdgeList read_edge_list(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  int line_no = 0;
  std::optional<int> n;
  std::vector<std::pair<int, int>> pairs;
  while (std::getline(in, line)) {
    ++line_no;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream row(line);
    if (!n) {
      std::string key;
      int count = -1;
      if (!(row >> key >> count) || key != "n" || count < 0)
        fail(source, ":", line_no, ": expected header line \"n <count>\"");
      n = count;
      continue;
    }
    long long i = -1, j = -1;
    std::string extra;
    if (!(row >> i >> j) || (row >> extra))
      fail(source, ":", line_no, ": expected exactly two node indices");
    if (i < 0 || j < 0 || i >= *n || j >= *n)
      fail(source, ":", line_no, ": node index out of range for n = ", *n);
    pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
  }
  if (!n) fail(source, ": missing header line \"n <count>\"");
  return EdgeList::from_pairs(*n, std::move(pairs));
}

inline EdgeList read_edge_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open edge list ", path);
  return read_edge_list(in, path);
}

inline void write_edge_list(std::ostream& out, const EdgeList& g) {
  out << "n " << g.n << '\n';
  for (auto [i, j] : g.edges) out << i << ' ' << j << '\n';
}

inline void write_edge_list(const std::string& path, const EdgeList& g) {
  std::ofstream out(path);
  if (!out) fail("cannot write edge list ", path);
  write_edge_list(out, g);
}

// ---------------------------------------------------------------------------
// Laplacians
// ---------------------------------------------------------------------------

enum class LaplacianKind {
  normalized,   // L_G = I - D^-1/2 A D^-1/2, PSD with spectrum in [0, 2]
  regularized,  // L = L_G + I_n, PD with spectrum in [1, 3]
};

struct Laplacian {
  SparseMatrix entries;
  LaplacianKind kind = LaplacianKind::regularized;

  int n() const { return static_cast<int>(entries.rows()); }
  Matrix dense() const { return Matrix(entries); }
};

namespace detail {

inline SparseMatrix laplacian_entries(const EdgeList& g, double shift) {
  const auto deg = g.degrees();
  std::vector<Triplet> trips;
  trips.reserve(2 * g.edges.size() + g.n);
  for (int i = 0; i < g.n; ++i) {
    double diag = (deg[i] > 0 ? 1.0 : 0.0) + shift;
    trips.emplace_back(i, i, diag);
  }
  for (auto [i, j] : g.edges) {
    double w = -1.0 / std::sqrt(static_cast<double>(deg[i]) * deg[j]);
    trips.emplace_back(i, j, w);
    trips.emplace_back(j, i, w);
  }
  SparseMatrix m(g.n, g.n);
  m.setFromTriplets(trips.begin(), trips.end());
  m.makeCompressed();
  return m;
}

}  // namespace detail

/// L_G = I - D^-1/2 A D^-1/2 restricted to non-isolated nodes.
inline Laplacian normalized_graph_laplacian(const EdgeList& g) {
  return {detail::laplacian_entries(g, 0.0), LaplacianKind::normalized};
}

/// Regularized normalized Laplacian L = L_G + I_n, the prior precision over users.
inline Laplacian normalized_laplacian(const EdgeList& g) {
  return {detail::laplacian_entries(g, 1.0), LaplacianKind::regularized};
}

/// L_G + shift * I. Only used to plant ground-truth preferences with a chosen strength
/// of smoothness; shift = 1 reproduces normalized_laplacian.
inline SparseMatrix shifted_laplacian(const EdgeList& g, double shift) {
  if (!(shift > 0.0)) fail("shifted_laplacian: shift must be positive, got ", shift);
  return detail::laplacian_entries(g, shift);
}

inline Laplacian identity_laplacian(int n) {
  SparseMatrix eye(n, n);
  eye.setIdentity();
  eye.makeCompressed();
  return {eye, LaplacianKind::regularized};
}

// ---------------------------------------------------------------------------
// Random graph generators
// ---------------------------------------------------------------------------

/// Each unordered pair is included independently with probability p.
inline EdgeList erdos_renyi(int n, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) fail("erdos_renyi: p must lie in [0, 1], got ", p);
  EdgeList g;
  g.n = n;
  if (n < 2 || p == 0.0) return g;
  const long long pairs = static_cast<long long>(n) * (n - 1) / 2;
  auto emit = [&](long long idx) {
    // Pairs are enumerated column by column: (0,1), (0,2), (1,2), (0,3), ...
    long long j = static_cast<long long>((1.0 + std::sqrt(1.0 + 8.0 * static_cast<double>(idx))) / 2.0);
    while (j * (j - 1) / 2 > idx) --j;
    while ((j + 1) * j / 2 <= idx) ++j;
    long long i = idx - j * (j - 1) / 2;
    g.edges.emplace_back(static_cast<int>(i), static_cast<int>(j));
  };
  if (p == 1.0) {
    for (long long idx = 0; idx < pairs; ++idx) emit(idx);
  } else {
    // Geometric skipping between successes.
    const double log_q = std::log1p(-p);
    long long idx = -1;
    while (true) {
      double u = uniform01(rng);
      if (u <= 0.0) u = std::numeric_limits<double>::min();
      idx += 1 + static_cast<long long>(std::floor(std::log(u) / log_q));
      if (idx >= pairs || idx < 0) break;
      emit(idx);
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  return g;
}

using KroneckerSeed = std::array<std::array<double, 2>, 2>;

/// Expected number of undirected edges of a symmetrized stochastic Kronecker sample
/// (pair {u, v}, u != v, present if either directed draw succeeded).
inline double kronecker_expected_edges(const KroneckerSeed& seed, int power) {
  const double s = seed[0][0] + seed[0][1] + seed[1][0] + seed[1][1];
  const double tr = seed[0][0] + seed[1][1];
  const double q = seed[0][0] * seed[0][0] + 2.0 * seed[0][1] * seed[1][0] + seed[1][1] * seed[1][1];
  const double tr2 = seed[0][0] * seed[0][0] + seed[1][1] * seed[1][1];
  const double k = power;
  return 0.5 * (2.0 * (std::pow(s, k) - std::pow(tr, k)) - (std::pow(q, k) - std::pow(tr2, k)));
}

inline double kronecker_expected_density(const KroneckerSeed& seed, int power) {
  const double n = std::ldexp(1.0, power);
  return kronecker_expected_edges(seed, power) / (0.5 * n * (n - 1.0));
}

/// Uniformly rescales the seed so that the expected undirected density equals `target`.
inline KroneckerSeed rescale_kronecker_seed(const KroneckerSeed& seed, int power, double target) {
  if (!(target > 0.0 && target <= 1.0)) fail("kronecker: target density must lie in (0, 1], got ", target);
  double max_entry = 0.0;
  for (const auto& row : seed)
    for (double v : row) max_entry = std::max(max_entry, v);
  if (max_entry <= 0.0) fail("kronecker: all-zero seed cannot reach density ", target);
  auto scaled = [&](double c) {
    KroneckerSeed out = seed;
    for (auto& row : out)
      for (double& v : row) v *= c;
    return out;
  };
  double hi = 1.0 / max_entry;
  const double best = kronecker_expected_density(scaled(hi), power);
  if (best < target)
    fail("kronecker: target density ", target, " unreachable; largest rescaling gives ", best);
  double lo = 0.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (kronecker_expected_density(scaled(mid), power) < target)
      lo = mid;
    else
      hi = mid;
  }
  return scaled(0.5 * (lo + hi));
}

/// Directed stochastic Kronecker sample on 2^power nodes, self-loops included.
/// P(u -> v) is the product over bit levels of seed[u_bit][v_bit].
inline std::vector<std::pair<int, int>> kronecker_directed_pairs(const KroneckerSeed& seed, int power, Rng& rng) {
  if (power < 1 || power > 24) fail("kronecker: power must lie in [1, 24], got ", power);
  for (const auto& row : seed)
    for (double v : row)
      if (!(v >= 0.0 && v <= 1.0)) fail("kronecker: seed entries must lie in [0, 1]");
  const int n = 1 << power;
  // Split the bits into a high and a low half so P(u, v) = hi(u, v) * lo(u, v).
  const int lo_bits = power / 2, hi_bits = power - lo_bits;
  auto table = [&](int bits) {
    const int m = 1 << bits;
    std::vector<double> t(m * m, 1.0);
    for (int u = 0; u < m; ++u)
      for (int v = 0; v < m; ++v) {
        double p = 1.0;
        for (int b = 0; b < bits; ++b) p *= seed[(u >> b) & 1][(v >> b) & 1];
        t[u * m + v] = p;
      }
    return t;
  };
  const auto lo_t = table(lo_bits), hi_t = table(hi_bits);
  const int lo_m = 1 << lo_bits, lo_mask = lo_m - 1;
  const int hi_m = 1 << hi_bits;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::pair<int, int>> out;
  for (int u = 0; u < n; ++u) {
    const double* hi_row = &hi_t[(u >> lo_bits) * hi_m];
    const double* lo_row = &lo_t[(u & lo_mask) * lo_m];
    for (int v = 0; v < n; ++v) {
      const double p = hi_row[v >> lo_bits] * lo_row[v & lo_mask];
      if (unif(rng) < p) out.emplace_back(u, v);
    }
  }
  return out;
}

/// Symmetrized stochastic Kronecker graph on n = 2^power nodes. When `target_density` is
/// set, the seed is first rescaled uniformly to match it in expectation.
inline EdgeList kronecker_graph(const KroneckerSeed& seed, int power, std::optional<double> target_density,
                                Rng& rng) {
  KroneckerSeed used = target_density ? rescale_kronecker_seed(seed, power, *target_density) : seed;
  return EdgeList::from_pairs(1 << power, kronecker_directed_pairs(used, power, rng));
}

/// Seed used by default for synthetic experiments (a core-periphery pattern).
inline constexpr KroneckerSeed default_kronecker_seed{{{0.9, 0.6}, {0.6, 0.2}}};

/// Disjoint groups of consecutive users with Erdos-Renyi(p_in) edges inside each group.
inline EdgeList planted_clusters(int n, int clusters, double p_in, Rng& rng) {
  if (clusters < 1 || clusters > std::max(n, 1)) fail("planted_clusters: invalid cluster count ", clusters);
  std::vector<std::pair<int, int>> pairs;
  for (int c = 0; c < clusters; ++c) {
    const int begin = static_cast<int>(static_cast<long long>(n) * c / clusters);
    const int end = static_cast<int>(static_cast<long long>(n) * (c + 1) / clusters);
    EdgeList block = erdos_renyi(end - begin, p_in, rng);
    for (auto [i, j] : block.edges) pairs.emplace_back(begin + i, begin + j);
  }
  return EdgeList::from_pairs(n, std::move(pairs));
}

// ---------------------------------------------------------------------------
// Sparse Cholesky with fill-reducing ordering
// ---------------------------------------------------------------------------

/// Lower-triangular factor of a permuted SPD matrix: A(perm, perm) = lower * lower^T,
/// equivalently P^T (lower lower^T) P = A with P the permutation matrix of `perm`.
struct CholeskyFactor {
  int n = 0;
  SparseMatrix lower;      // columns sorted by row, diagonal first
  std::vector<int> perm;   // perm[k] = original node eliminated k-th
  std::vector<int> pinv;   // inverse of perm

  long nnz() const { return static_cast<long>(lower.nonZeros()); }

  /// Solves lower * Y^T = Z^T in place, where each column of Z (rows x n) holds one
  /// node's values in elimination order.
  void forward_solve(Matrix& z) const {
    const int* outer = lower.outerIndexPtr();
    const int* inner = lower.innerIndexPtr();
    const double* val = lower.valuePtr();
    for (int j = 0; j < n; ++j) {
      int p = outer[j];
      z.col(j) /= val[p];
      for (++p; p < outer[j + 1]; ++p) z.col(inner[p]) -= val[p] * z.col(j);
    }
  }

  /// Solves lower^T * Y^T = Z^T in place (same layout as forward_solve).
  void backward_solve(Matrix& z) const {
    const int* outer = lower.outerIndexPtr();
    const int* inner = lower.innerIndexPtr();
    const double* val = lower.valuePtr();
    for (int j = n - 1; j >= 0; --j) {
      int p = outer[j];
      const double diag = val[p];
      for (++p; p < outer[j + 1]; ++p) z.col(j) -= val[p] * z.col(inner[p]);
      z.col(j) /= diag;
    }
  }

  /// P^T (lower lower^T) P, for checking the factorization.
  Matrix reconstruct() const {
    Matrix ll = Matrix(lower) * Matrix(lower).transpose();
    Matrix out(n, n);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) out(perm[a], perm[b]) = ll(a, b);
    return out;
  }
};

namespace detail {

// Nonzero pattern of row k of the factor, in topological order, written to
// s[top..n). Adapted from the classic up-looking elimination-tree reach.
inline int ereach(const SparseMatrix& upper, int k, const std::vector<int>& parent, std::vector<int>& s,
                  std::vector<int>& mark, int stamp) {
  const int n = static_cast<int>(upper.cols());
  int top = n;
  mark[k] = stamp;
  for (SparseMatrix::InnerIterator it(upper, k); it; ++it) {
    int i = static_cast<int>(it.row());
    if (i > k) continue;
    int len = 0;
    for (; mark[i] != stamp; i = parent[i]) {
      s[len++] = i;
      mark[i] = stamp;
    }
    while (len > 0) s[--top] = s[--len];
  }
  return top;
}

}  // namespace detail

/// Approximate-minimum-degree ordering of a symmetric pattern; returns perm with
/// perm[k] = node eliminated k-th.
inline std::vector<int> amd_ordering(const SparseMatrix& a) {
  Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> p;
  Eigen::AMDOrdering<int> amd;
  amd(a, p);
  // Eigen's orderings return P^-1: indices()[k] is the original node placed k-th.
  return std::vector<int>(p.indices().data(), p.indices().data() + p.indices().size());
}

/// Cholesky factorization of an SPD sparse matrix under the given elimination order
/// (AMD when empty). Throws NotPositiveDefinite naming the failing original node.
inline CholeskyFactor sparse_cholesky(const SparseMatrix& a, std::vector<int> perm = {}) {
  if (a.rows() != a.cols()) fail<DimensionError>("sparse_cholesky: matrix is not square");
  const int n = static_cast<int>(a.rows());
  if (perm.empty()) perm = amd_ordering(a);
  if (static_cast<int>(perm.size()) != n) fail<DimensionError>("sparse_cholesky: permutation has wrong size");
  std::vector<int> pinv(n, -1);
  for (int k = 0; k < n; ++k) {
    int node = perm[k];
    if (node < 0 || node >= n || pinv[node] != -1) fail("sparse_cholesky: invalid permutation");
    pinv[node] = k;
  }

  // Upper triangle of the permuted matrix, column-compressed.
  std::vector<Triplet> trips;
  trips.reserve(a.nonZeros());
  for (int j = 0; j < n; ++j)
    for (SparseMatrix::InnerIterator it(a, j); it; ++it) {
      int pi = pinv[it.row()], pj = pinv[j];
      if (pi <= pj) trips.emplace_back(pi, pj, it.value());
    }
  SparseMatrix upper(n, n);
  upper.setFromTriplets(trips.begin(), trips.end());
  upper.makeCompressed();

  // Elimination tree.
  std::vector<int> parent(n, -1), ancestor(n, -1);
  for (int k = 0; k < n; ++k) {
    for (SparseMatrix::InnerIterator it(upper, k); it; ++it) {
      int i = static_cast<int>(it.row());
      while (i != -1 && i < k) {
        int next = ancestor[i];
        ancestor[i] = k;
        if (next == -1) parent[i] = k;
        i = next;
      }
    }
  }

  // Column counts from the row patterns.
  std::vector<int> stack(n), mark(n, -1);
  std::vector<long> counts(n, 1);
  for (int k = 0; k < n; ++k) {
    int top = detail::ereach(upper, k, parent, stack, mark, k);
    for (int p = top; p < n; ++p) ++counts[stack[p]];
  }

  CholeskyFactor f;
  f.n = n;
  f.perm = std::move(perm);
  f.pinv = std::move(pinv);
  std::vector<int> colptr(n + 1, 0);
  for (int j = 0; j < n; ++j) {
    long next = colptr[j] + counts[j];
    if (next > std::numeric_limits<int>::max()) fail("sparse_cholesky: factor too large");
    colptr[j + 1] = static_cast<int>(next);
  }
  const int total = colptr[n];
  std::vector<int> rows(total);
  std::vector<double> vals(total);
  std::vector<int> fill(colptr.begin(), colptr.end() - 1);
  std::vector<double> x(n, 0.0);

  // Up-looking numeric factorization, one row of the factor per step.
  std::fill(mark.begin(), mark.end(), -1);
  for (int k = 0; k < n; ++k) {
    int top = detail::ereach(upper, k, parent, stack, mark, k);
    x[k] = 0.0;
    for (SparseMatrix::InnerIterator it(upper, k); it; ++it)
      if (it.row() <= k) x[it.row()] = it.value();
    double d = x[k];
    x[k] = 0.0;
    for (; top < n; ++top) {
      const int j = stack[top];
      const double lkj = x[j] / vals[colptr[j]];
      x[j] = 0.0;
      for (int p = colptr[j] + 1; p < fill[j]; ++p)
        x[rows[p]] -= vals[p] * lkj;
      d -= lkj * lkj;
      int slot = fill[j]++;
      rows[slot] = k;
      vals[slot] = lkj;
    }
    if (!(d > 0.0)) throw NotPositiveDefinite(f.perm[k], d);
    int slot = fill[k]++;
    rows[slot] = k;
    vals[slot] = std::sqrt(d);
  }

  f.lower = Eigen::Map<const SparseMatrix>(n, n, total, colptr.data(), rows.data(), vals.data());
  f.lower.makeCompressed();
  return f;
}

inline CholeskyFactor sparse_cholesky(const Laplacian& l) { return sparse_cholesky(l.entries); }

// ---------------------------------------------------------------------------
// Spectral diagnostics
// ---------------------------------------------------------------------------

/// Second-smallest eigenvalue of the normalized Laplacian L_G (dense solver, desk scale).
inline double algebraic_connectivity(const Laplacian& graph_laplacian) {
  if (graph_laplacian.kind != LaplacianKind::normalized)
    fail("algebraic_connectivity expects the normalized (unregularized) Laplacian");
  const int n = graph_laplacian.n();
  if (n < 2) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(graph_laplacian.dense(), Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) fail("algebraic_connectivity: eigensolver failed");
  return std::max(0.0, eig.eigenvalues()(1));
}

/// Tr(L^-1) = ||S^-1||_F^2 via forward solves against the identity in blocks.
inline double trace_inverse(const CholeskyFactor& factor) {
  const int n = factor.n;
  const int block = 256;
  double total = 0.0;
  for (int start = 0; start < n; start += block) {
    const int rows = std::min(block, n - start);
    Matrix z = Matrix::Zero(rows, n);
    for (int r = 0; r < rows; ++r) z(r, start + r) = 1.0;
    factor.forward_solve(z);
    total += z.squaredNorm();
  }
  return total;
}

inline double trace_inverse(const Laplacian& l) {
  if (l.kind != LaplacianKind::regularized) fail("trace_inverse expects the regularized Laplacian");
  return trace_inverse(sparse_cholesky(l));
}

}  // namespace gob
