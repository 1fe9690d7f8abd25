#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gob/graph.hpp"
#include "oracles.hpp"

using namespace gob;

namespace {

Matrix dense_of(const SparseMatrix& m) { return Matrix(m); }

EdgeList path_graph(int n) {
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i + 1 < n; ++i) pairs.emplace_back(i, i + 1);
  return EdgeList::from_pairs(n, pairs);
}

}  // namespace

TEST(EdgeList, CanonicalizesAndDeduplicates) {
  auto g = EdgeList::from_pairs(4, {{2, 1}, {1, 2}, {3, 3}, {0, 3}});
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g.edges[0], std::make_pair(0, 3));
  EXPECT_EQ(g.edges[1], std::make_pair(1, 2));
  EXPECT_THROW(EdgeList::from_pairs(3, {{0, 3}}), Error);
}

TEST(EdgeList, TextRoundTrip) {
  auto g = EdgeList::from_pairs(5, {{0, 1}, {3, 4}, {1, 4}});
  std::stringstream ss;
  write_edge_list(ss, g);
  auto back = read_edge_list(ss);
  EXPECT_EQ(back.n, 5);
  EXPECT_EQ(back.edges, g.edges);
}

TEST(EdgeList, ParseErrorsNameTheLine) {
  std::istringstream in("n 3\n0 1\n0 x\n");
  try {
    read_edge_list(in, "g.txt");
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("g.txt:3"), std::string::npos) << e.what();
  }
}

TEST(Laplacian, SingleIsolatedNode) {
  auto l = normalized_laplacian(EdgeList::from_pairs(1, {}));
  EXPECT_DOUBLE_EQ(dense_of(l.entries)(0, 0), 1.0);
}

TEST(Laplacian, SingleEdge) {
  Matrix l = normalized_laplacian(EdgeList::from_pairs(2, {{0, 1}})).dense();
  Matrix expected(2, 2);
  expected << 2, -1, -1, 2;
  EXPECT_TRUE(l.isApprox(expected, 1e-15));
}

TEST(Laplacian, Triangle) {
  Matrix l = normalized_laplacian(EdgeList::from_pairs(3, {{0, 1}, {1, 2}, {0, 2}})).dense();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(l(i, j), i == j ? 2.0 : -0.5, 1e-15);
}

TEST(Laplacian, SpectrumOfRandomGraphsLiesInOneToThree) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    int n = 2 + uniform_index(rng, 150);
    auto g = erdos_renyi(n, std::min(1.0, 4.0 / n), rng);
    Matrix l = normalized_laplacian(g).dense();
    EXPECT_TRUE(l.isApprox(oracle::dense_laplacian(g), 1e-14));
    Eigen::SelfAdjointEigenSolver<Matrix> eig(l);
    EXPECT_GE(eig.eigenvalues().minCoeff(), 1.0 - 1e-10);
    EXPECT_LE(eig.eigenvalues().maxCoeff(), 3.0 + 1e-10);
    auto deg = g.degrees();
    for (int i = 0; i < n; ++i) EXPECT_DOUBLE_EQ(l(i, i), deg[i] > 0 ? 2.0 : 1.0);
  }
}

TEST(ErdosRenyi, Extremes) {
  Rng rng(1);
  EXPECT_EQ(erdos_renyi(10, 0.0, rng).size(), 0u);
  EXPECT_EQ(erdos_renyi(4, 1.0, rng).size(), 6u);
  EXPECT_THROW(erdos_renyi(4, 1.5, rng), Error);
}

TEST(ErdosRenyi, MeanEdgeCountMatchesBinomial) {
  const int n = 1000;
  const double p = 3.0 * std::log(n) / n;
  const double pairs = n * (n - 1) / 2.0;
  const double mean = p * pairs, sd = std::sqrt(pairs * p * (1 - p));
  const int seeds = 20;
  double total = 0.0;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(100 + s);
    total += static_cast<double>(erdos_renyi(n, p, rng).size());
  }
  EXPECT_NEAR(total / seeds, mean, 3.0 * sd / std::sqrt(seeds));
}

TEST(Kronecker, AllOnesSeedGivesCompleteGraph) {
  Rng rng(3);
  auto g = kronecker_graph({{{1.0, 1.0}, {1.0, 1.0}}}, 1, std::nullopt, rng);
  EXPECT_EQ(g.n, 2);
  EXPECT_EQ(g.size(), 1u);
}

TEST(Kronecker, DirectedPairCountMatchesProductExpectation) {
  const KroneckerSeed seed{{{0.7, 0.4}, {0.5, 0.2}}};
  for (int power : {3, 5, 6}) {
    const double s = 1.8;
    const double expected = std::pow(s, power);
    const int reps = 4000;
    double total = 0.0, total_sq = 0.0;
    Rng rng(power);
    for (int r = 0; r < reps; ++r) {
      double c = static_cast<double>(kronecker_directed_pairs(seed, power, rng).size());
      total += c;
      total_sq += c * c;
    }
    const double mean = total / reps;
    const double se = std::sqrt((total_sq / reps - mean * mean) / reps);
    EXPECT_NEAR(mean, expected, 4.0 * se) << "power " << power;
  }
}

TEST(Kronecker, ExpectedUndirectedEdgesMatchesMonteCarlo) {
  const KroneckerSeed seed{{{0.8, 0.5}, {0.3, 0.4}}};
  const int power = 5, reps = 3000;
  Rng rng(9);
  double total = 0.0;
  for (int r = 0; r < reps; ++r) total += static_cast<double>(kronecker_graph(seed, power, std::nullopt, rng).size());
  const double expected = kronecker_expected_edges(seed, power);
  EXPECT_NEAR(total / reps, expected, 0.02 * expected);
}

TEST(Kronecker, RescaledSeedHitsTargetDensity) {
  Rng rng(5);
  for (int power : {8, 10}) {
    auto seed = rescale_kronecker_seed(default_kronecker_seed, power, 0.005);
    EXPECT_NEAR(kronecker_expected_density(seed, power), 0.005, 1e-9);
    const int reps = 8;
    double total = 0.0;
    for (int r = 0; r < reps; ++r) total += kronecker_graph(default_kronecker_seed, power, 0.005, rng).density();
    EXPECT_NEAR(total / reps, 0.005, 0.1 * 0.005) << "power " << power;
  }
  EXPECT_THROW(rescale_kronecker_seed({{{0, 0}, {0, 0}}}, 4, 0.1), Error);
}

TEST(SparseCholesky, IdentityFactorsToIdentity) {
  auto f = sparse_cholesky(identity_laplacian(6));
  EXPECT_TRUE(Matrix(f.lower).isIdentity(0.0));
  std::vector<int> id{0, 1, 2, 3, 4, 5};
  EXPECT_EQ(f.perm, id);
}

TEST(SparseCholesky, TwoByTwoByHand) {
  auto l = normalized_laplacian(EdgeList::from_pairs(2, {{0, 1}}));
  auto f = sparse_cholesky(l.entries, {0, 1});
  Matrix expected(2, 2);
  expected << std::sqrt(2.0), 0, -1 / std::sqrt(2.0), std::sqrt(1.5);
  EXPECT_TRUE(Matrix(f.lower).isApprox(expected, 1e-15));
}

TEST(SparseCholesky, MatchesDenseFactorOfPermutedMatrix) {
  Rng rng(21);
  auto g = erdos_renyi(20, 0.2, rng);
  auto l = normalized_laplacian(g);
  auto f = sparse_cholesky(l);
  Matrix a = l.dense();
  Matrix permuted(20, 20);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j) permuted(i, j) = a(f.perm[i], f.perm[j]);
  Matrix dense_factor = permuted.llt().matrixL();
  EXPECT_LE((Matrix(f.lower) - dense_factor).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SparseCholesky, ReconstructsRandomLaplacians) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 1 + uniform_index(rng, 200);
    auto l = normalized_laplacian(erdos_renyi(n, std::min(1.0, 3.0 / n), rng));
    auto f = sparse_cholesky(l);
    EXPECT_LE((f.reconstruct() - l.dense()).cwiseAbs().maxCoeff(), 1e-10);
    Vector diag = Matrix(f.lower).diagonal();
    EXPECT_GT(diag.minCoeff(), 0.0);
  }
}

TEST(SparseCholesky, FillReducingOrderEliminatesHubLast) {
  // Star graph: eliminating the hub first fills the whole matrix.
  const int n = 50;
  std::vector<std::pair<int, int>> pairs;
  for (int i = 1; i < n; ++i) pairs.emplace_back(0, i);
  auto l = normalized_laplacian(EdgeList::from_pairs(n, pairs));
  auto f = sparse_cholesky(l);
  EXPECT_EQ(f.nnz(), 2 * n - 1);
  auto naive = sparse_cholesky(l.entries, [] {
    std::vector<int> id(n);
    for (int i = 0; i < n; ++i) id[i] = i;
    return id;
  }());
  EXPECT_EQ(naive.nnz(), static_cast<long>(n) * (n + 1) / 2);
}

TEST(SparseCholesky, ReportsFailingPivot) {
  SparseMatrix a(3, 3);
  std::vector<Triplet> t{{0, 0, 1.0}, {1, 1, 1.0}, {2, 2, -1.0}};
  a.setFromTriplets(t.begin(), t.end());
  try {
    sparse_cholesky(a, {0, 1, 2});
    FAIL() << "expected NotPositiveDefinite";
  } catch (const NotPositiveDefinite& e) {
    EXPECT_EQ(e.pivot(), 2);
    EXPECT_DOUBLE_EQ(e.value(), -1.0);
  }
}

TEST(AlgebraicConnectivity, Cases) {
  EXPECT_NEAR(algebraic_connectivity(normalized_graph_laplacian(EdgeList::from_pairs(4, {{0, 1}, {2, 3}}))), 0.0,
              1e-12);
  EXPECT_NEAR(algebraic_connectivity(normalized_graph_laplacian(EdgeList::from_pairs(2, {{0, 1}}))), 2.0, 1e-12);
  // Path P4: normalized Laplacian eigenvalues are 1 - cos(pi k / 3).
  EXPECT_NEAR(algebraic_connectivity(normalized_graph_laplacian(path_graph(4))), 0.5, 1e-6);
  EXPECT_THROW(algebraic_connectivity(normalized_laplacian(path_graph(4))), Error);
}

TEST(AlgebraicConnectivity, PositiveExactlyWhenConnected) {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    int n = 5 + uniform_index(rng, 40);
    auto g = erdos_renyi(n, 2.5 / n, rng);
    double nu2 = algebraic_connectivity(normalized_graph_laplacian(g));
    EXPECT_EQ(g.components() == 1, nu2 > 1e-8) << "n=" << n << " nu2=" << nu2;
  }
}

TEST(TraceInverse, Cases) {
  EXPECT_NEAR(trace_inverse(identity_laplacian(7)), 7.0, 1e-12);
  EXPECT_NEAR(trace_inverse(normalized_laplacian(EdgeList::from_pairs(2, {{0, 1}}))), 4.0 / 3.0, 1e-14);
  Rng rng(17);
  auto l = normalized_laplacian(erdos_renyi(50, 0.1, rng));
  const double dense = l.dense().inverse().trace();
  EXPECT_NEAR(trace_inverse(l), dense, 1e-8 * dense);
}

TEST(TraceInverse, BoundedByAlgebraicConnectivity) {
  Rng rng(41);
  int checked = 0;
  while (checked < 30) {
    int n = 5 + uniform_index(rng, 60);
    auto g = erdos_renyi(n, 4.0 / n, rng);
    if (g.components() != 1) continue;
    const double nu2 = algebraic_connectivity(normalized_graph_laplacian(g));
    EXPECT_LE(trace_inverse(normalized_laplacian(g)) / n, (1.0 - 1.0 / n) / nu2 + 1.0 / n);
    ++checked;
  }
}
