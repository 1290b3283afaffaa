#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "nesy/world_model.hpp"

using namespace nesy;
using namespace nesy::world;

namespace {

// Brute-force cycle check: some node reaches itself by a walk of length <= n.
bool has_cycle_bruteforce(const Adjacency& a) {
  const int n = static_cast<int>(a.size());
  for (int s = 0; s < n; ++s) {
    std::vector<bool> frontier(n, false);
    frontier[s] = true;
    for (int len = 1; len <= n; ++len) {
      std::vector<bool> next(n, false);
      for (int i = 0; i < n; ++i)
        if (frontier[i])
          for (int j = 0; j < n; ++j)
            if (a[i][j]) next[j] = true;
      if (next[s]) return true;
      frontier = next;
    }
  }
  return false;
}

Dag chain(int n) {
  Dag d(n);
  for (int i = 0; i + 1 < n; ++i) d.add_edge(i, i + 1);
  return d;
}

}  // namespace

TEST_SUITE("world_model") {
  TEST_CASE("er graph extremes") {
    Rng rng(1);
    CHECK(sample_er_graph(4, 0.0, rng).edge_count() == 0);
    const Dag full = sample_er_graph(3, 1.0, rng);
    CHECK(full.edge_count() == 3);
    CHECK(topological_order(full).size() == 3);
  }

  TEST_CASE("er graph mean edge count") {
    Rng rng(2);
    double total = 0;
    for (int i = 0; i < 10000; ++i) total += sample_er_graph(5, 0.5, rng).edge_count();
    CHECK(total / 10000 == doctest::Approx(5.0).epsilon(0.04));
  }

  TEST_CASE("weights sit on the edges with magnitudes in range") {
    Rng rng(3);
    const WeightedSem empty = assign_weights(Dag(4), 0.5, 2.0, rng);
    CHECK(empty.weights.isZero());

    double sum_abs = 0;
    Dag one(2);
    one.add_edge(0, 1);
    for (int i = 0; i < 10000; ++i) {
      const WeightedSem s = assign_weights(one, 0.5, 2.0, rng);
      const double w = s.weights(0, 1);
      CHECK(std::abs(w) >= 0.5);
      CHECK(std::abs(w) <= 2.0);
      CHECK(s.weights(1, 0) == 0.0);
      sum_abs += std::abs(w);
    }
    CHECK(sum_abs / 10000 == doctest::Approx(1.25).epsilon(0.016));
    CHECK_THROWS(assign_weights(one, 0.1, 2.0, rng));
  }

  TEST_CASE("noise-free empty sem gives zeros") {
    Rng rng(4);
    WeightedSem s = assign_weights(Dag(3), 0.5, 2.0, rng);
    s.noise_std = 0.0;
    const Dataset d = sample_observations(s, 50, rng);
    CHECK(d.x.isZero());
  }

  TEST_CASE("empirical covariance approaches the analytic one") {
    Rng rng(5);
    const WeightedSem s = assign_weights(chain(3), 0.5, 2.0, rng);
    const Dataset d = sample_observations(s, 25000, rng);
    const Eigen::RowVectorXd mean = d.x.colwise().mean();
    const Eigen::MatrixXd c = d.x.rowwise() - mean;
    const Eigen::MatrixXd emp = c.transpose() * c / double(d.rows() - 1);
    CHECK((emp - analytic_covariance(s)).cwiseAbs().maxCoeff() < 0.1);
    CHECK(mean.cwiseAbs().maxCoeff() < 0.1);

    // Hand value for the 2-node chain with w = 1: var(x1) = 2, cov = 1.
    WeightedSem two{chain(2), Eigen::MatrixXd::Zero(2, 2), 1.0};
    two.weights(0, 1) = 1.0;
    const Eigen::MatrixXd a = analytic_covariance(two);
    CHECK(a(0, 0) == doctest::Approx(1.0));
    CHECK(a(0, 1) == doctest::Approx(1.0));
    CHECK(a(1, 1) == doctest::Approx(2.0));
  }

  TEST_CASE("topological order tie-breaks by smallest id") {
    CHECK(topological_order(Dag(3)) == std::vector<int>{0, 1, 2});
    Dag c(3);
    c.add_edge(2, 0);
    c.add_edge(0, 1);
    CHECK(topological_order(c) == std::vector<int>{2, 0, 1});
    Dag diamond(4);
    diamond.add_edge(0, 1);
    diamond.add_edge(0, 2);
    diamond.add_edge(1, 3);
    diamond.add_edge(2, 3);
    CHECK(topological_order(diamond) == std::vector<int>{0, 1, 2, 3});
    CHECK_THROWS_AS(topological_order(Adjacency{{0, 1}, {1, 0}}), std::invalid_argument);
  }

  TEST_CASE("acyclicity against brute force") {
    CHECK(is_acyclic(Adjacency(3, std::vector<std::uint8_t>(3, 0))));
    CHECK_FALSE(is_acyclic(Adjacency{{0, 1}, {1, 0}}));
    Rng rng(6);
    std::bernoulli_distribution coin(0.2);
    for (int t = 0; t < 1000; ++t) {
      Adjacency a(5, std::vector<std::uint8_t>(5, 0));
      for (auto& row : a)
        for (auto& v : row) v = coin(rng);
      CHECK(is_acyclic(a) == !has_cycle_bruteforce(a));
    }
  }

  TEST_CASE("dag rejects cycles and self loops") {
    CHECK_THROWS_AS(Dag(Adjacency{{1}}), std::invalid_argument);
    CHECK_THROWS_AS(Dag(Adjacency{{0, 1}, {1, 0}}), std::invalid_argument);
    Dag d = chain(3);
    CHECK_THROWS(d.add_edge(2, 0));
    CHECK(d.parent_mask(1) == 1u);
    CHECK(d.parents(2) == std::vector<int>{1});
  }

  TEST_CASE("empty-graph likelihood matches the direct formula") {
    Rng rng(7);
    const WeightedSem s = assign_weights(chain(3), 0.5, 2.0, rng);
    const Dataset d = sample_observations(s, 2000, rng);
    double expected = 0.0;
    const double rows = double(d.rows());
    for (int j = 0; j < d.n(); ++j) {
      const Eigen::VectorXd col = d.x.col(j).array() - d.x.col(j).mean();
      const double var = col.squaredNorm() / rows;
      expected += -0.5 * rows * (std::log(2.0 * std::numbers::pi * var) + 1.0);
    }
    CHECK(log_likelihood(Dag(3), d) == doctest::Approx(expected).epsilon(1e-9));
  }

  TEST_CASE("true chain outscores the empty graph") {
    WeightedSem s{chain(2), Eigen::MatrixXd::Zero(2, 2), 1.0};
    s.weights(0, 1) = 1.0;
    Rng rng(8);
    const Dataset d = sample_observations(s, 25000, rng);
    CHECK(log_likelihood(chain(2), d) > log_likelihood(Dag(2), d));
  }

  TEST_CASE("likelihood is invariant under consistent relabeling") {
    Rng rng(9);
    const Dag g = sample_er_graph(4, 0.6, rng);
    const Dataset d = sample_observations(assign_weights(g, 0.5, 2.0, rng), 3000, rng);
    const std::vector<int> perm{2, 0, 3, 1};  // old node i becomes perm[i]
    Dag pg(4);
    for (auto [i, j] : g.edges()) pg.add_edge(perm[i], perm[j]);
    Dataset pd;
    pd.x.resize(d.rows(), 4);
    for (int i = 0; i < 4; ++i) pd.x.col(perm[i]) = d.x.col(i);
    CHECK(log_likelihood(pg, pd) == doctest::Approx(log_likelihood(g, d)).epsilon(1e-10));
  }

  TEST_CASE("identical rows are reported as degenerate") {
    Dataset d;
    d.x = Eigen::MatrixXd::Ones(50, 2);
    LinearGaussianScorer scorer(d);
    CHECK_THROWS_WITH_AS(scorer.log_likelihood(chain(2)), doctest::Contains("degenerate"), std::domain_error);
  }

  TEST_CASE("collinear parents take the ridge fallback") {
    Rng rng(12);
    WeightedSem s{Dag(3), Eigen::MatrixXd::Zero(3, 3), 1.0};
    Dataset d = sample_observations(s, 200, rng);
    d.x.col(1) = 2.0 * d.x.col(0);
    Dag g(3);
    g.add_edge(0, 2);
    g.add_edge(1, 2);
    LinearGaussianScorer scorer(d);
    CHECK(std::isfinite(scorer.log_likelihood(g)));
    CHECK(scorer.ridge_fallbacks() > 0);
  }

  TEST_CASE("scorer caches families") {
    Rng rng(10);
    const Dataset d = sample_observations(assign_weights(chain(3), 0.5, 2.0, rng), 500, rng);
    LinearGaussianScorer scorer(d);
    const double a = scorer.log_likelihood(chain(3));
    CHECK(scorer.log_likelihood(chain(3)) == a);
    CHECK(a == doctest::Approx(log_likelihood(chain(3), d)));
  }

  TEST_CASE("csv and edge list round trips") {
    Rng rng(11);
    const Dag g = sample_er_graph(5, 0.5, rng);
    CHECK(parse_edge_list(to_edge_list(g)) == g);
    const Dataset d = sample_observations(assign_weights(g, 0.5, 2.0, rng), 20, rng);
    const auto path = std::filesystem::temp_directory_path() / "nesy_world_roundtrip.csv";
    write_dataset_csv(d, path);
    const Dataset back = read_dataset_csv(path);
    CHECK(back.x.rows() == 20);
    CHECK((back.x - d.x).cwiseAbs().maxCoeff() == 0.0);
    std::filesystem::remove(path);
    CHECK_THROWS(parse_edge_list("# nodes 2\n0 -> 1\n1 -> 0\n"));
  }

  TEST_CASE("state description requires a topological node sequence") {
    StateDescription sd{{1, 0}, chain(2), {0, 0}};
    CHECK_THROWS(sd.validate());
    sd.node_sequence = {0, 1};
    CHECK_NOTHROW(sd.validate());
  }
}
