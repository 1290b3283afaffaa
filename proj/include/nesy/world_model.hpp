#pragma once

// Ground-truth causal structures and observational data: Erdos-Renyi DAGs,
// linear-Gaussian structural equations X = W^T X + Z, DAG utilities and the
// factorized linear-Gaussian log-likelihood used to score structures.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "nesy/rng.hpp"

namespace nesy::world {

/// Row-major square 0/1 matrix; adj[i][j] = 1 means i -> j.
using Adjacency = std::vector<std::vector<std::uint8_t>>;

bool is_acyclic(const Adjacency& adj);

class Dag {
 public:
  explicit Dag(int n = 0);
  /// Throws std::invalid_argument on a nonsquare matrix, a self loop or a cycle.
  explicit Dag(Adjacency adj);

  int n() const { return static_cast<int>(adj_.size()); }
  bool has_edge(int i, int j) const { return adj_[i][j] != 0; }
  const Adjacency& adjacency() const { return adj_; }
  int edge_count() const;
  std::vector<std::pair<int, int>> edges() const;
  std::vector<int> parents(int j) const;
  /// Bit i set iff i -> j; requires n <= 32.
  std::uint32_t parent_mask(int j) const;

  /// Adds i -> j; throws if it would create a cycle.
  void add_edge(int i, int j);

  friend bool operator==(const Dag&, const Dag&) = default;

 private:
  Adjacency adj_;
};

struct WeightedSem {
  Dag dag;
  Eigen::MatrixXd weights;  // weights(i,j) is the gain on i -> j
  double noise_std = 1.0;

  void validate() const;
};

struct Dataset {
  Eigen::MatrixXd x;  // rows x n
  std::vector<std::string> names;

  Eigen::Index rows() const { return x.rows(); }
  int n() const { return static_cast<int>(x.cols()); }
};

struct StateDescription {
  std::vector<int> node_sequence;  // topological order of `adjacency`
  Dag adjacency;
  std::vector<int> node_values;  // quantization level per node

  void validate() const;
};

/// Each pair (perm[a], perm[b]) with a < b under a random permutation gets an
/// edge with probability edge_prob.
Dag sample_er_graph(int n, double edge_prob, Rng& rng);

inline constexpr double kDefaultDeadZone = 0.5;

/// Edge weights with magnitude ~ Uniform[low, high] and a random sign;
/// requires dead_zone <= low < high.
WeightedSem assign_weights(const Dag& dag, double low, double high, Rng& rng, double noise_std = 1.0,
                           double dead_zone = kDefaultDeadZone);

/// Ancestral sampling x_j = sum_i w_ij x_i + z_j, z_j ~ N(0, sigma^2).
Dataset sample_observations(const WeightedSem& sem, Eigen::Index count, Rng& rng);

/// (I - W^T)^{-1} (I - W)^{-1} sigma^2.
Eigen::MatrixXd analytic_covariance(const WeightedSem& sem);

/// Kahn's algorithm with smallest-id-first tie-breaking. Throws
/// std::invalid_argument naming one cycle if the graph is cyclic.
std::vector<int> topological_order(const Adjacency& adj);
inline std::vector<int> topological_order(const Dag& dag) { return topological_order(dag.adjacency()); }

/// Sum over nodes of the maximum-likelihood linear-Gaussian log-likelihood of
/// x_j given its parents (least squares with intercept, noise variance RSS/rows).
/// Local scores are cached per (node, parent set), so scoring many graphs on
/// one dataset costs one regression per distinct family.
class LinearGaussianScorer {
 public:
  static constexpr double kRidgeJitter = 1e-6;

  explicit LinearGaussianScorer(const Dataset& data);

  double local_score(int node, std::uint32_t parent_mask) const;
  double log_likelihood(const Dag& dag) const;
  double log_likelihood(const Adjacency& adj) const;

  int n() const { return n_; }
  Eigen::Index rows() const { return rows_; }
  /// Number of local regressions that needed the ridge fallback.
  int ridge_fallbacks() const { return ridge_fallbacks_; }

 private:
  int n_;
  Eigen::Index rows_;
  Eigen::MatrixXd scatter_;  // centered X^T X
  Eigen::VectorXd mean_;
  mutable std::unordered_map<std::uint64_t, double> cache_;
  mutable int ridge_fallbacks_ = 0;
};

double log_likelihood(const Dag& dag, const Dataset& data);

// CSV with a header row of node names, one observation per row.
void write_dataset_csv(const Dataset& d, const std::filesystem::path& path);
Dataset read_dataset_csv(const std::filesystem::path& path);

// "# nodes N" header followed by one "i -> j" line per edge.
std::string to_edge_list(const Dag& dag);
Dag parse_edge_list(const std::string& text, std::optional<int> n = std::nullopt);
void write_edge_list(const Dag& dag, const std::filesystem::path& path);
Dag read_edge_list(const std::filesystem::path& path);

}  // namespace nesy::world
