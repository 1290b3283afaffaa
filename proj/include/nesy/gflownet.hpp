#pragma once

// Generative flow network over DAGs.
//
// States are DAGs built one edge at a time from the empty graph; each state
// carries its transitive closure and the mask of edges that keep it acyclic.
// A network maps a state to log-flows F(s,a) for every AddEdge action and
// for Terminate. The forward policy is proportional to the flows:
//
//   P(stop | G)          = sigmoid(log F(G,stop) - logsumexp_valid log F(G,e))
//   P(G + e | G, ~stop)  = softmax over valid edges of log F(G,e)
//
// Training minimizes the flow-matching residual on sampled trajectories:
// for every visited non-initial state, inflow (summed over all parents) must
// equal outflow (including Terminate), and the terminal copy of the last
// state must receive inflow equal to its reward.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nesy/neural.hpp"
#include "nesy/rng.hpp"
#include "nesy/world_model.hpp"

namespace nesy::gfn {

inline constexpr int kMaxNodes = 8;  // adjacency must pack into 64 bits

class GraphState {
 public:
  /// Empty graph on n nodes (the initial state).
  explicit GraphState(int n = 1);

  int n() const { return n_; }
  bool edge(int i, int j) const { return adj_[i] >> j & 1u; }
  /// Path of length >= 1 from i to j.
  bool reaches(int i, int j) const { return desc_[i] >> j & 1u; }
  /// AddEdge(i, j) keeps the graph acyclic and adds a new edge.
  bool valid(int i, int j) const { return mask_[i] >> j & 1u; }
  bool terminal() const { return terminal_; }
  int edge_count() const { return edges_; }
  int valid_edge_count() const;
  bool saturated() const { return valid_edge_count() == 0; }

  /// Adjacency packed as bit i*n + j.
  std::uint64_t key() const;
  static GraphState from_key(int n, std::uint64_t key);
  static GraphState from_adjacency(const world::Adjacency& adj);

  world::Adjacency adjacency() const;
  world::Dag dag() const { return world::Dag(adjacency()); }

  /// 2n^2 features: adjacency then closure, row-major, as 0/1.
  nn::Vec encode() const;

  // Used by apply_action only.
  void add_edge_unchecked(int i, int j);
  void mark_terminal() { terminal_ = true; }

  friend bool operator==(const GraphState& a, const GraphState& b) {
    return a.n_ == b.n_ && a.adj_ == b.adj_ && a.terminal_ == b.terminal_;
  }

 private:
  void refresh_mask();

  int n_;
  std::vector<std::uint32_t> adj_;   // row i: children of i
  std::vector<std::uint32_t> desc_;  // row i: nodes reachable from i
  std::vector<std::uint32_t> anc_;   // row i: nodes that reach i
  std::vector<std::uint32_t> mask_;  // row i: valid new targets from i
  int edges_ = 0;
  bool terminal_ = false;
};

struct Action {
  enum class Kind { AddEdge, Terminate };
  Kind kind = Kind::Terminate;
  int source = -1;
  int target = -1;

  static Action add(int i, int j) { return {Kind::AddEdge, i, j}; }
  static Action terminate() { return {Kind::Terminate, -1, -1}; }
  bool is_terminate() const { return kind == Kind::Terminate; }

  friend bool operator==(const Action&, const Action&) = default;
};

GraphState initial_state(int n);

/// Throws std::invalid_argument naming the violated mask entry for an
/// invalid edge, or if the state is already terminal.
GraphState apply_action(const GraphState& s, const Action& a);

/// Log-flows for one state: one entry per ordered pair (row-major n x n,
/// entries for invalid pairs are ignored) plus Terminate.
struct LogFlows {
  nn::Vec edge;
  double stop = 0.0;
};

using FlowFunction = std::function<LogFlows(const GraphState&)>;

struct PolicyHeads {
  nn::Vec edge_probs;  // n x n row-major, zero on invalid pairs, sums to 1 if any valid
  double terminate = 1.0;
};

PolicyHeads policy_from_flows(const GraphState& s, const LogFlows& flows);

/// Two-headed flow network: an MLP trunk over the state encoding feeding an
/// edge head (n^2 log-flows) and a terminate head (one log-flow).
class FlowNet {
 public:
  FlowNet() = default;
  FlowNet(int n, const std::vector<int>& hidden, Rng& rng);
  /// Trunk randomly initialized, both heads zero: every valid edge equally likely.
  static FlowNet uniform(int n, const std::vector<int>& hidden, Rng& rng);

  int n() const { return n_; }
  LogFlows log_flows(const GraphState& s) const;
  FlowFunction as_function() const;

  struct Cache {
    nn::ForwardCache trunk, edge, stop;
  };
  struct Gradients {
    nn::MlpGradients trunk, edge, stop;
    Gradients& operator+=(const Gradients& o);
    Gradients& operator*=(double s);
    bool all_finite() const;
  };

  Cache forward(const GraphState& s) const;
  static LogFlows flows_of(const Cache& c);
  /// Gradients for upstream d/d(edge log-flows) and d/d(stop log-flow).
  Gradients backward(const Cache& c, const nn::Vec& d_edge, double d_stop) const;
  Gradients zero_gradients() const;

  nn::Mlp& trunk() { return trunk_; }
  nn::Mlp& edge_head() { return edge_; }
  nn::Mlp& stop_head() { return stop_; }
  const nn::Mlp& trunk() const { return trunk_; }
  const nn::Mlp& edge_head() const { return edge_; }
  const nn::Mlp& stop_head() const { return stop_; }

  void save(const std::filesystem::path& path) const;
  static FlowNet load(const std::filesystem::path& path);

  friend bool operator==(const FlowNet&, const FlowNet&) = default;

 private:
  int n_ = 0;
  nn::Mlp trunk_, edge_, stop_;
};

/// Returns (edge distribution, terminate probability). Throws on a terminal state.
PolicyHeads policy_heads(const GraphState& s, const FlowNet& net);

/// Reward R(G) = exp(-lambda * (DL(G) - DL_ref)) with description length
/// DL(G) = -loglik(G)/ln 2 + edge_bits * |E| in bits. DL_ref is the empty
/// graph's description length; the shift rescales all rewards by one
/// constant and leaves the normalized distribution unchanged.
struct RewardSpec {
  std::shared_ptr<const world::LinearGaussianScorer> scorer;
  double lambda = 1.0;
  double edge_bits = 2.0;
  double reference_bits = 0.0;
  /// Replaces the data-driven reward; for synthetic problems.
  std::function<double(const GraphState&)> log_reward_override;

  static RewardSpec from_data(const world::Dataset& data, double lambda = 1.0, double edge_bits = 2.0);
  static RewardSpec from_scorer(std::shared_ptr<const world::LinearGaussianScorer> scorer, double lambda = 1.0,
                                double edge_bits = 2.0);
  static RewardSpec from_log_rewards(std::function<double(const GraphState&)> f);

  double description_length_bits(const GraphState& s) const;
  double log_reward(const GraphState& s) const;
};

/// R(s) for a terminal state.
double reward(const GraphState& s, const RewardSpec& spec);

struct Step {
  GraphState state;
  Action action;
};

struct Trajectory {
  std::vector<Step> steps;  // last action is Terminate
  GraphState terminal;
  bool mu_exit = false;  // stopped because P(stop) exceeded mu

  int length() const { return static_cast<int>(steps.size()) - 1; }
};

struct SamplingOptions {
  double mu = 1.0;           // stop once P(stop | G) > mu
  double exploration = 0.0;  // probability of a uniformly random valid action
};

Trajectory sample_trajectory(const FlowFunction& flows, int n, Rng& rng, const SamplingOptions& opts = {});
inline Trajectory sample_trajectory(const FlowNet& net, Rng& rng, const SamplingOptions& opts = {}) {
  return sample_trajectory(net.as_function(), net.n(), rng, opts);
}

enum class LossForm { Log, Linear };

/// Flow-matching loss summed over the trajectory's non-initial states,
/// averaged over trajectories.
double flow_matching_loss(const std::vector<Trajectory>& batch, const FlowFunction& flows, const RewardSpec& spec,
                          LossForm form = LossForm::Log);

/// Log-space loss and its gradient with respect to the network parameters.
struct LossAndGradient {
  double loss = 0.0;
  FlowNet::Gradients grad;
};
LossAndGradient flow_matching_loss_and_gradient(const std::vector<Trajectory>& batch, const FlowNet& net,
                                                const RewardSpec& spec);

/// Adam state for the three parameter blocks of a FlowNet.
class FlowNetOptimizer {
 public:
  FlowNetOptimizer() = default;
  FlowNetOptimizer(const FlowNet& net, nn::Adam::Options opts);
  void step(FlowNet& net, const FlowNet::Gradients& g);

 private:
  nn::Adam trunk_, edge_, stop_;
};

struct TrainConfig {
  int minibatches = 100;
  int trajectories_per_minibatch = 16;
  double learning_rate = 1e-3;
  SamplingOptions sampling{1.0, 0.1};
  std::uint64_t seed = 0;
  double divergence_threshold = 1e6;
};

struct TrainResult {
  std::vector<double> loss_history;  // mean loss per minibatch
};

/// Thrown when a minibatch loss exceeds the divergence threshold.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

TrainResult train_structure(FlowNet& net, const RewardSpec& spec, const TrainConfig& cfg);

/// Exact terminal-state distribution under the policy (with optional mu
/// exit), by forward dynamic programming over all reachable DAGs. n <= 4.
struct ExactDistribution {
  std::map<std::uint64_t, double> terminal;  // state key -> probability
  std::vector<double> length;                // P(trajectory adds k edges)
};
ExactDistribution terminal_distribution_exact(const FlowFunction& flows, int n, double mu = 1.0);
inline ExactDistribution terminal_distribution_exact(const FlowNet& net, double mu = 1.0) {
  return terminal_distribution_exact(net.as_function(), net.n(), mu);
}

/// Keys of every DAG on n nodes (n <= 5).
std::vector<std::uint64_t> enumerate_dags(int n);

/// R-proportional target over all DAGs on n nodes.
std::map<std::uint64_t, double> reward_distribution(int n, const RewardSpec& spec);

double total_variation(const std::map<std::uint64_t, double>& p, const std::map<std::uint64_t, double>& q);

/// Empirical posterior from `samples` trajectories: state key -> count.
std::map<std::uint64_t, int> sample_posterior(const FlowNet& net, int samples, Rng& rng,
                                              const SamplingOptions& opts = {});

/// "0->1;1->2" style edge string (empty for the empty graph).
std::string edge_string(const GraphState& s);

/// CSV "graph,frequency" with one row per distinct sampled graph, most
/// frequent first (ties by key).
void write_posterior_csv(const std::map<std::uint64_t, int>& counts, int n, const std::filesystem::path& path);

}  // namespace nesy::gfn
