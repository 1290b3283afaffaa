#pragma once

// End-to-end experiments: structure learning with the GFlowNet, codec
// training over a binary symmetric channel with an evolving knowledge base,
// and the error-vs-crossover and bits-vs-error studies.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nesy/comm.hpp"
#include "nesy/gflownet.hpp"
#include "nesy/kb.hpp"
#include "nesy/neural.hpp"
#include "nesy/world_model.hpp"

namespace nesy::harness {

struct ExperimentConfig {
  // World
  int n = 5;
  long observations = 25000;
  double edge_prob = 0.5;
  double weight_low = 0.5;
  double weight_high = 2.0;
  double noise_std = 1.0;
  int quant_levels = 4;

  // Structure learning
  int minibatches = 100;
  int updates_per_minibatch = 10;  // optimizer steps per minibatch, on consecutive slices of its events
  double mu = 0.4;
  double lambda = 0.0002;
  double edge_bits = 2.0;
  std::vector<int> flow_hidden{64, 64};
  double flow_lr = 0.003;
  double exploration = 0.1;
  int posterior_samples = 128;

  // Codec
  int k = 2;
  int codec_hidden = 32;
  double codec_lr = 0.03;
  double train_p = 0.02;
  double kl_weight = 0.1;
  double penalty_rho = 10.0;
  std::optional<double> delta;  // default: comm::default_delta(k, bits)
  double epsilon = comm::kDefaultEpsilon;
  double temperature = 0.25;
  double kb_perturb_fraction = 0.0;
  double kb_perturb_scale = 0.5;

  // Evaluation
  std::vector<double> channel_p{0.0, 0.05, 0.1, 0.2, 0.5};
  int eval_events = 10000;
  int influence_events = 500;
  int task_events = 1000;
  double bits_p = 0.05;
  std::vector<int> k_sweep{1, 2, 3, 4};
  std::vector<long> task_lengths{1, 10, 100, 1000, 10000, 100000};

  std::uint64_t seed = 0;

  int bits_per_level() const;
  long events_per_minibatch() const { return observations / minibatches; }
  double effective_delta() const;
  void validate() const;
};

/// `key = value` lines; `#` starts a comment; lists are comma separated.
/// Unknown keys throw std::invalid_argument naming the key and line.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string to_config_string(const ExperimentConfig& cfg);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// Per-node thresholds splitting each node's training marginal into
/// equiprobable levels.
struct NodeLevels {
  std::vector<std::vector<double>> thresholds;  // node -> levels-1 ascending cut points

  static NodeLevels fit(const world::Dataset& data, int levels);
  int levels() const { return thresholds.empty() ? 0 : static_cast<int>(thresholds[0].size()) + 1; }
  /// Level of `value` at node i: number of thresholds strictly below it.
  int level(int node, double value) const;
  std::vector<int> levels_of(const Eigen::VectorXd& row) const;
};

/// Speaker encoder, receiver decoder and listener readout.
struct Codec {
  nn::Mlp encoder;  // z -> K
  nn::Mlp decoder;  // K * bits -> K
  comm::ListenerPolicy listener;
  int bits_per_dim = 2;

  static Codec create(int n, int levels, int k, int hidden, int bits_per_dim, double temperature, Rng& rng);
  int k() const { return encoder.output_size(); }

  void save(const std::filesystem::path& path) const;
  static Codec load(const std::filesystem::path& path, int levels, double temperature);
};

/// z = flattened adjacency (n^2) followed by per-node level one-hots (n * levels).
nn::Vec state_features(const world::StateDescription& sd, int levels);

/// State description for one event: `dag` (the learned posterior mode) plus
/// the event's quantized node levels.
world::StateDescription build_state_description(const Eigen::VectorXd& event, const world::Dag& dag,
                                                const NodeLevels& levels);

/// Most frequent terminal DAG among `samples` posterior draws (ties: smaller key).
gfn::GraphState posterior_mode(const gfn::FlowNet& net, int samples, Rng& rng);

/// One entity per node grounded by its level one-hot, predicates level0..,
/// relation parent_of with a fact per edge, one formula per node asserting
/// its level.
kb::Theory build_theory(const world::StateDescription& sd, int levels);

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;  // error probability
  double stderr_ = 0.0;
  long events = 0;
};

struct ChannelResult {
  double p = 0.0;
  double action_error = 0.0;
  double action_error_stderr = 0.0;
  double reliability = 0.0;
  bool reliability_ok = false;  // reliability >= 1 - epsilon
  double mean_distortion = 0.0;
  double causal_influence = 0.0;  // mean over the first influence_events events
  int influence_floored = 0;      // events whose KL needed the smoothing floor
  double classical_error = 0.0;
  double classical_error_stderr = 0.0;
};

struct BitsAccounting {
  int bits_per_level = 2;
  int structure_edges = 0;
  long structure_bits = 0;
  long semantic_bits_per_event = 0;
  long classical_bits_per_event = 0;
  long task_events = 0;
  long semantic_task_bits = 0;
  long classical_task_bits = 0;
};

struct RunReport {
  std::uint64_t seed = 0;
  ExperimentConfig config;
  std::vector<double> flow_loss;
  std::vector<double> codec_task_loss;
  std::vector<double> objective;  // causal influence + flow loss + penalty, per minibatch
  std::vector<double> violation_rate;
  bool objective_trend_ok = true;  // moving average (window 10) ends no higher than it starts
  std::string true_graph;
  std::string posterior_mode;
  std::vector<std::pair<std::string, double>> posterior_top;  // graph, frequency
  double mean_speaker_content = 0.0;
  double mean_listener_content = 0.0;
  double mean_kb_error = 0.0;
  double quantization_floor = 0.0;
  std::vector<ChannelResult> channels;
  BitsAccounting bits;
  double delta = 0.0;
  double epsilon = 0.0;
  double wall_clock_seconds = 0.0;
};

nlohmann::json report_to_json(const RunReport& r);

/// Everything the experiments need. World and data are regenerated from
/// (config, seed); networks are the trained ones.
struct Pipeline {
  ExperimentConfig cfg;
  world::WeightedSem sem;
  world::Dataset data;
  NodeLevels levels;
  gfn::FlowNet flownet;
  gfn::GraphState mode;
  std::map<std::uint64_t, int> posterior;
  Codec codec;
  RunReport report;
};

/// Regenerates the ground-truth SEM, training data and level thresholds.
void build_world(Pipeline& p);

/// Algorithm 1: per minibatch, extend one GFlowNet trajectory per event,
/// update the flow network, refresh the posterior mode, then update the codec
/// and evolve the KB over the minibatch's events. Evaluates the channel list
/// at the end.
Pipeline train_pipeline(const ExperimentConfig& cfg);

/// Trains only a codec (fixed structure) for the given K; used by the K sweep.
Codec train_codec(const Pipeline& p, int k);

/// Eval events: fresh SEM samples, one per row.
world::Dataset evaluation_events(const Pipeline& p);

struct ErrorVsCrossover {
  std::vector<CurvePoint> curve;  // x = p
  std::vector<ChannelResult> channels;
  double quantization_floor = 0.0;  // pipeline error with the channel removed
};

ErrorVsCrossover run_error_vs_crossover(const Pipeline& p);
ErrorVsCrossover run_error_vs_crossover(const Pipeline& p, const Codec& codec, const std::vector<double>& ps,
                                        int events);

struct BitsVsError {
  std::vector<CurvePoint> semantic;   // x = bits for a task_events task, one point per K
  std::vector<CurvePoint> classical;  // x = bits for a task_events task, one point per bits/node
  struct Ratio {
    long task_events;
    long semantic_bits;
    long classical_bits;
    double ratio;
  };
  std::vector<Ratio> ratio_vs_task;
  BitsAccounting reference;
  double semantic_error = 0.0;  // reference K, p = bits_p
  double semantic_error_stderr = 0.0;
  double classical_error = 0.0;
  double classical_error_stderr = 0.0;
  std::vector<std::string> warnings;
};

BitsVsError run_bits_vs_error(const Pipeline& p);

/// Exact integer bits accounting.
BitsAccounting bits_accounting(int n, int k, int bits_per_level, int structure_edges, long task_events);
long structure_bits(int n, int edges);

/// Classical baseline: each node's level sent raw with `bits` Gray-coded bits
/// (levels merged when bits < bits_per_level) and decoded straight to a level.
CurvePoint classical_error(const Pipeline& p, const world::Dataset& events, int bits, double crossover);

// Artifacts.
void write_curve_csv(const std::vector<CurvePoint>& c, const std::filesystem::path& path);
void write_ratio_csv(const std::vector<BitsVsError::Ratio>& r, const std::filesystem::path& path);
void write_plot_script(const std::filesystem::path& path);
void write_report(const RunReport& r, const std::filesystem::path& path);

/// Writes report.json, config.txt, checkpoints, the true DAG, the learned
/// mode, the posterior CSV, the dataset CSV, a channel trace and the KB of
/// the first event.
void save_training_outputs(const Pipeline& p, const std::filesystem::path& dir);
/// Reloads a trained pipeline written by save_training_outputs.
Pipeline load_pipeline(const std::filesystem::path& dir);

/// Runs both experiments and writes curve CSVs, ratio table and plot.py.
nlohmann::json write_curves(const Pipeline& p, const std::filesystem::path& dir);

// Verification oracles with fixed, documented problem settings.

/// n = 3: GFlowNet trained on a data-driven reward; total variation between
/// the exact terminal distribution and the normalized reward over all 25 DAGs.
struct EnumerationOracle {
  double tv = 1.0;
  double seconds = 0.0;
  double final_loss = 0.0;
};
EnumerationOracle oracle_enumeration_n3(std::uint64_t seed);

/// n = 2 with R(empty) = 3 and R(0->1) = R(1->0) = 1/2: the learned
/// probabilities of the two terminal classes (no edge, one edge) should be
/// (0.75, 0.25).
struct TwoNodeOracle {
  double p_empty = 0.0;
  double p_one_edge = 0.0;
  double seconds = 0.0;
};
TwoNodeOracle oracle_two_node(std::uint64_t seed);

/// Gradient check over `nets` random tanh/sigmoid/identity MLPs; returns the
/// worst relative error.
double oracle_gradient_check(std::uint64_t seed, int nets = 100);

/// Small oracle suite: n <= 3 enumeration, 2-node closed form, gradient checks.
struct VerifyResult {
  std::vector<std::pair<std::string, bool>> checks;
  std::vector<std::string> details;
  bool all_passed() const;
};
VerifyResult run_verify(std::uint64_t seed);

}  // namespace nesy::harness
