#pragma once

// Semantic transmission chain and its metrics.
//
//   z --encoder--> m (unit power) --quantize--> bits --BSC--> bits' --decoder--> m_hat
//   m_hat --listener readout--> per-node values --classify--> actions
//
// Quantization is uniform mid-rise on [-2, 2] with Gray-coded level labels,
// most significant bit first. The decoder sees each bit as -1 (0) or +1 (1).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nesy/kb.hpp"
#include "nesy/neural.hpp"
#include "nesy/rng.hpp"

namespace nesy::comm {

inline constexpr double kRangeLow = -2.0;
inline constexpr double kRangeHigh = 2.0;

struct Message {
  nn::Vec values;

  int size() const { return static_cast<int>(values.size()); }
  double mean_square() const { return values.size() == 0 ? 0.0 : values.squaredNorm() / values.size(); }
};

/// Scales y to mean square 1. Throws std::domain_error if y is all zero.
Message normalize_power(const nn::Vec& y);

/// Gradient of a loss through normalize_power: given y and dL/dm, returns dL/dy.
nn::Vec normalize_power_backward(const nn::Vec& y, const nn::Vec& grad_m);

/// m = normalize(net(z)).
Message encode(const nn::Vec& z, const nn::Mlp& net);

unsigned gray_encode(unsigned level);
unsigned gray_decode(unsigned code);

/// Uniform quantizer on [kRangeLow, kRangeHigh] with 2^bits levels.
struct Quantizer {
  int bits_per_dim = 2;

  int levels() const { return 1 << bits_per_dim; }
  double step() const { return (kRangeHigh - kRangeLow) / levels(); }
  double midpoint(int level) const { return kRangeLow + (level + 0.5) * step(); }
  /// Level containing v; values outside the range clamp to the end levels.
  int level_of(double v) const;
  /// Largest per-dimension squared error for in-range values: (step/2)^2.
  double worst_case_error() const { return 0.25 * step() * step(); }
};

struct BitFrame {
  std::vector<std::uint8_t> bits;  // dims * bits_per_dim entries, each 0 or 1
  int dims = 0;
  int bits_per_dim = 2;
  int clamped = 0;  // values that fell outside the quantizer range

  int size() const { return static_cast<int>(bits.size()); }
  void validate() const;
  std::string to_string() const;

  friend bool operator==(const BitFrame& a, const BitFrame& b) {
    return a.bits == b.bits && a.dims == b.dims && a.bits_per_dim == b.bits_per_dim;
  }
};

BitFrame quantize(const Message& m, int bits_per_dim = 2);
Message dequantize(const BitFrame& frame);

/// Per-dimension quantized values (the message the speaker actually sends).
Message quantize_dequantize(const Message& m, int bits_per_dim = 2);

class Channel {
 public:
  explicit Channel(double crossover_p = 0.0);
  double p() const { return p_; }

 private:
  double p_;
};

/// Flips each bit independently with probability p.
BitFrame transmit(const BitFrame& frame, const Channel& ch, Rng& rng);
/// Same, with caller-supplied uniforms (bit i flips iff u[i] < p). Sharing the
/// uniforms across channels couples runs at different p.
BitFrame transmit(const BitFrame& frame, const Channel& ch, const std::vector<double>& uniforms);

int flipped_bits(const BitFrame& a, const BitFrame& b);

/// {0,1} -> {-1,+1}.
nn::Vec frame_features(const BitFrame& frame);

/// m_hat = net(frame_features(x)). Throws std::invalid_argument on width mismatch.
Message decode(const BitFrame& x, const nn::Mlp& net);

/// |m - m_hat|^2.
double semantic_distortion(const Message& m, const Message& m_hat);

/// (s_speaker - s_listener)^2 for contents in bits. Non-finite inputs throw
/// kb::InfiniteContentError.
double kb_information_error(double s_speaker, double s_listener);

/// distortion <= delta and the two contents agree exactly.
bool is_semantically_similar(const Message& m, const Message& m_hat, double delta, double s_speaker,
                             double s_listener);

struct Trial {
  Message m;
  Message m_hat;
};

/// Fraction of trials with distortion strictly below delta.
double semantic_reliability(const std::vector<Trial>& trials, double delta);

/// 1.25 x the worst-case quantization distortion of a K-dimensional message.
double default_delta(int k, int bits_per_dim = 2);
inline constexpr double kDefaultEpsilon = 0.05;

struct SemanticMetrics {
  double distortion = 0.0;
  double kb_error = 0.0;
  bool similar = false;
  double reliability = 1.0;
  double causal_influence = 0.0;
  double delta = 0.0;
  double epsilon = kDefaultEpsilon;
};

/// Level of v among `levels` equal bins of [kRangeLow, kRangeHigh]; a value
/// on a boundary belongs to the lower level.
int classify_level(double v, int levels);
double level_midpoint(int level, int levels);

/// Maps a decoded message to one action (a quantization level) per node.
struct ListenerPolicy {
  nn::Mlp readout;  // K -> n values
  int levels = 4;
  double temperature = 0.25;
  /// Per-node multiplier on the readout; empty means all ones. A distorted
  /// listener KB shows up here (see formula_gains).
  std::vector<double> node_gain;

  int nodes() const { return readout.output_size(); }
  nn::Vec values(const Message& m_hat) const;
  /// Per node: softmax over levels of -(v - midpoint)^2 / temperature.
  std::vector<std::vector<double>> distributions(const Message& m_hat) const;
};

std::vector<int> listener_action(const Message& m_hat, const ListenerPolicy& policy);

/// Product distribution over levels^n joint actions; index = sum a_i levels^i.
std::vector<double> joint_distribution(const std::vector<std::vector<double>>& per_node);

class InfiniteDivergenceError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// KL(p || q) in nats. Without a floor, q_i = 0 < p_i throws
/// InfiniteDivergenceError; with one, q is floored and renormalized.
double kl_divergence(const std::vector<double>& p, const std::vector<double>& q,
                     std::optional<double> smoothing_floor = std::nullopt);

struct InfluenceOptions {
  int exact_max_bits = 16;
  int monte_carlo_draws = 10000;
  std::optional<double> smoothing_floor;
};

using ListenerModel = std::function<std::vector<double>(const BitFrame&)>;

/// KL between the speaker's action distribution and the listener's,
/// marginalized over channel corruptions of `sent`. Exact enumeration when
/// the frame has at most exact_max_bits bits, Monte Carlo otherwise.
double causal_influence(const std::vector<double>& speaker_distribution, const BitFrame& sent, const Channel& ch,
                        const ListenerModel& listener, Rng& rng, const InfluenceOptions& opts = {});

/// Convenience form: the speaker's distribution is `speaker` applied to the
/// noiseless decode of quantize(m); the listener decodes every corruption
/// and applies `listener`.
double causal_influence(const Message& m, const Channel& ch, const ListenerPolicy& speaker,
                        const ListenerPolicy& listener, const nn::Mlp& decoder, Rng& rng, int bits_per_dim = 2,
                        const InfluenceOptions& opts = {});

/// Listener KB imperfection: entity groundings of a `fraction` of entities
/// are multiplied by `scale`, lowering the truth of every formula that
/// mentions them.
struct KbPerturbation {
  double fraction = 0.0;
  double scale = 0.5;
};
kb::Theory perturb_theory(const kb::Theory& t, const KbPerturbation& pert, Rng& rng);

/// Per formula: listener truth / speaker truth (1 where the speaker's is 0).
std::vector<double> formula_gains(const kb::Theory& speaker, const kb::Theory& listener);

struct TraceRow {
  long event = 0;
  std::string bits;
  int flipped = 0;
  double distortion = 0.0;
  std::vector<int> speaker_action;
  std::vector<int> listener_action;
  bool similar = false;
};

/// Header: event,bits,flipped,distortion,speaker_action,listener_action,similar
/// Actions are space-separated levels.
void write_trace_csv(const std::vector<TraceRow>& rows, const std::filesystem::path& path);

}  // namespace nesy::comm
