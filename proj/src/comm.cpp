#include "nesy/comm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace nesy::comm {

Message normalize_power(const nn::Vec& y) {
  if (y.size() == 0) throw std::invalid_argument("cannot normalize an empty message");
  if (!y.allFinite()) throw std::domain_error("encoder output is not finite");
  const double norm = y.norm();
  if (norm == 0.0) throw std::domain_error("encoder output is all zero; cannot normalize power");
  const double s = std::sqrt(static_cast<double>(y.size())) / norm;
  return {y * s};
}

nn::Vec normalize_power_backward(const nn::Vec& y, const nn::Vec& grad_m) {
  const double k = static_cast<double>(y.size());
  const double s = std::sqrt(k) / y.norm();
  return s * grad_m - (s * s * s / k) * y.dot(grad_m) * y;
}

Message encode(const nn::Vec& z, const nn::Mlp& net) {
  if (!z.allFinite()) throw std::invalid_argument("encoder input is not finite");
  return normalize_power(nn::forward(net, z));
}

unsigned gray_encode(unsigned level) { return level ^ (level >> 1); }

unsigned gray_decode(unsigned code) {
  unsigned level = 0;
  for (; code; code >>= 1) level ^= code;
  return level;
}

int Quantizer::level_of(double v) const {
  const int l = static_cast<int>(std::floor((v - kRangeLow) / step()));
  return std::clamp(l, 0, levels() - 1);
}

void BitFrame::validate() const {
  if (dims < 0 || bits_per_dim < 1) throw std::invalid_argument("bad frame layout");
  if (static_cast<int>(bits.size()) != dims * bits_per_dim)
    throw std::invalid_argument("frame length does not match its layout");
  for (auto b : bits)
    if (b > 1) throw std::invalid_argument("frame bit is not 0 or 1");
}

std::string BitFrame::to_string() const {
  std::string s;
  for (auto b : bits) s += b ? '1' : '0';
  return s;
}

BitFrame quantize(const Message& m, int bits_per_dim) {
  if (bits_per_dim < 1 || bits_per_dim > 16) throw std::invalid_argument("bits_per_dim must be in [1, 16]");
  const Quantizer q{bits_per_dim};
  BitFrame f;
  f.dims = m.size();
  f.bits_per_dim = bits_per_dim;
  f.bits.reserve(f.dims * bits_per_dim);
  for (int d = 0; d < f.dims; ++d) {
    const double v = m.values(d);
    if (v < kRangeLow || v > kRangeHigh) ++f.clamped;
    const unsigned code = gray_encode(static_cast<unsigned>(q.level_of(v)));
    for (int b = bits_per_dim - 1; b >= 0; --b) f.bits.push_back(static_cast<std::uint8_t>(code >> b & 1u));
  }
  return f;
}

Message dequantize(const BitFrame& frame) {
  frame.validate();
  const Quantizer q{frame.bits_per_dim};
  Message m{nn::Vec(frame.dims)};
  for (int d = 0; d < frame.dims; ++d) {
    unsigned code = 0;
    for (int b = 0; b < frame.bits_per_dim; ++b) code = code << 1 | frame.bits[d * frame.bits_per_dim + b];
    m.values(d) = q.midpoint(static_cast<int>(gray_decode(code)));
  }
  return m;
}

Message quantize_dequantize(const Message& m, int bits_per_dim) { return dequantize(quantize(m, bits_per_dim)); }

Channel::Channel(double crossover_p) : p_(crossover_p) {
  if (!(crossover_p >= 0.0 && crossover_p <= 1.0)) throw std::invalid_argument("crossover probability must be in [0,1]");
}

BitFrame transmit(const BitFrame& frame, const Channel& ch, Rng& rng) {
  std::vector<double> u(frame.bits.size());
  for (auto& x : u) x = uniform01(rng);
  return transmit(frame, ch, u);
}

BitFrame transmit(const BitFrame& frame, const Channel& ch, const std::vector<double>& uniforms) {
  frame.validate();
  if (uniforms.size() < frame.bits.size()) throw std::invalid_argument("not enough uniforms for the frame");
  BitFrame out = frame;
  for (std::size_t i = 0; i < out.bits.size(); ++i)
    if (uniforms[i] < ch.p()) out.bits[i] ^= 1u;
  return out;
}

int flipped_bits(const BitFrame& a, const BitFrame& b) {
  if (a.bits.size() != b.bits.size()) throw std::invalid_argument("frames differ in length");
  int c = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) c += a.bits[i] != b.bits[i];
  return c;
}

nn::Vec frame_features(const BitFrame& frame) {
  nn::Vec v(frame.bits.size());
  for (std::size_t i = 0; i < frame.bits.size(); ++i) v(static_cast<Eigen::Index>(i)) = frame.bits[i] ? 1.0 : -1.0;
  return v;
}

Message decode(const BitFrame& x, const nn::Mlp& net) {
  x.validate();
  if (net.input_size() != x.size()) {
    std::ostringstream os;
    os << "decoder expects " << net.input_size() << " input bits, frame has " << x.size();
    throw std::invalid_argument(os.str());
  }
  return {nn::forward(net, frame_features(x))};
}

double semantic_distortion(const Message& m, const Message& m_hat) {
  if (m.size() != m_hat.size()) throw std::invalid_argument("message lengths differ");
  return (m.values - m_hat.values).squaredNorm();
}

double kb_information_error(double s_speaker, double s_listener) {
  if (!std::isfinite(s_speaker) || !std::isfinite(s_listener))
    throw kb::InfiniteContentError("semantic content is infinite");
  const double d = s_speaker - s_listener;
  return d * d;
}

bool is_semantically_similar(const Message& m, const Message& m_hat, double delta, double s_speaker,
                             double s_listener) {
  if (!(delta > 0.0)) throw std::invalid_argument("delta must be > 0");
  return semantic_distortion(m, m_hat) <= delta && kb_information_error(s_speaker, s_listener) == 0.0;
}

double semantic_reliability(const std::vector<Trial>& trials, double delta) {
  if (trials.empty()) throw std::invalid_argument("reliability needs at least one trial");
  std::size_t ok = 0;
  for (const auto& t : trials) ok += semantic_distortion(t.m, t.m_hat) < delta;
  return static_cast<double>(ok) / static_cast<double>(trials.size());
}

double default_delta(int k, int bits_per_dim) { return 1.25 * k * Quantizer{bits_per_dim}.worst_case_error(); }

int classify_level(double v, int levels) {
  if (levels < 1) throw std::invalid_argument("levels must be >= 1");
  const double step = (kRangeHigh - kRangeLow) / levels;
  const int l = static_cast<int>(std::ceil((v - kRangeLow) / step)) - 1;
  return std::clamp(l, 0, levels - 1);
}

double level_midpoint(int level, int levels) {
  const double step = (kRangeHigh - kRangeLow) / levels;
  return kRangeLow + (level + 0.5) * step;
}

nn::Vec ListenerPolicy::values(const Message& m_hat) const {
  if (m_hat.size() != readout.input_size()) throw std::invalid_argument("message width does not match the listener");
  nn::Vec v = nn::forward(readout, m_hat.values);
  if (!node_gain.empty()) {
    if (static_cast<int>(node_gain.size()) != v.size()) throw std::invalid_argument("node_gain has the wrong size");
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) *= node_gain[i];
  }
  return v;
}

std::vector<std::vector<double>> ListenerPolicy::distributions(const Message& m_hat) const {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  const nn::Vec v = values(m_hat);
  std::vector<std::vector<double>> out(v.size(), std::vector<double>(levels));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    auto& d = out[i];
    double mx = -std::numeric_limits<double>::infinity();
    for (int l = 0; l < levels; ++l) {
      const double diff = v(i) - level_midpoint(l, levels);
      d[l] = -diff * diff / temperature;
      mx = std::max(mx, d[l]);
    }
    double z = 0.0;
    for (auto& x : d) z += (x = std::exp(x - mx));
    for (auto& x : d) x /= z;
  }
  return out;
}

std::vector<int> listener_action(const Message& m_hat, const ListenerPolicy& policy) {
  const nn::Vec v = policy.values(m_hat);
  std::vector<int> a(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) a[i] = classify_level(v(i), policy.levels);
  return a;
}

std::vector<double> joint_distribution(const std::vector<std::vector<double>>& per_node) {
  std::vector<double> joint{1.0};
  std::size_t stride = 1;
  for (const auto& d : per_node) {
    std::vector<double> next(joint.size() * d.size());
    for (std::size_t a = 0; a < d.size(); ++a)
      for (std::size_t k = 0; k < joint.size(); ++k) next[a * stride + k] = joint[k] * d[a];
    stride *= d.size();
    joint = std::move(next);
  }
  return joint;
}

double kl_divergence(const std::vector<double>& p, const std::vector<double>& q, std::optional<double> floor) {
  if (p.size() != q.size()) throw std::invalid_argument("distributions have different supports");
  std::vector<double> qq = q;
  if (floor) {
    double z = 0.0;
    for (auto& x : qq) z += (x = std::max(x, *floor));
    for (auto& x : qq) x /= z;
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (qq[i] <= 0.0) {
      std::ostringstream os;
      os << "infinite divergence: listener assigns zero probability to outcome " << i << " (speaker mass " << p[i]
         << ")";
      throw InfiniteDivergenceError(os.str());
    }
    kl += p[i] * std::log(p[i] / qq[i]);
  }
  return std::max(kl, 0.0);
}

double causal_influence(const std::vector<double>& speaker, const BitFrame& sent, const Channel& ch,
                        const ListenerModel& listener, Rng& rng, const InfluenceOptions& opts) {
  sent.validate();
  std::vector<double> marginal(speaker.size(), 0.0);
  auto accumulate = [&](const BitFrame& x, double w) {
    const auto q = listener(x);
    if (q.size() != speaker.size()) throw std::invalid_argument("listener and speaker action sets differ");
    for (std::size_t i = 0; i < q.size(); ++i) marginal[i] += w * q[i];
  };
  const int len = sent.size();
  const double p = ch.p();
  if (len <= opts.exact_max_bits) {
    for (std::uint32_t pattern = 0; pattern < (1u << len); ++pattern) {
      const int flips = __builtin_popcount(pattern);
      const double w = std::pow(p, flips) * std::pow(1.0 - p, len - flips);
      if (w == 0.0) continue;
      BitFrame x = sent;
      for (int b = 0; b < len; ++b)
        if (pattern >> b & 1u) x.bits[b] ^= 1u;
      accumulate(x, w);
    }
  } else {
    const int draws = std::max(opts.monte_carlo_draws, 10000);
    for (int d = 0; d < draws; ++d) accumulate(transmit(sent, ch, rng), 1.0 / draws);
  }
  return kl_divergence(speaker, marginal, opts.smoothing_floor);
}

double causal_influence(const Message& m, const Channel& ch, const ListenerPolicy& speaker,
                        const ListenerPolicy& listener, const nn::Mlp& decoder, Rng& rng, int bits_per_dim,
                        const InfluenceOptions& opts) {
  const BitFrame sent = quantize(m, bits_per_dim);
  const auto ps = joint_distribution(speaker.distributions(decode(sent, decoder)));
  return causal_influence(
      ps, sent, ch, [&](const BitFrame& x) { return joint_distribution(listener.distributions(decode(x, decoder))); },
      rng, opts);
}

kb::Theory perturb_theory(const kb::Theory& t, const KbPerturbation& pert, Rng& rng) {
  if (!(pert.fraction >= 0.0 && pert.fraction <= 1.0)) throw std::invalid_argument("perturbation fraction must be in [0,1]");
  if (!(pert.scale >= 0.0)) throw std::invalid_argument("perturbation scale must be >= 0");
  kb::Grounding g = t.grounding();
  std::vector<std::string> ids;
  for (const auto& [id, v] : g.entities) ids.push_back(id);
  const auto count = static_cast<std::size_t>(std::llround(pert.fraction * static_cast<double>(ids.size())));
  // Partial Fisher-Yates with the portable uniform.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(ids.size() - i));
    std::swap(ids[i], ids[j]);
    for (auto& x : g.entities[ids[i]]) x *= pert.scale;
  }
  return kb::Theory(t.kb(), std::move(g), t.params());
}

std::vector<double> formula_gains(const kb::Theory& speaker, const kb::Theory& listener) {
  const auto& fs = speaker.kb().formulas();
  if (fs.size() != listener.kb().formulas().size()) throw std::invalid_argument("theories have different formula counts");
  std::vector<double> g(fs.size(), 1.0);
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const double a = kb::aggregated_truth(fs[i], speaker);
    if (a > 0.0) g[i] = kb::aggregated_truth(listener.kb().formulas()[i], listener) / a;
  }
  return g;
}

namespace {
std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}
}  // namespace

void write_trace_csv(const std::vector<TraceRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "event,bits,flipped,distortion,speaker_action,listener_action,similar\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.event << ',' << r.bits << ',' << r.flipped << ',' << r.distortion << ',' << join(r.speaker_action) << ','
       << join(r.listener_action) << ',' << (r.similar ? 1 : 0) << '\n';
}

}  // namespace nesy::comm
