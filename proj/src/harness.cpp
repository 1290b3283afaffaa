#include "nesy/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace nesy::harness {

namespace {

// Substreams of the master seed (see derive_seed).
enum Stream : std::uint64_t {
  kGraph = 1,
  kWeights,
  kData,
  kFlowInit,
  kFlowSample,
  kCodecInit,
  kCodecChannel,
  kKb,
  kEvalData,
  kEvalChannel,
  kPosterior,
  kInfluence,
  kClassicalChannel,
  kSweep,
};

int ceil_log2(int n) {
  int b = 0;
  while ((1 << b) < n) ++b;
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

int ExperimentConfig::bits_per_level() const { return ceil_log2(quant_levels); }

double ExperimentConfig::effective_delta() const { return delta ? *delta : comm::default_delta(k, bits_per_level()); }

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid config: " + what);
  };
  need(n >= 1 && n <= gfn::kMaxNodes, "n must be in [1, " + std::to_string(gfn::kMaxNodes) + "]");
  need(observations >= 1, "observations must be >= 1");
  need(minibatches >= 0, "minibatches must be >= 0");
  need(updates_per_minibatch >= 1, "updates_per_minibatch must be >= 1");
  need(minibatches == 0 || observations >= minibatches, "observations must be >= minibatches");
  need(edge_prob >= 0.0 && edge_prob <= 1.0, "edge_prob must be in [0,1]");
  need(weight_low > 0.0 && weight_low <= weight_high, "need 0 < weight_low <= weight_high");
  need(noise_std > 0.0, "noise_std must be > 0");
  need(quant_levels >= 2 && (quant_levels & (quant_levels - 1)) == 0, "quant_levels must be a power of two >= 2");
  need(mu >= 0.0 && mu <= 1.0, "mu must be in [0,1]");
  need(lambda >= 0.0, "lambda must be >= 0");
  need(edge_bits >= 0.0, "edge_bits must be >= 0");
  need(!flow_hidden.empty(), "flow_hidden must list at least one width");
  for (int h : flow_hidden) need(h >= 1, "flow_hidden widths must be >= 1");
  need(flow_lr >= 0.0 && codec_lr >= 0.0, "learning rates must be >= 0");
  need(exploration >= 0.0 && exploration <= 1.0, "exploration must be in [0,1]");
  need(posterior_samples >= 1, "posterior_samples must be >= 1");
  need(k >= 1 && k * bits_per_level() <= 16, "k must be >= 1 with k * bits <= 16");
  need(codec_hidden >= 1, "codec_hidden must be >= 1");
  need(train_p >= 0.0 && train_p <= 1.0, "train_p must be in [0,1]");
  need(kl_weight >= 0.0 && penalty_rho >= 0.0, "kl_weight and penalty_rho must be >= 0");
  need(!delta || *delta > 0.0, "delta must be > 0");
  need(epsilon >= 0.0 && epsilon <= 1.0, "epsilon must be in [0,1]");
  need(temperature > 0.0, "temperature must be > 0");
  need(kb_perturb_fraction >= 0.0 && kb_perturb_fraction <= 1.0, "kb_perturb_fraction must be in [0,1]");
  need(kb_perturb_scale >= 0.0, "kb_perturb_scale must be >= 0");
  need(!channel_p.empty(), "channel_p must not be empty");
  for (double p : channel_p) need(p >= 0.0 && p <= 1.0, "channel_p entries must be in [0,1]");
  need(eval_events >= 1 && influence_events >= 0 && task_events >= 1, "event counts must be >= 1");
  need(bits_p >= 0.0 && bits_p <= 1.0, "bits_p must be in [0,1]");
  for (int kk : k_sweep) need(kk >= 1 && kk * bits_per_level() <= 16, "k_sweep entries must be >= 1");
  for (long t : task_lengths) need(t >= 1, "task_lengths entries must be >= 1");
}

// ---------------------------------------------------------------------------
// Levels, features, theories

NodeLevels NodeLevels::fit(const world::Dataset& data, int levels) {
  if (levels < 2) throw std::invalid_argument("need at least two levels");
  if (data.rows() < levels) throw std::invalid_argument("not enough rows to fit level thresholds");
  NodeLevels nl;
  const auto rows = data.rows();
  for (int j = 0; j < data.n(); ++j) {
    std::vector<double> col(data.x.col(j).data(), data.x.col(j).data() + rows);
    std::sort(col.begin(), col.end());
    std::vector<double> t;
    for (int l = 1; l < levels; ++l) {
      const auto idx = static_cast<std::size_t>(rows * l / levels);
      t.push_back(0.5 * (col[idx - 1] + col[idx]));
    }
    nl.thresholds.push_back(std::move(t));
  }
  return nl;
}

int NodeLevels::level(int node, double value) const {
  const auto& t = thresholds.at(node);
  return static_cast<int>(std::lower_bound(t.begin(), t.end(), value) - t.begin());
}

std::vector<int> NodeLevels::levels_of(const Eigen::VectorXd& row) const {
  if (row.size() != static_cast<Eigen::Index>(thresholds.size())) throw std::invalid_argument("row width mismatch");
  std::vector<int> out(row.size());
  for (Eigen::Index i = 0; i < row.size(); ++i) out[i] = level(static_cast<int>(i), row(i));
  return out;
}

Codec Codec::create(int n, int levels, int k, int hidden, int bits_per_dim, double temperature, Rng& rng) {
  using nn::Activation;
  Codec c;
  c.bits_per_dim = bits_per_dim;
  c.encoder = nn::Mlp::glorot({n * n + n * levels, hidden, k}, {Activation::Tanh, Activation::Identity}, rng);
  c.decoder = nn::Mlp::glorot({k * bits_per_dim, hidden, k}, {Activation::Tanh, Activation::Identity}, rng);
  c.listener.readout = nn::Mlp::glorot({k, hidden, n}, {Activation::Tanh, Activation::Identity}, rng);
  c.listener.levels = levels;
  c.listener.temperature = temperature;
  return c;
}

void Codec::save(const std::filesystem::path& path) const {
  nn::save_checkpoint({{"encoder", encoder}, {"decoder", decoder}, {"readout", listener.readout}}, path);
}

Codec Codec::load(const std::filesystem::path& path, int levels, double temperature) {
  auto nets = nn::load_checkpoint(path);
  if (nets.size() != 3 || nets[0].first != "encoder" || nets[1].first != "decoder" || nets[2].first != "readout")
    throw std::runtime_error("not a codec checkpoint: " + path.string());
  Codec c;
  c.encoder = nets[0].second;
  c.decoder = nets[1].second;
  c.listener.readout = nets[2].second;
  c.listener.levels = levels;
  c.listener.temperature = temperature;
  c.bits_per_dim = c.decoder.input_size() / c.encoder.output_size();
  return c;
}

nn::Vec state_features(const world::StateDescription& sd, int levels) {
  const int n = sd.adjacency.n();
  nn::Vec z = nn::Vec::Zero(n * n + n * levels);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) z(i * n + j) = sd.adjacency.has_edge(i, j) ? 1.0 : 0.0;
  for (int i = 0; i < n; ++i) {
    const int l = sd.node_values.at(i);
    if (l < 0 || l >= levels) throw std::invalid_argument("node level out of range");
    z(n * n + i * levels + l) = 1.0;
  }
  return z;
}

world::StateDescription build_state_description(const Eigen::VectorXd& event, const world::Dag& dag,
                                                const NodeLevels& levels) {
  world::StateDescription sd;
  sd.adjacency = dag;
  sd.node_sequence = world::topological_order(dag);
  sd.node_values = levels.levels_of(event);
  return sd;
}

gfn::GraphState posterior_mode(const gfn::FlowNet& net, int samples, Rng& rng) {
  const auto counts = gfn::sample_posterior(net, samples, rng, {1.0, 0.0});
  std::uint64_t best = 0;
  int best_count = -1;
  for (const auto& [key, c] : counts)
    if (c > best_count) {
      best = key;
      best_count = c;
    }
  return gfn::GraphState::from_key(net.n(), best);
}

kb::Theory build_theory(const world::StateDescription& sd, int levels) {
  sd.validate();
  const int n = sd.adjacency.n();
  kb::KnowledgeBase base;
  kb::Grounding g;
  g.domain_dims["node"] = static_cast<std::size_t>(levels);
  for (int l = 0; l < levels; ++l) {
    const std::string id = "level" + std::to_string(l);
    base.add_symbol({id, kb::SymbolKind::Predicate, {"node"}});
    g.truths[id] = kb::ComponentTruth{static_cast<std::size_t>(l)};
  }
  base.add_symbol({"parent_of", kb::SymbolKind::Relation, {"node", "node"}});
  kb::TableTruth parent;
  for (int i = 0; i < n; ++i) {
    const std::string id = "node_" + std::to_string(i);
    base.add_symbol({id, kb::SymbolKind::Entity, {"node"}});
    std::vector<double> onehot(levels, 0.0);
    onehot[sd.node_values[i]] = 1.0;
    g.entities[id] = onehot;
  }
  for (auto [i, j] : sd.adjacency.edges()) {
    const std::string a = "node_" + std::to_string(i), b = "node_" + std::to_string(j);
    base.add_fact({a, "parent_of", b, 1.0});
    parent.truths[{a, b}] = 1.0;
  }
  g.truths["parent_of"] = parent;
  for (int i = 0; i < n; ++i)
    base.add_formula(kb::Formula::atom("level" + std::to_string(sd.node_values[i]), {{"node_" + std::to_string(i), {}}}));
  return kb::Theory(std::move(base), std::move(g));
}

// ---------------------------------------------------------------------------
// World

void build_world(Pipeline& p) {
  const auto& c = p.cfg;
  c.validate();
  Rng g = make_rng(c.seed, kGraph);
  const world::Dag dag = world::sample_er_graph(c.n, c.edge_prob, g);
  Rng w = make_rng(c.seed, kWeights);
  p.sem = world::assign_weights(dag, c.weight_low, c.weight_high, w, c.noise_std);
  Rng d = make_rng(c.seed, kData);
  p.data = world::sample_observations(p.sem, c.observations, d);
  p.levels = NodeLevels::fit(p.data, c.quant_levels);
}

world::Dataset evaluation_events(const Pipeline& p) {
  Rng r = make_rng(p.cfg.seed, kEvalData);
  return world::sample_observations(p.sem, p.cfg.eval_events, r);
}

// ---------------------------------------------------------------------------
// Codec training

namespace {

// [from, to) ranges splitting `count` items into `parts` near-equal slices.
std::vector<std::pair<long, long>> slices(long count, int parts) {
  std::vector<std::pair<long, long>> out;
  parts = static_cast<int>(std::max<long>(1, std::min<long>(parts, count)));
  for (int i = 0; i < parts; ++i) {
    const long from = count * i / parts, to = count * (i + 1) / parts;
    if (to > from) out.emplace_back(from, to);
  }
  return out;
}

struct CodecStats {
  double task_loss = 0.0;
  double influence = 0.0;
  double violation_rate = 0.0;
  double penalty = 0.0;
};

class CodecTrainer {
 public:
  CodecTrainer(Codec& codec, const ExperimentConfig& cfg)
      : codec_(codec),
        cfg_(cfg),
        delta_(cfg.delta ? *cfg.delta : comm::default_delta(codec.k(), codec.bits_per_dim)),
        enc_(codec.encoder, {cfg.codec_lr}),
        dec_(codec.decoder, {cfg.codec_lr}),
        ro_(codec.listener.readout, {cfg.codec_lr}) {}

  // One update over a minibatch of events (features z and true levels).
  CodecStats step(const std::vector<nn::Vec>& zs, const std::vector<std::vector<int>>& levels, Rng& rng) {
    CodecStats st;
    const int b = static_cast<int>(zs.size());
    if (b == 0) return st;
    const int levels_n = codec_.listener.levels;
    const double tau = codec_.listener.temperature;
    const comm::Channel ch(cfg_.train_p);
    auto ge = codec_.encoder.zero_gradients();
    auto gd = codec_.decoder.zero_gradients();
    auto gr = codec_.listener.readout.zero_gradients();
    struct Pending {
      nn::ForwardCache dec;
      nn::Vec m;
    };
    std::vector<Pending> violators;
    const double scale = 1.0 / b;
    for (int e = 0; e < b; ++e) {
      const auto enc = nn::forward_cached(codec_.encoder, zs[e]);
      const comm::Message m = comm::normalize_power(enc.output);
      const comm::BitFrame frame = comm::quantize(m, codec_.bits_per_dim);
      const comm::BitFrame x = comm::transmit(frame, ch, rng);
      const auto dec = nn::forward_cached(codec_.decoder, comm::frame_features(x));
      const nn::Vec& m_hat = dec.output;
      const auto ro = nn::forward_cached(codec_.listener.readout, m_hat);
      const nn::Vec& v = ro.output;
      // Speaker's intended values: the same readout on the uncorrupted frame.
      const nn::Vec vs = nn::forward(codec_.listener.readout,
                                     nn::forward(codec_.decoder, comm::frame_features(frame)));
      const int n = static_cast<int>(v.size());
      nn::Vec dv = nn::Vec::Zero(n);
      double task = 0.0, kl = 0.0;
      for (int i = 0; i < n; ++i) {
        const double diff = v(i) - comm::level_midpoint(levels[e][i], levels_n);
        task += diff * diff / n;
        dv(i) += 2.0 * diff / n;
        // Per-node KL(speaker || listener) between soft level distributions.
        std::vector<double> ls(levels_n), ll(levels_n);
        for (int a = 0; a < levels_n; ++a) {
          const double mid = comm::level_midpoint(a, levels_n);
          ls[a] = -(vs(i) - mid) * (vs(i) - mid) / tau;
          ll[a] = -(v(i) - mid) * (v(i) - mid) / tau;
        }
        auto normalize = [](std::vector<double>& l) {
          const double mx = *std::max_element(l.begin(), l.end());
          double z = 0.0;
          for (auto& x : l) z += (x = std::exp(x - mx));
          for (auto& x : l) x /= z;
        };
        normalize(ls);
        normalize(ll);
        double g = 0.0;
        for (int a = 0; a < levels_n; ++a) {
          if (ls[a] > 0.0) kl += ls[a] * std::log(ls[a] / std::max(ll[a], 1e-300));
          g += (ll[a] - ls[a]) * (-2.0 * (v(i) - comm::level_midpoint(a, levels_n)) / tau);
        }
        dv(i) += cfg_.kl_weight * g;
      }
      st.task_loss += task * scale;
      st.influence += kl * scale;
      auto rb = nn::backward(codec_.listener.readout, ro, dv * scale);
      gr += rb.params;
      // Distortion pulls the decoder output toward the sent message.
      const nn::Vec diff = m_hat - m.values;
      const double dist = diff.squaredNorm();
      if (dist >= delta_) violators.push_back({dec, m.values});
      auto db = nn::backward(codec_.decoder, dec, rb.input + 2.0 * diff * scale);
      gd += db.params;
      // Straight-through: quantize -> channel -> decode treated as identity.
      const nn::Vec dy = comm::normalize_power_backward(enc.output, rb.input);
      ge += nn::backward(codec_.encoder, enc, dy).params;
    }
    st.violation_rate = static_cast<double>(violators.size()) / b;
    st.penalty = cfg_.penalty_rho * std::max(0.0, st.violation_rate - cfg_.epsilon);
    if (st.penalty > 0.0) {
      // Hinge surrogate: push every violating event's distortion down.
      for (const auto& v : violators) {
        const nn::Vec diff = v.dec.output - v.m;
        gd += nn::backward(codec_.decoder, v.dec, 2.0 * cfg_.penalty_rho * scale * diff).params;
      }
    }
    if (cfg_.codec_lr > 0.0) {
      enc_.step(codec_.encoder, ge);
      dec_.step(codec_.decoder, gd);
      ro_.step(codec_.listener.readout, gr);
    }
    return st;
  }

  // Several updates over consecutive slices; stats are event-weighted means.
  CodecStats minibatch(const std::vector<nn::Vec>& zs, const std::vector<std::vector<int>>& levels, int updates,
                       Rng& rng) {
    CodecStats total;
    const long count = static_cast<long>(zs.size());
    long violators = 0;
    for (const auto& [from, to] : slices(count, updates)) {
      const std::vector<nn::Vec> z(zs.begin() + from, zs.begin() + to);
      const std::vector<std::vector<int>> l(levels.begin() + from, levels.begin() + to);
      const CodecStats st = step(z, l, rng);
      const double w = static_cast<double>(to - from) / static_cast<double>(count);
      total.task_loss += w * st.task_loss;
      total.influence += w * st.influence;
      violators += std::lround(st.violation_rate * static_cast<double>(to - from));
    }
    if (count > 0) total.violation_rate = static_cast<double>(violators) / static_cast<double>(count);
    total.penalty = cfg_.penalty_rho * std::max(0.0, total.violation_rate - cfg_.epsilon);
    return total;
  }

 private:
  Codec& codec_;
  const ExperimentConfig& cfg_;
  double delta_;
  nn::Adam enc_, dec_, ro_;
};

// FormulaDelta between consecutive per-event theories with matching formula
// counts: every formula whose text or truth changed.
kb::FormulaDelta theory_delta(const kb::Theory& prev, const kb::Theory& next) {
  kb::FormulaDelta d;
  const auto& a = prev.kb().formulas();
  const auto& b = next.kb().formulas();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (i >= a.size()) {
      d.added.push_back(b[i]);
    } else if (!(a[i] == b[i]) || kb::aggregated_truth(a[i], prev) != kb::aggregated_truth(b[i], next)) {
      d.changed.emplace_back(i, b[i]);
    }
  }
  return d;
}

struct KbTracker {
  std::optional<kb::Theory> prev_speaker, prev_listener;
  double s_speaker = 0.0, s_listener = 0.0;
  double sum_speaker = 0.0, sum_listener = 0.0, sum_error = 0.0;
  long events = 0;

  void observe(const kb::Theory& speaker, const kb::Theory& listener) {
    if (!prev_speaker) {
      s_speaker = kb::semantic_content(speaker);
      s_listener = kb::semantic_content(listener);
    } else {
      s_speaker = kb::update_semantic_content(s_speaker, *prev_speaker, theory_delta(*prev_speaker, speaker), speaker);
      s_listener =
          kb::update_semantic_content(s_listener, *prev_listener, theory_delta(*prev_listener, listener), listener);
    }
    prev_speaker = speaker;
    prev_listener = listener;
    sum_speaker += s_speaker;
    sum_listener += s_listener;
    sum_error += comm::kb_information_error(s_speaker, s_listener);
    ++events;
  }
};

comm::KbPerturbation perturbation(const ExperimentConfig& c) { return {c.kb_perturb_fraction, c.kb_perturb_scale}; }

}  // namespace

Codec train_codec(const Pipeline& p, int k) {
  const auto& c = p.cfg;
  Rng init = make_rng(c.seed, kSweep, static_cast<std::uint64_t>(k));
  Codec codec = Codec::create(c.n, c.quant_levels, k, c.codec_hidden, c.bits_per_level(), c.temperature, init);
  CodecTrainer trainer(codec, c);
  Rng ch = make_rng(c.seed, kSweep, 1000 + static_cast<std::uint64_t>(k));
  const world::StateDescription base = build_state_description(p.data.x.row(0).transpose(), p.mode.dag(), p.levels);
  const long per = c.minibatches > 0 ? c.events_per_minibatch() : 0;
  for (int b = 0; b < c.minibatches; ++b) {
    std::vector<nn::Vec> zs;
    std::vector<std::vector<int>> lv;
    for (long e = b * per; e < (b + 1) * per; ++e) {
      auto sd = base;
      sd.node_values = p.levels.levels_of(p.data.x.row(e).transpose());
      zs.push_back(state_features(sd, c.quant_levels));
      lv.push_back(sd.node_values);
    }
    trainer.minibatch(zs, lv, c.updates_per_minibatch, ch);
  }
  return codec;
}

// ---------------------------------------------------------------------------
// Algorithm 1

Pipeline train_pipeline(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  Pipeline p;
  p.cfg = cfg;
  build_world(p);
  const auto& c = p.cfg;
  RunReport& rep = p.report;
  rep.seed = c.seed;
  rep.config = c;
  rep.delta = c.effective_delta();
  rep.epsilon = c.epsilon;
  rep.true_graph = gfn::edge_string(gfn::GraphState::from_adjacency(p.sem.dag.adjacency()));

  Rng flow_init = make_rng(c.seed, kFlowInit);
  p.flownet = gfn::FlowNet(c.n, c.flow_hidden, flow_init);
  Rng codec_init = make_rng(c.seed, kCodecInit);
  p.codec = Codec::create(c.n, c.quant_levels, c.k, c.codec_hidden, c.bits_per_level(), c.temperature, codec_init);

  const auto reward = gfn::RewardSpec::from_data(p.data, c.lambda, c.edge_bits);
  gfn::FlowNetOptimizer flow_opt(p.flownet, {c.flow_lr});
  CodecTrainer trainer(p.codec, c);
  Rng flow_rng = make_rng(c.seed, kFlowSample);
  Rng post_rng = make_rng(c.seed, kPosterior);
  Rng channel_rng = make_rng(c.seed, kCodecChannel);
  Rng kb_rng = make_rng(c.seed, kKb);
  KbTracker tracker;
  p.mode = gfn::GraphState(c.n);

  const long per = c.minibatches > 0 ? c.events_per_minibatch() : 0;
  const gfn::SamplingOptions sampling{c.mu, c.exploration};
  for (int b = 0; b < c.minibatches; ++b) {
    // Structure: one trajectory per event, theta updated on consecutive
    // slices of the minibatch.
    double flow_loss = 0.0;
    for (const auto& [from, to] : slices(per, c.updates_per_minibatch)) {
      std::vector<gfn::Trajectory> batch;
      batch.reserve(to - from);
      for (long e = from; e < to; ++e) batch.push_back(gfn::sample_trajectory(p.flownet, flow_rng, sampling));
      auto lg = gfn::flow_matching_loss_and_gradient(batch, p.flownet, reward);
      if (!std::isfinite(lg.loss) || lg.loss > 1e6 || !lg.grad.all_finite()) {
        std::ostringstream os;
        os << "structure learning diverged at minibatch " << b << ": loss " << lg.loss;
        if (!rep.flow_loss.empty()) os << " (previous minibatch " << rep.flow_loss.back() << ")";
        os << "; try a smaller lambda or flow_lr";
        throw gfn::DivergenceError(os.str());
      }
      flow_loss += lg.loss * static_cast<double>(to - from) / static_cast<double>(per);
      if (c.flow_lr > 0.0) flow_opt.step(p.flownet, lg.grad);
    }
    rep.flow_loss.push_back(flow_loss);
    p.mode = posterior_mode(p.flownet, c.posterior_samples, post_rng);
    const world::Dag dag = p.mode.dag();

    // Codec and KB over the same events.
    std::vector<nn::Vec> zs;
    std::vector<std::vector<int>> lv;
    for (long e = b * per; e < (b + 1) * per; ++e) {
      const auto sd = build_state_description(p.data.x.row(e).transpose(), dag, p.levels);
      zs.push_back(state_features(sd, c.quant_levels));
      lv.push_back(sd.node_values);
      const kb::Theory speaker = build_theory(sd, c.quant_levels);
      const kb::Theory listener = comm::perturb_theory(speaker, perturbation(c), kb_rng);
      tracker.observe(speaker, listener);
    }
    const CodecStats st = trainer.minibatch(zs, lv, c.updates_per_minibatch, channel_rng);
    rep.codec_task_loss.push_back(st.task_loss);
    rep.violation_rate.push_back(st.violation_rate);
    rep.objective.push_back(st.influence + flow_loss + st.penalty);
  }
  if (tracker.events > 0) {
    rep.mean_speaker_content = tracker.sum_speaker / tracker.events;
    rep.mean_listener_content = tracker.sum_listener / tracker.events;
    rep.mean_kb_error = tracker.sum_error / tracker.events;
  }
  if (rep.objective.size() >= 20) {
    const auto ma = [&](std::size_t from) {
      return std::accumulate(rep.objective.begin() + from, rep.objective.begin() + from + 10, 0.0) / 10.0;
    };
    rep.objective_trend_ok = ma(rep.objective.size() - 10) <= ma(0);
  }

  Rng final_rng = make_rng(c.seed, kPosterior, 1);
  p.posterior = gfn::sample_posterior(p.flownet, c.posterior_samples, final_rng, {1.0, 0.0});
  std::uint64_t best = 0;
  int best_count = -1;
  for (const auto& [key, cnt] : p.posterior)
    if (cnt > best_count) {
      best = key;
      best_count = cnt;
    }
  p.mode = gfn::GraphState::from_key(c.n, best);
  rep.posterior_mode = gfn::edge_string(p.mode);
  std::vector<std::pair<std::uint64_t, int>> rows(p.posterior.begin(), p.posterior.end());
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b2) { return a.second > b2.second; });
  for (std::size_t i = 0; i < rows.size() && i < 5; ++i)
    rep.posterior_top.emplace_back(gfn::edge_string(gfn::GraphState::from_key(c.n, rows[i].first)),
                                   static_cast<double>(rows[i].second) / c.posterior_samples);

  const auto ev = run_error_vs_crossover(p);
  rep.channels = ev.channels;
  rep.quantization_floor = ev.quantization_floor;
  rep.bits = bits_accounting(c.n, c.k, c.bits_per_level(), p.mode.edge_count(), c.task_events);
  rep.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return p;
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

struct EventStats {
  double sum = 0.0, sum_sq = 0.0;
  long count = 0;
  void add(double x) {
    sum += x;
    sum_sq += x * x;
    ++count;
  }
  double mean() const { return count ? sum / count : 0.0; }
  double stderr_() const {
    if (count < 2) return 0.0;
    const double m = mean();
    const double var = std::max(0.0, (sum_sq - count * m * m) / (count - 1));
    return std::sqrt(var / count);
  }
};

double mismatch_fraction(const std::vector<int>& a, const std::vector<int>& b) {
  int wrong = 0;
  for (std::size_t i = 0; i < a.size(); ++i) wrong += a[i] != b[i];
  return static_cast<double>(wrong) / static_cast<double>(a.size());
}

}  // namespace

ErrorVsCrossover run_error_vs_crossover(const Pipeline& p) {
  return run_error_vs_crossover(p, p.codec, p.cfg.channel_p, p.cfg.eval_events);
}

ErrorVsCrossover run_error_vs_crossover(const Pipeline& p, const Codec& codec, const std::vector<double>& ps,
                                        int events) {
  const auto& c = p.cfg;
  ExperimentConfig ec = c;
  ec.eval_events = events;
  Pipeline view;
  view.cfg = ec;
  view.sem = p.sem;
  const world::Dataset data = evaluation_events(view);
  const world::Dag dag = p.mode.dag();
  const double delta = c.delta ? *c.delta : comm::default_delta(codec.k(), codec.bits_per_dim);
  const int influence_events = std::min(c.influence_events, events);

  std::vector<EventStats> err(ps.size()), cls(ps.size()), infl(ps.size()), dist(ps.size());
  std::vector<long> reliable(ps.size(), 0);
  std::vector<int> floored(ps.size(), 0);
  EventStats floor;
  Rng kb_rng = make_rng(c.seed, kKb, 1);
  for (int e = 0; e < events; ++e) {
    const auto sd = build_state_description(data.x.row(e).transpose(), dag, p.levels);
    const kb::Theory speaker_t = build_theory(sd, c.quant_levels);
    const kb::Theory listener_t = comm::perturb_theory(speaker_t, perturbation(c), kb_rng);
    comm::ListenerPolicy listener = codec.listener;
    if (c.kb_perturb_fraction > 0.0) listener.node_gain = comm::formula_gains(speaker_t, listener_t);

    const comm::Message m = comm::encode(state_features(sd, c.quant_levels), codec.encoder);
    const comm::BitFrame frame = comm::quantize(m, codec.bits_per_dim);
    // Common random numbers: the same uniforms drive every p for this event.
    Rng ch_rng = make_rng(c.seed, kEvalChannel, static_cast<std::uint64_t>(e));
    std::vector<double> u(frame.bits.size());
    for (auto& x : u) x = uniform01(ch_rng);
    Rng cls_rng = make_rng(c.seed, kClassicalChannel, static_cast<std::uint64_t>(e));
    std::vector<double> uc(static_cast<std::size_t>(c.n * c.bits_per_level()));
    for (auto& x : uc) x = uniform01(cls_rng);

    floor.add(mismatch_fraction(comm::listener_action(comm::decode(frame, codec.decoder), listener), sd.node_values));
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const comm::Channel ch(ps[k]);
      const comm::BitFrame x = comm::transmit(frame, ch, u);
      const comm::Message m_hat = comm::decode(x, codec.decoder);
      err[k].add(mismatch_fraction(comm::listener_action(m_hat, listener), sd.node_values));
      const double d = comm::semantic_distortion(m, m_hat);
      dist[k].add(d);
      reliable[k] += d < delta;
      // Classical: raw Gray-coded levels through the same channel.
      std::vector<int> decoded(c.n);
      const int bpl = c.bits_per_level();
      for (int i = 0; i < c.n; ++i) {
        const unsigned code = comm::gray_encode(static_cast<unsigned>(sd.node_values[i]));
        unsigned rx = 0;
        for (int bit = bpl - 1; bit >= 0; --bit) {
          unsigned v = code >> bit & 1u;
          if (uc[i * bpl + (bpl - 1 - bit)] < ps[k]) v ^= 1u;
          rx = rx << 1 | v;
        }
        decoded[i] = static_cast<int>(comm::gray_decode(rx));
      }
      cls[k].add(mismatch_fraction(decoded, sd.node_values));
      if (e < influence_events) {
        // Exact KL unless the listener puts zero mass (after underflow) on an
        // action the speaker can take; only then smooth with the 1e-9 floor.
        Rng r = make_rng(c.seed, kInfluence, static_cast<std::uint64_t>(e));
        comm::InfluenceOptions io;
        double v;
        try {
          v = comm::causal_influence(m, ch, codec.listener, listener, codec.decoder, r, codec.bits_per_dim, io);
        } catch (const comm::InfiniteDivergenceError&) {
          r = make_rng(c.seed, kInfluence, static_cast<std::uint64_t>(e));
          io.smoothing_floor = 1e-9;
          v = comm::causal_influence(m, ch, codec.listener, listener, codec.decoder, r, codec.bits_per_dim, io);
          ++floored[k];
        }
        infl[k].add(v);
      }
    }
  }
  ErrorVsCrossover out;
  out.quantization_floor = floor.mean();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    out.curve.push_back({ps[k], err[k].mean(), err[k].stderr_(), events});
    ChannelResult r;
    r.p = ps[k];
    r.action_error = err[k].mean();
    r.action_error_stderr = err[k].stderr_();
    r.reliability = static_cast<double>(reliable[k]) / events;
    r.reliability_ok = r.reliability >= 1.0 - c.epsilon;
    r.mean_distortion = dist[k].mean();
    r.causal_influence = infl[k].mean();
    r.influence_floored = floored[k];
    r.classical_error = cls[k].mean();
    r.classical_error_stderr = cls[k].stderr_();
    out.channels.push_back(r);
  }
  return out;
}

long structure_bits(int n, int edges) { return static_cast<long>(edges) * 2L * ceil_log2(n); }

BitsAccounting bits_accounting(int n, int k, int bits_per_level, int structure_edges, long task_events) {
  BitsAccounting a;
  a.bits_per_level = bits_per_level;
  a.structure_edges = structure_edges;
  a.structure_bits = structure_bits(n, structure_edges);
  a.semantic_bits_per_event = static_cast<long>(k) * bits_per_level;
  a.classical_bits_per_event = static_cast<long>(n) * bits_per_level;
  a.task_events = task_events;
  a.semantic_task_bits = task_events * a.semantic_bits_per_event + a.structure_bits;
  a.classical_task_bits = task_events * a.classical_bits_per_event;
  return a;
}

CurvePoint classical_error(const Pipeline& p, const world::Dataset& events, int bits, double crossover) {
  const auto& c = p.cfg;
  const int bpl = c.bits_per_level();
  if (bits < 1 || bits > bpl) throw std::invalid_argument("classical bits per node must be in [1, bits_per_level]");
  const int merge = 1 << (bpl - bits);  // levels per transmitted symbol
  EventStats st;
  for (Eigen::Index e = 0; e < events.rows(); ++e) {
    const auto truth = p.levels.levels_of(events.x.row(e).transpose());
    Rng r = make_rng(c.seed, kClassicalChannel, static_cast<std::uint64_t>(e));
    std::vector<double> u(static_cast<std::size_t>(c.n * bpl));
    for (auto& x : u) x = uniform01(r);
    std::vector<int> decoded(c.n);
    for (int i = 0; i < c.n; ++i) {
      const unsigned code = comm::gray_encode(static_cast<unsigned>(truth[i] / merge));
      unsigned rx = 0;
      for (int bit = bits - 1; bit >= 0; --bit) {
        unsigned v = code >> bit & 1u;
        if (u[i * bpl + (bits - 1 - bit)] < crossover) v ^= 1u;
        rx = rx << 1 | v;
      }
      decoded[i] = static_cast<int>(comm::gray_decode(rx)) * merge + (merge - 1) / 2;
    }
    st.add(mismatch_fraction(decoded, truth));
  }
  return {0.0, st.mean(), st.stderr_(), static_cast<long>(events.rows())};
}

BitsVsError run_bits_vs_error(const Pipeline& p) {
  const auto& c = p.cfg;
  BitsVsError out;
  const int bpl = c.bits_per_level();
  const int edges = p.mode.edge_count();
  for (int k : c.k_sweep) {
    if (k >= c.n) {
      out.warnings.push_back("K = " + std::to_string(k) + " >= n = " + std::to_string(c.n) +
                             " does not compress; skipped");
      continue;
    }
    const Codec codec = k == c.k ? p.codec : train_codec(p, k);
    const auto ev = run_error_vs_crossover(p, codec, {c.bits_p}, c.eval_events);
    const auto acc = bits_accounting(c.n, k, bpl, edges, c.task_events);
    out.semantic.push_back({static_cast<double>(acc.semantic_task_bits), ev.curve[0].y, ev.curve[0].stderr_,
                            ev.curve[0].events});
    if (k == c.k) {
      out.semantic_error = ev.curve[0].y;
      out.semantic_error_stderr = ev.curve[0].stderr_;
    }
  }
  Pipeline view;
  view.cfg = c;
  view.sem = p.sem;
  const world::Dataset events = evaluation_events(view);
  for (int bits = 1; bits <= bpl; ++bits) {
    CurvePoint pt = classical_error(p, events, bits, c.bits_p);
    pt.x = static_cast<double>(static_cast<long>(c.task_events) * c.n * bits);
    out.classical.push_back(pt);
    if (bits == bpl) {
      out.classical_error = pt.y;
      out.classical_error_stderr = pt.stderr_;
    }
  }
  for (long t : c.task_lengths) {
    const auto acc = bits_accounting(c.n, c.k, bpl, edges, t);
    out.ratio_vs_task.push_back({t, acc.semantic_task_bits, acc.classical_task_bits,
                                 static_cast<double>(acc.classical_task_bits) / acc.semantic_task_bits});
  }
  out.reference = bits_accounting(c.n, c.k, bpl, edges, c.task_events);
  return out;
}

// ---------------------------------------------------------------------------
// Oracles

EnumerationOracle oracle_enumeration_n3(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  // Data-driven reward on a 3-node linear-Gaussian problem, tempered so the
  // normalized reward spreads over several DAGs.
  Rng g = make_rng(seed, 101);
  const auto dag = world::sample_er_graph(3, 0.5, g);
  const auto sem = world::assign_weights(dag, 0.5, 2.0, g);
  const auto data = world::sample_observations(sem, 200, g);
  const auto spec = gfn::RewardSpec::from_data(data, 0.05, 2.0);
  Rng init = make_rng(seed, 102);
  gfn::FlowNet net(3, {32, 32}, init);
  gfn::TrainConfig tc;
  tc.minibatches = 1500;
  tc.trajectories_per_minibatch = 16;
  tc.learning_rate = 3e-3;
  tc.sampling = {1.0, 0.2};
  tc.seed = derive_seed(seed, 103);
  const auto res = gfn::train_structure(net, spec, tc);
  EnumerationOracle o;
  o.tv = gfn::total_variation(gfn::terminal_distribution_exact(net).terminal, gfn::reward_distribution(3, spec));
  o.final_loss = res.loss_history.empty() ? 0.0 : res.loss_history.back();
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return o;
}

TwoNodeOracle oracle_two_node(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = gfn::RewardSpec::from_log_rewards(
      [](const gfn::GraphState& s) { return s.edge_count() == 0 ? std::log(3.0) : std::log(0.5); });
  Rng init = make_rng(seed, 201);
  gfn::FlowNet net(2, {16}, init);
  gfn::TrainConfig tc;
  tc.minibatches = 400;
  tc.trajectories_per_minibatch = 16;
  tc.learning_rate = 1e-2;
  tc.sampling = {1.0, 0.2};
  tc.seed = derive_seed(seed, 202);
  gfn::train_structure(net, spec, tc);
  const auto d = gfn::terminal_distribution_exact(net);
  TwoNodeOracle o;
  for (const auto& [key, prob] : d.terminal) (key == 0 ? o.p_empty : o.p_one_edge) += prob;
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return o;
}

double oracle_gradient_check(std::uint64_t seed, int nets) {
  using nn::Activation;
  Rng rng = make_rng(seed, 301);
  const Activation smooth[] = {Activation::Tanh, Activation::Sigmoid, Activation::Identity};
  double worst = 0.0;
  for (int t = 0; t < nets; ++t) {
    const int depth = 1 + static_cast<int>(uniform01(rng) * 3);
    std::vector<int> sizes{1 + static_cast<int>(uniform01(rng) * 6)};
    std::vector<Activation> acts;
    for (int l = 0; l < depth; ++l) {
      sizes.push_back(1 + static_cast<int>(uniform01(rng) * 6));
      acts.push_back(smooth[static_cast<int>(uniform01(rng) * 3)]);
    }
    const auto net = nn::Mlp::glorot(sizes, acts, rng);
    nn::Vec x(sizes.front()), target(sizes.back());
    for (auto& v : x) v = 2.0 * uniform01(rng) - 1.0;
    for (auto& v : target) v = 2.0 * uniform01(rng) - 1.0;
    worst = std::max(worst, nn::gradient_check(net, nn::squared_error_loss(target), x).max_relative_error);
  }
  return worst;
}

bool VerifyResult::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.second; });
}

VerifyResult run_verify(std::uint64_t seed) {
  VerifyResult r;
  std::ostringstream os;
  const auto e = oracle_enumeration_n3(seed);
  r.checks.emplace_back("n=3 enumeration: TV <= 0.05", e.tv <= 0.05);
  os << "TV = " << e.tv << " in " << e.seconds << " s";
  r.details.push_back(os.str());
  os.str("");
  const auto t = oracle_two_node(seed);
  r.checks.emplace_back("2-node closed form: (0.75, 0.25) +- 0.03",
                        std::abs(t.p_empty - 0.75) <= 0.03 && std::abs(t.p_one_edge - 0.25) <= 0.03);
  os << "P = (" << t.p_empty << ", " << t.p_one_edge << ") in " << t.seconds << " s";
  r.details.push_back(os.str());
  os.str("");
  const double g = oracle_gradient_check(seed, 100);
  r.checks.emplace_back("gradient check: max relative error <= 1e-4", g <= 1e-4);
  os << "max relative error = " << g;
  r.details.push_back(os.str());
  os.str("");
  // Mask correctness, exhaustively for n <= 4.
  bool masks = true;
  for (int n = 1; n <= 4; ++n)
    for (auto key : gfn::enumerate_dags(n)) {
      const auto s = gfn::GraphState::from_key(n, key);
      auto adj = s.adjacency();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          bool ok = false;
          if (i != j && !adj[i][j]) {
            adj[i][j] = 1;
            ok = world::is_acyclic(adj);
            adj[i][j] = 0;
          }
          masks = masks && ok == s.valid(i, j);
        }
    }
  r.checks.emplace_back("mask correctness for n <= 4", masks);
  const auto dag_counts = std::vector<std::size_t>{gfn::enumerate_dags(2).size(), gfn::enumerate_dags(3).size(),
                                                   gfn::enumerate_dags(4).size()};
  r.checks.emplace_back("DAG counts 3, 25, 543", dag_counts == std::vector<std::size_t>{3, 25, 543});
  return r;
}

}  // namespace nesy::harness
