#include "nesy/gflownet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_map>

namespace nesy::gfn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(const std::vector<double>& v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::uint32_t popcount(std::uint32_t x) { return static_cast<std::uint32_t>(__builtin_popcount(x)); }

}  // namespace

// ---------------------------------------------------------------------------
// GraphState

GraphState::GraphState(int n) : n_(n) {
  if (n < 1) throw std::invalid_argument("graph state needs n >= 1");
  if (n > kMaxNodes) throw std::invalid_argument("graph state supports at most " + std::to_string(kMaxNodes) + " nodes");
  adj_.assign(n, 0);
  desc_.assign(n, 0);
  anc_.assign(n, 0);
  mask_.assign(n, 0);
  refresh_mask();
}

void GraphState::refresh_mask() {
  const std::uint32_t full = n_ == 32 ? ~0u : ((1u << n_) - 1u);
  for (int i = 0; i < n_; ++i) mask_[i] = full & ~adj_[i] & ~(1u << i) & ~anc_[i];
}

int GraphState::valid_edge_count() const {
  int c = 0;
  for (auto m : mask_) c += static_cast<int>(popcount(m));
  return c;
}

void GraphState::add_edge_unchecked(int i, int j) {
  adj_[i] |= 1u << j;
  ++edges_;
  const std::uint32_t sources = anc_[i] | (1u << i);
  const std::uint32_t sinks = desc_[j] | (1u << j);
  for (int a = 0; a < n_; ++a)
    if (sources >> a & 1u) desc_[a] |= sinks;
  for (int b = 0; b < n_; ++b)
    if (sinks >> b & 1u) anc_[b] |= sources;
  refresh_mask();
}

std::uint64_t GraphState::key() const {
  std::uint64_t k = 0;
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j)
      if (adj_[i] >> j & 1u) k |= std::uint64_t{1} << (i * n_ + j);
  return k;
}

GraphState GraphState::from_key(int n, std::uint64_t key) {
  world::Adjacency adj(n, std::vector<std::uint8_t>(n, 0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (key >> (i * n + j) & 1u) adj[i][j] = 1;
  return from_adjacency(adj);
}

GraphState GraphState::from_adjacency(const world::Adjacency& adj) {
  const int n = static_cast<int>(adj.size());
  GraphState s(n);
  for (auto [i, j] : world::Dag(adj).edges()) {
    if (!s.valid(i, j)) throw std::logic_error("edge insertion rejected for an acyclic graph");
    s.add_edge_unchecked(i, j);
  }
  return s;
}

world::Adjacency GraphState::adjacency() const {
  world::Adjacency a(n_, std::vector<std::uint8_t>(n_, 0));
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j) a[i][j] = edge(i, j) ? 1 : 0;
  return a;
}

nn::Vec GraphState::encode() const {
  nn::Vec v(2 * n_ * n_);
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j) {
      v(i * n_ + j) = edge(i, j) ? 1.0 : 0.0;
      v(n_ * n_ + i * n_ + j) = reaches(i, j) ? 1.0 : 0.0;
    }
  return v;
}

GraphState initial_state(int n) {
  if (n < 1) throw std::invalid_argument("initial_state needs n >= 1");
  return GraphState(n);
}

GraphState apply_action(const GraphState& s, const Action& a) {
  if (s.terminal()) throw std::invalid_argument("cannot act on a terminal state");
  GraphState next = s;
  if (a.is_terminate()) {
    next.mark_terminal();
    return next;
  }
  const int n = s.n();
  if (a.source < 0 || a.target < 0 || a.source >= n || a.target >= n)
    throw std::invalid_argument("edge endpoint out of range");
  if (!s.valid(a.source, a.target)) {
    std::ostringstream os;
    os << "invalid action: mask[" << a.source << "][" << a.target << "] is false (";
    if (a.source == a.target)
      os << "self loop";
    else if (s.edge(a.source, a.target))
      os << "edge already present";
    else
      os << "path " << a.target << " -> " << a.source << " exists";
    os << ")";
    throw std::invalid_argument(os.str());
  }
  next.add_edge_unchecked(a.source, a.target);
  return next;
}

// ---------------------------------------------------------------------------
// Policy

PolicyHeads policy_from_flows(const GraphState& s, const LogFlows& flows) {
  const int n = s.n();
  if (flows.edge.size() != n * n) throw std::invalid_argument("edge flow vector has the wrong size");
  PolicyHeads h;
  h.edge_probs = nn::Vec::Zero(n * n);
  std::vector<double> logits;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (s.valid(i, j)) logits.push_back(flows.edge(i * n + j));
  if (logits.empty()) {
    h.terminate = 1.0;
    return h;
  }
  const double lse = log_sum_exp(logits);
  if (lse == kNegInf) {
    h.terminate = 1.0;
    return h;
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (s.valid(i, j)) h.edge_probs(i * n + j) = std::exp(flows.edge(i * n + j) - lse);
  h.terminate = flows.stop == kNegInf ? 0.0 : sigmoid(flows.stop - lse);
  if (!std::isfinite(h.terminate) || !h.edge_probs.allFinite())
    throw std::domain_error("policy produced non-finite probabilities");
  return h;
}

// ---------------------------------------------------------------------------
// FlowNet

FlowNet::FlowNet(int n, const std::vector<int>& hidden, Rng& rng) : n_(n) {
  if (n < 1 || n > kMaxNodes) throw std::invalid_argument("FlowNet node count out of range");
  if (hidden.empty()) throw std::invalid_argument("FlowNet needs at least one hidden layer");
  std::vector<int> sizes{2 * n * n};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  trunk_ = nn::Mlp::glorot(sizes, std::vector<nn::Activation>(hidden.size(), nn::Activation::Tanh), rng);
  edge_ = nn::Mlp::glorot({hidden.back(), n * n}, {nn::Activation::Identity}, rng);
  stop_ = nn::Mlp::glorot({hidden.back(), 1}, {nn::Activation::Identity}, rng);
}

FlowNet FlowNet::uniform(int n, const std::vector<int>& hidden, Rng& rng) {
  FlowNet f(n, hidden, rng);
  f.edge_.set_parameters(nn::Vec::Zero(f.edge_.parameter_count()));
  f.stop_.set_parameters(nn::Vec::Zero(f.stop_.parameter_count()));
  return f;
}

FlowNet::Cache FlowNet::forward(const GraphState& s) const {
  if (s.n() != n_) throw std::invalid_argument("state size does not match FlowNet");
  Cache c;
  c.trunk = nn::forward_cached(trunk_, s.encode());
  c.edge = nn::forward_cached(edge_, c.trunk.output);
  c.stop = nn::forward_cached(stop_, c.trunk.output);
  return c;
}

LogFlows FlowNet::flows_of(const Cache& c) { return {c.edge.output, c.stop.output(0)}; }

LogFlows FlowNet::log_flows(const GraphState& s) const { return flows_of(forward(s)); }

FlowFunction FlowNet::as_function() const {
  return [this](const GraphState& s) { return log_flows(s); };
}

FlowNet::Gradients FlowNet::backward(const Cache& c, const nn::Vec& d_edge, double d_stop) const {
  Gradients g;
  auto eb = nn::backward(edge_, c.edge, d_edge);
  auto sb = nn::backward(stop_, c.stop, nn::Vec::Constant(1, d_stop));
  auto tb = nn::backward(trunk_, c.trunk, eb.input + sb.input);
  g.trunk = std::move(tb.params);
  g.edge = std::move(eb.params);
  g.stop = std::move(sb.params);
  return g;
}

FlowNet::Gradients FlowNet::zero_gradients() const {
  return {trunk_.zero_gradients(), edge_.zero_gradients(), stop_.zero_gradients()};
}

FlowNet::Gradients& FlowNet::Gradients::operator+=(const Gradients& o) {
  trunk += o.trunk;
  edge += o.edge;
  stop += o.stop;
  return *this;
}

FlowNet::Gradients& FlowNet::Gradients::operator*=(double s) {
  trunk *= s;
  edge *= s;
  stop *= s;
  return *this;
}

bool FlowNet::Gradients::all_finite() const { return trunk.all_finite() && edge.all_finite() && stop.all_finite(); }

void FlowNet::save(const std::filesystem::path& path) const {
  nn::save_checkpoint({{"trunk", trunk_}, {"edge_head", edge_}, {"stop_head", stop_}}, path);
}

FlowNet FlowNet::load(const std::filesystem::path& path) {
  auto nets = nn::load_checkpoint(path);
  if (nets.size() != 3 || nets[0].first != "trunk" || nets[1].first != "edge_head" || nets[2].first != "stop_head")
    throw std::runtime_error("not a FlowNet checkpoint: " + path.string());
  FlowNet f;
  f.trunk_ = std::move(nets[0].second);
  f.edge_ = std::move(nets[1].second);
  f.stop_ = std::move(nets[2].second);
  const int width = f.trunk_.input_size();
  int n = 1;
  while (2 * n * n < width) ++n;
  if (2 * n * n != width || f.edge_.output_size() != n * n) throw std::runtime_error("inconsistent FlowNet shapes");
  f.n_ = n;
  return f;
}

PolicyHeads policy_heads(const GraphState& s, const FlowNet& net) {
  if (s.terminal()) throw std::invalid_argument("policy_heads on a terminal state");
  return policy_from_flows(s, net.log_flows(s));
}

// ---------------------------------------------------------------------------
// Reward

RewardSpec RewardSpec::from_scorer(std::shared_ptr<const world::LinearGaussianScorer> scorer, double lambda,
                                   double edge_bits) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  if (!(edge_bits >= 0.0)) throw std::invalid_argument("edge cost must be >= 0");
  RewardSpec r;
  r.scorer = std::move(scorer);
  r.lambda = lambda;
  r.edge_bits = edge_bits;
  r.reference_bits = r.description_length_bits(GraphState(r.scorer->n()));
  return r;
}

RewardSpec RewardSpec::from_data(const world::Dataset& data, double lambda, double edge_bits) {
  return from_scorer(std::make_shared<world::LinearGaussianScorer>(data), lambda, edge_bits);
}

RewardSpec RewardSpec::from_log_rewards(std::function<double(const GraphState&)> f) {
  RewardSpec r;
  r.log_reward_override = std::move(f);
  return r;
}

double RewardSpec::description_length_bits(const GraphState& s) const {
  if (!scorer) throw std::logic_error("reward has no dataset");
  return -scorer->log_likelihood(s.adjacency()) / std::numbers::ln2 + edge_bits * s.edge_count();
}

double RewardSpec::log_reward(const GraphState& s) const {
  if (log_reward_override) return log_reward_override(s);
  if (lambda == 0.0) return 0.0;
  return -lambda * (description_length_bits(s) - reference_bits);
}

double reward(const GraphState& s, const RewardSpec& spec) {
  if (!s.terminal()) throw std::invalid_argument("reward is defined on terminal states");
  return std::exp(spec.log_reward(s));
}

// ---------------------------------------------------------------------------
// Sampling

Trajectory sample_trajectory(const FlowFunction& flows, int n, Rng& rng, const SamplingOptions& opts) {
  Trajectory t;
  GraphState s = initial_state(n);
  const int cap = n * n;
  for (int step = 0;; ++step) {
    if (step > cap) throw std::logic_error("trajectory exceeded n^2 steps; mask is inconsistent");
    const PolicyHeads h = policy_from_flows(s, flows(s));
    Action a = Action::terminate();
    if (s.saturated()) {
      a = Action::terminate();
    } else if (h.terminate > opts.mu) {
      t.mu_exit = true;
    } else if (opts.exploration > 0.0 && uniform01(rng) < opts.exploration) {
      const int choices = s.valid_edge_count() + 1;
      int pick = static_cast<int>(uniform01(rng) * choices);
      for (int i = 0; i < n && pick >= 0; ++i)
        for (int j = 0; j < n && pick >= 0; ++j)
          if (s.valid(i, j) && pick-- == 0) a = Action::add(i, j);
    } else if (uniform01(rng) >= h.terminate) {
      double u = uniform01(rng);
      int last = -1;
      for (int k = 0; k < n * n; ++k) {
        if (h.edge_probs(k) <= 0.0) continue;
        last = k;
        u -= h.edge_probs(k);
        if (u < 0.0) break;
      }
      a = Action::add(last / n, last % n);
    }
    t.steps.push_back({s, a});
    s = apply_action(s, a);
    if (a.is_terminate()) break;
  }
  t.terminal = s;
  return t;
}

// ---------------------------------------------------------------------------
// Flow matching

namespace {

std::vector<std::pair<GraphState, int>> parents_of(const GraphState& s) {
  std::vector<std::pair<GraphState, int>> out;
  const int n = s.n();
  const std::uint64_t key = s.key();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (s.edge(i, j)) out.emplace_back(GraphState::from_key(n, key & ~(std::uint64_t{1} << (i * n + j))), i * n + j);
  return out;
}

double trajectory_loss(const Trajectory& t, const FlowFunction& flows, const RewardSpec& spec, LossForm form) {
  std::unordered_map<std::uint64_t, LogFlows> memo;
  auto get = [&](const GraphState& s) -> const LogFlows& {
    auto it = memo.find(s.key());
    if (it == memo.end()) it = memo.emplace(s.key(), flows(s)).first;
    return it->second;
  };
  double loss = 0.0;
  const int n = t.terminal.n();
  for (std::size_t k = 1; k < t.steps.size(); ++k) {
    const GraphState& s = t.steps[k].state;
    std::vector<double> in, out;
    for (const auto& [p, a] : parents_of(s)) in.push_back(get(p).edge(a));
    const LogFlows& f = get(s);
    for (int a = 0; a < n * n; ++a)
      if (s.valid(a / n, a % n)) out.push_back(f.edge(a));
    out.push_back(f.stop);
    double r;
    if (form == LossForm::Log) {
      r = log_sum_exp(in) - log_sum_exp(out);
    } else {
      r = 0.0;
      for (double x : in) r += std::exp(x);
      for (double x : out) r -= std::exp(x);
    }
    loss += r * r;
  }
  const GraphState& last = t.steps.back().state;
  const double stop = get(last).stop;
  const double log_r = spec.log_reward(t.terminal);
  const double r = form == LossForm::Log ? stop - log_r : std::exp(stop) - std::exp(log_r);
  return loss + r * r;
}

}  // namespace

double flow_matching_loss(const std::vector<Trajectory>& batch, const FlowFunction& flows, const RewardSpec& spec,
                          LossForm form) {
  if (batch.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : batch) s += trajectory_loss(t, flows, spec, form);
  return s / static_cast<double>(batch.size());
}

LossAndGradient flow_matching_loss_and_gradient(const std::vector<Trajectory>& batch, const FlowNet& net,
                                                const RewardSpec& spec) {
  LossAndGradient res{0.0, net.zero_gradients()};
  if (batch.empty()) return res;
  const int n = net.n();
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& t : batch) {
    struct Entry {
      FlowNet::Cache cache;
      nn::Vec d_edge;
      double d_stop = 0.0;
    };
    std::unordered_map<std::uint64_t, Entry> states;
    auto get = [&](const GraphState& s) -> Entry& {
      auto it = states.find(s.key());
      if (it == states.end()) it = states.emplace(s.key(), Entry{net.forward(s), nn::Vec::Zero(n * n), 0.0}).first;
      return it->second;
    };
    for (std::size_t k = 1; k < t.steps.size(); ++k) {
      const GraphState& s = t.steps[k].state;
      const auto parents = parents_of(s);
      std::vector<double> in;
      for (const auto& [p, a] : parents) in.push_back(get(p).cache.edge.output(a));
      Entry& self = get(s);
      std::vector<double> out;
      std::vector<int> out_idx;
      for (int a = 0; a < n * n; ++a)
        if (s.valid(a / n, a % n)) {
          out.push_back(self.cache.edge.output(a));
          out_idx.push_back(a);
        }
      out.push_back(self.cache.stop.output(0));
      const double lse_in = log_sum_exp(in);
      const double lse_out = log_sum_exp(out);
      const double r = lse_in - lse_out;
      res.loss += r * r * scale;
      const double g = 2.0 * r * scale;
      for (std::size_t q = 0; q < parents.size(); ++q)
        get(parents[q].first).d_edge(parents[q].second) += g * std::exp(in[q] - lse_in);
      Entry& me = get(s);
      for (std::size_t q = 0; q < out_idx.size(); ++q) me.d_edge(out_idx[q]) -= g * std::exp(out[q] - lse_out);
      me.d_stop -= g * std::exp(out.back() - lse_out);
    }
    Entry& last = get(t.steps.back().state);
    const double r = last.cache.stop.output(0) - spec.log_reward(t.terminal);
    res.loss += r * r * scale;
    last.d_stop += 2.0 * r * scale;
    for (const auto& [key, e] : states) res.grad += net.backward(e.cache, e.d_edge, e.d_stop);
  }
  return res;
}

FlowNetOptimizer::FlowNetOptimizer(const FlowNet& net, nn::Adam::Options opts)
    : trunk_(net.trunk(), opts), edge_(net.edge_head(), opts), stop_(net.stop_head(), opts) {}

void FlowNetOptimizer::step(FlowNet& net, const FlowNet::Gradients& g) {
  if (!g.all_finite()) throw std::domain_error("non-finite FlowNet gradient; parameters left unchanged");
  trunk_.step(net.trunk(), g.trunk);
  edge_.step(net.edge_head(), g.edge);
  stop_.step(net.stop_head(), g.stop);
}

TrainResult train_structure(FlowNet& net, const RewardSpec& spec, const TrainConfig& cfg) {
  if (cfg.minibatches < 0 || cfg.trajectories_per_minibatch < 1)
    throw std::invalid_argument("bad minibatch configuration");
  if (!(cfg.learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
  TrainResult res;
  FlowNetOptimizer opt(net, {cfg.learning_rate});
  Rng rng(derive_seed(cfg.seed, 0x67666e));
  for (int b = 0; b < cfg.minibatches; ++b) {
    std::vector<Trajectory> batch;
    batch.reserve(cfg.trajectories_per_minibatch);
    for (int k = 0; k < cfg.trajectories_per_minibatch; ++k) batch.push_back(sample_trajectory(net, rng, cfg.sampling));
    auto lg = flow_matching_loss_and_gradient(batch, net, spec);
    if (!(lg.loss <= cfg.divergence_threshold)) {
      std::ostringstream os;
      os << "flow-matching loss diverged at minibatch " << b << ": " << lg.loss << " (threshold "
         << cfg.divergence_threshold << ", last loss " << (res.loss_history.empty() ? 0.0 : res.loss_history.back())
         << ")";
      throw DivergenceError(os.str());
    }
    res.loss_history.push_back(lg.loss);
    if (cfg.learning_rate > 0.0) opt.step(net, lg.grad);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Exact enumeration

ExactDistribution terminal_distribution_exact(const FlowFunction& flows, int n, double mu) {
  if (n < 1 || n > 4) throw std::invalid_argument("exact terminal distribution supports 1 <= n <= 4");
  ExactDistribution d;
  d.length.assign(n * (n - 1) / 2 + 1, 0.0);
  std::map<std::uint64_t, double> layer{{0, 1.0}};
  for (int depth = 0; !layer.empty(); ++depth) {
    std::map<std::uint64_t, double> next;
    for (const auto& [key, prob] : layer) {
      const GraphState s = GraphState::from_key(n, key);
      const PolicyHeads h = policy_from_flows(s, flows(s));
      double stop = h.terminate;
      if (s.saturated() || h.terminate > mu) stop = 1.0;
      if (stop > 0.0) {
        d.terminal[key] += prob * stop;
        d.length[depth] += prob * stop;
      }
      if (stop >= 1.0) continue;
      for (int a = 0; a < n * n; ++a)
        if (h.edge_probs(a) > 0.0) next[key | (std::uint64_t{1} << a)] += prob * (1.0 - stop) * h.edge_probs(a);
    }
    layer = std::move(next);
  }
  return d;
}

std::vector<std::uint64_t> enumerate_dags(int n) {
  if (n < 1 || n > 5) throw std::invalid_argument("DAG enumeration supports 1 <= n <= 5");
  std::vector<std::uint64_t> out;
  std::map<std::uint64_t, bool> seen{{0, true}};
  std::vector<std::uint64_t> frontier{0};
  out.push_back(0);
  while (!frontier.empty()) {
    std::vector<std::uint64_t> next;
    for (auto key : frontier) {
      const GraphState s = GraphState::from_key(n, key);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if (s.valid(i, j)) {
            auto k = key | (std::uint64_t{1} << (i * n + j));
            if (seen.emplace(k, true).second) {
              next.push_back(k);
              out.push_back(k);
            }
          }
    }
    frontier = std::move(next);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::map<std::uint64_t, double> reward_distribution(int n, const RewardSpec& spec) {
  std::map<std::uint64_t, double> logr;
  double m = kNegInf;
  for (auto key : enumerate_dags(n)) {
    GraphState s = GraphState::from_key(n, key);
    s.mark_terminal();
    const double l = spec.log_reward(s);
    logr[key] = l;
    m = std::max(m, l);
  }
  double z = 0.0;
  for (auto& [k, l] : logr) z += std::exp(l - m);
  std::map<std::uint64_t, double> p;
  for (auto& [k, l] : logr) p[k] = std::exp(l - m) / z;
  return p;
}

double total_variation(const std::map<std::uint64_t, double>& p, const std::map<std::uint64_t, double>& q) {
  double s = 0.0;
  for (const auto& [k, v] : p) {
    auto it = q.find(k);
    s += std::abs(v - (it == q.end() ? 0.0 : it->second));
  }
  for (const auto& [k, v] : q)
    if (!p.count(k)) s += std::abs(v);
  return 0.5 * s;
}

std::map<std::uint64_t, int> sample_posterior(const FlowNet& net, int samples, Rng& rng, const SamplingOptions& opts) {
  std::map<std::uint64_t, int> counts;
  for (int k = 0; k < samples; ++k) ++counts[sample_trajectory(net, rng, opts).terminal.key()];
  return counts;
}

std::string edge_string(const GraphState& s) {
  std::ostringstream os;
  bool first = true;
  for (int i = 0; i < s.n(); ++i)
    for (int j = 0; j < s.n(); ++j)
      if (s.edge(i, j)) {
        os << (first ? "" : ";") << i << "->" << j;
        first = false;
      }
  return os.str();
}

void write_posterior_csv(const std::map<std::uint64_t, int>& counts, int n, const std::filesystem::path& path) {
  std::vector<std::pair<std::uint64_t, int>> rows(counts.begin(), counts.end());
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  int total = 0;
  for (const auto& [k, c] : rows) total += c;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "graph,frequency\n";
  os.precision(17);
  for (const auto& [k, c] : rows)
    os << '"' << edge_string(GraphState::from_key(n, k)) << "\"," << static_cast<double>(c) / total << '\n';
}

}  // namespace nesy::gfn
