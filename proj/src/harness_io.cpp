#include <fstream>
#include <iomanip>
#include <sstream>

#include "nesy/harness.hpp"
#include "nesy/kb_io.hpp"

namespace nesy::harness {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& v, const std::string& key) {
  std::istringstream is(v);
  T x{};
  is >> x;
  if (is.fail() || !is.eof()) throw std::invalid_argument("config key '" + key + "': cannot parse '" + v + "'");
  return x;
}

template <class T>
std::vector<T> parse_list(const std::string& v, const std::string& key) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(parse_number<T>(item, key));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
  return os.str();
}

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    auto d = [&] { return parse_number<double>(v, key); };
    auto i = [&] { return parse_number<int>(v, key); };
    if (key == "n") c.n = i();
    else if (key == "observations") c.observations = parse_number<long>(v, key);
    else if (key == "edge_prob") c.edge_prob = d();
    else if (key == "weight_low") c.weight_low = d();
    else if (key == "weight_high") c.weight_high = d();
    else if (key == "noise_std") c.noise_std = d();
    else if (key == "quant_levels") c.quant_levels = i();
    else if (key == "minibatches") c.minibatches = i();
    else if (key == "updates_per_minibatch") c.updates_per_minibatch = i();
    else if (key == "mu") c.mu = d();
    else if (key == "lambda") c.lambda = d();
    else if (key == "edge_bits") c.edge_bits = d();
    else if (key == "flow_hidden") c.flow_hidden = parse_list<int>(v, key);
    else if (key == "flow_lr") c.flow_lr = d();
    else if (key == "exploration") c.exploration = d();
    else if (key == "posterior_samples") c.posterior_samples = i();
    else if (key == "k") c.k = i();
    else if (key == "codec_hidden") c.codec_hidden = i();
    else if (key == "codec_lr") c.codec_lr = d();
    else if (key == "train_p") c.train_p = d();
    else if (key == "kl_weight") c.kl_weight = d();
    else if (key == "penalty_rho") c.penalty_rho = d();
    else if (key == "delta") c.delta = v == "auto" ? std::nullopt : std::optional<double>(d());
    else if (key == "epsilon") c.epsilon = d();
    else if (key == "temperature") c.temperature = d();
    else if (key == "kb_perturb_fraction") c.kb_perturb_fraction = d();
    else if (key == "kb_perturb_scale") c.kb_perturb_scale = d();
    else if (key == "channel_p") c.channel_p = parse_list<double>(v, key);
    else if (key == "eval_events") c.eval_events = i();
    else if (key == "influence_events") c.influence_events = i();
    else if (key == "task_events") c.task_events = i();
    else if (key == "bits_p") c.bits_p = d();
    else if (key == "k_sweep") c.k_sweep = parse_list<int>(v, key);
    else if (key == "task_lengths") c.task_lengths = parse_list<long>(v, key);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(v, key);
    else throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string to_config_string(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "# world\n"
     << "n = " << c.n << "\nobservations = " << c.observations << "\nedge_prob = " << fmt(c.edge_prob)
     << "\nweight_low = " << fmt(c.weight_low) << "\nweight_high = " << fmt(c.weight_high)
     << "\nnoise_std = " << fmt(c.noise_std) << "\nquant_levels = " << c.quant_levels << "\n\n# structure learning\n"
     << "minibatches = " << c.minibatches << "\nupdates_per_minibatch = " << c.updates_per_minibatch << "\nmu = " << fmt(c.mu) << "\nlambda = " << fmt(c.lambda)
     << "\nedge_bits = " << fmt(c.edge_bits) << "\nflow_hidden = " << join(c.flow_hidden)
     << "\nflow_lr = " << fmt(c.flow_lr) << "\nexploration = " << fmt(c.exploration)
     << "\nposterior_samples = " << c.posterior_samples << "\n\n# codec\n"
     << "k = " << c.k << "\ncodec_hidden = " << c.codec_hidden << "\ncodec_lr = " << fmt(c.codec_lr)
     << "\ntrain_p = " << fmt(c.train_p) << "\nkl_weight = " << fmt(c.kl_weight)
     << "\npenalty_rho = " << fmt(c.penalty_rho) << "\ndelta = " << (c.delta ? fmt(*c.delta) : "auto")
     << "\nepsilon = " << fmt(c.epsilon) << "\ntemperature = " << fmt(c.temperature)
     << "\nkb_perturb_fraction = " << fmt(c.kb_perturb_fraction) << "\nkb_perturb_scale = " << fmt(c.kb_perturb_scale)
     << "\n\n# evaluation\n"
     << "channel_p = " << join(c.channel_p) << "\neval_events = " << c.eval_events
     << "\ninfluence_events = " << c.influence_events << "\ntask_events = " << c.task_events
     << "\nbits_p = " << fmt(c.bits_p) << "\nk_sweep = " << join(c.k_sweep) << "\ntask_lengths = " << join(c.task_lengths)
     << "\n\nseed = " << c.seed << "\n";
  return os.str();
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["n"] = c.n;
  j["observations"] = c.observations;
  j["edge_prob"] = c.edge_prob;
  j["weight_low"] = c.weight_low;
  j["weight_high"] = c.weight_high;
  j["noise_std"] = c.noise_std;
  j["quant_levels"] = c.quant_levels;
  j["minibatches"] = c.minibatches;
  j["events_per_minibatch"] = c.minibatches > 0 ? c.events_per_minibatch() : 0;
  j["updates_per_minibatch"] = c.updates_per_minibatch;
  j["mu"] = c.mu;
  j["lambda"] = c.lambda;
  j["edge_bits"] = c.edge_bits;
  j["flow_hidden"] = c.flow_hidden;
  j["flow_lr"] = c.flow_lr;
  j["exploration"] = c.exploration;
  j["posterior_samples"] = c.posterior_samples;
  j["k"] = c.k;
  j["codec_hidden"] = c.codec_hidden;
  j["codec_lr"] = c.codec_lr;
  j["train_p"] = c.train_p;
  j["kl_weight"] = c.kl_weight;
  j["penalty_rho"] = c.penalty_rho;
  j["delta"] = c.effective_delta();
  j["epsilon"] = c.epsilon;
  j["temperature"] = c.temperature;
  j["kb_perturb_fraction"] = c.kb_perturb_fraction;
  j["kb_perturb_scale"] = c.kb_perturb_scale;
  j["channel_p"] = c.channel_p;
  j["eval_events"] = c.eval_events;
  j["influence_events"] = c.influence_events;
  j["task_events"] = c.task_events;
  j["bits_p"] = c.bits_p;
  j["k_sweep"] = c.k_sweep;
  j["task_lengths"] = c.task_lengths;
  j["seed"] = c.seed;
  return j;
}

namespace {
nlohmann::json bits_to_json(const BitsAccounting& b) {
  return {{"bits_per_level", b.bits_per_level},
          {"structure_edges", b.structure_edges},
          {"structure_bits", b.structure_bits},
          {"semantic_bits_per_event", b.semantic_bits_per_event},
          {"classical_bits_per_event", b.classical_bits_per_event},
          {"task_events", b.task_events},
          {"semantic_task_bits", b.semantic_task_bits},
          {"classical_task_bits", b.classical_task_bits}};
}
}  // namespace

nlohmann::json report_to_json(const RunReport& r) {
  nlohmann::json j;
  j["seed"] = r.seed;
  j["config"] = config_to_json(r.config);
  j["flow_loss"] = r.flow_loss;
  j["codec_task_loss"] = r.codec_task_loss;
  j["objective"] = r.objective;
  j["violation_rate"] = r.violation_rate;
  j["objective_trend_ok"] = r.objective_trend_ok;
  j["true_graph"] = r.true_graph;
  j["posterior_mode"] = r.posterior_mode;
  auto& top = j["posterior_top"] = nlohmann::json::array();
  for (const auto& [g, f] : r.posterior_top) top.push_back({{"graph", g}, {"frequency", f}});
  j["kb"] = {{"mean_speaker_content_bits", r.mean_speaker_content},
             {"mean_listener_content_bits", r.mean_listener_content},
             {"mean_kb_error", r.mean_kb_error}};
  j["quantization_floor"] = r.quantization_floor;
  auto& ch = j["channels"] = nlohmann::json::array();
  for (const auto& c : r.channels)
    ch.push_back({{"p", c.p},
                  {"action_error", c.action_error},
                  {"action_error_stderr", c.action_error_stderr},
                  {"reliability", c.reliability},
                  {"reliability_target", 1.0 - r.epsilon},
                  {"chance_constraint", c.reliability_ok ? "pass" : "fail"},
                  {"mean_distortion", c.mean_distortion},
                  {"causal_influence_nats", c.causal_influence},
                  {"influence_smoothed_events", c.influence_floored},
                  {"classical_error", c.classical_error},
                  {"classical_error_stderr", c.classical_error_stderr}});
  j["bits"] = bits_to_json(r.bits);
  j["delta"] = r.delta;
  j["epsilon"] = r.epsilon;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

void write_report(const RunReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << report_to_json(r).dump(2) << '\n';
}

void write_curve_csv(const std::vector<CurvePoint>& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "x,y,stderr,events\n" << std::setprecision(17);
  for (const auto& p : c) os << p.x << ',' << p.y << ',' << p.stderr_ << ',' << p.events << '\n';
}

void write_ratio_csv(const std::vector<BitsVsError::Ratio>& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "task_events,semantic_bits,classical_bits,ratio\n" << std::setprecision(17);
  for (const auto& x : r)
    os << x.task_events << ',' << x.semantic_bits << ',' << x.classical_bits << ',' << x.ratio << '\n';
}

void write_plot_script(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << R"PY(#!/usr/bin/env python3
"""Plots the bits-vs-error and error-vs-crossover curves from the CSVs in this directory."""
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))


def load(name):
    with open(os.path.join(here, name)) as f:
        rows = list(csv.DictReader(f))
    return ([float(r["x"]) for r in rows], [float(r["y"]) for r in rows], [float(r["stderr"]) for r in rows])


fig, ax = plt.subplots(1, 3, figsize=(15, 4))

x, y, e = load("curve_bits.csv")
ax[0].errorbar(x, y, yerr=e, marker="o", label="semantic (K sweep)")
x, y, e = load("curve_bits_classical.csv")
ax[0].errorbar(x, y, yerr=e, marker="s", label="classical")
ax[0].set_xscale("log")
ax[0].set_xlabel("total bits for the task")
ax[0].set_ylabel("decoding error probability")
ax[0].legend()

x, y, e = load("curve_p.csv")
ax[1].errorbar(x, y, yerr=e, marker="o")
ax[1].set_xlabel("crossover probability p")
ax[1].set_ylabel("decoding error probability")

with open(os.path.join(here, "ratio_vs_task.csv")) as f:
    rows = list(csv.DictReader(f))
ax[2].plot([int(r["task_events"]) for r in rows], [float(r["ratio"]) for r in rows], marker="o")
ax[2].set_xscale("log")
ax[2].set_xlabel("task length (events)")
ax[2].set_ylabel("classical bits / semantic bits")

fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, "curves.png")
fig.savefig(out, dpi=120)
print(out)
)PY";
}

void save_training_outputs(const Pipeline& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_report(p.report, dir / "report.json");
  {
    std::ofstream os(dir / "config.txt");
    os << to_config_string(p.cfg);
  }
  p.flownet.save(dir / "flownet.bin");
  p.codec.save(dir / "codec.bin");
  world::write_edge_list(p.sem.dag, dir / "true_dag.txt");
  world::write_edge_list(p.mode.dag(), dir / "mode_dag.txt");
  gfn::write_posterior_csv(p.posterior, p.cfg.n, dir / "posterior.csv");
  world::write_dataset_csv(p.data, dir / "dataset.csv");

  // Trace of the first evaluation events at the first nonzero crossover.
  const world::Dataset events = evaluation_events(p);
  double trace_p = 0.0;
  for (double x : p.cfg.channel_p)
    if (x > 0.0) {
      trace_p = x;
      break;
    }
  const comm::Channel ch(trace_p);
  Rng rng = make_rng(p.cfg.seed, 0x7472);
  std::vector<comm::TraceRow> rows;
  const int count = std::min<int>(200, static_cast<int>(events.rows()));
  const world::Dag dag = p.mode.dag();
  for (int e = 0; e < count; ++e) {
    const auto sd = build_state_description(events.x.row(e).transpose(), dag, p.levels);
    const auto m = comm::encode(state_features(sd, p.cfg.quant_levels), p.codec.encoder);
    const auto frame = comm::quantize(m, p.codec.bits_per_dim);
    const auto x = comm::transmit(frame, ch, rng);
    const auto m_hat = comm::decode(x, p.codec.decoder);
    comm::TraceRow r;
    r.event = e;
    r.bits = frame.to_string();
    r.flipped = comm::flipped_bits(frame, x);
    r.distortion = comm::semantic_distortion(m, m_hat);
    r.speaker_action = comm::listener_action(comm::decode(frame, p.codec.decoder), p.codec.listener);
    r.listener_action = comm::listener_action(m_hat, p.codec.listener);
    r.similar = comm::is_semantically_similar(m, m_hat, p.report.delta, 0.0, 0.0);
    rows.push_back(std::move(r));
  }
  comm::write_trace_csv(rows, dir / "trace.csv");
  if (events.rows() > 0)
    kb::save_theory(build_theory(build_state_description(events.x.row(0).transpose(), dag, p.levels),
                                 p.cfg.quant_levels),
                    dir / "kb.json");
}

Pipeline load_pipeline(const std::filesystem::path& dir) {
  Pipeline p;
  p.cfg = load_config(dir / "config.txt");
  build_world(p);
  p.flownet = gfn::FlowNet::load(dir / "flownet.bin");
  p.codec = Codec::load(dir / "codec.bin", p.cfg.quant_levels, p.cfg.temperature);
  const world::Dag mode = world::read_edge_list(dir / "mode_dag.txt");
  p.mode = gfn::GraphState::from_adjacency(mode.adjacency());
  if (p.flownet.n() != p.cfg.n || mode.n() != p.cfg.n) throw std::runtime_error("artifacts do not match config.txt");
  p.report.seed = p.cfg.seed;
  p.report.config = p.cfg;
  p.report.delta = p.cfg.effective_delta();
  p.report.epsilon = p.cfg.epsilon;
  return p;
}

nlohmann::json write_curves(const Pipeline& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto ev = run_error_vs_crossover(p);
  write_curve_csv(ev.curve, dir / "curve_p.csv");
  const auto be = run_bits_vs_error(p);
  write_curve_csv(be.semantic, dir / "curve_bits.csv");
  write_curve_csv(be.classical, dir / "curve_bits_classical.csv");
  write_ratio_csv(be.ratio_vs_task, dir / "ratio_vs_task.csv");
  write_plot_script(dir / "plot.py");
  nlohmann::json j;
  j["quantization_floor"] = ev.quantization_floor;
  auto& pc = j["error_vs_crossover"] = nlohmann::json::array();
  for (const auto& c : ev.curve) pc.push_back({{"p", c.x}, {"error", c.y}, {"stderr", c.stderr_}, {"events", c.events}});
  j["bits_reference"] = bits_to_json(be.reference);
  j["semantic_error"] = be.semantic_error;
  j["semantic_error_stderr"] = be.semantic_error_stderr;
  j["classical_error"] = be.classical_error;
  j["classical_error_stderr"] = be.classical_error_stderr;
  j["bits_ratio"] = static_cast<double>(be.reference.classical_task_bits) / be.reference.semantic_task_bits;
  j["warnings"] = be.warnings;
  std::ofstream os(dir / "curves.json");
  os << j.dump(2) << '\n';
  return j;
}

}  // namespace nesy::harness
