// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Trains the reference run through the CLI twice.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nesy/harness.hpp"

namespace fs = std::filesystem;
using namespace nesy;

namespace {

constexpr std::uint64_t kReferenceSeed = 7;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  if (!o.pass) ++failures;
}

template <typename F>
void run(const std::string& name, F&& f) {
  try {
    report(name, f());
  } catch (const std::exception& e) {
    report(name, {false, std::string("exception: ") + e.what()});
  }
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int shell(const std::string& cmd) {
  std::cout << "  $ " << cmd << std::endl;
  return std::system(cmd.c_str());
}

// Criterion: n = 3 enumeration oracle.
Outcome enumeration() {
  const auto r = harness::oracle_enumeration_n3(0);
  return {r.tv <= 0.05 && r.seconds <= 120.0,
          "TV " + fmt(r.tv) + " (<= 0.05), " + fmt(r.seconds, 3) + " s (<= 120 s)"};
}

// Criterion: 2-node closed form.
Outcome two_node() {
  const auto r = harness::oracle_two_node(0);
  const bool ok = std::abs(r.p_empty - 0.75) <= 0.03 && std::abs(r.p_one_edge - 0.25) <= 0.03 && r.seconds <= 10.0;
  return {ok, "(" + fmt(r.p_empty) + ", " + fmt(r.p_one_edge) + ") vs (0.75, 0.25) +- 0.03, " + fmt(r.seconds, 3) +
                  " s (<= 10 s)"};
}

// Criterion: backprop vs central differences.
Outcome gradients() {
  const double worst = harness::oracle_gradient_check(0, 100);
  return {worst <= 1e-4, "max relative error " + fmt(worst, 3) + " over 100 nets (<= 1e-4)"};
}

double covariance_gap(std::uint64_t seed) {
  harness::Pipeline p;
  p.cfg.seed = seed;
  harness::build_world(p);
  const Eigen::RowVectorXd mean = p.data.x.colwise().mean();
  const Eigen::MatrixXd c = p.data.x.rowwise() - mean;
  const Eigen::MatrixXd emp = c.transpose() * c / double(p.data.rows() - 1);
  return (emp - world::analytic_covariance(p.sem)).cwiseAbs().maxCoeff();
}

// Criterion: SEM covariance on the reference config.
Outcome sem_statistics() {
  const double gap = covariance_gap(kReferenceSeed);
  std::string other;
  for (std::uint64_t s : {0, 1, 2, 3, 4}) other += (other.empty() ? "" : ", ") + fmt(covariance_gap(s), 3);
  return {gap <= 0.1, "seed 7 max |emp - analytic| " + fmt(gap, 3) + " (<= 0.1); seeds 0-4 for reference: " + other};
}

// Criterion: BSC flip rate.
Outcome channel_statistics() {
  const long bits = 100000;
  comm::BitFrame f;
  f.bits_per_dim = 1;
  f.dims = static_cast<int>(bits);
  f.bits.assign(bits, 0);
  bool ok = true;
  std::string detail;
  int idx = 0;
  for (double p : {0.0, 0.05, 0.1, 0.2, 0.5, 1.0}) {
    Rng rng = make_rng(0, 0xb5c, idx++);
    const long flips = comm::flipped_bits(f, comm::transmit(f, comm::Channel(p), rng));
    const double sigma = std::sqrt(bits * p * (1 - p));
    const double dev = std::abs(flips - bits * p);
    ok = ok && dev <= 3.0 * sigma;
    detail += (detail.empty() ? "" : "; ") + std::string("p=") + fmt(p) + " rate " + fmt(double(flips) / bits, 5) +
              " (" + fmt(sigma > 0 ? dev / sigma : dev, 3) + (sigma > 0 ? " sigma)" : " off)");
  }
  return {ok, detail};
}

// Criterion: error vs crossover.
Outcome error_vs_crossover(const harness::Pipeline& p) {
  const auto r = harness::run_error_vs_crossover(p, p.codec, {0.0, 0.05, 0.1, 0.2, 0.5}, 10000);
  bool monotone = true;
  for (std::size_t i = 1; i < 4; ++i) monotone = monotone && r.curve[i].y >= r.curve[i - 1].y;
  const bool floor_ok = std::abs(r.curve[0].y - r.quantization_floor) <= 1e-12;
  const auto& half = r.curve[4];
  const double sigma = half.stderr_;
  const bool half_ok = std::abs(half.y - 0.75) <= 3.0 * sigma;
  std::string curve;
  for (const auto& pt : r.curve) curve += (curve.empty() ? "" : ", ") + fmt(pt.x) + ":" + fmt(pt.y);
  return {monotone && floor_ok && half_ok,
          "error {" + curve + "}; monotone " + (monotone ? "yes" : "no") + "; p=0 " + fmt(r.curve[0].y) +
              " vs floor " + fmt(r.quantization_floor) + "; p=0.5 " + fmt(half.y) + " vs 0.75, |dev| " +
              fmt(std::abs(half.y - 0.75), 3) + " <= 3 sigma = " + fmt(3 * sigma, 3) + " " + (half_ok ? "yes" : "no")};
}

// Criterion: bits vs error on the reference config.
Outcome bits_vs_error(const harness::Pipeline& p) {
  const auto r = harness::run_bits_vs_error(p);
  const double ratio = double(r.reference.classical_task_bits) / double(r.reference.semantic_task_bits);
  const bool err_ok = r.semantic_error <= r.classical_error;
  const bool bits_ok = ratio >= 10.0;
  return {err_ok && bits_ok,
          "semantic error " + fmt(r.semantic_error) + " vs classical " + fmt(r.classical_error) + " at p=" +
              fmt(p.cfg.bits_p) + " (" + (err_ok ? "ok" : "worse") + "); bits " +
              std::to_string(r.reference.semantic_task_bits) + " vs " + std::to_string(r.reference.classical_task_bits) +
              " over " + std::to_string(r.reference.task_events) + " events, ratio " + fmt(ratio, 3) + " (>= 10)"};
}

// Criterion: semantic-content identities.
Outcome content_identities() {
  Rng rng = make_rng(0, 0x5e7);
  int zero_fail = 0, bit_fail = 0, mean_fail = 0;
  for (int t = 0; t < 1000; ++t) {
    // All-true KB: a random state's theory asserts every node's own level.
    const int n = 1 + static_cast<int>(rng() % 6);
    std::vector<int> levels(n);
    for (int& l : levels) l = static_cast<int>(rng() % 4);
    world::Dag dag(n);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng() % 3 == 0) dag.add_edge(i, j);
    const kb::Theory theory = harness::build_theory({world::topological_order(dag), dag, levels}, 4);
    if (kb::semantic_content(theory) != 0.0) ++zero_fail;

    // Add a formula of truth 0.5: a level predicate applied to an entity
    // whose grounding carries half weight on that level.
    kb::KnowledgeBase base = theory.kb();
    kb::Grounding gr = theory.grounding();
    base.add_symbol({"half", kb::SymbolKind::Entity, {"node"}});
    gr.entities["half"] = std::vector<double>(4, 0.0);
    gr.entities["half"][levels[0]] = 0.5;
    const kb::Theory prev(base, gr);
    const kb::Formula f = kb::Formula::atom("level" + std::to_string(levels[0]), {{"half", {}}});
    const double s0 = kb::semantic_content(prev);
    const double s1 = kb::update_semantic_content(s0, prev, {{f}, {}});
    const kb::Theory next(kb::apply_delta(prev.kb(), {{f}, {}}), gr);
    if (std::abs(s1 - s0 - 1.0) > 1e-12 || std::abs(kb::semantic_content(next) - s0 - 1.0) > 1e-12) ++bit_fail;

    std::vector<double> v(1 + rng() % 10);
    for (double& x : v) x = uniform01(rng);
    const double mn = kb::aggregate(v, kb::Aggregator::Minimum), hm = kb::aggregate(v, kb::Aggregator::HarmonicMean),
                 am = kb::aggregate(v, kb::Aggregator::Mean);
    if (!(mn <= hm + 1e-12 && hm <= am + 1e-12)) ++mean_fail;
  }
  return {zero_fail + bit_fail + mean_fail == 0, "1000 trials: S=0 violations " + std::to_string(zero_fail) +
                                                     ", +1 bit violations " + std::to_string(bit_fail) +
                                                     ", min <= harmonic <= mean violations " +
                                                     std::to_string(mean_fail)};
}

// Criterion: causal influence.
Outcome causal_influence(const harness::Pipeline& p) {
  const double hand = comm::kl_divergence({0.9, 0.1}, {0.5, 0.5});
  const bool hand_ok = std::abs(hand - 0.3681) <= 1e-4;

  Rng rng = make_rng(0, 0xc1);
  int negative = 0;
  for (int t = 0; t < 10000; ++t) {
    const int k = 2 + static_cast<int>(rng() % 6);
    std::vector<double> a(k), b(k);
    double sa = 0, sb = 0;
    for (int i = 0; i < k; ++i) {
      sa += a[i] = uniform01(rng) * (rng() % 4 == 0 ? 0.0 : 1.0);
      sb += b[i] = uniform01(rng) + 1e-12;
    }
    if (sa == 0) a[0] = sa = 1.0;
    for (int i = 0; i < k; ++i) a[i] /= sa, b[i] /= sb;
    if (comm::kl_divergence(a, b) < 0.0) ++negative;
  }

  // Trained codec with the listener sharing the speaker's KB.
  const auto ev = harness::run_error_vs_crossover(p, p.codec, {0.0, 0.05, 0.1, 0.2, 0.5}, 500);
  bool pipeline_nonneg = true;
  for (const auto& ch : ev.channels) pipeline_nonneg = pipeline_nonneg && ch.causal_influence >= 0.0;
  const double at_zero = ev.channels[0].causal_influence;
  const bool zero_ok = std::abs(at_zero) <= 1e-9;
  std::string per_p;
  int smoothed = 0;
  for (const auto& ch : ev.channels) {
    per_p += (per_p.empty() ? "" : ", ") + fmt(ch.p) + ":" + fmt(ch.causal_influence, 3);
    smoothed += ch.influence_floored;
  }
  return {hand_ok && negative == 0 && pipeline_nonneg && zero_ok,
          "hand KL " + fmt(hand, 6) + " (0.3681 +- 1e-4); negative values " + std::to_string(negative) +
              " of 10000 random pairs; pipeline influence {" + per_p + "} nats; p=0 value " + fmt(at_zero, 3)};
}

// Criterion: determinism of two CLI training runs.
Outcome determinism(const fs::path& a, const fs::path& b) {
  std::vector<std::string> differing;
  nlohmann::json ja = nlohmann::json::parse(slurp(a / "report.json"));
  nlohmann::json jb = nlohmann::json::parse(slurp(b / "report.json"));
  ja.erase("wall_clock_seconds");
  jb.erase("wall_clock_seconds");
  if (ja != jb) differing.push_back("report.json");
  int compared = 1;
  for (const auto& e : fs::directory_iterator(a)) {
    const std::string name = e.path().filename().string();
    if (name == "report.json") continue;
    ++compared;
    if (!fs::exists(b / name) || slurp(e.path()) != slurp(b / name)) differing.push_back(name);
  }
  for (const char* ckpt : {"flownet.bin", "codec.bin"})
    if (!fs::exists(a / ckpt)) differing.push_back(std::string(ckpt) + " missing");
  std::string d;
  for (const auto& s : differing) d += " " + s;
  return {differing.empty(), std::to_string(compared) + " files compared (report.json without wall clock)" +
                                 (differing.empty() ? "; all identical" : "; differing:" + d)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string cli;
  std::string workdir = "acceptance_runs";
  app.add_option("--cli", cli, "path to the nesy executable")->required();
  app.add_option("--workdir", workdir, "scratch directory for CLI runs")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const auto t0 = std::chrono::steady_clock::now();
  const fs::path run_a = fs::path(workdir) / "seed7_a", run_b = fs::path(workdir) / "seed7_b";
  fs::remove_all(workdir);
  fs::create_directories(workdir);

  run("gflownet n=3 enumeration oracle", enumeration);
  run("two-node closed form", two_node);
  run("gradient fidelity", gradients);
  run("sem covariance", sem_statistics);
  run("bsc flip rate", channel_statistics);

  const bool trained = shell(cli + " train --seed 7 --out " + run_a.string()) == 0 &&
                       shell(cli + " train --seed 7 --out " + run_b.string()) == 0;
  harness::Pipeline pipeline;
  bool loaded = false;
  if (trained) {
    try {
      pipeline = harness::load_pipeline(run_a);
      loaded = true;
    } catch (const std::exception& e) {
      std::cout << "  could not load the trained run: " << e.what() << std::endl;
    }
  }
  auto needs_pipeline = [&](auto f) {
    return [&, f]() -> Outcome {
      if (!loaded) return {false, "training run unavailable"};
      return f(pipeline);
    };
  };

  run("error vs crossover", needs_pipeline(error_vs_crossover));
  run("bits vs error", needs_pipeline(bits_vs_error));
  run("semantic content identities", content_identities);
  run("causal influence", needs_pipeline(causal_influence));
  run("determinism", [&]() -> Outcome {
    if (!trained) return {false, "a training run failed"};
    return determinism(run_a, run_b);
  });

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + (failures == 1 ? " criterion" : " criteria") + " failed") << " ("
            << fmt(secs, 3) << " s)" << std::endl;
  return failures == 0 ? 0 : 1;
}
