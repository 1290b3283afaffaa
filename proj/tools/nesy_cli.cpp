// Command-line front end: train, curves, verify, kb.

#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "nesy/harness.hpp"
#include "nesy/kb_io.hpp"

namespace fs = std::filesystem;
using namespace nesy;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = "out";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "master seed (overrides the config)");
  app->add_option("--config", c.config, "key = value config file");
  app->add_option("--out", c.out, "output directory")->capture_default_str();
}

harness::ExperimentConfig resolve(const Common& c) {
  harness::ExperimentConfig cfg = c.config.empty() ? harness::ExperimentConfig{} : harness::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

int cmd_train(const Common& c) {
  const auto cfg = resolve(c);
  const auto p = harness::train_pipeline(cfg);
  harness::save_training_outputs(p, c.out);
  const auto& r = p.report;
  std::cout << "true graph:      " << r.true_graph << "\n"
            << "posterior mode:  " << r.posterior_mode << "\n";
  if (!r.flow_loss.empty())
    std::cout << "flow loss:       " << r.flow_loss.front() << " -> " << r.flow_loss.back() << "\n";
  for (const auto& ch : r.channels)
    std::cout << "p = " << ch.p << ": action error " << ch.action_error << ", reliability " << ch.reliability
              << " (" << (ch.reliability_ok ? "meets" : "misses") << " 1 - epsilon)\n";
  std::cout << "wrote " << (fs::path(c.out) / "report.json").string() << "\n";
  return 0;
}

int cmd_curves(const Common& c) {
  const fs::path dir = c.out;
  if (!fs::exists(dir / "config.txt")) {
    std::cout << "no trained run in " << dir.string() << "; training first\n";
    cmd_train(c);
  } else if (!c.config.empty() || c.seed) {
    const auto want = harness::to_config_string(resolve(c));
    const auto have = harness::to_config_string(harness::load_config(dir / "config.txt"));
    if (want != have) throw std::runtime_error("config/seed differ from the trained run in " + dir.string());
  }
  const auto p = harness::load_pipeline(dir);
  const auto j = harness::write_curves(p, dir);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_verify(const Common& c) {
  const auto cfg = resolve(c);
  const auto r = harness::run_verify(cfg.seed);
  nlohmann::json j;
  for (std::size_t i = 0; i < r.checks.size(); ++i) {
    std::cout << (r.checks[i].second ? "PASS " : "FAIL ") << r.checks[i].first << "\n";
    j["checks"].push_back({{"name", r.checks[i].first}, {"pass", r.checks[i].second}});
  }
  for (const auto& d : r.details) std::cout << "  " << d << "\n";
  j["details"] = r.details;
  fs::create_directories(c.out);
  std::ofstream(fs::path(c.out) / "verify.json") << j.dump(2) << "\n";
  return r.all_passed() ? 0 : 1;
}

int cmd_kb(const Common& c, const std::string& input, double perturb) {
  const fs::path path = input.empty() ? fs::path(c.out) / "kb.json" : fs::path(input);
  if (!fs::exists(path)) throw std::runtime_error("no KB file at " + path.string());
  const kb::Theory t = kb::load_theory(path);
  std::cout << "symbols:  " << t.kb().symbols().size() << "\n"
            << "facts:    " << t.kb().facts().size() << "\n"
            << "formulas: " << t.kb().formulas().size() << "\n";
  for (const auto& f : t.kb().facts()) std::cout << "  fact " << f.head << " " << f.relation << " " << f.tail << "\n";
  for (const auto& f : t.kb().formulas())
    std::cout << "  " << f.to_prefix() << "  truth " << kb::aggregated_truth(f, t) << "\n";
  std::cout << "semantic content: " << kb::semantic_content(t) << " bits\n";
  if (perturb > 0.0) {
    const auto cfg = resolve(c);
    Rng rng = make_rng(cfg.seed, 0x6b62);
    const auto listener = comm::perturb_theory(t, {perturb, cfg.kb_perturb_scale}, rng);
    const double s = kb::semantic_content(t), sl = kb::semantic_content(listener);
    std::cout << "listener content: " << sl << " bits, KB information error " << comm::kb_information_error(s, sl)
              << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neuro-symbolic semantic communication experiments"};
  app.require_subcommand(1);
  Common common;
  auto* train = app.add_subcommand("train", "learn structure and codec, write checkpoints and report.json");
  auto* curves = app.add_subcommand("curves", "run the error-vs-crossover and bits-vs-error experiments");
  auto* verify = app.add_subcommand("verify", "run the small-graph oracle suite and gradient checks");
  auto* kbcmd = app.add_subcommand("kb", "inspect a serialized knowledge base");
  for (auto* s : {train, curves, verify, kbcmd}) add_common(s, common);
  std::string kb_input;
  double kb_perturb = 0.0;
  kbcmd->add_option("--input", kb_input, "KB JSON file (default <out>/kb.json)");
  kbcmd->add_option("--perturb", kb_perturb, "fraction of entities to distort for a listener view")
      ->check(CLI::Range(0.0, 1.0));

  CLI11_PARSE(app, argc, argv);
  try {
    if (train->parsed()) return cmd_train(common);
    if (curves->parsed()) return cmd_curves(common);
    if (verify->parsed()) return cmd_verify(common);
    if (kbcmd->parsed()) return cmd_kb(common, kb_input, kb_perturb);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
