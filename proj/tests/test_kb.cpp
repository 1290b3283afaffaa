#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "nesy/kb.hpp"
#include "nesy/kb_io.hpp"

using namespace nesy::kb;

namespace {

// One entity "a" and one unary predicate q<i> per requested truth, grounded
// by table lookup; formula i is (q<i> a).
Theory theory_with_truths(const std::vector<double>& truths) {
  KnowledgeBase kb;
  Grounding g;
  g.domain_dims["thing"] = 1;
  kb.add_symbol({"a", SymbolKind::Entity, {"thing"}});
  g.entities["a"] = {0.0};
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const std::string id = "q" + std::to_string(i);
    kb.add_symbol({id, SymbolKind::Predicate, {"thing"}});
    g.truths[id] = TableTruth{{{{"a"}, truths[i]}}, 0.0};
    kb.add_formula(Formula::atom(id, {{"a", {}}}));
  }
  return Theory(kb, g);
}

Formula q(int i) { return Formula::atom("q" + std::to_string(i), {{"a", {}}}); }

}  // namespace

TEST_SUITE("kb") {
  TEST_CASE("connectives follow the product t-norm") {
    CHECK(eval_connective(Connective::Not, {0.0}) == doctest::Approx(1.0));
    CHECK(eval_connective(Connective::And, {0.5, 0.5}) == doctest::Approx(0.25));
    CHECK(eval_connective(Connective::Or, {0.3, 0.4}) == doctest::Approx(0.58));
    CHECK(eval_connective(Connective::Implies, {0.5, 0.4}) == doctest::Approx(0.7));
    CHECK(eval_connective(Connective::Iff, {0.5, 0.4}) == doctest::Approx(0.7 * 0.8));
  }

  TEST_CASE("connective arguments outside [0,1] are rejected") {
    CHECK_THROWS_AS(eval_connective(Connective::Not, {1.5}), std::domain_error);
    CHECK_THROWS_AS(eval_connective(Connective::And, {0.5, -0.1}), std::domain_error);
    CHECK_THROWS(eval_connective(Connective::And, {0.5}));
  }

  TEST_CASE("formula evaluation") {
    const Theory t = theory_with_truths({1.0, 0.7, 0.6, 0.5});
    CHECK(eval_formula(q(0), t) == doctest::Approx(1.0));
    CHECK(eval_formula(Formula::conjunction(q(0), q(1)), t) == doctest::Approx(0.7));
    CHECK(eval_formula(Formula::negation(Formula::conjunction(q(2), q(3))), t) == doctest::Approx(0.7));
  }

  TEST_CASE("aggregators") {
    CHECK(aggregate({1.0, 1.0, 1.0}, Aggregator::Mean) == doctest::Approx(1.0));
    CHECK(aggregate({0.2, 0.9}, Aggregator::Minimum) == doctest::Approx(0.2));
    CHECK(aggregate({0.5, 1.0}, Aggregator::HarmonicMean) == doctest::Approx(2.0 / 3.0));
    CHECK(aggregate({0.5, 0.0}, Aggregator::HarmonicMean) == doctest::Approx(0.0));
  }

  TEST_CASE("quantified formula aggregates over its instances") {
    KnowledgeBase kb;
    Grounding g;
    g.domain_dims["thing"] = 1;
    TableTruth tall;
    const std::vector<std::pair<std::string, double>> ents{{"x", 0.5}, {"y", 1.0}};
    for (const auto& [id, v] : ents) {
      kb.add_symbol({id, SymbolKind::Entity, {"thing"}});
      g.entities[id] = {0.0};
      tall.truths[{id}] = v;
    }
    kb.add_symbol({"tall", SymbolKind::Predicate, {"thing"}});
    g.truths["tall"] = tall;
    const Formula body = Formula::atom("tall", {{"?v", {}}});
    const Formula all = Formula::forall("?v", {"x", "y"}, Aggregator::HarmonicMean, body);
    kb.add_formula(all);
    const Theory t(kb, g);
    CHECK(aggregated_truth(all, t) == doctest::Approx(2.0 / 3.0));
    CHECK(aggregate(all, t, {"x", "y"}, Aggregator::Mean) == doctest::Approx(0.75));
    CHECK(aggregate(all, t, {"x", "y"}, Aggregator::Minimum) == doctest::Approx(0.5));
    CHECK(aggregate(all, t, {"y"}, Aggregator::Minimum) == doctest::Approx(1.0));
    CHECK(semantic_content(t) == doctest::Approx(-std::log2(2.0 / 3.0)));
  }

  TEST_CASE("semantic content") {
    CHECK(semantic_content(theory_with_truths({1.0, 1.0, 1.0})) == doctest::Approx(0.0));
    CHECK(semantic_content(theory_with_truths({0.5, 0.25})) == doctest::Approx(3.0));
    const double hand = -(std::log2(0.9) + std::log2(0.8) + std::log2(0.7));
    CHECK(semantic_content(theory_with_truths({0.9, 0.8, 0.7})) == doctest::Approx(hand));
    CHECK(hand == doctest::Approx(0.98850).epsilon(1e-5));
  }

  TEST_CASE("zero truth is infinite content unless a floor is requested") {
    const Theory t = theory_with_truths({0.5, 0.0});
    CHECK_THROWS_AS(semantic_content(t), InfiniteContentError);
    ContentOptions opts;
    opts.clamp_floor = 0.25;
    CHECK(semantic_content(t, opts) == doctest::Approx(3.0));
  }

  TEST_CASE("incremental content update") {
    const Theory t = theory_with_truths({0.5, 1.0, 0.5, 0.25});
    // Only q0 is a formula of the starting KB.
    KnowledgeBase base;
    for (const auto& s : t.kb().symbols()) base.add_symbol(s);
    base.add_formula(q(0));
    const Theory prev(base, t.grounding());
    const double s0 = semantic_content(prev);
    REQUIRE(s0 == doctest::Approx(1.0));

    CHECK(update_semantic_content(s0, prev, FormulaDelta{}) == doctest::Approx(s0));
    CHECK(update_semantic_content(s0, prev, FormulaDelta{{q(1)}, {}}) == doctest::Approx(s0));
    CHECK(update_semantic_content(s0, prev, FormulaDelta{{q(2)}, {}}) == doctest::Approx(s0 + 1.0));

    // Replacing q0 (1 bit) by q3 (2 bits) adds one bit.
    const FormulaDelta change{{}, {{0, q(3)}}};
    const double s1 = update_semantic_content(s0, prev, change);
    CHECK(s1 == doctest::Approx(2.0));
    const Theory next(apply_delta(prev.kb(), change), prev.grounding());
    CHECK(semantic_content(next) == doctest::Approx(s1));
  }

  TEST_CASE("incremental update agrees with recomputation on random deltas") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> truths(8);
      for (double& v : truths) v = u(rng);
      const Theory all = theory_with_truths(truths);
      KnowledgeBase base;
      for (const auto& s : all.kb().symbols()) base.add_symbol(s);
      for (int i = 0; i < 4; ++i) base.add_formula(q(i));
      const Theory prev(base, all.grounding());
      FormulaDelta d;
      d.added = {q(4), q(5)};
      d.changed = {{static_cast<std::size_t>(trial % 4), q(6 + trial % 2)}};
      const double inc = update_semantic_content(semantic_content(prev), prev, d);
      const Theory next(apply_delta(prev.kb(), d), prev.grounding());
      CHECK(inc == doctest::Approx(semantic_content(next)).epsilon(1e-12));
    }
  }

  TEST_CASE("means inequality on random truth sets") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> v(1 + trial % 9);
      for (double& x : v) x = u(rng);
      const double mn = aggregate(v, Aggregator::Minimum);
      const double hm = aggregate(v, Aggregator::HarmonicMean);
      const double am = aggregate(v, Aggregator::Mean);
      CHECK(mn <= hm + 1e-12);
      CHECK(hm <= am + 1e-12);
    }
  }

  TEST_CASE("validation catches dangling symbols and arity mismatches") {
    KnowledgeBase kb;
    kb.add_symbol({"a", SymbolKind::Entity, {"thing"}});
    kb.add_symbol({"r", SymbolKind::Relation, {"thing", "thing"}});
    KnowledgeBase dangling = kb;
    dangling.add_fact({"a", "r", "ghost", 1.0});
    CHECK_THROWS_AS(dangling.validate(), std::invalid_argument);
    KnowledgeBase arity = kb;
    arity.add_formula(Formula::atom("r", {{"a", {}}}));
    CHECK_THROWS_AS(arity.validate(), std::invalid_argument);
    CHECK_THROWS(kb.add_symbol({"a", SymbolKind::Entity, {"thing"}}));
  }

  TEST_CASE("theory requires groundings with matching dimensions") {
    KnowledgeBase kb;
    kb.add_symbol({"a", SymbolKind::Entity, {"thing"}});
    Grounding g;
    g.domain_dims["thing"] = 2;
    CHECK_THROWS_AS(Theory(kb, g), std::invalid_argument);
    g.entities["a"] = {1.0};
    CHECK_THROWS_AS(Theory(kb, g), std::invalid_argument);
    g.entities["a"] = {1.0, 0.0};
    CHECK_NOTHROW(Theory(kb, g));
  }

  TEST_CASE("prefix notation round trips") {
    const Formula f = Formula::implication(
        Formula::conjunction(Formula::atom("level2", {{"node_3", {}}}),
                             Formula::negation(Formula::atom("parent_of", {{"?x", {}}, {"node_1", {}}}))),
        Formula::forall("?y", {"node_0", "node_1"}, Aggregator::Minimum, Formula::atom("level0", {{"?y", {}}})));
    const std::string text = f.to_prefix();
    CHECK(parse_formula(text) == f);
    CHECK(parse_formula(text).to_prefix() == text);
    CHECK_THROWS(parse_formula("(and (p a)"));
  }

  TEST_CASE("json round trip preserves the theory and its content") {
    const Theory t = theory_with_truths({0.9, 0.5, 0.3});
    const Theory back = theory_from_json(theory_to_json(t));
    CHECK(back == t);
    CHECK(semantic_content(back) == doctest::Approx(semantic_content(t)));

    const auto path = std::filesystem::temp_directory_path() / "nesy_kb_roundtrip.json";
    save_theory(t, path);
    CHECK(load_theory(path) == t);
    std::filesystem::remove(path);
  }
}
