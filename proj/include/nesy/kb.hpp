#pragma once

// Symbolic knowledge base with fuzzy real-logic groundings.
//
// A Theory bundles a KnowledgeBase (entities, predicates, relations, facts
// and formulas) with a Grounding that maps every symbol to reals: entities
// to fixed-size vectors, predicates and relations to truth functions with
// values in [0,1]. Formulas are evaluated under product t-norm semantics and
// the semantic content of a theory is the summed -log2 of the aggregated
// truth of its formulas.

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace nesy::kb {

enum class SymbolKind { Entity, Predicate, Relation, Function };

struct Symbol {
  std::string id;
  SymbolKind kind = SymbolKind::Entity;
  // Entities: {domain}. Predicates/relations: input domains. Functions:
  // input domains followed by the output domain.
  std::vector<std::string> domain_signature;

  std::size_t arity() const;
};

struct Fact {
  std::string head;
  std::string relation;
  std::string tail;
  double truth = 1.0;

  friend bool operator==(const Fact&, const Fact&) = default;
};

enum class Connective { Not, And, Or, Implies, Iff };
enum class Aggregator { Mean, Minimum, HarmonicMean };

std::string to_string(Connective c);
std::string to_string(Aggregator a);
Aggregator aggregator_from_string(const std::string& s);

/// Term of an atom: an entity id, a variable (leading '?'), or a function
/// symbol applied to terms.
struct Term {
  std::string name;
  std::vector<Term> args;

  bool is_variable() const { return !name.empty() && name.front() == '?'; }
  bool is_application() const { return !args.empty(); }

  friend bool operator==(const Term&, const Term&) = default;
};

/// Immutable expression tree. Copies share structure.
class Formula {
 public:
  enum class Kind { Atom, Not, And, Or, Implies, Iff, Forall };

  static Formula atom(std::string predicate, std::vector<Term> args);
  static Formula negation(Formula f);
  static Formula binary(Connective c, Formula lhs, Formula rhs);
  static Formula conjunction(Formula lhs, Formula rhs) { return binary(Connective::And, std::move(lhs), std::move(rhs)); }
  static Formula disjunction(Formula lhs, Formula rhs) { return binary(Connective::Or, std::move(lhs), std::move(rhs)); }
  static Formula implication(Formula lhs, Formula rhs) { return binary(Connective::Implies, std::move(lhs), std::move(rhs)); }
  static Formula biconditional(Formula lhs, Formula rhs) { return binary(Connective::Iff, std::move(lhs), std::move(rhs)); }
  static Formula forall(std::string variable, std::vector<std::string> instances, Aggregator agg, Formula body);

  Kind kind() const;
  // Atom accessors.
  const std::string& predicate() const;
  const std::vector<Term>& args() const;
  // Connective accessors: one child for Not, two otherwise; Forall has one.
  const std::vector<Formula>& children() const;
  // Forall accessors.
  const std::string& variable() const;
  const std::vector<std::string>& instances() const;
  Aggregator aggregator() const;

  /// Prefix notation, e.g. "(and (level2 node_3) (not (parent_of ?x node_1)))".
  std::string to_prefix() const;

  friend bool operator==(const Formula& a, const Formula& b);

 private:
  struct Node;
  explicit Formula(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

/// Parses the prefix notation produced by Formula::to_prefix.
Formula parse_formula(const std::string& text);

// Truth functions that a Grounding can attach to predicates and relations.

/// truth = clamp(G(arg)[index]) for a unary predicate.
struct ComponentTruth {
  std::size_t index = 0;
  friend bool operator==(const ComponentTruth&, const ComponentTruth&) = default;
};

/// Explicit truth per argument tuple (entity ids); missing tuples take `fallback`.
struct TableTruth {
  std::map<std::vector<std::string>, double> truths;
  double fallback = 0.0;
  friend bool operator==(const TableTruth&, const TableTruth&) = default;
};

/// truth = sigmoid(w . concat(G(args)) + b); w and b live in the theory's
/// parameter set under the symbol id.
struct LogisticTruth {
  friend bool operator==(const LogisticTruth&, const LogisticTruth&) = default;
};

using TruthFunction = std::variant<ComponentTruth, TableTruth, LogisticTruth>;

/// Affine grounding of a function symbol: out = A . concat(inputs) + b, with
/// A stored row-major.
struct AffineMap {
  std::size_t out_dim = 0;
  std::vector<double> matrix;
  std::vector<double> bias;
  friend bool operator==(const AffineMap&, const AffineMap&) = default;
};

struct Grounding {
  std::map<std::string, std::size_t> domain_dims;
  std::map<std::string, std::vector<double>> entities;
  std::map<std::string, TruthFunction> truths;
  std::map<std::string, AffineMap> functions;

  friend bool operator==(const Grounding&, const Grounding&) = default;
};

/// Learned grounding parameters keyed by symbol id.
using Parameters = std::map<std::string, std::vector<double>>;

class KnowledgeBase {
 public:
  KnowledgeBase() = default;

  void add_symbol(Symbol s);
  void add_fact(Fact f);
  void add_formula(Formula f);

  const Symbol* find(const std::string& id) const;
  const std::vector<Symbol>& symbols() const { return symbols_; }
  std::vector<const Symbol*> symbols_of(SymbolKind kind) const;
  const std::vector<Fact>& facts() const { return facts_; }
  const std::vector<Formula>& formulas() const { return formulas_; }

  /// Throws std::invalid_argument on a dangling reference or arity mismatch.
  void validate() const;

  friend bool operator==(const KnowledgeBase&, const KnowledgeBase&);

 private:
  std::vector<Symbol> symbols_;
  std::map<std::string, std::size_t> index_;
  std::vector<Fact> facts_;
  std::vector<Formula> formulas_;
};

class Theory {
 public:
  /// Validates the KB and checks every symbol has a grounding entry.
  Theory(KnowledgeBase kb, Grounding grounding, Parameters params = {});

  const KnowledgeBase& kb() const { return kb_; }
  const Grounding& grounding() const { return grounding_; }
  const Parameters& params() const { return params_; }

  std::vector<double> ground_term(const Term& t, const std::map<std::string, std::string>& bindings) const;

  friend bool operator==(const Theory&, const Theory&) = default;

 private:
  KnowledgeBase kb_;
  Grounding grounding_;
  Parameters params_;
};

/// Raised when a formula has aggregated truth 0, i.e. infinite content.
class InfiniteContentError : public std::domain_error {
 public:
  explicit InfiniteContentError(const std::string& what) : std::domain_error(what) {}
};

using Bindings = std::map<std::string, std::string>;

/// Fuzzy connective; Not takes one argument, the others two.
double eval_connective(Connective op, std::initializer_list<double> args);
double eval_connective(Connective op, const std::vector<double>& args);

double eval_formula(const Formula& f, const Theory& t, const Bindings& bindings = {});

double aggregate(const std::vector<double>& truths, Aggregator agg);
double aggregate(const Formula& quantified, const Theory& t, const std::vector<std::string>& instances, Aggregator agg);

/// A(phi): aggregated truth for Forall formulas, plain truth otherwise.
double aggregated_truth(const Formula& f, const Theory& t);

struct ContentOptions {
  // When set, aggregated truths below the floor are raised to it instead of
  // throwing InfiniteContentError.
  std::optional<double> clamp_floor;
  // Sum raw A(phi) rather than -log2 A(phi) in the incremental update.
  bool raw_sum_update = false;
};

/// S(T) = sum over formulas of -log2 A(phi), in bits.
double semantic_content(const Theory& t, const ContentOptions& opts = {});

/// Changes to the formula list: additions, and replacements by index.
struct FormulaDelta {
  std::vector<Formula> added;
  std::vector<std::pair<std::size_t, Formula>> changed;
};

/// S_t = S_{t-1} + contribution of the formulas in the delta, evaluated under
/// `next`. Changed formulas contribute the difference between their new and
/// old -log2 A values; `prev` supplies the old values.
double update_semantic_content(double prev_content, const Theory& prev, const FormulaDelta& delta,
                               const Theory& next, const ContentOptions& opts = {});

/// Same, with the delta evaluated under prev's grounding.
double update_semantic_content(double prev_content, const Theory& prev, const FormulaDelta& delta,
                               const ContentOptions& opts = {});

/// Applies a delta to a KB's formula list.
KnowledgeBase apply_delta(const KnowledgeBase& kb, const FormulaDelta& delta);

}  // namespace nesy::kb
