#include "nesy/kb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace nesy::kb {

std::size_t Symbol::arity() const {
  switch (kind) {
    case SymbolKind::Entity:
      return 0;
    case SymbolKind::Function:
      return domain_signature.empty() ? 0 : domain_signature.size() - 1;
    default:
      return domain_signature.size();
  }
}

std::string to_string(Connective c) {
  switch (c) {
    case Connective::Not: return "not";
    case Connective::And: return "and";
    case Connective::Or: return "or";
    case Connective::Implies: return "implies";
    case Connective::Iff: return "iff";
  }
  return "?";
}

std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::Mean: return "mean";
    case Aggregator::Minimum: return "min";
    case Aggregator::HarmonicMean: return "hmean";
  }
  return "?";
}

Aggregator aggregator_from_string(const std::string& s) {
  if (s == "mean") return Aggregator::Mean;
  if (s == "min") return Aggregator::Minimum;
  if (s == "hmean") return Aggregator::HarmonicMean;
  throw std::invalid_argument("unknown aggregator '" + s + "'");
}

// ---------------------------------------------------------------------------
// Formula

struct Formula::Node {
  Kind kind = Kind::Atom;
  std::string predicate;  // Atom
  std::vector<Term> args;  // Atom
  std::vector<Formula> children;
  std::string variable;  // Forall
  std::vector<std::string> instances;
  Aggregator agg = Aggregator::Mean;
};

Formula Formula::atom(std::string predicate, std::vector<Term> args) {
  if (predicate.empty()) throw std::invalid_argument("atom needs a predicate");
  auto n = std::make_shared<Node>();
  n->kind = Kind::Atom;
  n->predicate = std::move(predicate);
  n->args = std::move(args);
  return Formula(std::move(n));
}

Formula Formula::negation(Formula f) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Not;
  n->children.push_back(std::move(f));
  return Formula(std::move(n));
}

Formula Formula::binary(Connective c, Formula lhs, Formula rhs) {
  auto n = std::make_shared<Node>();
  switch (c) {
    case Connective::And: n->kind = Kind::And; break;
    case Connective::Or: n->kind = Kind::Or; break;
    case Connective::Implies: n->kind = Kind::Implies; break;
    case Connective::Iff: n->kind = Kind::Iff; break;
    case Connective::Not: throw std::invalid_argument("negation is unary");
  }
  n->children.push_back(std::move(lhs));
  n->children.push_back(std::move(rhs));
  return Formula(std::move(n));
}

Formula Formula::forall(std::string variable, std::vector<std::string> instances, Aggregator agg, Formula body) {
  if (variable.size() < 2 || variable.front() != '?')
    throw std::invalid_argument("quantified variable must look like ?name, got '" + variable + "'");
  auto n = std::make_shared<Node>();
  n->kind = Kind::Forall;
  n->variable = std::move(variable);
  n->instances = std::move(instances);
  n->agg = agg;
  n->children.push_back(std::move(body));
  return Formula(std::move(n));
}

Formula::Kind Formula::kind() const { return node_->kind; }
const std::string& Formula::predicate() const { return node_->predicate; }
const std::vector<Term>& Formula::args() const { return node_->args; }
const std::vector<Formula>& Formula::children() const { return node_->children; }
const std::string& Formula::variable() const { return node_->variable; }
const std::vector<std::string>& Formula::instances() const { return node_->instances; }
Aggregator Formula::aggregator() const { return node_->agg; }

namespace {

void write_term(std::ostream& os, const Term& t) {
  if (!t.is_application()) {
    os << t.name;
    return;
  }
  os << '(' << t.name;
  for (const auto& a : t.args) {
    os << ' ';
    write_term(os, a);
  }
  os << ')';
}

void write_formula(std::ostream& os, const Formula& f) {
  using K = Formula::Kind;
  switch (f.kind()) {
    case K::Atom:
      os << '(' << f.predicate();
      for (const auto& a : f.args()) {
        os << ' ';
        write_term(os, a);
      }
      os << ')';
      return;
    case K::Forall:
      os << "(forall " << f.variable() << ' ' << to_string(f.aggregator()) << " [";
      for (std::size_t i = 0; i < f.instances().size(); ++i) os << (i ? " " : "") << f.instances()[i];
      os << "] ";
      write_formula(os, f.children()[0]);
      os << ')';
      return;
    default:
      break;
  }
  static const char* names[] = {"", "not", "and", "or", "implies", "iff"};
  os << '(' << names[static_cast<int>(f.kind())];
  for (const auto& c : f.children()) {
    os << ' ';
    write_formula(os, c);
  }
  os << ')';
}

bool terms_equal(const std::vector<Term>& a, const std::vector<Term>& b) { return a == b; }

}  // namespace

std::string Formula::to_prefix() const {
  std::ostringstream os;
  write_formula(os, *this);
  return os.str();
}

bool operator==(const Formula& a, const Formula& b) {
  if (a.node_ == b.node_) return true;
  const auto& x = *a.node_;
  const auto& y = *b.node_;
  return x.kind == y.kind && x.predicate == y.predicate && terms_equal(x.args, y.args) &&
         x.children == y.children && x.variable == y.variable && x.instances == y.instances && x.agg == y.agg;
}

// ---------------------------------------------------------------------------
// Prefix parser

namespace {

class Parser {
 public:
  explicit Parser(const std::string& text) {
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) tokens_.push_back(std::move(cur));
      cur.clear();
    };
    for (char c : text) {
      if (c == '(' || c == ')' || c == '[' || c == ']') {
        flush();
        tokens_.emplace_back(1, c);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        flush();
      } else {
        cur.push_back(c);
      }
    }
    flush();
  }

  Formula parse() {
    Formula f = formula();
    if (pos_ != tokens_.size()) fail("trailing tokens");
    return f;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw std::invalid_argument("formula parse error at token " + std::to_string(pos_) + ": " + msg);
  }
  const std::string& peek() const {
    if (pos_ >= tokens_.size()) fail("unexpected end of input");
    return tokens_[pos_];
  }
  std::string next() {
    std::string t = peek();
    ++pos_;
    return t;
  }
  void expect(const char* tok) {
    if (next() != tok) fail(std::string("expected '") + tok + "'");
  }

  static bool is_delim(const std::string& t) { return t == "(" || t == ")" || t == "[" || t == "]"; }

  Formula formula() {
    expect("(");
    std::string head = next();
    if (is_delim(head)) fail("expected operator or predicate");
    if (head == "not") {
      Formula c = formula();
      expect(")");
      return Formula::negation(std::move(c));
    }
    static const std::map<std::string, Connective> binops = {
        {"and", Connective::And}, {"or", Connective::Or}, {"implies", Connective::Implies}, {"iff", Connective::Iff}};
    if (auto it = binops.find(head); it != binops.end()) {
      Formula a = formula();
      Formula b = formula();
      expect(")");
      return Formula::binary(it->second, std::move(a), std::move(b));
    }
    if (head == "forall") {
      std::string var = next();
      Aggregator agg = aggregator_from_string(next());
      expect("[");
      std::vector<std::string> inst;
      while (peek() != "]") {
        if (is_delim(peek())) fail("bad instance list");
        inst.push_back(next());
      }
      expect("]");
      Formula body = formula();
      expect(")");
      return Formula::forall(std::move(var), std::move(inst), agg, std::move(body));
    }
    std::vector<Term> args;
    while (peek() != ")") args.push_back(term());
    expect(")");
    return Formula::atom(std::move(head), std::move(args));
  }

  Term term() {
    if (peek() == "(") {
      next();
      Term t;
      t.name = next();
      if (is_delim(t.name)) fail("expected function symbol");
      while (peek() != ")") t.args.push_back(term());
      expect(")");
      if (t.args.empty()) fail("function application without arguments");
      return t;
    }
    if (is_delim(peek())) fail("expected term");
    return Term{next(), {}};
  }

  std::vector<std::string> tokens_;
  std::size_t pos_ = 0;
};

}  // namespace

Formula parse_formula(const std::string& text) { return Parser(text).parse(); }

// ---------------------------------------------------------------------------
// KnowledgeBase

void KnowledgeBase::add_symbol(Symbol s) {
  if (s.id.empty()) throw std::invalid_argument("symbol id must be nonempty");
  if (s.id.front() == '?') throw std::invalid_argument("symbol id may not start with '?': " + s.id);
  if (index_.count(s.id)) throw std::invalid_argument("duplicate symbol id '" + s.id + "'");
  if ((s.kind == SymbolKind::Predicate || s.kind == SymbolKind::Relation) && s.domain_signature.empty())
    throw std::invalid_argument("predicate/relation '" + s.id + "' needs arity >= 1");
  if (s.kind == SymbolKind::Entity && s.domain_signature.size() != 1)
    throw std::invalid_argument("entity '" + s.id + "' needs exactly one domain");
  if (s.kind == SymbolKind::Function && s.domain_signature.size() < 2)
    throw std::invalid_argument("function '" + s.id + "' needs input and output domains");
  index_[s.id] = symbols_.size();
  symbols_.push_back(std::move(s));
}

void KnowledgeBase::add_fact(Fact f) { facts_.push_back(std::move(f)); }
void KnowledgeBase::add_formula(Formula f) { formulas_.push_back(std::move(f)); }

const Symbol* KnowledgeBase::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &symbols_[it->second];
}

std::vector<const Symbol*> KnowledgeBase::symbols_of(SymbolKind kind) const {
  std::vector<const Symbol*> out;
  for (const auto& s : symbols_)
    if (s.kind == kind) out.push_back(&s);
  return out;
}

namespace {

const Symbol& require(const KnowledgeBase& kb, const std::string& id, const std::string& ctx) {
  const Symbol* s = kb.find(id);
  if (!s) throw std::invalid_argument(ctx + ": unknown symbol '" + id + "'");
  return *s;
}

void check_term(const KnowledgeBase& kb, const Term& t, const std::set<std::string>& bound) {
  if (t.is_variable()) {
    if (!bound.count(t.name)) throw std::invalid_argument("free variable " + t.name + " in KB formula");
    return;
  }
  const Symbol& s = require(kb, t.name, "term");
  if (t.is_application()) {
    if (s.kind != SymbolKind::Function) throw std::invalid_argument("'" + t.name + "' applied but is not a function");
    if (s.arity() != t.args.size()) throw std::invalid_argument("arity mismatch applying '" + t.name + "'");
    for (const auto& a : t.args) check_term(kb, a, bound);
  } else if (s.kind != SymbolKind::Entity) {
    throw std::invalid_argument("'" + t.name + "' used as a term but is not an entity");
  }
}

void check_formula(const KnowledgeBase& kb, const Formula& f, std::set<std::string>& bound) {
  using K = Formula::Kind;
  if (f.kind() == K::Atom) {
    const Symbol& p = require(kb, f.predicate(), "atom");
    if (p.kind != SymbolKind::Predicate && p.kind != SymbolKind::Relation)
      throw std::invalid_argument("'" + f.predicate() + "' is not a predicate or relation");
    if (p.arity() != f.args().size())
      throw std::invalid_argument("arity mismatch for '" + f.predicate() + "': expected " +
                                  std::to_string(p.arity()) + ", got " + std::to_string(f.args().size()));
    for (const auto& a : f.args()) check_term(kb, a, bound);
    return;
  }
  if (f.kind() == K::Forall) {
    if (bound.count(f.variable())) throw std::invalid_argument("variable " + f.variable() + " bound twice");
    if (f.instances().empty()) throw std::invalid_argument("quantifier over " + f.variable() + " has no instances");
    for (const auto& e : f.instances()) {
      if (require(kb, e, "quantifier instance").kind != SymbolKind::Entity)
        throw std::invalid_argument("quantifier instance '" + e + "' is not an entity");
    }
    bound.insert(f.variable());
    check_formula(kb, f.children()[0], bound);
    bound.erase(f.variable());
    return;
  }
  for (const auto& c : f.children()) check_formula(kb, c, bound);
}

}  // namespace

void KnowledgeBase::validate() const {
  for (const auto& f : facts_) {
    if (require(*this, f.head, "fact head").kind != SymbolKind::Entity)
      throw std::invalid_argument("fact head '" + f.head + "' is not an entity");
    const Symbol& r = require(*this, f.relation, "fact relation");
    if (r.kind != SymbolKind::Relation || r.arity() != 2)
      throw std::invalid_argument("fact relation '" + f.relation + "' is not a binary relation");
    if (require(*this, f.tail, "fact tail").kind != SymbolKind::Entity)
      throw std::invalid_argument("fact tail '" + f.tail + "' is not an entity");
    if (!(f.truth >= 0.0 && f.truth <= 1.0)) throw std::invalid_argument("fact truth outside [0,1]");
  }
  for (const auto& f : formulas_) {
    std::set<std::string> bound;
    check_formula(*this, f, bound);
  }
}

bool operator==(const KnowledgeBase& a, const KnowledgeBase& b) {
  // Symbol order is not significant; ids are unique.
  if (a.symbols_.size() != b.symbols_.size()) return false;
  for (const auto& x : a.symbols_) {
    const Symbol* y = b.find(x.id);
    if (!y || x.kind != y->kind || x.domain_signature != y->domain_signature) return false;
  }
  return a.facts_ == b.facts_ && a.formulas_ == b.formulas_;
}

// ---------------------------------------------------------------------------
// Theory

Theory::Theory(KnowledgeBase kb, Grounding grounding, Parameters params)
    : kb_(std::move(kb)), grounding_(std::move(grounding)), params_(std::move(params)) {
  kb_.validate();
  for (const auto& s : kb_.symbols()) {
    switch (s.kind) {
      case SymbolKind::Entity: {
        auto it = grounding_.entities.find(s.id);
        if (it == grounding_.entities.end()) throw std::invalid_argument("entity '" + s.id + "' has no grounding");
        auto dim = grounding_.domain_dims.find(s.domain_signature[0]);
        if (dim == grounding_.domain_dims.end())
          throw std::invalid_argument("domain '" + s.domain_signature[0] + "' has no dimension");
        if (it->second.size() != dim->second)
          throw std::invalid_argument("entity '" + s.id + "' grounding has dimension " +
                                      std::to_string(it->second.size()) + ", domain expects " +
                                      std::to_string(dim->second));
        break;
      }
      case SymbolKind::Predicate:
      case SymbolKind::Relation: {
        auto it = grounding_.truths.find(s.id);
        if (it == grounding_.truths.end()) throw std::invalid_argument("'" + s.id + "' has no truth function");
        if (std::holds_alternative<ComponentTruth>(it->second) && s.arity() != 1)
          throw std::invalid_argument("component truth requires a unary predicate: " + s.id);
        if (std::holds_alternative<LogisticTruth>(it->second) && !params_.count(s.id))
          throw std::invalid_argument("logistic truth for '" + s.id + "' has no parameters");
        if (auto* table = std::get_if<TableTruth>(&it->second)) {
          for (const auto& [k, v] : table->truths)
            if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("table truth outside [0,1] for " + s.id);
        }
        break;
      }
      case SymbolKind::Function:
        if (!grounding_.functions.count(s.id)) throw std::invalid_argument("function '" + s.id + "' has no grounding");
        break;
    }
  }
}

std::vector<double> Theory::ground_term(const Term& t, const Bindings& bindings) const {
  if (t.is_variable()) {
    auto it = bindings.find(t.name);
    if (it == bindings.end()) throw std::invalid_argument("unbound variable " + t.name);
    return ground_term(Term{it->second, {}}, bindings);
  }
  if (!t.is_application()) {
    auto it = grounding_.entities.find(t.name);
    if (it == grounding_.entities.end()) throw std::invalid_argument("ungrounded entity '" + t.name + "'");
    return it->second;
  }
  auto fit = grounding_.functions.find(t.name);
  if (fit == grounding_.functions.end()) throw std::invalid_argument("ungrounded function '" + t.name + "'");
  std::vector<double> in;
  for (const auto& a : t.args) {
    auto v = ground_term(a, bindings);
    in.insert(in.end(), v.begin(), v.end());
  }
  const AffineMap& f = fit->second;
  if (f.matrix.size() != f.out_dim * in.size() || f.bias.size() != f.out_dim)
    throw std::invalid_argument("function '" + t.name + "' grounding has the wrong shape");
  std::vector<double> out(f.bias);
  for (std::size_t r = 0; r < f.out_dim; ++r)
    for (std::size_t c = 0; c < in.size(); ++c) out[r] += f.matrix[r * in.size() + c] * in[c];
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

void check_unit(double a) {
  if (!(a >= 0.0 && a <= 1.0)) throw std::domain_error("truth value outside [0,1]: " + std::to_string(a));
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double product_and(double a, double b) { return a * b; }
double prob_or(double a, double b) { return a + b - a * b; }
double reichenbach(double a, double b) { return 1.0 - a + a * b; }

std::string resolve_id(const Term& t, const Bindings& b) {
  if (t.is_application()) throw std::invalid_argument("table truth needs entity arguments, got application of " + t.name);
  if (!t.is_variable()) return t.name;
  auto it = b.find(t.name);
  if (it == b.end()) throw std::invalid_argument("unbound variable " + t.name);
  return it->second;
}

double eval_atom(const Formula& f, const Theory& t, const Bindings& b) {
  auto it = t.grounding().truths.find(f.predicate());
  if (it == t.grounding().truths.end()) throw std::invalid_argument("ungrounded predicate '" + f.predicate() + "'");
  return std::visit(
      [&](const auto& fn) -> double {
        using T = std::decay_t<decltype(fn)>;
        if constexpr (std::is_same_v<T, ComponentTruth>) {
          auto v = t.ground_term(f.args().at(0), b);
          if (fn.index >= v.size()) throw std::invalid_argument("component index out of range for " + f.predicate());
          return clamp01(v[fn.index]);
        } else if constexpr (std::is_same_v<T, TableTruth>) {
          std::vector<std::string> key;
          for (const auto& a : f.args()) key.push_back(resolve_id(a, b));
          auto hit = fn.truths.find(key);
          return hit == fn.truths.end() ? fn.fallback : hit->second;
        } else {
          std::vector<double> x;
          for (const auto& a : f.args()) {
            auto v = t.ground_term(a, b);
            x.insert(x.end(), v.begin(), v.end());
          }
          const auto& w = t.params().at(f.predicate());
          if (w.size() != x.size() + 1)
            throw std::invalid_argument("logistic parameters for '" + f.predicate() + "' have the wrong size");
          double s = w.back();
          for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
          return 1.0 / (1.0 + std::exp(-s));
        }
      },
      it->second);
}

}  // namespace

double eval_connective(Connective op, const std::vector<double>& args) {
  for (double a : args) check_unit(a);
  const std::size_t want = op == Connective::Not ? 1 : 2;
  if (args.size() != want)
    throw std::invalid_argument(to_string(op) + " takes " + std::to_string(want) + " argument(s)");
  switch (op) {
    case Connective::Not: return 1.0 - args[0];
    case Connective::And: return product_and(args[0], args[1]);
    case Connective::Or: return clamp01(prob_or(args[0], args[1]));
    case Connective::Implies: return clamp01(reichenbach(args[0], args[1]));
    case Connective::Iff:
      return product_and(clamp01(reichenbach(args[0], args[1])), clamp01(reichenbach(args[1], args[0])));
  }
  return 0.0;
}

double eval_connective(Connective op, std::initializer_list<double> args) {
  return eval_connective(op, std::vector<double>(args));
}

double eval_formula(const Formula& f, const Theory& t, const Bindings& b) {
  using K = Formula::Kind;
  switch (f.kind()) {
    case K::Atom: return eval_atom(f, t, b);
    case K::Not: return eval_connective(Connective::Not, {eval_formula(f.children()[0], t, b)});
    case K::And:
    case K::Or:
    case K::Implies:
    case K::Iff: {
      static const Connective map[] = {Connective::Not, Connective::Not, Connective::And, Connective::Or,
                                       Connective::Implies, Connective::Iff};
      double x = eval_formula(f.children()[0], t, b);
      double y = eval_formula(f.children()[1], t, b);
      return eval_connective(map[static_cast<int>(f.kind())], {x, y});
    }
    case K::Forall: {
      if (b.count(f.variable())) throw std::invalid_argument("variable " + f.variable() + " bound twice");
      std::vector<double> v;
      Bindings inner = b;
      for (const auto& e : f.instances()) {
        inner[f.variable()] = e;
        v.push_back(eval_formula(f.children()[0], t, inner));
      }
      return aggregate(v, f.aggregator());
    }
  }
  return 0.0;
}

double aggregate(const std::vector<double>& truths, Aggregator agg) {
  if (truths.empty()) throw std::invalid_argument("aggregation over an empty instance set");
  for (double v : truths) check_unit(v);
  switch (agg) {
    case Aggregator::Mean:
      return std::accumulate(truths.begin(), truths.end(), 0.0) / static_cast<double>(truths.size());
    case Aggregator::Minimum:
      return *std::min_element(truths.begin(), truths.end());
    case Aggregator::HarmonicMean: {
      double inv = 0.0;
      for (double v : truths) {
        if (v == 0.0) return 0.0;
        inv += 1.0 / v;
      }
      return std::min(1.0, static_cast<double>(truths.size()) / inv);
    }
  }
  return 0.0;
}

double aggregate(const Formula& quantified, const Theory& t, const std::vector<std::string>& instances,
                 Aggregator agg) {
  if (quantified.kind() != Formula::Kind::Forall)
    throw std::invalid_argument("aggregate expects a quantified formula");
  if (instances.empty()) throw std::invalid_argument("aggregation over an empty instance set");
  std::vector<double> v;
  v.reserve(instances.size());
  Bindings b;
  for (const auto& e : instances) {
    b[quantified.variable()] = e;
    v.push_back(eval_formula(quantified.children()[0], t, b));
  }
  return aggregate(v, agg);
}

double aggregated_truth(const Formula& f, const Theory& t) {
  if (f.kind() == Formula::Kind::Forall) return aggregate(f, t, f.instances(), f.aggregator());
  return eval_formula(f, t);
}

namespace {

double content_of(const Formula& f, const Theory& t, const ContentOptions& opts) {
  double a = aggregated_truth(f, t);
  if (opts.clamp_floor) a = std::max(a, *opts.clamp_floor);
  if (a <= 0.0) throw InfiniteContentError("formula " + f.to_prefix() + " has aggregated truth 0");
  return a >= 1.0 ? 0.0 : -std::log2(a);
}

double contribution(const Formula& f, const Theory& t, const ContentOptions& opts) {
  if (opts.raw_sum_update) return aggregated_truth(f, t);
  return content_of(f, t, opts);
}

}  // namespace

double semantic_content(const Theory& t, const ContentOptions& opts) {
  double s = 0.0;
  for (const auto& f : t.kb().formulas()) s += content_of(f, t, opts);
  return s;
}

KnowledgeBase apply_delta(const KnowledgeBase& kb, const FormulaDelta& delta) {
  KnowledgeBase out;
  for (const auto& s : kb.symbols()) out.add_symbol(s);
  for (const auto& f : kb.facts()) out.add_fact(f);
  std::vector<Formula> formulas = kb.formulas();
  for (const auto& [idx, f] : delta.changed) {
    if (idx >= formulas.size()) throw std::invalid_argument("changed formula index out of range");
    formulas[idx] = f;
  }
  for (const auto& f : delta.added) formulas.push_back(f);
  for (auto& f : formulas) out.add_formula(std::move(f));
  return out;
}

double update_semantic_content(double prev_content, const Theory& prev, const FormulaDelta& delta,
                               const Theory& next, const ContentOptions& opts) {
  double s = prev_content;
  for (const auto& [idx, f] : delta.changed) {
    if (idx >= prev.kb().formulas().size()) throw std::invalid_argument("changed formula index out of range");
    s += contribution(f, next, opts) - contribution(prev.kb().formulas()[idx], prev, opts);
  }
  for (const auto& f : delta.added) s += contribution(f, next, opts);
  return s;
}

double update_semantic_content(double prev_content, const Theory& prev, const FormulaDelta& delta,
                               const ContentOptions& opts) {
  Theory next(apply_delta(prev.kb(), delta), prev.grounding(), prev.params());
  return update_semantic_content(prev_content, prev, delta, next, opts);
}

}  // namespace nesy::kb
