#include "nesy/kb_io.hpp"

#include <fstream>

namespace nesy::kb {

using nlohmann::json;

namespace {

json truth_to_json(const TruthFunction& fn) {
  return std::visit(
      [](const auto& f) -> json {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, ComponentTruth>) {
          return {{"type", "component"}, {"index", f.index}};
        } else if constexpr (std::is_same_v<T, TableTruth>) {
          json entries = json::array();
          for (const auto& [args, v] : f.truths) entries.push_back({{"args", args}, {"truth", v}});
          return {{"type", "table"}, {"fallback", f.fallback}, {"entries", entries}};
        } else {
          return {{"type", "logistic"}};
        }
      },
      fn);
}

TruthFunction truth_from_json(const json& j) {
  const std::string type = j.at("type");
  if (type == "component") return ComponentTruth{j.at("index").get<std::size_t>()};
  if (type == "logistic") return LogisticTruth{};
  if (type == "table") {
    TableTruth t;
    t.fallback = j.value("fallback", 0.0);
    for (const auto& e : j.at("entries")) t.truths[e.at("args").get<std::vector<std::string>>()] = e.at("truth");
    return t;
  }
  throw std::invalid_argument("unknown truth function type '" + type + "'");
}

}  // namespace

json theory_to_json(const Theory& t) {
  const auto& kb = t.kb();
  const auto& g = t.grounding();
  json j;
  j["domains"] = g.domain_dims;
  j["entities"] = json::array();
  j["predicates"] = json::array();
  j["relations"] = json::array();
  j["functions"] = json::array();
  for (const auto& s : kb.symbols()) {
    switch (s.kind) {
      case SymbolKind::Entity:
        j["entities"].push_back({{"id", s.id}, {"domain", s.domain_signature[0]}, {"grounding", g.entities.at(s.id)}});
        break;
      case SymbolKind::Predicate:
        j["predicates"].push_back({{"id", s.id}, {"domains", s.domain_signature}, {"truth", truth_to_json(g.truths.at(s.id))}});
        break;
      case SymbolKind::Relation:
        j["relations"].push_back({{"id", s.id}, {"domains", s.domain_signature}, {"truth", truth_to_json(g.truths.at(s.id))}});
        break;
      case SymbolKind::Function: {
        const auto& f = g.functions.at(s.id);
        j["functions"].push_back({{"id", s.id},
                                  {"domains", s.domain_signature},
                                  {"out_dim", f.out_dim},
                                  {"matrix", f.matrix},
                                  {"bias", f.bias}});
        break;
      }
    }
  }
  j["facts"] = json::array();
  for (const auto& f : kb.facts()) j["facts"].push_back({f.head, f.relation, f.tail, f.truth});
  j["formulas"] = json::array();
  for (const auto& f : kb.formulas()) j["formulas"].push_back(f.to_prefix());
  j["params"] = t.params();
  return j;
}

Theory theory_from_json(const json& j) {
  KnowledgeBase kb;
  Grounding g;
  g.domain_dims = j.at("domains").get<std::map<std::string, std::size_t>>();
  for (const auto& e : j.value("entities", json::array())) {
    const std::string id = e.at("id");
    kb.add_symbol({id, SymbolKind::Entity, {e.at("domain").get<std::string>()}});
    g.entities[id] = e.at("grounding").get<std::vector<double>>();
  }
  for (const auto& [section, kind] :
       {std::pair{"predicates", SymbolKind::Predicate}, std::pair{"relations", SymbolKind::Relation}}) {
    for (const auto& p : j.value(section, json::array())) {
      const std::string id = p.at("id");
      kb.add_symbol({id, kind, p.at("domains").get<std::vector<std::string>>()});
      g.truths[id] = truth_from_json(p.at("truth"));
    }
  }
  for (const auto& f : j.value("functions", json::array())) {
    const std::string id = f.at("id");
    kb.add_symbol({id, SymbolKind::Function, f.at("domains").get<std::vector<std::string>>()});
    g.functions[id] = AffineMap{f.at("out_dim").get<std::size_t>(), f.at("matrix").get<std::vector<double>>(),
                                f.at("bias").get<std::vector<double>>()};
  }
  for (const auto& f : j.value("facts", json::array())) {
    if (!f.is_array() || (f.size() != 3 && f.size() != 4))
      throw std::invalid_argument("fact must be [head, relation, tail(, truth)]");
    kb.add_fact({f[0].get<std::string>(), f[1].get<std::string>(), f[2].get<std::string>(),
                 f.size() == 4 ? f[3].get<double>() : 1.0});
  }
  for (const auto& f : j.value("formulas", json::array())) kb.add_formula(parse_formula(f.get<std::string>()));
  Parameters params = j.value("params", json::object()).get<Parameters>();
  return Theory(std::move(kb), std::move(g), std::move(params));
}

void save_theory(const Theory& t, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << theory_to_json(t).dump(2) << '\n';
}

Theory load_theory(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return theory_from_json(json::parse(is));
}

}  // namespace nesy::kb
