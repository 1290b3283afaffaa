#pragma once

// JSON serialization of theories. Layout:
//
//   {
//     "domains":    {"node": 4},
//     "entities":   [{"id": "node_0", "domain": "node", "grounding": [..]}],
//     "predicates": [{"id": "level0", "domains": ["node"], "truth": {..}}],
//     "relations":  [{"id": "parent_of", "domains": ["node", "node"], "truth": {..}}],
//     "functions":  [{"id": "f", "domains": ["node", "node"], "out_dim": 4, "matrix": [..], "bias": [..]}],
//     "facts":      [["node_0", "parent_of", "node_1", 1.0]],
//     "formulas":   ["(level0 node_0)", ...],
//     "params":     {"symbol": [..]}
//   }
//
// Truth objects are {"type": "component", "index": k},
// {"type": "table", "fallback": x, "entries": [{"args": [..], "truth": y}]}
// or {"type": "logistic"}.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "nesy/kb.hpp"

namespace nesy::kb {

nlohmann::json theory_to_json(const Theory& t);
Theory theory_from_json(const nlohmann::json& j);

void save_theory(const Theory& t, const std::filesystem::path& path);
Theory load_theory(const std::filesystem::path& path);

}  // namespace nesy::kb
