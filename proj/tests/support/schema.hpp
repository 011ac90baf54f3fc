#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace opensat::testing {

// Checks the JSON Schema keywords used by the committed schemas: type,
// properties, required, additionalProperties (bool), items, enum, const,
// minimum, maximum, minItems, maxItems and local "#/$defs/..." refs.
// Returns one message per violation; empty means valid.
std::vector<std::string> schema_violations(const nlohmann::json& schema, const nlohmann::json& doc);

nlohmann::json load_schema(const std::string& name);

}  // namespace opensat::testing
