#include "schema.hpp"

#include <fstream>

#include "synthetic.hpp"

namespace opensat::testing {

using nlohmann::json;

namespace {

bool has_type(const json& doc, const std::string& type) {
    if (type == "object") return doc.is_object();
    if (type == "array") return doc.is_array();
    if (type == "string") return doc.is_string();
    if (type == "integer") return doc.is_number_integer();
    if (type == "number") return doc.is_number();
    if (type == "boolean") return doc.is_boolean();
    if (type == "null") return doc.is_null();
    return false;
}

void check(const json& root, const json& schema, const json& doc, const std::string& path,
           std::vector<std::string>& out) {
    if (schema.contains("$ref")) {
        std::string ref = schema["$ref"];
        const std::string prefix = "#/$defs/";
        if (ref.rfind(prefix, 0) != 0 || !root.contains("$defs") || !root["$defs"].contains(ref.substr(prefix.size()))) {
            out.push_back(path + ": unresolvable $ref " + ref);
            return;
        }
        check(root, root["$defs"][ref.substr(prefix.size())], doc, path, out);
        return;
    }
    if (schema.contains("type")) {
        bool ok = false;
        if (schema["type"].is_array()) {
            for (const auto& t : schema["type"]) ok = ok || has_type(doc, t.get<std::string>());
        } else {
            ok = has_type(doc, schema["type"].get<std::string>());
        }
        if (!ok) {
            out.push_back(path + ": expected type " + schema["type"].dump() + ", got " + doc.type_name());
            return;
        }
    }
    if (schema.contains("const") && doc != schema["const"]) out.push_back(path + ": expected " + schema["const"].dump());
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& e : schema["enum"]) found = found || e == doc;
        if (!found) out.push_back(path + ": " + doc.dump() + " not in " + schema["enum"].dump());
    }
    if (doc.is_number()) {
        double v = doc.get<double>();
        if (schema.contains("minimum") && v < schema["minimum"].get<double>()) out.push_back(path + ": below minimum");
        if (schema.contains("maximum") && v > schema["maximum"].get<double>()) out.push_back(path + ": above maximum");
    }
    if (doc.is_object()) {
        if (schema.contains("required")) {
            for (const auto& key : schema["required"]) {
                if (!doc.contains(key.get<std::string>())) out.push_back(path + ": missing '" + key.get<std::string>() + "'");
            }
        }
        const json props = schema.value("properties", json::object());
        for (auto it = doc.begin(); it != doc.end(); ++it) {
            if (props.contains(it.key())) {
                check(root, props[it.key()], it.value(), path + "/" + it.key(), out);
            } else if (schema.contains("additionalProperties") && schema["additionalProperties"] == false) {
                out.push_back(path + ": unexpected property '" + it.key() + "'");
            }
        }
    }
    if (doc.is_array()) {
        if (schema.contains("minItems") && doc.size() < schema["minItems"].get<std::size_t>()) {
            out.push_back(path + ": too few items");
        }
        if (schema.contains("maxItems") && doc.size() > schema["maxItems"].get<std::size_t>()) {
            out.push_back(path + ": too many items");
        }
        if (schema.contains("items")) {
            for (std::size_t i = 0; i < doc.size(); ++i) {
                check(root, schema["items"], doc[i], path + "/" + std::to_string(i), out);
            }
        }
    }
}

}  // namespace

std::vector<std::string> schema_violations(const json& schema, const json& doc) {
    std::vector<std::string> out;
    check(schema, schema, doc, "", out);
    return out;
}

json load_schema(const std::string& name) {
    std::ifstream in(source_dir() / "schemas" / name);
    if (!in) throw std::runtime_error("missing schema " + name);
    return json::parse(in);
}

}  // namespace opensat::testing
