#pragma once

// Domain function specifications: every service domain is a callable function
// whose arguments are its slots; the registry also holds the null function.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "spectod/text.hpp"

namespace spectod {

class SchemaError : public Error {
 public:
  using Error::Error;
};

enum class SlotType { kCategorical, kFreeText, kInteger, kTime, kBoolean };

inline std::string_view to_string(SlotType t) {
  switch (t) {
    case SlotType::kCategorical: return "categorical";
    case SlotType::kFreeText: return "free_text";
    case SlotType::kInteger: return "integer";
    case SlotType::kTime: return "time";
    case SlotType::kBoolean: return "boolean";
  }
  return "free_text";
}

inline std::optional<SlotType> parse_slot_type(std::string_view s) {
  const std::string f = text::fold(s);
  if (f == "categorical") return SlotType::kCategorical;
  if (f == "free_text" || f == "text" || f == "string") return SlotType::kFreeText;
  if (f == "integer" || f == "int") return SlotType::kInteger;
  if (f == "time") return SlotType::kTime;
  if (f == "boolean" || f == "bool") return SlotType::kBoolean;
  return std::nullopt;
}

struct SlotSpec {
  std::string slot_name;
  SlotType value_type = SlotType::kFreeText;
  std::string description;
  std::optional<std::vector<std::string>> possible_values;

  bool operator==(const SlotSpec&) const = default;
};

struct FunctionSpec {
  std::string name;
  std::string description;
  std::vector<SlotSpec> arguments;

  const SlotSpec* find_slot(std::string_view slot_name) const {
    for (const auto& s : arguments) {
      if (s.slot_name == slot_name) return &s;
    }
    return nullptr;
  }

  bool operator==(const FunctionSpec&) const = default;
};

inline constexpr std::string_view kNullFunctionName = "null";

/// Immutable after construction; lookups are safe from any number of threads.
class FunctionRegistry {
 public:
  FunctionRegistry() = default;

  /// Validates every invariant; throws SchemaError on the first violation.
  explicit FunctionRegistry(std::vector<FunctionSpec> functions,
                            std::string null_name = std::string(kNullFunctionName))
      : functions_(std::move(functions)), null_name_(std::move(null_name)) {
    validate();
  }

  const std::vector<FunctionSpec>& functions() const { return functions_; }
  std::size_t size() const { return functions_.size(); }
  const FunctionSpec& null_function() const { return functions_[null_index_]; }
  const std::string& null_name() const { return null_name_; }

  bool is_null(std::string_view name) const { return text::fold(name) == null_name_; }

  /// Case-insensitive, whitespace-trimmed lookup. nullptr signals not-found.
  const FunctionSpec* resolve(std::string_view name) const {
    const auto it = index_.find(text::fold(name));
    return it == index_.end() ? nullptr : &functions_[it->second];
  }

  const FunctionSpec& at(std::string_view name) const {
    if (const auto* spec = resolve(name)) return *spec;
    throw SchemaError("unknown function: " + std::string(name));
  }

  bool operator==(const FunctionRegistry& other) const {
    return functions_ == other.functions_ && null_name_ == other.null_name_;
  }

 private:
  void validate() {
    index_.clear();
    std::optional<std::size_t> null_index;
    for (std::size_t i = 0; i < functions_.size(); ++i) {
      const auto& f = functions_[i];
      const std::string key = text::fold(f.name);
      if (key.empty()) throw SchemaError("function at position " + std::to_string(i) + " has an empty name");
      if (!index_.emplace(key, i).second) throw SchemaError("duplicate function name: " + f.name);
      if (key == text::fold(null_name_)) null_index = i;

      std::set<std::string> slot_names;
      for (const auto& slot : f.arguments) {
        if (slot.slot_name.empty())
          throw SchemaError("function " + f.name + " has a slot with an empty name");
        if (!slot_names.insert(slot.slot_name).second)
          throw SchemaError("duplicate slot " + slot.slot_name + " in function " + f.name);
        if (slot.value_type == SlotType::kCategorical && !slot.possible_values)
          throw SchemaError("categorical slot " + f.name + "." + slot.slot_name +
                            " is missing possible_values");
        if (slot.possible_values) {
          if (slot.possible_values->empty())
            throw SchemaError("slot " + f.name + "." + slot.slot_name + " has empty possible_values");
          std::set<std::string> seen;
          for (const auto& v : *slot.possible_values) {
            if (!seen.insert(text::fold(v)).second)
              throw SchemaError("slot " + f.name + "." + slot.slot_name +
                                " repeats possible value '" + v + "'");
          }
        }
      }
    }
    if (!null_index) throw SchemaError("registry has no null function named '" + null_name_ + "'");
    if (!functions_[*null_index].arguments.empty())
      throw SchemaError("null function must not declare arguments");
    null_index_ = *null_index;
    null_name_ = text::fold(null_name_);
  }

  std::vector<FunctionSpec> functions_;
  std::string null_name_;
  std::map<std::string, std::size_t> index_;
  std::size_t null_index_ = 0;
};

inline Json spec_to_json(const FunctionSpec& spec) {
  Json args = Json::array();
  for (const auto& s : spec.arguments) {
    Json a;
    a["slot_name"] = s.slot_name;
    a["type"] = std::string(to_string(s.value_type));
    a["description"] = s.description;
    if (s.possible_values) a["possible_values"] = *s.possible_values;
    args.push_back(std::move(a));
  }
  Json j;
  j["name"] = spec.name;
  j["description"] = spec.description;
  j["arguments"] = std::move(args);
  return j;
}

inline FunctionSpec spec_from_json(const Json& j) {
  if (!j.is_object()) throw SchemaError("function entry must be a JSON object");
  FunctionSpec spec;
  try {
    spec.name = j.at("name").get<std::string>();
    spec.description = j.value("description", std::string());
    for (const auto& a : j.value("arguments", Json::array())) {
      SlotSpec slot;
      slot.slot_name = a.at("slot_name").get<std::string>();
      const auto type_name = a.value("type", std::string("free_text"));
      const auto type = parse_slot_type(type_name);
      if (!type) throw SchemaError("slot " + slot.slot_name + " has unknown type '" + type_name + "'");
      slot.value_type = *type;
      slot.description = a.value("description", std::string());
      if (a.contains("possible_values"))
        slot.possible_values = a.at("possible_values").get<std::vector<std::string>>();
      spec.arguments.push_back(std::move(slot));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("invalid function entry: ") + e.what());
  }
  return spec;
}

/// Deterministic rendering: name, description, arguments, in that order.
inline std::string render_spec(const FunctionSpec& spec) { return io::dump(spec_to_json(spec)); }

/// The full function list, one rendered spec per line, in registry order.
inline std::string render_function_list(const FunctionRegistry& registry) {
  std::string out;
  for (const auto& f : registry.functions()) {
    if (!out.empty()) out += '\n';
    out += render_spec(f);
  }
  return out;
}

inline FunctionRegistry parse_registry(std::string_view content, const std::string& source = "<schema>") {
  const Json doc = io::parse_json(content, source);
  if (!doc.is_array()) throw SchemaError(source + ": top level must be an array of functions");
  std::vector<FunctionSpec> functions;
  for (const auto& entry : doc) functions.push_back(spec_from_json(entry));
  try {
    return FunctionRegistry(std::move(functions));
  } catch (const SchemaError& e) {
    throw SchemaError(source + ": " + e.what());
  }
}

inline FunctionRegistry load_registry(const std::filesystem::path& path) {
  return parse_registry(io::read_file(path), path.string());
}

inline std::string registry_to_text(const FunctionRegistry& registry) {
  Json doc = Json::array();
  for (const auto& f : registry.functions()) doc.push_back(spec_to_json(f));
  return doc.dump(2) + "\n";
}

}  // namespace spectod
