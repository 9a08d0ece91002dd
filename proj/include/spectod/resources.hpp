#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spectod/db_engine.hpp"
#include "spectod/dialogue_core.hpp"
#include "spectod/prompt_builder.hpp"
#include "spectod/schema_registry.hpp"

namespace spectod {

class ConversionError : public Error {
 public:
  using Error::Error;
};

/// Gold dialogue-act types onto the six action kinds. When a system turn
/// carries several acts, the kind earliest in `priority` wins.
class ActMapping {
 public:
  ActMapping() = default;

  ActMapping(std::map<std::string, Action> acts, std::vector<Action> priority)
      : acts_(std::move(acts)), priority_(std::move(priority)) {
    for (Action a : kAllActions) {
      if (std::find(priority_.begin(), priority_.end(), a) == priority_.end())
        throw ConversionError("act mapping priority list is missing " + std::string(to_string(a)));
    }
  }

  static ActMapping from_json(const Json& doc) {
    std::map<std::string, Action> acts;
    for (const auto& [type, label] : doc.at("acts").items()) {
      const auto a = parse_action(label.get<std::string>());
      if (!a) throw ConversionError("act mapping: unknown action label " + label.get<std::string>());
      acts[text::fold(type)] = *a;
    }
    std::vector<Action> priority;
    for (const auto& label : doc.at("priority")) {
      const auto a = parse_action(label.get<std::string>());
      if (!a) throw ConversionError("act mapping: unknown action label in priority");
      priority.push_back(*a);
    }
    return ActMapping(std::move(acts), std::move(priority));
  }

  static ActMapping load(const std::filesystem::path& path) {
    try {
      return from_json(io::read_json(path));
    } catch (const nlohmann::json::exception& e) {
      throw ConversionError(path.string() + ": invalid act mapping: " + e.what());
    }
  }

  std::optional<Action> map_type(std::string_view act_type) const {
    const auto it = acts_.find(text::fold(act_type));
    if (it == acts_.end()) return std::nullopt;
    return it->second;
  }

  /// An empty act list is General. Unknown act types are an error.
  Action map(const std::vector<std::string>& act_types) const {
    if (act_types.empty()) return Action::kGeneral;
    std::size_t best = priority_.size();
    for (const auto& t : act_types) {
      const auto a = map_type(t);
      if (!a) throw ConversionError("unmappable gold act: " + t);
      const auto pos = static_cast<std::size_t>(std::find(priority_.begin(), priority_.end(), *a) - priority_.begin());
      best = std::min(best, pos);
    }
    return priority_[best];
  }

 private:
  std::map<std::string, Action> acts_;
  std::vector<Action> priority_;
};

/// Everything the pipeline reads but never mutates; share one instance across workers.
struct Resources {
  FunctionRegistry registry;
  DatabaseSet db;
  Normalizer normalizer;
  ActMapping acts;
  TemplateSet templates;
  ActionCatalog catalog;
  std::size_t sample_limit = 1;
};

struct ResourcePaths {
  std::filesystem::path schema;
  std::filesystem::path normalization;
  std::filesystem::path act_mapping;
  std::filesystem::path templates;
  std::filesystem::path actions;
  std::optional<std::filesystem::path> db_dir;

  /// Standard layout under a data directory.
  static ResourcePaths under(const std::filesystem::path& data_dir) {
    ResourcePaths p;
    p.schema = data_dir / "schema" / "multiwoz_functions.json";
    p.normalization = data_dir / "normalization.json";
    p.act_mapping = data_dir / "act_mapping.json";
    p.templates = data_dir / "templates";
    p.actions = data_dir / "templates" / "actions.json";
    return p;
  }
};

inline Resources load_resources(const ResourcePaths& paths) {
  Resources r;
  r.registry = load_registry(paths.schema);
  r.normalizer = Normalizer::load(paths.normalization);
  r.acts = ActMapping::load(paths.act_mapping);
  r.templates = load_templates(paths.templates);
  r.catalog = ActionCatalog::load(paths.actions);
  if (paths.db_dir) r.db = load_database_set(*paths.db_dir, r.registry);
  return r;
}

}  // namespace spectod
