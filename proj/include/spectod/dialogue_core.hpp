#pragma once

// Shared dialogue data model: function calls, belief states, actions,
// observations, six-role records and per-turn sessions, plus value
// normalization used by state comparison and database matching.

#include <array>
#include <charconv>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "spectod/schema_registry.hpp"
#include "spectod/text.hpp"

namespace spectod {

inline constexpr std::string_view kDontCare = "dontcare";

/// Table-driven value normalizer. The table lives in a data file so
/// evaluation variants can swap conventions without a rebuild.
class Normalizer {
 public:
  Normalizer() {
    for (std::string_view v : {"dontcare", "dont care", "don't care", "do n't care"})
      dontcare_.emplace_back(v);
  }

  static Normalizer from_json(const Json& doc) {
    Normalizer n;
    if (doc.contains("dontcare")) {
      n.dontcare_.clear();
      for (const auto& v : doc.at("dontcare")) n.dontcare_.push_back(text::fold(v.get<std::string>()));
      n.dontcare_.emplace_back(kDontCare);
    }
    if (doc.contains("synonyms")) {
      for (const auto& [scope, table] : doc.at("synonyms").items()) {
        auto& dst = n.synonyms_[scope];
        for (const auto& [from, to] : table.items()) dst[text::fold(from)] = text::fold(to.get<std::string>());
      }
    }
    return n;
  }

  static Normalizer load(const std::filesystem::path& path) {
    try {
      return from_json(io::read_json(path));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": invalid normalization table: " + e.what());
    }
  }

  /// Total and idempotent. Time slots are canonicalized to 24h HH:MM;
  /// unparseable times pass through folded.
  std::string normalize(const SlotSpec& slot, std::string_view raw) const {
    return normalize(slot.slot_name, slot.value_type, raw);
  }

  std::string normalize(std::string_view slot_name, SlotType type, std::string_view raw) const {
    std::string v = text::fold(raw);
    while (!v.empty() && (v.back() == '.' || v.back() == '?' || v.back() == '!' || text::is_space(v.back())))
      v.pop_back();
    v = text::trim(v);
    if (is_dontcare(v)) return std::string(kDontCare);
    // Synonym tables may chain; bounded fixpoint keeps normalization idempotent.
    for (int pass = 0; pass < 8; ++pass) {
      std::string next = apply_synonyms(slot_name, v);
      if (next == v) break;
      v = std::move(next);
    }
    if (is_dontcare(v)) return std::string(kDontCare);
    if (type == SlotType::kTime) {
      if (auto t = canonical_time(v)) return *t;
    }
    return v;
  }

  bool is_dontcare(std::string_view folded) const {
    for (const auto& d : dontcare_) {
      if (d == folded) return true;
    }
    return false;
  }

  /// Parses common clock spellings ("9:05 am", "17.15", "1715", "5pm", "noon").
  static std::optional<std::string> canonical_time(std::string_view folded) {
    std::string s;
    for (char c : folded) {
      if (c != ' ') s.push_back(c);
    }
    if (s == "noon" || s == "midday") return "12:00";
    if (s == "midnight") return "00:00";

    int meridiem = 0;  // 0 none, 1 am, 2 pm
    auto strip_suffix = [&](std::string_view suf, int m) {
      if (s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0) {
        s.resize(s.size() - suf.size());
        meridiem = m;
        return true;
      }
      return false;
    };
    strip_suffix("a.m", 1) || strip_suffix("am", 1) || strip_suffix("p.m", 2) || strip_suffix("pm", 2);

    auto digits = [](std::string_view d) {
      if (d.empty() || d.size() > 2) return -1;
      int v = 0;
      for (char c : d) {
        if (c < '0' || c > '9') return -1;
        v = v * 10 + (c - '0');
      }
      return v;
    };

    int hour = -1;
    int minute = 0;
    const auto sep = s.find_first_of(":.");
    if (sep != std::string::npos) {
      hour = digits(std::string_view(s).substr(0, sep));
      const auto rest = std::string_view(s).substr(sep + 1);
      if (rest.size() != 2) return std::nullopt;
      minute = digits(rest);
    } else if (s.size() == 4 && meridiem == 0) {
      hour = digits(std::string_view(s).substr(0, 2));
      minute = digits(std::string_view(s).substr(2));
    } else if (meridiem != 0) {
      hour = digits(s);
    } else {
      return std::nullopt;
    }
    if (hour < 0 || minute < 0 || minute > 59) return std::nullopt;
    if (meridiem != 0) {
      if (hour < 1 || hour > 12) return std::nullopt;
      if (meridiem == 1 && hour == 12) hour = 0;
      if (meridiem == 2 && hour != 12) hour += 12;
    } else if (hour > 23) {
      return std::nullopt;
    }
    char buf[6];
    buf[0] = static_cast<char>('0' + hour / 10);
    buf[1] = static_cast<char>('0' + hour % 10);
    buf[2] = ':';
    buf[3] = static_cast<char>('0' + minute / 10);
    buf[4] = static_cast<char>('0' + minute % 10);
    buf[5] = '\0';
    return std::string(buf);
  }

 private:
  std::string apply_synonyms(std::string_view slot_name, const std::string& v) const {
    if (auto it = synonyms_.find(std::string(slot_name)); it != synonyms_.end()) {
      if (auto hit = it->second.find(v); hit != it->second.end()) return hit->second;
    }
    if (auto it = synonyms_.find("*"); it != synonyms_.end()) {
      if (auto hit = it->second.find(v); hit != it->second.end()) return hit->second;
    }
    return v;
  }

  std::vector<std::string> dontcare_;
  std::map<std::string, std::map<std::string, std::string>> synonyms_;
};

inline std::string normalize_value(const SlotSpec& slot, std::string_view raw,
                                   const Normalizer& normalizer = Normalizer()) {
  return normalizer.normalize(slot, raw);
}

using SlotMap = std::map<std::string, std::string>;
using Entity = std::map<std::string, std::string>;

struct FunctionCall {
  std::string name;
  SlotMap arguments;

  bool operator==(const FunctionCall&) const = default;
};

struct BeliefState {
  std::string domain;
  SlotMap slots;

  bool operator==(const BeliefState&) const = default;
};

// ---------------------------------------------------------------------------
// Actions

enum class Action { kInfo, kRequest, kNoOffer, kRecommend, kSelect, kGeneral };

inline constexpr std::array<Action, 6> kAllActions = {Action::kInfo,      Action::kRequest,
                                                      Action::kNoOffer,   Action::kRecommend,
                                                      Action::kSelect,    Action::kGeneral};

inline std::string_view to_string(Action a) {
  switch (a) {
    case Action::kInfo: return "Info";
    case Action::kRequest: return "Request";
    case Action::kNoOffer: return "NoOffer";
    case Action::kRecommend: return "Recommend";
    case Action::kSelect: return "Select";
    case Action::kGeneral: return "General";
  }
  return "General";
}

/// Exact labels, case-insensitive.
inline std::optional<Action> parse_action(std::string_view label) {
  const std::string f = text::fold(label);
  for (Action a : kAllActions) {
    if (text::to_lower(to_string(a)) == f) return a;
  }
  return std::nullopt;
}

struct ActionFrame {
  Action action = Action::kGeneral;
  std::string response;

  bool operator==(const ActionFrame&) const = default;
};

/// The completion grammar shared by training export and inference.
inline std::string render_frame(const ActionFrame& frame) {
  return "Action: " + std::string(to_string(frame.action)) + "\nResponse: " + frame.response;
}

// ---------------------------------------------------------------------------
// Observations

struct NoCallNeeded {
  bool operator==(const NoCallNeeded&) const = default;
};

struct EntityCount {
  std::size_t count = 0;
  std::vector<Entity> samples;

  bool operator==(const EntityCount&) const = default;
};

using Observation = std::variant<NoCallNeeded, EntityCount>;

inline bool is_no_call(const Observation& obs) { return std::holds_alternative<NoCallNeeded>(obs); }

// ---------------------------------------------------------------------------
// Six-role records

enum class Role { kSystem, kUser, kDomain, kFunction, kObservation, kAssistant };

inline constexpr std::array<Role, 6> kAllRoles = {Role::kSystem,   Role::kUser,        Role::kDomain,
                                                  Role::kFunction, Role::kObservation, Role::kAssistant};

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::kSystem: return "system";
    case Role::kUser: return "user";
    case Role::kDomain: return "domain";
    case Role::kFunction: return "function";
    case Role::kObservation: return "observation";
    case Role::kAssistant: return "assistant";
  }
  return "system";
}

inline std::optional<Role> parse_role(std::string_view s) {
  const std::string f = text::fold(s);
  for (Role r : kAllRoles) {
    if (to_string(r) == f) return r;
  }
  return std::nullopt;
}

struct TurnRecord {
  Role role = Role::kSystem;
  std::string content;

  bool operator==(const TurnRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Canonical JSON renderings (field order fixed)

inline Json call_to_json(const FunctionCall& call) {
  Json args = Json::object();
  for (const auto& [k, v] : call.arguments) args[k] = v;
  Json j;
  j["name"] = call.name;
  j["arguments"] = std::move(args);
  return j;
}

inline std::string render_call(const FunctionCall& call) { return io::dump(call_to_json(call)); }

inline std::string json_scalar_to_string(const Json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "";
  return v.dump();
}

/// Accepts both "arguments" and the singular "argument" key; argument values may
/// be an object or a list of [slot, value] pairs.
inline FunctionCall call_from_json(const Json& j) {
  if (!j.is_object()) throw ParseError("function call must be a JSON object");
  FunctionCall call;
  if (j.contains("name")) call.name = json_scalar_to_string(j.at("name"));
  const Json* args = nullptr;
  if (j.contains("arguments")) args = &j.at("arguments");
  else if (j.contains("argument")) args = &j.at("argument");
  if (args && args->is_object()) {
    for (const auto& [k, v] : args->items()) call.arguments[k] = json_scalar_to_string(v);
  } else if (args && args->is_array()) {
    for (const auto& pair : *args) {
      if (pair.is_array() && pair.size() == 2)
        call.arguments[json_scalar_to_string(pair[0])] = json_scalar_to_string(pair[1]);
      else
        throw ParseError("argument list entries must be [slot, value] pairs");
    }
  } else if (args && !args->is_null()) {
    throw ParseError("arguments must be an object");
  }
  return call;
}

inline Json entity_to_json(const Entity& e) {
  Json j = Json::object();
  for (const auto& [k, v] : e) j[k] = v;
  return j;
}

inline Entity entity_from_json(const Json& j) {
  Entity e;
  for (const auto& [k, v] : j.items()) e[k] = json_scalar_to_string(v);
  return e;
}

inline Json observation_to_json(const Observation& obs) {
  Json j;
  if (is_no_call(obs)) {
    j["type"] = "no_call_needed";
    return j;
  }
  const auto& ec = std::get<EntityCount>(obs);
  j["type"] = "entity_count";
  j["count"] = ec.count;
  Json samples = Json::array();
  for (const auto& e : ec.samples) samples.push_back(entity_to_json(e));
  j["samples"] = std::move(samples);
  return j;
}

inline Observation observation_from_json(const Json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "no_call_needed") return NoCallNeeded{};
  if (type != "entity_count") throw ParseError("unknown observation type: " + type);
  EntityCount ec;
  ec.count = j.at("count").get<std::size_t>();
  for (const auto& s : j.value("samples", Json::array())) ec.samples.push_back(entity_from_json(s));
  if (ec.samples.size() > ec.count) throw ParseError("observation has more samples than its count");
  return ec;
}

// ---------------------------------------------------------------------------
// Belief states and validation

/// Slot names absent from the function's spec are normalized as free text.
inline BeliefState function_call_to_belief(const FunctionCall& call, const FunctionRegistry& registry,
                                           const Normalizer& normalizer = Normalizer()) {
  BeliefState b;
  const FunctionSpec* spec = registry.resolve(call.name);
  b.domain = spec ? spec->name : text::fold(call.name);
  for (const auto& [slot, value] : call.arguments) {
    const SlotSpec* s = spec ? spec->find_slot(slot) : nullptr;
    b.slots[slot] = s ? normalizer.normalize(*s, value) : normalizer.normalize(slot, SlotType::kFreeText, value);
  }
  return b;
}

struct ValidationVerdict {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
};

inline ValidationVerdict validate_function_call(const FunctionCall& call, const FunctionRegistry& registry,
                                                const Normalizer& normalizer = Normalizer()) {
  ValidationVerdict verdict;
  const FunctionSpec* spec = registry.resolve(call.name);
  if (!spec) {
    verdict.violations.push_back("unknown function " + call.name);
    return verdict;
  }
  for (const auto& [slot, value] : call.arguments) {
    const SlotSpec* s = spec->find_slot(slot);
    if (!s) {
      verdict.violations.push_back("unknown slot " + slot);
      continue;
    }
    if (!s->possible_values) continue;
    const std::string v = normalizer.normalize(*s, value);
    if (v == kDontCare) continue;
    bool allowed = false;
    for (const auto& pv : *s->possible_values) {
      if (normalizer.normalize(*s, pv) == v) {
        allowed = true;
        break;
      }
    }
    if (!allowed) {
      verdict.violations.push_back("value '" + value + "' for slot " + slot + " not in [" +
                                   text::join(*s->possible_values, ", ") + ", dontcare]");
    }
  }
  return verdict;
}

/// Normalizes every argument value in place of the raw one; keeps the name canonical.
inline FunctionCall normalize_call(const FunctionCall& call, const FunctionRegistry& registry,
                                   const Normalizer& normalizer) {
  const BeliefState b = function_call_to_belief(call, registry, normalizer);
  return FunctionCall{b.domain, b.slots};
}

// ---------------------------------------------------------------------------
// Sessions

struct SessionTurn {
  int index = 0;
  std::string user;
  std::string domain;
  FunctionCall predicted_call;
  FunctionCall call;
  Observation observation = NoCallNeeded{};
  ActionFrame frame;

  bool operator==(const SessionTurn&) const = default;
};

struct DialogueSession {
  std::string dialogue_id;
  std::string goal_ref;
  std::vector<SessionTurn> turns;

  int next_index() const { return static_cast<int>(turns.size()) + 1; }

  void append(SessionTurn turn) {
    if (turn.index != next_index())
      throw Error("session " + dialogue_id + ": turn index " + std::to_string(turn.index) +
                  " out of order (expected " + std::to_string(next_index()) + ")");
    turns.push_back(std::move(turn));
  }

  const FunctionCall* last_call() const { return turns.empty() ? nullptr : &turns.back().call; }
};

}  // namespace spectod
