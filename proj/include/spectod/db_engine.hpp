#pragma once

// Database lookup for belief states and the policy-instruction observation
// rules that sit between state tracking and response generation.

#include <array>
#include <charconv>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "spectod/dialogue_core.hpp"
#include "spectod/schema_registry.hpp"
#include "spectod/text.hpp"

namespace spectod {

class DatabaseError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::string_view kNoCallSentinel = "Do not need to call function.";

/// Booking slots describe a reservation, not the entity, and never constrain a lookup.
inline bool is_queryable_slot(std::string_view slot_name) {
  return slot_name.substr(0, 5) != "book_";
}

enum class TimeOp { kEqual, kAtLeast, kAtMost };

/// Inclusive bounds: leave_at asks for entities leaving at or after the value,
/// arrive_by for entities arriving at or before it.
inline TimeOp time_operator(std::string_view slot_name) {
  if (slot_name == "leave_at") return TimeOp::kAtLeast;
  if (slot_name == "arrive_by") return TimeOp::kAtMost;
  return TimeOp::kEqual;
}

struct QueryResult {
  std::size_t count = 0;
  std::vector<Entity> matches;
};

/// Per-domain entity tables. Immutable after load.
class DatabaseSet {
 public:
  DatabaseSet() = default;

  void add_table(std::string domain, std::vector<Entity> rows) { tables_[std::move(domain)] = std::move(rows); }
  void add_synthetic(std::string domain) { synthetic_.insert(std::move(domain)); }

  bool has_table(std::string_view domain) const { return tables_.count(std::string(domain)) > 0; }
  bool is_synthetic(std::string_view domain) const { return synthetic_.count(std::string(domain)) > 0; }

  const std::vector<Entity>& table(std::string_view domain) const {
    const auto it = tables_.find(std::string(domain));
    if (it == tables_.end()) throw DatabaseError("no entity table for domain " + std::string(domain));
    return it->second;
  }

  const std::map<std::string, std::vector<Entity>>& tables() const { return tables_; }

 private:
  std::map<std::string, std::vector<Entity>> tables_;
  std::set<std::string> synthetic_;
};

/// Flattens one raw database row: keys to snake_case, scalars to strings,
/// nested values to compact JSON.
inline Entity entity_from_db_row(const Json& row) {
  Entity e;
  for (const auto& [k, v] : row.items()) {
    const std::string key = text::to_lower(text::snake_case(k));
    e[key] = v.is_structured() ? io::dump(v) : json_scalar_to_string(v);
  }
  return e;
}

struct DatabaseOptions {
  /// Domains answered by one generated entity instead of a table.
  std::set<std::string> synthetic_domains = {"taxi"};
};

/// Reads <domain>_db.json for every non-null function that has one and checks
/// that each queryable slot is backed by an entity attribute.
inline DatabaseSet load_database_set(const std::filesystem::path& dir, const FunctionRegistry& registry,
                                     const DatabaseOptions& options = {}) {
  if (!std::filesystem::is_directory(dir)) throw IoError("database directory not found: " + dir.string());
  DatabaseSet db;
  for (const auto& f : registry.functions()) {
    if (registry.is_null(f.name)) continue;
    if (options.synthetic_domains.count(f.name)) {
      db.add_synthetic(f.name);
      continue;
    }
    const auto path = dir / (f.name + "_db.json");
    if (!std::filesystem::exists(path)) continue;
    const Json doc = io::read_json(path);
    if (!doc.is_array()) throw DatabaseError(path.string() + ": expected a JSON array of entities");
    std::vector<Entity> rows;
    rows.reserve(doc.size());
    for (const auto& row : doc) rows.push_back(entity_from_db_row(row));
    for (const auto& slot : f.arguments) {
      if (!is_queryable_slot(slot.slot_name) || rows.empty()) continue;
      bool backed = false;
      for (const auto& r : rows) {
        if (r.count(slot.slot_name)) {
          backed = true;
          break;
        }
      }
      if (!backed)
        throw DatabaseError(path.string() + ": queryable slot " + f.name + "." + slot.slot_name +
                            " has no matching entity attribute");
    }
    db.add_table(f.name, std::move(rows));
  }
  return db;
}

namespace detail {

inline SlotType slot_type_of(const FunctionSpec* spec, std::string_view slot) {
  if (spec) {
    if (const auto* s = spec->find_slot(slot)) return s->value_type;
  }
  return SlotType::kFreeText;
}

/// Active constraints: normalized, non-empty, not dontcare, queryable.
inline SlotMap active_constraints(const BeliefState& belief, const FunctionSpec* spec, const Normalizer& normalizer) {
  SlotMap out;
  for (const auto& [slot, value] : belief.slots) {
    if (!is_queryable_slot(slot)) continue;
    const std::string v = normalizer.normalize(slot, slot_type_of(spec, slot), value);
    if (v.empty() || v == kDontCare) continue;
    out[slot] = v;
  }
  return out;
}

inline bool satisfies(const Entity& entity, const SlotMap& constraints, const FunctionSpec* spec,
                      const Normalizer& normalizer) {
  for (const auto& [slot, want] : constraints) {
    const auto it = entity.find(slot);
    if (it == entity.end()) return false;
    const SlotType type = slot_type_of(spec, slot);
    const std::string have = normalizer.normalize(slot, type, it->second);
    const TimeOp op = time_operator(slot);
    if (op != TimeOp::kEqual) {
      const auto a = Normalizer::canonical_time(have);
      const auto b = Normalizer::canonical_time(want);
      if (a && b) {
        if (op == TimeOp::kAtLeast && *a < *b) return false;
        if (op == TimeOp::kAtMost && *a > *b) return false;
        continue;
      }
    }
    if (have != want) return false;
  }
  return true;
}

inline Entity synthetic_entity(const SlotMap& constraints) {
  static constexpr std::array<std::string_view, 6> kColors = {"black", "white", "red", "yellow", "blue", "grey"};
  static constexpr std::array<std::string_view, 10> kMakes = {"toyota", "skoda", "bmw",   "honda",      "ford",
                                                               "audi",   "lexus", "volvo", "volkswagen", "tesla"};
  Entity e = constraints;
  std::string key;
  for (const auto& [k, v] : constraints) key += k + "=" + v + ";";
  const std::uint64_t h = text::mix64(text::fnv1a(key));
  e["color"] = std::string(kColors[h % kColors.size()]);
  e["type"] = std::string(kMakes[(h >> 8) % kMakes.size()]);
  std::string phone = "07";
  std::uint64_t digits = h >> 16;
  for (int i = 0; i < 9; ++i) {
    phone.push_back(static_cast<char>('0' + digits % 10));
    digits /= 10;
  }
  e["phone"] = phone;
  return e;
}

}  // namespace detail

/// Entities satisfying every active constraint, in table order.
inline QueryResult query(const DatabaseSet& db, const BeliefState& belief, const FunctionRegistry& registry,
                         const Normalizer& normalizer = Normalizer()) {
  const FunctionSpec* spec = registry.resolve(belief.domain);
  const std::string domain = spec ? spec->name : belief.domain;
  const SlotMap constraints = detail::active_constraints(belief, spec, normalizer);
  QueryResult result;
  if (db.is_synthetic(domain)) {
    result.matches.push_back(detail::synthetic_entity(constraints));
  } else {
    for (const auto& entity : db.table(domain)) {
      if (detail::satisfies(entity, constraints, spec, normalizer)) result.matches.push_back(entity);
    }
  }
  result.count = result.matches.size();
  return result;
}

/// Policy instruction. No call is needed for the null function or when the
/// normalized call equals the previous turn's; otherwise the database is queried
/// and the first `sample_limit` matches ride along with the count.
inline Observation observe(const FunctionCall* prev_call, const FunctionCall& call, const DatabaseSet& db,
                           const FunctionRegistry& registry, const Normalizer& normalizer = Normalizer(),
                           std::size_t sample_limit = 1) {
  if (registry.is_null(call.name)) return NoCallNeeded{};
  if (prev_call &&
      normalize_call(*prev_call, registry, normalizer) == normalize_call(call, registry, normalizer))
    return NoCallNeeded{};
  const QueryResult r = query(db, function_call_to_belief(call, registry, normalizer), registry, normalizer);
  EntityCount ec;
  ec.count = r.count;
  for (std::size_t i = 0; i < r.matches.size() && i < sample_limit; ++i) ec.samples.push_back(r.matches[i]);
  return ec;
}

inline std::string render_observation(const Observation& obs) {
  if (is_no_call(obs)) return std::string(kNoCallSentinel);
  const auto& ec = std::get<EntityCount>(obs);
  std::string out = "Found " + std::to_string(ec.count) + " matching entities.";
  if (!ec.samples.empty()) {
    Json samples = Json::array();
    for (const auto& e : ec.samples) samples.push_back(entity_to_json(e));
    out += "\n" + io::dump(samples);
  }
  return out;
}

/// Inverse of render_observation.
inline Observation parse_observation_text(std::string_view content) {
  if (text::trim_view(content) == kNoCallSentinel) return NoCallNeeded{};
  static constexpr std::string_view kPrefix = "Found ";
  static constexpr std::string_view kSuffix = " matching entities.";
  const auto nl = content.find('\n');
  const std::string_view head = content.substr(0, nl);
  if (head.substr(0, kPrefix.size()) != kPrefix || head.size() < kPrefix.size() + kSuffix.size() ||
      head.substr(head.size() - kSuffix.size()) != kSuffix)
    throw ParseError("not an observation record: " + std::string(head));
  const std::string_view number = head.substr(kPrefix.size(), head.size() - kPrefix.size() - kSuffix.size());
  EntityCount ec;
  const auto [ptr, ec_err] = std::from_chars(number.data(), number.data() + number.size(), ec.count);
  if (ec_err != std::errc() || ptr != number.data() + number.size())
    throw ParseError("bad entity count in observation: " + std::string(number));
  if (nl != std::string_view::npos) {
    const Json samples = io::parse_json(content.substr(nl + 1), "observation samples");
    for (const auto& s : samples) ec.samples.push_back(entity_from_json(s));
  }
  return ec;
}

}  // namespace spectod
