#pragma once

// MultiWOZ-format corpora into the six-role dialogue format.
//
// Raw layouts:
//   2.0 / 2.1  data.json, valListFile.txt, testListFile.txt (optional
//              trainListFile.txt; otherwise train is every remaining id).
//              2.0 dialogues without per-turn "dialog_act" read acts from
//              dialogue_acts.json.
//   2.2        train/, dev/, test/ directories of dialogues_*.json plus
//              dialog_acts.json. Goals come from a data.json next to them
//              when present, or from a "goal" field on the dialogue.
//
// Gold active domain for a turn (one domain per belief state):
//   1. domains whose belief changed this turn, first in registry order
//      (the turn is flagged multi-domain when more than one changed);
//   2. otherwise the first registry domain named by the system acts;
//   3. otherwise, for turns whose only domain acts are "Booking-*", the
//      previous turn's active domain;
//   4. otherwise the null function.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "spectod/db_engine.hpp"
#include "spectod/dialogue_core.hpp"
#include "spectod/prompt_builder.hpp"
#include "spectod/resources.hpp"
#include "spectod/schema_registry.hpp"
#include "spectod/text.hpp"

namespace spectod {

class IngestError : public Error {
 public:
  using Error::Error;
};

struct DialogAct {
  std::string domain;  // lowercase, e.g. "restaurant", "general", "booking"
  std::string type;    // lowercase, e.g. "inform"
  std::string slot;    // lowercase act slot, e.g. "addr"; "none" when absent
  std::string value;

  bool operator==(const DialogAct&) const = default;
};

struct DomainGoal {
  SlotMap info;
  std::vector<std::string> reqt;
  SlotMap book;

  bool operator==(const DomainGoal&) const = default;
};

using Goal = std::map<std::string, DomainGoal>;

struct RawTurn {
  std::string user;
  std::string system;
  std::map<std::string, SlotMap> belief;  // cumulative, per domain
  std::vector<DialogAct> acts;            // system acts

  bool operator==(const RawTurn&) const = default;
};

struct RawDialogue {
  std::string id;
  Goal goal;
  std::vector<RawTurn> turns;

  bool operator==(const RawDialogue&) const = default;
};

struct RawCorpus {
  std::vector<RawDialogue> train;
  std::vector<RawDialogue> dev;
  std::vector<RawDialogue> test;
};

enum class CorpusVersion { k20, k21, k22 };

inline std::optional<CorpusVersion> parse_corpus_version(std::string_view s) {
  const std::string f = text::fold(s);
  if (f == "2.0" || f == "20") return CorpusVersion::k20;
  if (f == "2.1" || f == "21") return CorpusVersion::k21;
  if (f == "2.2" || f == "22") return CorpusVersion::k22;
  return std::nullopt;
}

/// Raw slot keys ("leaveAt", "restaurant-bookday", "trainID") to schema slot names.
inline std::string canonical_slot_name(std::string_view raw) {
  std::string_view s = raw;
  if (const auto dash = s.find('-'); dash != std::string_view::npos) s = s.substr(dash + 1);
  std::string key = text::to_lower(text::snake_case(text::trim(s)));
  static const std::map<std::string, std::string> kAliases = {
      {"leaveat", "leave_at"},       {"arriveby", "arrive_by"},   {"bookday", "book_day"},
      {"bookpeople", "book_people"}, {"booktime", "book_time"},   {"bookstay", "book_stay"},
      {"trainid", "train_id"},       {"price_range", "pricerange"}};
  if (const auto it = kAliases.find(key); it != kAliases.end()) return it->second;
  return key;
}

namespace detail {

inline bool is_absent_value(std::string_view v) {
  const std::string f = text::fold(v);
  return f.empty() || f == "not mentioned" || f == "none";
}

inline std::vector<DialogAct> parse_acts(const Json& acts) {
  std::vector<DialogAct> out;
  if (!acts.is_object()) return out;  // "No Annotation" and similar
  for (const auto& [key, pairs] : acts.items()) {
    DialogAct base;
    const auto dash = key.find('-');
    base.domain = text::fold(dash == std::string::npos ? std::string("general") : key.substr(0, dash));
    base.type = text::fold(dash == std::string::npos ? key : key.substr(dash + 1));
    if (!pairs.is_array() || pairs.empty()) {
      base.slot = "none";
      out.push_back(base);
      continue;
    }
    for (const auto& p : pairs) {
      DialogAct a = base;
      if (p.is_array() && p.size() >= 2) {
        a.slot = text::fold(json_scalar_to_string(p[0]));
        a.value = json_scalar_to_string(p[1]);
      } else {
        a.slot = "none";
      }
      out.push_back(std::move(a));
    }
  }
  return out;
}

inline Goal parse_goal(const Json& goal) {
  Goal out;
  if (!goal.is_object()) return out;
  for (const auto& [domain, g] : goal.items()) {
    if (domain == "message" || domain == "topic" || !g.is_object() || g.empty()) continue;
    DomainGoal dg;
    if (g.contains("info") && g["info"].is_object()) {
      for (const auto& [k, v] : g["info"].items()) dg.info[canonical_slot_name(k)] = json_scalar_to_string(v);
    }
    if (g.contains("reqt")) {
      const auto& r = g["reqt"];
      if (r.is_array()) {
        for (const auto& v : r) dg.reqt.push_back(canonical_slot_name(json_scalar_to_string(v)));
      } else if (r.is_object()) {
        for (const auto& [k, v] : r.items()) dg.reqt.push_back(canonical_slot_name(k));
      }
    }
    if (g.contains("book") && g["book"].is_object()) {
      for (const auto& [k, v] : g["book"].items()) {
        if (k == "invalid" || k == "pre_invalid" || k == "booked") continue;
        dg.book[canonical_slot_name(k)] = json_scalar_to_string(v);
      }
    }
    if (dg.info.empty() && dg.reqt.empty() && dg.book.empty()) continue;
    out[text::fold(domain)] = std::move(dg);
  }
  return out;
}

inline Json goal_to_json(const Goal& goal) {
  Json j = Json::object();
  for (const auto& [d, g] : goal) {
    Json e;
    e["info"] = Json::object();
    for (const auto& [k, v] : g.info) e["info"][k] = v;
    e["reqt"] = g.reqt;
    e["book"] = Json::object();
    for (const auto& [k, v] : g.book) e["book"][k] = v;
    j[d] = std::move(e);
  }
  return j;
}

/// Belief from a 2.0/2.1 system-turn "metadata" block.
inline std::map<std::string, SlotMap> parse_metadata_belief(const Json& metadata) {
  std::map<std::string, SlotMap> out;
  if (!metadata.is_object()) return out;
  for (const auto& [domain, d] : metadata.items()) {
    SlotMap slots;
    if (d.contains("semi") && d["semi"].is_object()) {
      for (const auto& [k, v] : d["semi"].items()) {
        const std::string value = json_scalar_to_string(v);
        if (!is_absent_value(value)) slots[canonical_slot_name(k)] = value;
      }
    }
    if (d.contains("book") && d["book"].is_object()) {
      for (const auto& [k, v] : d["book"].items()) {
        if (k == "booked" || !v.is_string()) continue;
        const std::string value = v.get<std::string>();
        if (!is_absent_value(value)) slots["book_" + canonical_slot_name(k)] = value;
      }
    }
    if (!slots.empty()) out[text::fold(domain)] = std::move(slots);
  }
  return out;
}

inline std::vector<std::string> read_id_list(const std::filesystem::path& path) {
  std::vector<std::string> ids;
  for (auto& line : text::split_lines(io::read_file(path))) {
    auto t = text::trim(line);
    if (!t.empty()) ids.push_back(std::move(t));
  }
  return ids;
}

inline void require_file(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw IngestError("missing corpus file: " + p.string());
}

inline RawDialogue read_v21_dialogue(const std::string& id, const Json& d, const Json* acts_file) {
  RawDialogue raw;
  raw.id = id;
  raw.goal = parse_goal(d.value("goal", Json::object()));
  const Json& log = d.at("log");
  if (!log.is_array()) throw IngestError(id + ": log must be an array");
  if (log.size() % 2 != 0)
    throw IngestError(id + ": log has odd length " + std::to_string(log.size()) + " (user/system alternation broken)");
  std::string acts_key = id;
  if (acts_key.size() > 5 && acts_key.substr(acts_key.size() - 5) == ".json") acts_key.resize(acts_key.size() - 5);
  for (std::size_t i = 0; i + 1 < log.size(); i += 2) {
    RawTurn t;
    t.user = log[i].value("text", std::string());
    const Json& sys = log[i + 1];
    t.system = sys.value("text", std::string());
    t.belief = parse_metadata_belief(sys.value("metadata", Json::object()));
    if (sys.contains("dialog_act")) {
      t.acts = parse_acts(sys["dialog_act"]);
    } else if (acts_file && acts_file->contains(acts_key)) {
      const Json& per = (*acts_file)[acts_key];
      const std::string turn_key = std::to_string(i / 2 + 1);
      if (per.contains(turn_key)) t.acts = parse_acts(per[turn_key]);
    }
    raw.turns.push_back(std::move(t));
  }
  return raw;
}

inline RawCorpus ingest_v21(const std::filesystem::path& dir, CorpusVersion version) {
  const auto data_path = dir / "data.json";
  require_file(data_path);
  require_file(dir / "valListFile.txt");
  require_file(dir / "testListFile.txt");
  const Json data = io::read_json(data_path);
  if (!data.is_object()) throw IngestError(data_path.string() + ": expected an object keyed by dialogue id");

  std::optional<Json> acts_file;
  if (version == CorpusVersion::k20 && std::filesystem::exists(dir / "dialogue_acts.json"))
    acts_file = io::read_json(dir / "dialogue_acts.json");

  const auto val_ids = read_id_list(dir / "valListFile.txt");
  const auto test_ids = read_id_list(dir / "testListFile.txt");
  std::vector<std::string> train_ids;
  if (std::filesystem::exists(dir / "trainListFile.txt")) {
    train_ids = read_id_list(dir / "trainListFile.txt");
  } else {
    const std::set<std::string> held(val_ids.begin(), val_ids.end());
    const std::set<std::string> held_test(test_ids.begin(), test_ids.end());
    for (const auto& [id, _] : data.items()) {
      if (!held.count(id) && !held_test.count(id)) train_ids.push_back(id);
    }
  }

  auto collect = [&](const std::vector<std::string>& ids, const char* split) {
    std::vector<RawDialogue> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      if (!data.contains(id)) throw IngestError(std::string(split) + " list references " + id + ", absent from data.json");
      try {
        out.push_back(read_v21_dialogue(id, data[id], acts_file ? &*acts_file : nullptr));
      } catch (const nlohmann::json::exception& e) {
        throw IngestError(id + ": malformed dialogue: " + e.what());
      }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
  };
  return RawCorpus{collect(train_ids, "train"), collect(val_ids, "validation"), collect(test_ids, "test")};
}

inline RawDialogue read_v22_dialogue(const Json& d, const Json& acts, const Json* goals) {
  RawDialogue raw;
  raw.id = d.at("dialogue_id").get<std::string>();
  if (d.contains("goal")) raw.goal = parse_goal(d["goal"]);
  else if (goals && goals->contains(raw.id)) raw.goal = parse_goal((*goals)[raw.id].value("goal", Json::object()));
  const Json& turns = d.at("turns");
  if (turns.size() % 2 != 0)
    throw IngestError(raw.id + ": turn list has odd length " + std::to_string(turns.size()));
  const Json* dlg_acts = acts.contains(raw.id) ? &acts[raw.id] : nullptr;
  for (std::size_t i = 0; i + 1 < turns.size(); i += 2) {
    const Json& u = turns[i];
    const Json& s = turns[i + 1];
    if (text::fold(u.value("speaker", std::string())) != "user" ||
        text::fold(s.value("speaker", std::string())) != "system")
      throw IngestError(raw.id + ": turn " + std::to_string(i) + " breaks user/system alternation");
    RawTurn t;
    t.user = u.value("utterance", std::string());
    t.system = s.value("utterance", std::string());
    for (const auto& frame : u.value("frames", Json::array())) {
      const std::string service = text::fold(frame.value("service", std::string()));
      if (!frame.contains("state")) continue;
      SlotMap slots;
      const Json slot_values = frame["state"].value("slot_values", Json::object());
      for (const auto& [k, v] : slot_values.items()) {
        const std::string value = v.is_array() ? (v.empty() ? std::string() : json_scalar_to_string(v[0]))
                                               : json_scalar_to_string(v);
        if (!is_absent_value(value)) slots[canonical_slot_name(k)] = value;
      }
      if (!slots.empty()) t.belief[service] = std::move(slots);
    }
    const std::string turn_id = json_scalar_to_string(s.value("turn_id", Json(std::to_string(i + 1))));
    if (dlg_acts && dlg_acts->contains(turn_id)) {
      const Json& entry = (*dlg_acts)[turn_id];
      t.acts = parse_acts(entry.contains("dialog_act") ? entry["dialog_act"] : entry);
      // 2.2 uses "price" for ticket prices; the short 2.0/2.1 form means price range.
      for (auto& a : t.acts) {
        if (a.slot == "price") a.slot = "ticket";
      }
    }
    raw.turns.push_back(std::move(t));
  }
  return raw;
}

inline RawCorpus ingest_v22(const std::filesystem::path& dir) {
  for (const char* sub : {"train", "dev", "test"}) {
    if (!std::filesystem::is_directory(dir / sub)) throw IngestError("missing corpus directory: " + (dir / sub).string());
  }
  require_file(dir / "dialog_acts.json");
  const Json acts = io::read_json(dir / "dialog_acts.json");
  std::optional<Json> goals;
  if (std::filesystem::exists(dir / "data.json")) goals = io::read_json(dir / "data.json");

  auto read_split = [&](const char* sub) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir / sub)) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<RawDialogue> out;
    for (const auto& f : files) {
      const Json arr = io::read_json(f);
      for (const auto& d : arr) {
        try {
          out.push_back(read_v22_dialogue(d, acts, goals ? &*goals : nullptr));
        } catch (const nlohmann::json::exception& e) {
          throw IngestError(f.string() + ": malformed dialogue: " + e.what());
        }
      }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
  };
  return RawCorpus{read_split("train"), read_split("dev"), read_split("test")};
}

}  // namespace detail

inline RawCorpus ingest(const std::filesystem::path& raw_dir, CorpusVersion version = CorpusVersion::k21) {
  if (!std::filesystem::is_directory(raw_dir)) throw IngestError("corpus directory not found: " + raw_dir.string());
  if (version == CorpusVersion::k22) return detail::ingest_v22(raw_dir);
  return detail::ingest_v21(raw_dir, version);
}

// ---------------------------------------------------------------------------
// Delexicalization

struct DelexCandidate {
  std::string placeholder;  // e.g. "[value_name]"
  std::string value;        // surface value to replace

  bool operator==(const DelexCandidate&) const = default;
};

struct DelexReplacement {
  std::string placeholder;
  std::string original;
};

struct DelexResult {
  std::string text;
  std::vector<DelexReplacement> replacements;
};

/// The placeholder inventory. Delexicalized text never contains others.
inline const std::set<std::string>& placeholder_inventory() {
  static const std::set<std::string> kInventory = {
      "[value_address]", "[value_area]",  "[value_arrive]",   "[value_car]",        "[value_choice]",
      "[value_day]",     "[value_department]", "[value_departure]", "[value_destination]",
      "[value_duration]", "[value_food]", "[value_id]",       "[value_internet]",   "[value_leave]",
      "[value_name]",    "[value_open]",  "[value_parking]",  "[value_people]",     "[value_phone]",
      "[value_postcode]", "[value_price]", "[value_pricerange]", "[value_reference]", "[value_stars]",
      "[value_stay]",    "[value_time]",  "[value_type]"};
  return kInventory;
}

/// Dialogue-act slot names (2.0/2.1 short forms and 2.2 long forms) to placeholders.
inline std::optional<std::string> act_slot_placeholder(std::string_view act_slot) {
  static const std::map<std::string, std::string> kMap = {
      {"addr", "address"},        {"address", "address"},     {"area", "area"},
      {"arrive", "arrive"},       {"arriveby", "arrive"},     {"car", "car"},
      {"choice", "choice"},       {"day", "day"},             {"bookday", "day"},
      {"department", "department"}, {"depart", "departure"},  {"departure", "departure"},
      {"dest", "destination"},    {"destination", "destination"}, {"duration", "duration"},
      {"fee", "price"},           {"entrancefee", "price"},   {"ticket", "price"},
      {"food", "food"},           {"id", "id"},               {"trainid", "id"},
      {"internet", "internet"},   {"leave", "leave"},         {"leaveat", "leave"},
      {"name", "name"},           {"open", "open"},           {"openhours", "open"},
      {"parking", "parking"},     {"people", "people"},       {"bookpeople", "people"},
      {"phone", "phone"},         {"post", "postcode"},       {"postcode", "postcode"},
      {"price", "pricerange"},    {"pricerange", "pricerange"}, {"ref", "reference"},
      {"reference", "reference"}, {"stars", "stars"},         {"stay", "stay"},
      {"bookstay", "stay"},       {"time", "time"},           {"booktime", "time"},
      {"type", "type"}};
  const auto it = kMap.find(text::fold(act_slot));
  if (it == kMap.end()) return std::nullopt;
  return "[value_" + it->second + "]";
}

/// Entity attributes distinctive enough to delexicalize wherever they appear.
inline std::optional<std::string> entity_attribute_placeholder(std::string_view attribute) {
  static const std::map<std::string, std::string> kMap = {{"name", "name"},         {"address", "address"},
                                                          {"phone", "phone"},       {"postcode", "postcode"},
                                                          {"train_id", "id"},       {"trainid", "id"}};
  const auto it = kMap.find(std::string(attribute));
  if (it == kMap.end()) return std::nullopt;
  return "[value_" + it->second + "]";
}

/// Candidates from act annotations first, then from the entity record.
inline std::vector<DelexCandidate> delex_candidates(const Entity* entity, const std::vector<DialogAct>& acts) {
  std::vector<DelexCandidate> out;
  for (const auto& a : acts) {
    if (a.value.empty() || detail::is_absent_value(a.value) || text::trim_view(a.value) == "?") continue;
    if (auto ph = act_slot_placeholder(a.slot)) out.push_back({*ph, text::trim(a.value)});
  }
  if (entity) {
    for (const auto& [k, v] : *entity) {
      if (detail::is_absent_value(v)) continue;
      if (auto ph = entity_attribute_placeholder(k)) out.push_back({*ph, text::trim(v)});
    }
  }
  return out;
}

/// Leftmost-longest, case-insensitive, word-bounded replacement of candidate
/// values by their placeholders. Equal-length candidates tie by list order.
/// Text outside the matches is preserved verbatim.
inline DelexResult delexicalize_detailed(std::string_view response, const std::vector<DelexCandidate>& candidates) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!text::trim_view(candidates[i].value).empty()) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].value.size() > candidates[b].value.size();
  });

  DelexResult r;
  r.text.reserve(response.size());
  std::size_t pos = 0;
  while (pos < response.size()) {
    const bool left_ok = pos == 0 || !text::is_word_char(response[pos - 1]);
    bool matched = false;
    if (left_ok) {
      for (std::size_t idx : order) {
        const auto& c = candidates[idx];
        const std::size_t len = c.value.size();
        if (pos + len > response.size()) continue;
        if (!text::starts_with_ci(response.substr(pos), c.value)) continue;
        if (pos + len < response.size() && text::is_word_char(response[pos + len])) continue;
        r.text += c.placeholder;
        r.replacements.push_back({c.placeholder, std::string(response.substr(pos, len))});
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) r.text.push_back(response[pos++]);
  }
  return r;
}

inline std::string delexicalize(std::string_view response, const Entity* entity, const std::vector<DialogAct>& acts) {
  return delexicalize_detailed(response, delex_candidates(entity, acts)).text;
}

/// Fills placeholders back in order from a replacement record.
inline std::string relexicalize(std::string_view delex, const std::vector<DelexReplacement>& replacements) {
  std::string out;
  std::size_t pos = 0;
  for (const auto& r : replacements) {
    const auto at = delex.find(r.placeholder, pos);
    if (at == std::string_view::npos) throw Error("placeholder " + r.placeholder + " not found while relexicalizing");
    out.append(delex.substr(pos, at - pos));
    out += r.original;
    pos = at + r.placeholder.size();
  }
  out.append(delex.substr(pos));
  return out;
}

/// Every "[value_...]" token in the text.
inline std::vector<std::string> placeholders_in(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = s.find("[value_", pos)) != std::string_view::npos) {
    const auto end = s.find(']', pos);
    if (end == std::string_view::npos) break;
    out.emplace_back(s.substr(pos, end - pos + 1));
    pos = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Six-role dialogues

struct GoldTurn {
  std::string user;
  std::string domain;
  FunctionCall call;
  Observation observation = NoCallNeeded{};
  ActionFrame frame;
  bool multi_domain = false;

  bool operator==(const GoldTurn&) const = default;
};

struct SixRoleDialogue {
  std::string id;
  Goal goal;
  std::string system_prompt;
  std::vector<GoldTurn> turns;
  std::vector<std::string> dropped;  // gold annotations rejected by schema validation

  bool operator==(const SixRoleDialogue&) const = default;

  /// One leading system record, then user/domain/function/observation/assistant per turn.
  std::vector<TurnRecord> records() const {
    std::vector<TurnRecord> out;
    out.reserve(1 + 5 * turns.size());
    out.push_back({Role::kSystem, system_prompt});
    for (const auto& t : turns) {
      out.push_back({Role::kUser, t.user});
      out.push_back({Role::kDomain, t.domain});
      out.push_back({Role::kFunction, render_call(t.call)});
      out.push_back({Role::kObservation, render_observation(t.observation)});
      out.push_back({Role::kAssistant, render_frame(t.frame)});
    }
    return out;
  }
};

inline Json dialogue_to_json(const SixRoleDialogue& d) {
  Json j;
  j["id"] = d.id;
  j["goal"] = detail::goal_to_json(d.goal);
  j["system"] = d.system_prompt;
  Json turns = Json::array();
  for (const auto& t : d.turns) {
    Json tj;
    tj["user"] = t.user;
    tj["domain"] = t.domain;
    tj["function"] = call_to_json(t.call);
    tj["observation"] = observation_to_json(t.observation);
    tj["action"] = std::string(to_string(t.frame.action));
    tj["response"] = t.frame.response;
    tj["multi_domain"] = t.multi_domain;
    turns.push_back(std::move(tj));
  }
  j["turns"] = std::move(turns);
  j["dropped"] = d.dropped;
  return j;
}

inline SixRoleDialogue dialogue_from_json(const Json& j) {
  SixRoleDialogue d;
  try {
    d.id = j.at("id").get<std::string>();
    d.goal = detail::parse_goal(j.value("goal", Json::object()));
    d.system_prompt = j.value("system", std::string());
    for (const auto& tj : j.at("turns")) {
      GoldTurn t;
      t.user = tj.at("user").get<std::string>();
      t.domain = tj.at("domain").get<std::string>();
      t.call = call_from_json(tj.at("function"));
      t.observation = observation_from_json(tj.at("observation"));
      const auto label = tj.at("action").get<std::string>();
      const auto action = parse_action(label);
      if (!action) throw ParseError("unknown action label " + label);
      t.frame = ActionFrame{*action, tj.at("response").get<std::string>()};
      t.multi_domain = tj.value("multi_domain", false);
      d.turns.push_back(std::move(t));
    }
    d.dropped = j.value("dropped", std::vector<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed six-role dialogue: ") + e.what());
  }
  return d;
}

inline std::string dialogues_to_jsonl(const std::vector<SixRoleDialogue>& dialogues) {
  std::string out;
  for (const auto& d : dialogues) out += io::dump(dialogue_to_json(d)) + "\n";
  return out;
}

inline std::vector<SixRoleDialogue> dialogues_from_jsonl(std::string_view content, const std::string& source = "<jsonl>") {
  std::vector<SixRoleDialogue> out;
  std::size_t line_no = 0;
  for (const auto& line : text::split_lines(content)) {
    ++line_no;
    if (text::trim_view(line).empty()) continue;
    out.push_back(dialogue_from_json(io::parse_json(line, source + ":" + std::to_string(line_no))));
  }
  return out;
}

inline std::vector<SixRoleDialogue> load_dialogues(const std::filesystem::path& path) {
  return dialogues_from_jsonl(io::read_file(path), path.string());
}

namespace detail {

inline std::pair<std::string, bool> select_active_domain(const std::map<std::string, SlotMap>& prev,
                                                         const std::map<std::string, SlotMap>& cur,
                                                         const std::vector<DialogAct>& acts,
                                                         const std::string& prev_active,
                                                         const FunctionRegistry& registry) {
  static const SlotMap kEmpty;
  auto get = [](const std::map<std::string, SlotMap>& m, const std::string& d) -> const SlotMap& {
    const auto it = m.find(d);
    return it == m.end() ? kEmpty : it->second;
  };
  std::vector<std::string> changed;
  for (const auto& f : registry.functions()) {
    if (registry.is_null(f.name)) continue;
    if (get(prev, f.name) != get(cur, f.name)) changed.push_back(f.name);
  }
  if (!changed.empty()) return {changed.front(), changed.size() > 1};
  bool booking_only = false;
  for (const auto& a : acts) {
    if (a.domain == "general") continue;
    if (a.domain == "booking") {
      booking_only = true;
      continue;
    }
    if (const auto* spec = registry.resolve(a.domain); spec && !registry.is_null(spec->name)) return {spec->name, false};
  }
  if (booking_only && !prev_active.empty() && !registry.is_null(prev_active)) return {prev_active, false};
  return {registry.null_function().name, false};
}

}  // namespace detail

/// Converts one raw dialogue into the six-role format with recomputed
/// observations and delexicalized responses. Deterministic.
inline SixRoleDialogue convert(const RawDialogue& raw, const Resources& res) {
  const auto& registry = res.registry;
  SixRoleDialogue out;
  out.id = raw.id;
  out.goal = raw.goal;

  for (const auto& [domain, slots] : raw.goal) {
    (void)slots;
    if (!registry.resolve(domain)) throw ConversionError(raw.id + ": goal references unknown domain " + domain);
  }

  std::map<std::string, SlotMap> prev_belief;
  std::string prev_active;
  std::optional<FunctionCall> prev_call;
  std::map<std::string, Entity> last_entity;
  std::vector<std::string> selected;

  for (std::size_t i = 0; i < raw.turns.size(); ++i) {
    const RawTurn& rt = raw.turns[i];
    const std::string where = raw.id + " turn " + std::to_string(i + 1);
    for (const auto& [domain, slots] : rt.belief) {
      if (!slots.empty() && !registry.resolve(domain))
        throw ConversionError(where + ": belief references unknown domain " + domain);
    }
    for (const auto& a : rt.acts) {
      if (a.domain != "general" && a.domain != "booking" && !registry.resolve(a.domain))
        throw ConversionError(where + ": act references unknown domain " + a.domain);
    }

    GoldTurn gt;
    gt.user = text::trim(rt.user);
    auto [domain, multi] = detail::select_active_domain(prev_belief, rt.belief, rt.acts, prev_active, registry);
    gt.domain = domain;
    gt.multi_domain = multi;

    gt.call.name = domain;
    const FunctionSpec& spec = registry.at(domain);
    if (!registry.is_null(domain)) {
      if (const auto it = rt.belief.find(domain); it != rt.belief.end()) {
        for (const auto& [slot, value] : it->second) {
          const SlotSpec* s = spec.find_slot(slot);
          if (!s) {
            out.dropped.push_back(where + ": unknown slot " + domain + "." + slot);
            continue;
          }
          FunctionCall probe{domain, {{slot, value}}};
          const auto verdict = validate_function_call(probe, registry, res.normalizer);
          if (!verdict.ok()) {
            out.dropped.push_back(where + ": " + verdict.violations.front());
            continue;
          }
          gt.call.arguments[slot] = res.normalizer.normalize(*s, value);
        }
      }
      if (std::find(selected.begin(), selected.end(), domain) == selected.end()) selected.push_back(domain);
    }

    gt.observation = observe(prev_call ? &*prev_call : nullptr, gt.call, res.db, registry, res.normalizer,
                             res.sample_limit);

    const Entity* entity = nullptr;
    if (const auto* ec = std::get_if<EntityCount>(&gt.observation); ec && !ec->samples.empty()) {
      last_entity[domain] = ec->samples.front();
    }
    if (const auto it = last_entity.find(domain); it != last_entity.end()) entity = &it->second;

    std::vector<std::string> types;
    for (const auto& a : rt.acts) types.push_back(a.type);
    try {
      gt.frame.action = res.acts.map(types);
    } catch (const ConversionError& e) {
      throw ConversionError(where + ": " + e.what());
    }
    gt.frame.response = text::trim(delexicalize(rt.system, entity, rt.acts));
    if (gt.frame.response.empty()) throw ConversionError(where + ": empty system response");

    prev_belief = rt.belief;
    prev_active = domain;
    prev_call = gt.call;
    out.turns.push_back(std::move(gt));
  }

  out.system_prompt = build_e2e_system(res.templates, registry, res.catalog, selected);
  return out;
}

// ---------------------------------------------------------------------------
// Few-shot sampling

/// floor(fraction * n), robust to binary rounding of the fraction.
inline std::size_t fewshot_size(double fraction, std::size_t n) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("few-shot fraction must be in (0, 1]");
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

inline std::uint64_t fewshot_key(std::string_view id, std::uint64_t seed) {
  return text::mix64(text::fnv1a(id) ^ text::mix64(seed));
}

/// Uniform sample without replacement at dialogue granularity. Ranking is keyed
/// on a hash of (seed, id), so the result does not depend on input order; the
/// output is sorted by id.
template <class Dialogue>
std::vector<Dialogue> sample_fewshot(const std::vector<Dialogue>& split, double fraction, std::uint64_t seed) {
  const std::size_t k = fewshot_size(fraction, split.size());
  std::vector<std::pair<std::uint64_t, const Dialogue*>> ranked;
  ranked.reserve(split.size());
  for (const auto& d : split) ranked.emplace_back(fewshot_key(d.id, seed), &d);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second->id < b.second->id;
  });
  std::vector<Dialogue> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(*ranked[i].second);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

/// Stratified variant: per-stratum quotas by largest remainder so the total is
/// still floor(fraction * n); within a stratum the same hash ranking applies.
template <class Dialogue, class StratumFn>
std::vector<Dialogue> sample_fewshot_stratified(const std::vector<Dialogue>& split, double fraction,
                                                std::uint64_t seed, StratumFn&& stratum_of) {
  const std::size_t k = fewshot_size(fraction, split.size());
  std::map<std::string, std::vector<Dialogue>> strata;
  for (const auto& d : split) strata[stratum_of(d)].push_back(d);
  struct Quota {
    std::string name;
    std::size_t base;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [name, members] : strata) {
    const double exact = fraction * static_cast<double>(members.size());
    const auto base = static_cast<std::size_t>(std::floor(exact + 1e-9));
    quotas.push_back({name, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::vector<std::size_t> idx(quotas.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t i = 0; assigned < k && i < idx.size(); ++i, ++assigned) quotas[idx[i]].base += 1;

  std::vector<Dialogue> out;
  for (const auto& q : quotas) {
    const auto& members = strata[q.name];
    std::vector<std::pair<std::uint64_t, const Dialogue*>> ranked;
    for (const auto& d : members) ranked.emplace_back(fewshot_key(d.id, seed), &d);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first < b.first : a.second->id < b.second->id;
    });
    for (std::size_t i = 0; i < q.base && i < ranked.size(); ++i) out.push_back(*ranked[i].second);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

/// Stratum used by the stratified sampler: the sorted goal domains.
inline std::string goal_domain_signature(const SixRoleDialogue& d) {
  std::vector<std::string> names;
  for (const auto& [k, _] : d.goal) names.push_back(k);
  return names.empty() ? std::string("none") : text::join(names, "+");
}

}  // namespace spectod
