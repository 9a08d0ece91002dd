#pragma once

// Fine-tuning data: six-role chat JSONL with per-message loss weights, and the
// manifest the trainer reads next to it.

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spectod/corpus_ingest.hpp"
#include "spectod/db_engine.hpp"
#include "spectod/dialogue_core.hpp"
#include "spectod/prompt_builder.hpp"

namespace spectod {

class ExportError : public Error {
 public:
  using Error::Error;
};

/// Domain selection, function calls and responses are trained; everything else is context.
inline int loss_weight(Role role) {
  return role == Role::kDomain || role == Role::kFunction || role == Role::kAssistant ? 1 : 0;
}

struct MaskedMessage {
  Role role = Role::kSystem;
  std::string content;
  int loss = 0;

  bool operator==(const MaskedMessage&) const = default;
};

struct TrainingSample {
  std::string id;
  std::vector<MaskedMessage> messages;

  bool operator==(const TrainingSample&) const = default;
};

enum class OverflowPolicy { kSplit, kSkip };

inline std::optional<OverflowPolicy> parse_overflow_policy(std::string_view s) {
  const std::string f = text::fold(s);
  if (f == "split") return OverflowPolicy::kSplit;
  if (f == "skip") return OverflowPolicy::kSkip;
  return std::nullopt;
}

struct ExportOptions {
  std::size_t context_limit = 4096;
  OverflowPolicy overflow = OverflowPolicy::kSplit;
  TokenCounter counter = estimate_tokens;
};

inline std::vector<MaskedMessage> mask_records(const std::vector<TurnRecord>& records) {
  std::vector<MaskedMessage> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.role, r.content, loss_weight(r.role)});
  return out;
}

inline std::size_t sample_tokens(const std::vector<MaskedMessage>& messages, const TokenCounter& counter) {
  std::size_t n = 0;
  for (const auto& m : messages) n += counter(m.content);
  return n;
}

/// One sample per dialogue. A dialogue over the context limit is either cut
/// into consecutive turn windows (each keeping the system record, ids suffixed
/// "#k") or skipped, per `opt.overflow`. An empty result means skipped.
inline std::vector<TrainingSample> export_dialogue(const SixRoleDialogue& d, const ExportOptions& opt = {}) {
  const auto all = mask_records(d.records());
  if (sample_tokens(all, opt.counter) <= opt.context_limit) return {TrainingSample{d.id, all}};
  if (opt.overflow == OverflowPolicy::kSkip) return {};

  const MaskedMessage& system = all.front();
  const std::size_t system_tokens = opt.counter(system.content);
  std::vector<TrainingSample> out;
  TrainingSample cur{d.id + "#" + std::to_string(1), {system}};
  std::size_t cur_tokens = system_tokens;
  constexpr std::size_t kPerTurn = 5;
  for (std::size_t t = 0; t < d.turns.size(); ++t) {
    const auto first = all.begin() + static_cast<std::ptrdiff_t>(1 + t * kPerTurn);
    const std::vector<MaskedMessage> turn(first, first + kPerTurn);
    const std::size_t turn_tokens = sample_tokens(turn, opt.counter);
    if (system_tokens + turn_tokens > opt.context_limit) return {};  // a single turn cannot fit
    if (cur_tokens + turn_tokens > opt.context_limit) {
      out.push_back(std::move(cur));
      cur = TrainingSample{d.id + "#" + std::to_string(out.size() + 1), {system}};
      cur_tokens = system_tokens;
    }
    cur.messages.insert(cur.messages.end(), turn.begin(), turn.end());
    cur_tokens += turn_tokens;
  }
  if (cur.messages.size() > 1) out.push_back(std::move(cur));
  return out;
}

inline Json sample_to_json(const TrainingSample& s) {
  Json msgs = Json::array();
  for (const auto& m : s.messages) {
    Json j;
    j["role"] = std::string(to_string(m.role));
    j["content"] = m.content;
    j["loss"] = m.loss;
    msgs.push_back(std::move(j));
  }
  Json j;
  j["id"] = s.id;
  j["messages"] = std::move(msgs);
  return j;
}

inline TrainingSample sample_from_json(const Json& j) {
  try {
    TrainingSample s;
    s.id = j.at("id").get<std::string>();
    for (const auto& m : j.at("messages")) {
      const auto role = parse_role(m.at("role").get<std::string>());
      if (!role) throw ParseError("unknown role " + m.at("role").get<std::string>());
      const int loss = m.at("loss").get<int>();
      if (loss != 0 && loss != 1) throw ParseError("loss must be 0 or 1");
      s.messages.push_back({*role, m.at("content").get<std::string>(), loss});
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("export sample: ") + e.what());
  }
}

inline std::vector<TrainingSample> samples_from_jsonl(std::string_view content) {
  std::vector<TrainingSample> out;
  std::size_t line_no = 0;
  for (const auto& line : text::split_lines(content)) {
    ++line_no;
    if (text::trim_view(line).empty()) continue;
    out.push_back(sample_from_json(io::parse_json(line, "export:" + std::to_string(line_no))));
  }
  return out;
}

/// Strict inverse of render_frame.
inline ActionFrame frame_from_text(std::string_view s) {
  constexpr std::string_view kAction = "Action: ";
  constexpr std::string_view kResponse = "\nResponse: ";
  const auto nl = s.find(kResponse);
  if (s.substr(0, kAction.size()) != kAction || nl == std::string_view::npos)
    throw ParseError("assistant content is not an action frame");
  const auto action = parse_action(s.substr(kAction.size(), nl - kAction.size()));
  if (!action) throw ParseError("unknown action in assistant content");
  return {*action, std::string(s.substr(nl + kResponse.size()))};
}

/// Rebuilds the dialogue content of an unsplit sample. Goal, dropped
/// annotations and the multi-domain flag are not part of training data.
inline SixRoleDialogue dialogue_from_sample(const TrainingSample& s) {
  const auto& m = s.messages;
  if (m.empty() || m.front().role != Role::kSystem || (m.size() - 1) % 5 != 0)
    throw ParseError(s.id + ": sample does not follow the six-role turn grammar");
  SixRoleDialogue d;
  d.id = s.id;
  d.system_prompt = m.front().content;
  constexpr std::array<Role, 5> kOrder = {Role::kUser, Role::kDomain, Role::kFunction, Role::kObservation,
                                          Role::kAssistant};
  for (std::size_t i = 1; i < m.size(); i += 5) {
    for (std::size_t k = 0; k < 5; ++k) {
      if (m[i + k].role != kOrder[k]) throw ParseError(s.id + ": unexpected role order");
      if (m[i + k].loss != loss_weight(m[i + k].role)) throw ParseError(s.id + ": loss weight violates role mask");
    }
    GoldTurn t;
    t.user = m[i].content;
    t.domain = m[i + 1].content;
    t.call = call_from_json(io::parse_json(m[i + 2].content, s.id + " function"));
    t.observation = parse_observation_text(m[i + 3].content);
    t.frame = frame_from_text(m[i + 4].content);
    d.turns.push_back(std::move(t));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestOverride {
  std::string key;
  Json value;
  std::string source;  // e.g. "flag", "env", "config:<path>"
};

struct TrainingManifest {
  int lora_rank = 32;
  int lora_alpha = 16;
  std::vector<std::string> target_modules = {"q_proj", "v_proj"};
  int epochs = 4;
  double learning_rate = 3e-4;
  int global_batch_size = 8;
  int context_limit = 4096;
  std::map<std::string, double> role_loss_weights = {{"domain", 1.0}, {"function", 1.0}, {"assistant", 1.0}};
  std::string train_file = "train.jsonl";
  std::size_t samples = 0;
  std::vector<ManifestOverride> overrides;

  /// Applies one override by key and records where it came from.
  void apply(const std::string& key, const Json& value, const std::string& source) {
    try {
      if (key == "lora_rank") lora_rank = value.get<int>();
      else if (key == "lora_alpha") lora_alpha = value.get<int>();
      else if (key == "target_modules") target_modules = value.get<std::vector<std::string>>();
      else if (key == "epochs") epochs = value.get<int>();
      else if (key == "learning_rate") learning_rate = value.get<double>();
      else if (key == "global_batch_size") global_batch_size = value.get<int>();
      else if (key == "context_limit") context_limit = value.get<int>();
      else if (text::starts_with_ci(key, "role_loss_weights.")) {
        const std::string role = key.substr(18);
        if (!role_loss_weights.count(role)) throw ExportError("no loss weight for role " + role);
        role_loss_weights[role] = value.get<double>();
      } else {
        throw ExportError("unknown manifest key " + key);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ExportError("manifest override " + key + ": " + e.what());
    }
    overrides.push_back({key, value, source});
  }

  Json to_json() const {
    Json j;
    j["lora_rank"] = lora_rank;
    j["lora_alpha"] = lora_alpha;
    j["target_modules"] = target_modules;
    j["epochs"] = epochs;
    j["learning_rate"] = learning_rate;
    j["global_batch_size"] = global_batch_size;
    j["context_limit"] = context_limit;
    Json w = Json::object();
    for (const char* role : {"domain", "function", "assistant"}) w[role] = role_loss_weights.at(role);
    j["role_loss_weights"] = std::move(w);
    j["train_file"] = train_file;
    j["samples"] = samples;
    Json ov = Json::array();
    for (const auto& o : overrides) ov.push_back(Json{{"key", o.key}, {"value", o.value}, {"source", o.source}});
    j["overrides"] = std::move(ov);
    return j;
  }
};

struct ExportReport {
  std::size_t dialogues = 0;
  std::size_t samples = 0;
  std::size_t skipped = 0;
  std::size_t split = 0;  // dialogues emitted as several windows
  double masked_token_share = 0.0;  // share of estimated tokens carrying loss 1
  std::vector<std::string> skipped_ids;

  Json to_json() const {
    Json j;
    j["dialogues"] = dialogues;
    j["samples"] = samples;
    j["skipped"] = skipped;
    j["split"] = split;
    j["masked_token_share"] = masked_token_share;
    j["skipped_ids"] = skipped_ids;
    return j;
  }
};

struct ExportResult {
  std::string jsonl;
  ExportReport report;
};

/// Pure part of export_split: JSONL text and report, ordered by dialogue id.
inline ExportResult export_samples(std::vector<SixRoleDialogue> dialogues, const ExportOptions& opt = {}) {
  std::sort(dialogues.begin(), dialogues.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  ExportResult r;
  std::size_t trained = 0;
  std::size_t total = 0;
  for (const auto& d : dialogues) {
    ++r.report.dialogues;
    const auto samples = export_dialogue(d, opt);
    if (samples.empty()) {
      ++r.report.skipped;
      r.report.skipped_ids.push_back(d.id);
      continue;
    }
    if (samples.size() > 1) ++r.report.split;
    for (const auto& s : samples) {
      for (const auto& m : s.messages) {
        const std::size_t n = opt.counter(m.content);
        total += n;
        if (m.loss) trained += n;
      }
      r.jsonl += io::dump(sample_to_json(s));
      r.jsonl += '\n';
      ++r.report.samples;
    }
  }
  r.report.masked_token_share = total ? static_cast<double>(trained) / static_cast<double>(total) : 0.0;
  return r;
}

/// Writes <out>/train.jsonl, manifest.json and export_report.json.
inline ExportReport export_split(const std::vector<SixRoleDialogue>& dialogues, const std::filesystem::path& out_dir,
                                 TrainingManifest manifest = {}, ExportOptions opt = {}) {
  opt.context_limit = static_cast<std::size_t>(manifest.context_limit);
  auto result = export_samples(dialogues, opt);
  manifest.samples = result.report.samples;
  io::write_file(out_dir / manifest.train_file, result.jsonl);
  io::write_file(out_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
  io::write_file(out_dir / "export_report.json", result.report.to_json().dump(2) + "\n");
  return result.report;
}

}  // namespace spectod
