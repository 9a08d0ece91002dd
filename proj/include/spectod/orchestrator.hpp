#pragma once

// Per-turn loop: domain selection, state tracking, policy instruction and
// response generation, in that order. Parsers are total: every deviation from
// a clean completion becomes exactly one diagnostic instead of an abort.

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "spectod/corpus_ingest.hpp"
#include "spectod/db_engine.hpp"
#include "spectod/dialogue_core.hpp"
#include "spectod/llm_backend.hpp"
#include "spectod/prompt_builder.hpp"
#include "spectod/resources.hpp"

namespace spectod {

enum class DiagnosticKind { kRepair, kFallback };

inline std::string_view to_string(DiagnosticKind k) { return k == DiagnosticKind::kRepair ? "repair" : "fallback"; }

struct Diagnostic {
  std::string stage;  // DS, DST, PI, RG
  DiagnosticKind kind = DiagnosticKind::kRepair;
  std::string detail;

  bool operator==(const Diagnostic&) const = default;
};

template <class T>
struct Parsed {
  T value;
  std::optional<Diagnostic> diagnostic;

  bool clean() const { return !diagnostic.has_value(); }
};

inline constexpr std::string_view kFallbackResponse = "Is there anything else I can help you with?";

namespace detail {

/// Drops a leading "<|role|>" tag, which folded chat endpoints may echo.
inline std::string_view strip_role_tag(std::string_view s, std::string_view role) {
  s = text::trim_view(s);
  const std::string tag = "<|" + std::string(role) + "|>";
  if (s.substr(0, tag.size()) == tag) s = text::trim_view(s.substr(tag.size()));
  return s;
}

inline std::optional<Json> try_parse_object(std::string_view s) {
  const Json j = Json::parse(s, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

inline std::optional<std::string> strip_fence(std::string_view s) {
  const auto open = s.find("```");
  if (open == std::string_view::npos) return std::nullopt;
  auto body_start = s.find('\n', open);
  if (body_start == std::string_view::npos) return std::nullopt;
  ++body_start;
  const auto close = s.find("```", body_start);
  return std::string(s.substr(body_start, close == std::string_view::npos ? std::string_view::npos : close - body_start));
}

/// The first balanced {...} span, honouring string literals.
inline std::optional<std::string> first_balanced_object(std::string_view s) {
  const auto start = s.find('{');
  if (start == std::string_view::npos) return std::nullopt;
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = start; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return std::string(s.substr(start, i - start + 1));
  }
  return std::nullopt;
}

/// From the first '{': drop trailing commas, close an open string and any
/// unclosed brackets.
inline std::optional<std::string> balance_repair(std::string_view s) {
  const auto start = s.find('{');
  if (start == std::string_view::npos) return std::nullopt;
  std::string out;
  std::vector<char> stack;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = start; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      out.push_back(c);
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    if (c == '{' || c == '[') stack.push_back(c == '{' ? '}' : ']');
    if (c == '}' || c == ']') {
      while (!out.empty() && (text::is_space(out.back()) || out.back() == ',')) out.pop_back();
      if (stack.empty() || stack.back() != c) break;
      stack.pop_back();
      out.push_back(c);
      if (stack.empty()) break;
      continue;
    }
    out.push_back(c);
  }
  if (in_string) out.push_back('"');
  while (!out.empty() && (text::is_space(out.back()) || out.back() == ',' || out.back() == ':')) out.pop_back();
  while (!stack.empty()) {
    out.push_back(stack.back());
    stack.pop_back();
  }
  return out;
}

inline std::string single_to_double_quotes(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c == '\'') c = '"';
  }
  return out;
}

}  // namespace detail

/// The earliest registry name appearing as a word in the completion.
/// No match selects the null function with a fallback diagnostic.
inline Parsed<const FunctionSpec*> parse_domain(std::string_view completion, const FunctionRegistry& registry) {
  std::string_view body = detail::strip_role_tag(completion, "domain");
  std::string folded = text::fold(body);
  while (!folded.empty() && (folded.back() == '.' || folded.back() == '!')) folded.pop_back();
  if (const auto* exact = registry.resolve(folded)) return {exact, std::nullopt};

  const FunctionSpec* best = nullptr;
  std::size_t best_pos = std::string_view::npos;
  for (const auto& f : registry.functions()) {
    const auto pos = text::find_word_ci(body, f.name);
    if (pos == std::string_view::npos) continue;
    if (!best || pos < best_pos || (pos == best_pos && f.name.size() > best->name.size())) {
      best = &f;
      best_pos = pos;
    }
  }
  if (best) return {best, Diagnostic{"DS", DiagnosticKind::kRepair, "domain '" + best->name + "' found in free text"}};
  return {&registry.null_function(),
          Diagnostic{"DS", DiagnosticKind::kFallback, "no function name in completion; selected " + registry.null_name()}};
}

/// Extracts the function call through a repair ladder: strict parse, code-fence
/// strip, first balanced object, bracket-balance repair, quote repair. The
/// call is always for `selected`; unknown slots are dropped. Unrecoverable text
/// yields an empty-argument call with a fallback diagnostic.
inline Parsed<FunctionCall> parse_call(std::string_view completion, const FunctionSpec& selected) {
  const std::string_view body = detail::strip_role_tag(completion, "function");
  std::vector<std::string> notes;
  std::optional<Json> obj = detail::try_parse_object(body);
  if (!obj) {
    struct Step {
      const char* name;
      std::function<std::optional<std::string>(std::string_view)> fn;
    };
    const std::vector<Step> ladder = {
        {"fence-strip", detail::strip_fence},
        {"object-extract", detail::first_balanced_object},
        {"bracket-balance", detail::balance_repair},
        {"quote-repair",
         [](std::string_view s) -> std::optional<std::string> {
           if (s.find('\'') == std::string_view::npos) return std::nullopt;
           return detail::balance_repair(detail::single_to_double_quotes(s));
         }},
    };
    for (const auto& step : ladder) {
      const auto candidate = step.fn(body);
      if (!candidate) continue;
      obj = detail::try_parse_object(*candidate);
      if (!obj) {
        // A fenced body may itself carry prose around the object.
        if (auto inner = detail::first_balanced_object(*candidate)) obj = detail::try_parse_object(*inner);
      }
      if (obj) {
        notes.emplace_back(step.name);
        break;
      }
    }
  }

  auto fallback = [&](const std::string& why) {
    return Parsed<FunctionCall>{FunctionCall{selected.name, {}},
                                Diagnostic{"DST", DiagnosticKind::kFallback, why + "; using empty call on " + selected.name}};
  };
  if (!obj) return fallback("no JSON object recoverable");

  FunctionCall call;
  try {
    call = call_from_json(*obj);
  } catch (const ParseError& e) {
    return fallback(e.what());
  }
  if (!call.name.empty() && text::fold(call.name) != text::fold(selected.name))
    notes.push_back("name '" + call.name + "' replaced by " + selected.name);
  call.name = selected.name;
  for (auto it = call.arguments.begin(); it != call.arguments.end();) {
    if (!selected.find_slot(it->first)) {
      notes.push_back("dropped unknown slot " + it->first);
      it = call.arguments.erase(it);
    } else {
      it->second = text::trim(it->second);
      ++it;
    }
  }
  if (notes.empty()) return {std::move(call), std::nullopt};
  return {std::move(call), Diagnostic{"DST", DiagnosticKind::kRepair, text::join(notes, "; ")}};
}

/// Splits "Action: <kind>\nResponse: <text>". Unknown or missing labels map to
/// General with a diagnostic; an empty response is a ParseError.
inline Parsed<ActionFrame> parse_frame(std::string_view completion) {
  const std::string_view body = detail::strip_role_tag(completion, "assistant");
  std::optional<std::string> label;
  std::optional<std::string> response;
  std::vector<std::string> lines = text::split_lines(body);
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string_view line = text::trim_view(lines[i]);
    if (!label && !response && text::starts_with_ci(line, "action:")) {
      label = text::trim(line.substr(7));
    } else if (!response && text::starts_with_ci(line, "response:")) {
      std::string r = text::trim(line.substr(9));
      for (std::size_t j = i + 1; j < lines.size(); ++j) r += "\n" + lines[j];
      response = text::trim(r);
      break;
    } else {
      rest.push_back(lines[i]);
    }
  }

  std::vector<std::string> notes;
  if (!response) {
    response = text::trim(text::join(rest, "\n"));
    notes.emplace_back("no 'Response:' line");
  }
  if (response->empty()) throw ParseError("completion has no response text");

  Action action = Action::kGeneral;
  if (!label) {
    notes.emplace_back("no 'Action:' line; using General");
  } else if (const auto a = parse_action(*label)) {
    action = *a;
  } else {
    notes.push_back("unknown action '" + *label + "'; using General");
  }
  ActionFrame frame{action, *response};
  if (notes.empty()) return {std::move(frame), std::nullopt};
  return {std::move(frame), Diagnostic{"RG", DiagnosticKind::kRepair, text::join(notes, "; ")}};
}

// ---------------------------------------------------------------------------
// Turn loop

enum class RunMode { kPolicy, kGoldState };

inline std::string_view to_string(RunMode m) { return m == RunMode::kPolicy ? "policy" : "gold_state"; }

inline std::optional<RunMode> parse_run_mode(std::string_view s) {
  const std::string f = text::fold(s);
  if (f == "policy") return RunMode::kPolicy;
  if (f == "gold_state" || f == "gold-state") return RunMode::kGoldState;
  return std::nullopt;
}

struct TurnOptions {
  RunMode mode = RunMode::kPolicy;
  const GoldTurn* gold = nullptr;  // required in gold_state mode
  std::size_t context_limit = 4096;
  Decoding ds_decoding{16, 0.0, {}};
  Decoding dst_decoding{256, 0.0, {}};
  Decoding rg_decoding{256, 0.0, {}};
  std::chrono::milliseconds timeout{60000};
  bool abort_on_fallback = false;
  int dst_repair_retries = 0;  // re-ask with a repair instruction after a DST fallback
};

struct TurnOutcome {
  int index = 0;
  FunctionSpec selected;
  FunctionCall predicted_call;
  FunctionCall call;
  Observation observation = NoCallNeeded{};
  ActionFrame frame;
  std::vector<Diagnostic> diagnostics;
  std::vector<std::string> stages;  // execution order
  std::vector<std::string> backend_calls;  // task of every backend call, in order
  std::map<std::string, long long> latency_ms;
};

class TurnAborted : public Error {
 public:
  TurnAborted(const std::string& what, TurnOutcome partial) : Error(what), partial_(std::move(partial)) {}
  const TurnOutcome& partial() const { return partial_; }

 private:
  TurnOutcome partial_;
};

struct Dependencies {
  const Resources& resources;
  Backend& backend;
};

namespace detail {

inline GenerationResult timed_generate(Backend& backend, GenerationRequest req, TurnOutcome& out) {
  const auto start = std::chrono::steady_clock::now();
  out.backend_calls.push_back(req.tag.task);
  try {
    auto r = backend.generate(req);
    out.latency_ms[req.tag.task] += std::chrono::duration_cast<std::chrono::milliseconds>(
                                        std::chrono::steady_clock::now() - start)
                                        .count();
    return r;
  } catch (const BackendError& e) {
    out.diagnostics.push_back({req.tag.task, DiagnosticKind::kFallback, std::string("backend error: ") + e.what()});
    throw TurnAborted(std::string(req.tag.task) + " stage failed: " + e.what(), out);
  }
}

inline GenerationRequest make_request(ChatPayload payload, const Decoding& decoding, const TurnOptions& opt,
                                      const std::string& dialogue_id, int turn, const char* task) {
  GenerationRequest req;
  const std::size_t reserve = static_cast<std::size_t>(decoding.max_new_tokens);
  const std::size_t budget = opt.context_limit > reserve ? opt.context_limit - reserve : opt.context_limit;
  req.payload = truncate(payload, budget);
  req.decoding = decoding;
  req.timeout = opt.timeout;
  req.tag = RequestTag{dialogue_id, turn, task};
  return req;
}

inline void note(TurnOutcome& out, const std::optional<Diagnostic>& d, const TurnOptions& opt) {
  if (!d) return;
  out.diagnostics.push_back(*d);
  if (opt.abort_on_fallback && d->kind == DiagnosticKind::kFallback)
    throw TurnAborted(d->stage + " fallback with abort_on_fallback set: " + d->detail, out);
}

}  // namespace detail

/// Runs one turn and appends it to `session`.
inline TurnOutcome run_turn(DialogueSession& session, std::string_view user_utterance, const Dependencies& deps,
                            const TurnOptions& opt = {}) {
  const auto& res = deps.resources;
  TurnOutcome out;
  out.index = session.next_index();
  const std::string user = text::trim(user_utterance);
  if (opt.mode == RunMode::kGoldState && !opt.gold) throw Error("gold_state mode needs the gold turn");

  // Domain selection.
  out.stages.push_back("DS");
  auto ds = detail::timed_generate(
      deps.backend,
      detail::make_request(build_ds_prompt(res.templates, res.registry, session, user), opt.ds_decoding, opt,
                           session.dialogue_id, out.index, "DS"),
      out);
  auto domain = parse_domain(ds.text, res.registry);
  out.selected = *domain.value;
  detail::note(out, domain.diagnostic, opt);

  // State tracking as function-call generation.
  out.stages.push_back("DST");
  const ChatPayload dst_payload = build_dst_prompt(res.templates, out.selected, session, user);
  auto dst = detail::timed_generate(
      deps.backend, detail::make_request(dst_payload, opt.dst_decoding, opt, session.dialogue_id, out.index, "DST"), out);
  auto call = parse_call(dst.text, out.selected);
  for (int retry = 0; retry < opt.dst_repair_retries && call.diagnostic &&
                      call.diagnostic->kind == DiagnosticKind::kFallback;
       ++retry) {
    ChatPayload again = dst_payload;
    again.messages.push_back({Role::kFunction, dst.text});
    again.messages.push_back({Role::kUser, "The previous output was not a valid JSON function call. Reply with the JSON object only."});
    dst = detail::timed_generate(
        deps.backend, detail::make_request(again, opt.dst_decoding, opt, session.dialogue_id, out.index, "DST"), out);
    call = parse_call(dst.text, out.selected);
  }
  out.predicted_call = normalize_call(call.value, res.registry, res.normalizer);
  detail::note(out, call.diagnostic, opt);
  out.call = opt.mode == RunMode::kGoldState ? opt.gold->call : out.predicted_call;

  // Policy instruction: deterministic, never calls the backend.
  out.stages.push_back("PI");
  try {
    out.observation = observe(session.last_call(), out.call, res.db, res.registry, res.normalizer, res.sample_limit);
  } catch (const DatabaseError& e) {
    out.diagnostics.push_back({"PI", DiagnosticKind::kFallback, e.what()});
    throw TurnAborted(std::string("PI stage failed: ") + e.what(), out);
  }

  // Response generation.
  out.stages.push_back("RG");
  auto rg = detail::timed_generate(
      deps.backend,
      detail::make_request(build_rg_prompt(res.templates, res.catalog, out.call, out.observation, session, user),
                           opt.rg_decoding, opt, session.dialogue_id, out.index, "RG"),
      out);
  try {
    auto frame = parse_frame(rg.text);
    out.frame = frame.value;
    detail::note(out, frame.diagnostic, opt);
  } catch (const ParseError& e) {
    out.frame = ActionFrame{Action::kGeneral, std::string(kFallbackResponse)};
    detail::note(out, Diagnostic{"RG", DiagnosticKind::kFallback, e.what()}, opt);
  }

  SessionTurn st;
  st.index = out.index;
  st.user = user;
  st.domain = out.selected.name;
  st.predicted_call = out.predicted_call;
  st.call = out.call;
  st.observation = out.observation;
  st.frame = out.frame;
  session.append(std::move(st));
  return out;
}

// ---------------------------------------------------------------------------
// Transcripts

inline Json diagnostic_to_json(const Diagnostic& d) {
  Json j;
  j["stage"] = d.stage;
  j["kind"] = std::string(to_string(d.kind));
  j["detail"] = d.detail;
  return j;
}

/// One transcript line per turn. Latencies are only written when requested so
/// that replayed runs stay byte-identical.
inline Json transcript_line(const DialogueSession& session, const TurnOutcome& o, RunMode mode, bool with_latency) {
  const SessionTurn& t = session.turns.at(static_cast<std::size_t>(o.index - 1));
  Json j;
  j["dialogue_id"] = session.dialogue_id;
  j["turn"] = t.index;
  j["mode"] = std::string(to_string(mode));
  j["user"] = t.user;
  j["domain"] = t.domain;
  j["predicted_call"] = call_to_json(t.predicted_call);
  j["function"] = call_to_json(t.call);
  j["observation"] = observation_to_json(t.observation);
  j["action"] = std::string(to_string(t.frame.action));
  j["response"] = t.frame.response;
  Json diags = Json::array();
  for (const auto& d : o.diagnostics) diags.push_back(diagnostic_to_json(d));
  j["diagnostics"] = std::move(diags);
  if (with_latency) {
    Json lat = Json::object();
    for (const auto& [k, v] : o.latency_ms) lat[k] = v;
    j["latency_ms"] = std::move(lat);
  }
  return j;
}

struct TranscriptTurn {
  SessionTurn turn;
  std::vector<Diagnostic> diagnostics;
};

/// Sessions keyed by dialogue id, turns in file order.
inline std::map<std::string, DialogueSession> sessions_from_transcript(std::string_view content,
                                                                        std::map<std::string, std::size_t>* diagnostic_counts = nullptr) {
  std::map<std::string, DialogueSession> out;
  std::size_t line_no = 0;
  for (const auto& line : text::split_lines(content)) {
    ++line_no;
    if (text::trim_view(line).empty()) continue;
    const Json j = io::parse_json(line, "transcript:" + std::to_string(line_no));
    try {
      SessionTurn t;
      const std::string id = j.at("dialogue_id").get<std::string>();
      t.index = j.at("turn").get<int>();
      t.user = j.at("user").get<std::string>();
      t.domain = j.at("domain").get<std::string>();
      t.predicted_call = call_from_json(j.at("predicted_call"));
      t.call = call_from_json(j.at("function"));
      t.observation = observation_from_json(j.at("observation"));
      const auto action = parse_action(j.at("action").get<std::string>());
      if (!action) throw ParseError("unknown action in transcript line " + std::to_string(line_no));
      t.frame = ActionFrame{*action, j.at("response").get<std::string>()};
      auto& s = out[id];
      s.dialogue_id = id;
      s.append(std::move(t));
      if (diagnostic_counts) (*diagnostic_counts)[id] += j.value("diagnostics", Json::array()).size();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("transcript line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

struct DialogueRun {
  DialogueSession session;
  std::vector<TurnOutcome> outcomes;
  std::optional<std::string> aborted;  // message when a turn aborted
};

using TurnSink = std::function<void(const DialogueSession&, const TurnOutcome&)>;

/// Replays the gold user utterances through the loop. `sink` sees every
/// completed turn (and an aborted turn's partial outcome is kept in the run).
inline DialogueRun run_dialogue(const SixRoleDialogue& gold, const Dependencies& deps, RunMode mode,
                                const TurnSink& sink = {}, TurnOptions base = {}) {
  DialogueRun run;
  run.session.dialogue_id = gold.id;
  run.session.goal_ref = gold.id;
  for (const auto& gt : gold.turns) {
    TurnOptions opt = base;
    opt.mode = mode;
    opt.gold = &gt;
    try {
      run.outcomes.push_back(run_turn(run.session, gt.user, deps, opt));
    } catch (const TurnAborted& e) {
      run.outcomes.push_back(e.partial());
      run.aborted = e.what();
      break;
    }
    if (sink) sink(run.session, run.outcomes.back());
  }
  return run;
}

/// Completions the gold dialogue implies, for replay by MockBackend.
inline void add_gold_fixtures(MockBackend& mock, const SixRoleDialogue& gold) {
  for (std::size_t i = 0; i < gold.turns.size(); ++i) {
    const auto& t = gold.turns[i];
    const int turn = static_cast<int>(i) + 1;
    mock.add(gold.id, turn, "DS", t.domain);
    mock.add(gold.id, turn, "DST", render_call(t.call));
    mock.add(gold.id, turn, "RG", render_frame(t.frame));
  }
}

inline MockBackend gold_replay_backend(const std::vector<SixRoleDialogue>& dialogues) {
  MockBackend mock;
  for (const auto& d : dialogues) add_gold_fixtures(mock, d);
  return mock;
}

}  // namespace spectod
