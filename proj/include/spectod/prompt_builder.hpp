#pragma once

// Prompt payloads for the three generated tasks: domain selection, state
// tracking (function-call generation) and response generation. Each task sees
// only the history roles its context definition carries.

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "spectod/db_engine.hpp"
#include "spectod/dialogue_core.hpp"
#include "spectod/schema_registry.hpp"
#include "spectod/text.hpp"

namespace spectod {

class TemplateError : public Error {
 public:
  using Error::Error;
};

class PromptOverflow : public Error {
 public:
  using Error::Error;
};

enum class TemplateTask { kDs, kDst, kRg, kE2e };

inline std::string_view to_string(TemplateTask t) {
  switch (t) {
    case TemplateTask::kDs: return "DS";
    case TemplateTask::kDst: return "DST";
    case TemplateTask::kRg: return "RG";
    case TemplateTask::kE2e: return "E2E";
  }
  return "DS";
}

inline std::set<std::string> expected_placeholders(TemplateTask t) {
  switch (t) {
    case TemplateTask::kDs: return {"functions"};
    case TemplateTask::kDst: return {"function_spec"};
    case TemplateTask::kRg: return {"actions", "function_call"};
    case TemplateTask::kE2e: return {"functions", "function_specs", "actions"};
  }
  return {};
}

/// Instruction text with `{name}` placeholders; `{{` and `}}` are literal braces.
class PromptTemplate {
 public:
  PromptTemplate() = default;

  PromptTemplate(TemplateTask task, std::string text) : task_(task), text_(std::move(text)) {
    const auto found = placeholders(text_);
    const auto want = expected_placeholders(task_);
    if (found != want) {
      std::vector<std::string> f(found.begin(), found.end());
      std::vector<std::string> w(want.begin(), want.end());
      throw TemplateError(std::string(to_string(task_)) + " template placeholders {" + text::join(f, ", ") +
                          "} do not match the required set {" + text::join(w, ", ") + "}");
    }
  }

  TemplateTask task() const { return task_; }
  const std::string& text() const { return text_; }

  static std::set<std::string> placeholders(std::string_view t) {
    std::set<std::string> out;
    scan(t, [&](std::string_view name) {
      out.emplace(name);
      return std::string();
    });
    return out;
  }

  std::string instantiate(const std::map<std::string, std::string>& values) const {
    return scan(text_, [&](std::string_view name) {
      const auto it = values.find(std::string(name));
      if (it == values.end()) throw TemplateError("no value for placeholder {" + std::string(name) + "}");
      return it->second;
    });
  }

 private:
  template <class Fn>
  static std::string scan(std::string_view t, Fn&& on_placeholder) {
    std::string out;
    out.reserve(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const char c = t[i];
      if ((c == '{' || c == '}') && i + 1 < t.size() && t[i + 1] == c) {
        out.push_back(c);
        ++i;
        continue;
      }
      if (c == '{') {
        std::size_t j = i + 1;
        while (j < t.size() && (std::islower(static_cast<unsigned char>(t[j])) || t[j] == '_')) ++j;
        if (j < t.size() && t[j] == '}' && j > i + 1) {
          out += on_placeholder(t.substr(i + 1, j - i - 1));
          i = j;
          continue;
        }
      }
      out.push_back(c);
    }
    return out;
  }

  TemplateTask task_ = TemplateTask::kDs;
  std::string text_;
};

struct TemplateSet {
  PromptTemplate ds;
  PromptTemplate dst;
  PromptTemplate rg;
  PromptTemplate e2e;
};

/// Reads ds.txt, dst.txt, rg.txt and e2e.txt (UTF-8) from `dir`.
inline TemplateSet load_templates(const std::filesystem::path& dir) {
  auto read = [&](const char* file, TemplateTask task) {
    std::string t = io::read_file(dir / file);
    while (!t.empty() && (t.back() == '\n' || t.back() == '\r')) t.pop_back();
    return PromptTemplate(task, std::move(t));
  };
  return TemplateSet{read("ds.txt", TemplateTask::kDs), read("dst.txt", TemplateTask::kDst),
                     read("rg.txt", TemplateTask::kRg), read("e2e.txt", TemplateTask::kE2e)};
}

/// One description per action kind; rendered as a bullet list in fixed kind order.
class ActionCatalog {
 public:
  ActionCatalog() = default;

  explicit ActionCatalog(std::map<Action, std::string> descriptions) : descriptions_(std::move(descriptions)) {
    for (Action a : kAllActions) {
      if (!descriptions_.count(a))
        throw TemplateError("action catalog is missing " + std::string(to_string(a)));
    }
  }

  static ActionCatalog load(const std::filesystem::path& path) {
    const Json doc = io::read_json(path);
    std::map<Action, std::string> d;
    for (const auto& [label, desc] : doc.items()) {
      const auto a = parse_action(label);
      if (!a) throw TemplateError(path.string() + ": unknown action label " + label);
      d[*a] = desc.get<std::string>();
    }
    return ActionCatalog(std::move(d));
  }

  const std::string& description(Action a) const { return descriptions_.at(a); }

  std::string render() const {
    std::string out;
    for (Action a : kAllActions) {
      if (!out.empty()) out += '\n';
      out += "- " + std::string(to_string(a)) + ": " + descriptions_.at(a);
    }
    return out;
  }

 private:
  std::map<Action, std::string> descriptions_;
};

struct ChatPayload {
  std::vector<TurnRecord> messages;

  bool operator==(const ChatPayload&) const = default;
};

inline Json payload_to_json(const ChatPayload& p) {
  Json arr = Json::array();
  for (const auto& m : p.messages) {
    Json j;
    j["role"] = std::string(to_string(m.role));
    j["content"] = m.content;
    arr.push_back(std::move(j));
  }
  return arr;
}

/// Byte-stable text form used for golden files and tracing.
inline std::string render_payload(const ChatPayload& p) {
  std::string out;
  for (const auto& m : p.messages) {
    out += "<|" + std::string(to_string(m.role)) + "|>\n" + m.content + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Builders

inline ChatPayload build_ds_prompt(const TemplateSet& templates, const FunctionRegistry& registry,
                                   const DialogueSession& session, std::string_view current_user) {
  ChatPayload p;
  p.messages.push_back({Role::kSystem, templates.ds.instantiate({{"functions", render_function_list(registry)}})});
  for (const auto& t : session.turns) {
    p.messages.push_back({Role::kUser, t.user});
    p.messages.push_back({Role::kDomain, t.domain});
    p.messages.push_back({Role::kAssistant, t.frame.response});
  }
  p.messages.push_back({Role::kUser, std::string(current_user)});
  return p;
}

inline ChatPayload build_dst_prompt(const TemplateSet& templates, const FunctionSpec& selected,
                                    const DialogueSession& session, std::string_view current_user) {
  ChatPayload p;
  p.messages.push_back({Role::kSystem, templates.dst.instantiate({{"function_spec", render_spec(selected)}})});
  for (const auto& t : session.turns) {
    p.messages.push_back({Role::kUser, t.user});
    p.messages.push_back({Role::kFunction, render_call(t.call)});
    p.messages.push_back({Role::kAssistant, t.frame.response});
  }
  p.messages.push_back({Role::kUser, std::string(current_user)});
  return p;
}

inline ChatPayload build_rg_prompt(const TemplateSet& templates, const ActionCatalog& catalog,
                                   const FunctionCall& call, const Observation& obs,
                                   const DialogueSession& session, std::string_view current_user) {
  ChatPayload p;
  p.messages.push_back({Role::kSystem, templates.rg.instantiate({{"actions", catalog.render()},
                                                                  {"function_call", render_call(call)}})});
  for (const auto& t : session.turns) {
    p.messages.push_back({Role::kUser, t.user});
    p.messages.push_back({Role::kFunction, render_call(t.call)});
    p.messages.push_back({Role::kObservation, render_observation(t.observation)});
    p.messages.push_back({Role::kAssistant, render_frame(t.frame)});
  }
  p.messages.push_back({Role::kUser, std::string(current_user)});
  p.messages.push_back({Role::kFunction, render_call(call)});
  p.messages.push_back({Role::kObservation, render_observation(obs)});
  return p;
}

// ---------------------------------------------------------------------------
// Context budget

using TokenCounter = std::function<std::size_t(std::string_view)>;

/// Default estimate: one token per four characters, rounded up.
inline std::size_t estimate_tokens(std::string_view s) { return (s.size() + 3) / 4; }

inline std::size_t payload_tokens(const ChatPayload& p, const TokenCounter& counter = estimate_tokens) {
  std::size_t n = 0;
  for (const auto& m : p.messages) n += counter(m.content);
  return n;
}

/// Drops the oldest whole turn groups until the payload fits. The system
/// message and the final block (from the last user message on) are never
/// dropped; the surviving history is a suffix of the original.
inline ChatPayload truncate(const ChatPayload& payload, std::size_t budget,
                            const TokenCounter& counter = estimate_tokens) {
  if (payload.messages.empty() || payload.messages.front().role != Role::kSystem)
    throw PromptOverflow("payload must start with a system message");
  const std::size_t system_tokens = counter(payload.messages.front().content);
  if (budget <= system_tokens)
    throw PromptOverflow("budget " + std::to_string(budget) + " does not exceed the system message (" +
                         std::to_string(system_tokens) + " tokens)");

  std::size_t final_start = payload.messages.size();
  for (std::size_t i = payload.messages.size(); i-- > 1;) {
    if (payload.messages[i].role == Role::kUser) {
      final_start = i;
      break;
    }
  }
  // Group boundaries: every history user message opens a group.
  std::vector<std::size_t> group_starts;
  for (std::size_t i = 1; i < final_start; ++i) {
    if (payload.messages[i].role == Role::kUser || group_starts.empty()) group_starts.push_back(i);
  }

  std::size_t mandatory = system_tokens;
  for (std::size_t i = final_start; i < payload.messages.size(); ++i) mandatory += counter(payload.messages[i].content);
  if (mandatory > budget)
    throw PromptOverflow("mandatory messages need " + std::to_string(mandatory) + " tokens, budget is " +
                         std::to_string(budget));

  std::size_t total = payload_tokens(payload, counter);
  std::size_t keep_from = group_starts.empty() ? final_start : group_starts.front();
  for (std::size_t g = 0; g < group_starts.size() && total > budget; ++g) {
    const std::size_t end = g + 1 < group_starts.size() ? group_starts[g + 1] : final_start;
    for (std::size_t i = group_starts[g]; i < end; ++i) total -= counter(payload.messages[i].content);
    keep_from = end;
  }

  ChatPayload out;
  out.messages.push_back(payload.messages.front());
  for (std::size_t i = keep_from; i < payload.messages.size(); ++i) out.messages.push_back(payload.messages[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Whole-dialogue system message used for training samples: the end-to-end
// task, the function list, the selected function specifications and the
// action descriptions.

inline std::string build_e2e_system(const TemplateSet& templates, const FunctionRegistry& registry,
                                    const ActionCatalog& catalog, const std::vector<std::string>& selected) {
  std::string specs;
  for (const auto& name : selected) {
    if (!specs.empty()) specs += '\n';
    specs += render_spec(registry.at(name));
  }
  return templates.e2e.instantiate(
      {{"functions", render_function_list(registry)}, {"function_specs", specs}, {"actions", catalog.render()}});
}

}  // namespace spectod
