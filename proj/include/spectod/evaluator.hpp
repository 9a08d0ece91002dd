#pragma once

// Benchmark metrics over predicted sessions and gold six-role dialogues:
// Inform, Success, BLEU, Combined, JGA, Fn_Se and the optional judge score.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "spectod/corpus_ingest.hpp"
#include "spectod/db_engine.hpp"
#include "spectod/dialogue_core.hpp"
#include "spectod/llm_backend.hpp"
#include "spectod/resources.hpp"

namespace spectod {

class EvalError : public Error {
 public:
  using Error::Error;
};

inline double combined(double bleu, double inform, double success) { return bleu + 0.5 * (inform + success); }

inline double percentage(std::size_t hits, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// BLEU

/// Lowercased tokens. "[value_x]" placeholders stay whole, word runs (with
/// inner apostrophes) are one token, every other non-space character is its own.
inline std::vector<std::string> bleu_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (text::is_space(c)) {
      ++i;
      continue;
    }
    if (c == '[' && s.substr(i, 7) == "[value_") {
      const auto end = s.find(']', i);
      if (end != std::string_view::npos) {
        out.push_back(text::to_lower(s.substr(i, end - i + 1)));
        i = end + 1;
        continue;
      }
    }
    if (text::is_word_char(c)) {
      std::size_t j = i;
      while (j < s.size() && (text::is_word_char(s[j]) || (s[j] == '\'' && j + 1 < s.size() && text::is_word_char(s[j + 1]))))
        ++j;
      out.push_back(text::to_lower(s.substr(i, j - i)));
      i = j;
      continue;
    }
    out.emplace_back(1, c);
    ++i;
  }
  return out;
}

inline constexpr double kBleuEpsilon = 0.1;

/// Corpus BLEU-4 on a 0-100 scale, one reference per hypothesis, uniform
/// weights and brevity penalty. An order with zero clipped matches contributes
/// kBleuEpsilon / total instead of zero. No hypothesis tokens, or no n-grams of
/// some order at all, gives 0.
inline double bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
  if (references.empty()) throw EvalError("bleu: empty reference set");
  if (hypotheses.size() != references.size()) throw EvalError("bleu: hypothesis and reference counts differ");
  constexpr std::size_t kMaxN = 4;
  std::array<std::size_t, kMaxN> matches{};
  std::array<std::size_t, kMaxN> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  for (std::size_t k = 0; k < hypotheses.size(); ++k) {
    const auto h = bleu_tokens(hypotheses[k]);
    const auto r = bleu_tokens(references[k]);
    hyp_len += h.size();
    ref_len += r.size();
    for (std::size_t n = 1; n <= kMaxN; ++n) {
      if (h.size() < n) continue;
      std::map<std::vector<std::string>, std::size_t> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[{r.begin() + i, r.begin() + i + n}];
      std::map<std::vector<std::string>, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + i, h.begin() + i + n}];
      for (const auto& [gram, c] : hyp_counts) {
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(c, it->second);
      }
      totals[n - 1] += h.size() - n + 1;
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxN; ++n) {
    if (totals[n] == 0) return 0.0;
    const double num = matches[n] ? static_cast<double>(matches[n]) : kBleuEpsilon;
    log_sum += std::log(num / static_cast<double>(totals[n]));
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(kMaxN));
}

// ---------------------------------------------------------------------------
// JGA and Fn_Se

/// Share of turns whose call (function plus every slot pair) equals gold.
/// Both sides are normalized unless `raw`.
inline double jga(const std::vector<FunctionCall>& predicted, const std::vector<FunctionCall>& gold,
                  const FunctionRegistry& registry, const Normalizer& normalizer, bool raw = false) {
  if (predicted.size() != gold.size()) throw EvalError("jga: turn counts differ");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool eq = raw ? predicted[i] == gold[i]
                        : normalize_call(predicted[i], registry, normalizer) == normalize_call(gold[i], registry, normalizer);
    hits += eq ? 1 : 0;
  }
  return percentage(hits, gold.size());
}

inline double fn_se(const std::vector<std::string>& predicted, const std::vector<std::string>& gold) {
  if (predicted.size() != gold.size()) throw EvalError("fn_se: turn counts differ");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += text::fold(predicted[i]) == text::fold(gold[i]) ? 1 : 0;
  return percentage(hits, gold.size());
}

// ---------------------------------------------------------------------------
// Inform and Success

/// Domains whose goals name a venue to be offered, and the placeholder that
/// marks the offer in a response.
inline const std::map<std::string, std::string>& inform_domains() {
  static const std::map<std::string, std::string> kDomains = {{"attraction", "[value_name]"},
                                                             {"hotel", "[value_name]"},
                                                             {"restaurant", "[value_name]"},
                                                             {"train", "[value_id]"}};
  return kDomains;
}

/// Goal requestables counted by Success, and their placeholders.
inline std::optional<std::string> requestable_placeholder(std::string_view slot) {
  static const std::map<std::string, std::string> kMap = {{"phone", "[value_phone]"},
                                                         {"address", "[value_address]"},
                                                         {"postcode", "[value_postcode]"},
                                                         {"reference", "[value_reference]"},
                                                         {"ref", "[value_reference]"},
                                                         {"id", "[value_id]"},
                                                         {"train_id", "[value_id]"},
                                                         {"trainid", "[value_id]"}};
  const auto it = kMap.find(text::fold(slot));
  if (it == kMap.end()) return std::nullopt;
  return it->second;
}

struct DomainOutcome {
  bool inform = true;
  bool success = true;
  std::vector<std::string> missing;  // placeholders never produced
  std::string note;
};

struct DialogueOutcome {
  std::string id;
  bool inform = true;
  bool success = true;
  std::map<std::string, DomainOutcome> domains;
};

/// Per dialogue: for every goal domain with a venue, the first entity matching
/// the final call the session made for that domain must satisfy the goal
/// constraints, and an offer placeholder must appear in a response of a turn
/// that selected the domain. Success additionally needs each tracked goal
/// requestable (and a booking reference when the goal books) in such a response.
inline DialogueOutcome inform_success_dialogue(const DialogueSession& session, const Goal& goal, const Resources& res) {
  DialogueOutcome out;
  out.id = session.dialogue_id;
  for (const auto& [domain, dg] : goal) {
    const FunctionSpec* spec = res.registry.resolve(domain);
    if (!spec || res.registry.is_null(spec->name)) continue;
    DomainOutcome dom;

    std::set<std::string> produced;
    const FunctionCall* final_call = nullptr;
    for (const auto& t : session.turns) {
      if (t.call.name == spec->name) final_call = &t.call;
      if (text::fold(t.domain) != spec->name) continue;
      for (const auto& p : placeholders_in(t.frame.response)) produced.insert(p);
    }

    const auto inf = inform_domains().find(spec->name);
    if (inf != inform_domains().end() && res.db.has_table(spec->name) && !res.db.is_synthetic(spec->name)) {
      if (!produced.count(inf->second)) {
        dom.inform = false;
        dom.note = "no offer " + inf->second;
      } else if (!final_call) {
        dom.inform = false;
        dom.note = "no call for domain";
      } else {
        FunctionCall goal_call{spec->name, {}};
        for (const auto& [slot, value] : dg.info) {
          if (spec->find_slot(slot)) goal_call.arguments[slot] = value;
        }
        const auto goal_venues =
            query(res.db, function_call_to_belief(goal_call, res.registry, res.normalizer), res.registry, res.normalizer);
        const auto offered =
            query(res.db, function_call_to_belief(*final_call, res.registry, res.normalizer), res.registry, res.normalizer);
        const bool hit = !offered.matches.empty() &&
                         std::find(goal_venues.matches.begin(), goal_venues.matches.end(), offered.matches.front()) !=
                             goal_venues.matches.end();
        if (!hit) {
          dom.inform = false;
          dom.note = offered.matches.empty() ? "final call matches no venue" : "offered venue violates goal";
        }
      }
    }

    std::set<std::string> required;
    for (const auto& r : dg.reqt) {
      if (auto ph = requestable_placeholder(r)) required.insert(*ph);
    }
    if (!dg.book.empty()) required.insert("[value_reference]");
    for (const auto& ph : required) {
      if (!produced.count(ph)) dom.missing.push_back(ph);
    }
    dom.success = dom.inform && dom.missing.empty();
    out.inform = out.inform && dom.inform;
    out.success = out.success && dom.success;
    out.domains[spec->name] = std::move(dom);
  }
  out.success = out.success && out.inform;
  return out;
}

// ---------------------------------------------------------------------------
// Judge score

struct Criterion {
  std::string name;
  std::string question;
};

inline std::vector<Criterion> load_criteria(const std::filesystem::path& path) {
  std::vector<Criterion> out;
  const Json j = io::read_json(path);
  try {
    for (const auto& c : j) out.push_back({c.at("name").get<std::string>(), c.at("question").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return out;
}

struct GptScoreReport {
  std::map<std::string, double> means;
  std::map<std::string, std::size_t> judged;
  std::map<std::string, std::size_t> failed;
  bool aborted = false;

  Json to_json() const {
    Json j;
    for (const auto& [k, v] : means) {
      j[k] = Json{{"mean", v}, {"judged", judged.at(k)}, {"failed", failed.at(k)}};
    }
    j["aborted"] = aborted;
    return j;
  }
};

class GptScoreAborted : public EvalError {
 public:
  GptScoreAborted(const std::string& what, GptScoreReport partial) : EvalError(what), partial_(std::move(partial)) {}
  const GptScoreReport& partial() const { return partial_; }

 private:
  GptScoreReport partial_;
};

struct GptScoreOptions {
  std::size_t max_responses = 0;  // 0: every turn
  double max_failure_rate = 0.5;
};

/// One judge call per (criterion, response). Failed judgments are excluded
/// from the mean and counted; a failure share above the limit aborts.
inline GptScoreReport gpt_score(const std::vector<DialogueSession>& sessions, Backend& backend,
                                const std::vector<Criterion>& criteria, const GptScoreOptions& opt = {}) {
  struct Item {
    const DialogueSession* s;
    const SessionTurn* t;
  };
  std::vector<Item> items;
  for (const auto& s : sessions) {
    for (const auto& t : s.turns) items.push_back({&s, &t});
  }
  if (opt.max_responses && items.size() > opt.max_responses) items.resize(opt.max_responses);

  GptScoreReport rep;
  for (const auto& c : criteria) {
    double sum = 0.0;
    std::size_t ok = 0;
    std::size_t bad = 0;
    for (const auto& it : items) {
      std::string context;
      for (const auto& prev : it.s->turns) {
        if (prev.index >= it.t->index) break;
        context += "User: " + prev.user + "\nSystem: " + prev.frame.response + "\n";
      }
      context += "User: " + it.t->user;
      try {
        sum += judge(backend, c.name, c.question, {context, it.t->frame.response},
                     RequestTag{it.s->dialogue_id, it.t->index, ""});
        ++ok;
      } catch (const BackendError&) {
        ++bad;
      } catch (const ParseError&) {
        ++bad;
      }
    }
    rep.means[c.name] = ok ? sum / static_cast<double>(ok) : 0.0;
    rep.judged[c.name] = ok;
    rep.failed[c.name] = bad;
    if (!items.empty() && static_cast<double>(bad) / static_cast<double>(items.size()) > opt.max_failure_rate) {
      rep.aborted = true;
      throw GptScoreAborted("judge failures for " + c.name + " exceed the configured limit", rep);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report

struct DialogueScores {
  std::string id;
  bool inform = false;
  bool success = false;
  std::size_t turns = 0;
  std::size_t jga_hits = 0;
  std::size_t fn_se_hits = 0;
};

struct EvalReport {
  double inform = 0.0;
  double success = 0.0;
  double bleu = 0.0;
  double combined = 0.0;
  double jga = 0.0;
  double fn_se = 0.0;
  std::size_t dialogues = 0;
  std::size_t turns = 0;
  std::vector<DialogueScores> per_dialogue;
  std::optional<GptScoreReport> gpt;

  Json to_json() const {
    Json j;
    j["inform"] = inform;
    j["success"] = success;
    j["bleu"] = bleu;
    j["combined"] = combined;
    j["jga"] = jga;
    j["fn_se"] = fn_se;
    j["dialogues"] = dialogues;
    j["turns"] = turns;
    if (gpt) j["gpt_score"] = gpt->to_json();
    Json per = Json::array();
    for (const auto& d : per_dialogue) {
      per.push_back(Json{{"id", d.id},
                         {"inform", d.inform},
                         {"success", d.success},
                         {"turns", d.turns},
                         {"jga_hits", d.jga_hits},
                         {"fn_se_hits", d.fn_se_hits}});
    }
    j["per_dialogue"] = std::move(per);
    return j;
  }

  std::string table() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "%-10s %8s\n%-10s %8.2f\n%-10s %8.2f\n%-10s %8.2f\n%-10s %8.2f\n%-10s %8.2f\n%-10s %8.2f\n",
                  "metric", "value", "Inform", inform, "Success", success, "BLEU", bleu, "Combined", combined, "JGA",
                  jga, "Fn_Se", fn_se);
    std::string out = buf;
    if (gpt) {
      for (const auto& [k, v] : gpt->means) {
        std::snprintf(buf, sizeof buf, "%-10s %8.2f\n", k.c_str(), v);
        out += buf;
      }
    }
    return out;
  }
};

struct EvalOptions {
  bool raw_jga = false;
};

/// Scores every gold dialogue against the session of the same id.
inline EvalReport evaluate(const std::map<std::string, DialogueSession>& sessions,
                           const std::vector<SixRoleDialogue>& gold, const Resources& res, const EvalOptions& opt = {}) {
  if (sessions.size() != gold.size()) {
    throw EvalError("session/gold mismatch: " + std::to_string(sessions.size()) + " sessions for " +
                    std::to_string(gold.size()) + " gold dialogues");
  }
  EvalReport rep;
  std::vector<std::string> hyps;
  std::vector<std::string> refs;
  std::vector<FunctionCall> pred_calls;
  std::vector<FunctionCall> gold_calls;
  std::vector<std::string> pred_domains;
  std::vector<std::string> gold_domains;
  std::size_t informs = 0;
  std::size_t successes = 0;

  for (const auto& g : gold) {
    const auto it = sessions.find(g.id);
    if (it == sessions.end()) throw EvalError("no session for gold dialogue " + g.id);
    const DialogueSession& s = it->second;
    if (s.turns.size() != g.turns.size()) {
      throw EvalError(g.id + ": session has " + std::to_string(s.turns.size()) + " turns, gold has " +
                      std::to_string(g.turns.size()));
    }
    DialogueScores ds;
    ds.id = g.id;
    ds.turns = g.turns.size();
    for (std::size_t i = 0; i < g.turns.size(); ++i) {
      const auto& p = s.turns[i];
      const auto& gt = g.turns[i];
      hyps.push_back(p.frame.response);
      refs.push_back(gt.frame.response);
      pred_calls.push_back(p.predicted_call);
      gold_calls.push_back(gt.call);
      pred_domains.push_back(p.domain);
      gold_domains.push_back(gt.domain);
      ds.jga_hits += jga({p.predicted_call}, {gt.call}, res.registry, res.normalizer, opt.raw_jga) > 0.0 ? 1 : 0;
      ds.fn_se_hits += fn_se({p.domain}, {gt.domain}) > 0.0 ? 1 : 0;
    }
    const auto io = inform_success_dialogue(s, g.goal, res);
    ds.inform = io.inform;
    ds.success = io.success;
    informs += io.inform ? 1 : 0;
    successes += io.success ? 1 : 0;
    rep.per_dialogue.push_back(std::move(ds));
  }

  rep.dialogues = gold.size();
  rep.turns = hyps.size();
  rep.inform = percentage(informs, gold.size());
  rep.success = percentage(successes, gold.size());
  rep.bleu = hyps.empty() ? 0.0 : bleu(hyps, refs);
  rep.combined = combined(rep.bleu, rep.inform, rep.success);
  rep.jga = jga(pred_calls, gold_calls, res.registry, res.normalizer, opt.raw_jga);
  rep.fn_se = fn_se(pred_domains, gold_domains);
  return rep;
}

/// Gold dialogues as sessions, for self-consistency checks.
inline std::map<std::string, DialogueSession> sessions_from_gold(const std::vector<SixRoleDialogue>& gold) {
  std::map<std::string, DialogueSession> out;
  for (const auto& g : gold) {
    DialogueSession s;
    s.dialogue_id = g.id;
    s.goal_ref = g.id;
    for (const auto& t : g.turns) {
      SessionTurn st;
      st.index = s.next_index();
      st.user = t.user;
      st.domain = t.domain;
      st.predicted_call = t.call;
      st.call = t.call;
      st.observation = t.observation;
      st.frame = t.frame;
      s.append(std::move(st));
    }
    out[g.id] = std::move(s);
  }
  return out;
}

}  // namespace spectod
