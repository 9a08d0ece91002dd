#pragma once

// Independent reference implementations used to cross-check the library.
// Nothing here calls into the code under test except for plain data types.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <spectod/spectod.hpp>

namespace oracle {

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// ---------------------------------------------------------------------------
// Database lookup as a plain linear scan. Constraint values are compared after
// trimming and lowercasing; leave_at/arrive_by compare "HH:MM" as minutes.

inline std::optional<int> minutes(const std::string& hhmm) {
  static const std::regex re(R"(^([0-9]{2}):([0-9]{2})$)");
  std::smatch m;
  if (!std::regex_match(hhmm, m, re)) return std::nullopt;
  return std::stoi(m[1]) * 60 + std::stoi(m[2]);
}

using Row = std::map<std::string, std::string>;

inline bool row_matches(const Row& row, const std::map<std::string, std::string>& constraints) {
  for (const auto& [slot, raw] : constraints) {
    const std::string want = lower(strip(raw));
    if (want.empty() || want == "dontcare" || slot.rfind("book_", 0) == 0) continue;
    const auto it = row.find(slot);
    if (it == row.end()) return false;
    const std::string have = lower(strip(it->second));
    if (slot == "leave_at" || slot == "arrive_by") {
      const auto a = minutes(have);
      const auto b = minutes(want);
      if (a && b) {
        if (slot == "leave_at" ? *a < *b : *a > *b) return false;
        continue;
      }
    }
    if (have != want) return false;
  }
  return true;
}

inline std::vector<Row> scan(const std::vector<Row>& table, const std::map<std::string, std::string>& constraints) {
  std::vector<Row> out;
  for (const auto& r : table) {
    if (row_matches(r, constraints)) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Delexicalization through one ECMAScript regex: an alternation of the
// candidate values, longest first, with explicit word-boundary guards.

struct Candidate {
  std::string placeholder;
  std::string value;
};

inline std::string regex_escape(const std::string& s) {
  static const std::string special = R"(\^$.|?*+()[]{}/)";
  std::string out;
  for (char c : s) {
    if (special.find(c) != std::string::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

inline std::string delexicalize(const std::string& text, std::vector<Candidate> cands) {
  cands.erase(std::remove_if(cands.begin(), cands.end(), [](const Candidate& c) { return strip(c.value).empty(); }),
              cands.end());
  if (cands.empty()) return text;
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.value.size() > b.value.size(); });
  std::string alt;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (i) alt += '|';
    alt += "(" + regex_escape(cands[i].value) + ")";
  }
  const std::regex re("(^|[^A-Za-z0-9_])(?:" + alt + ")(?=[^A-Za-z0-9_]|$)", std::regex::ECMAScript | std::regex::icase);
  std::string out;
  auto last = text.cbegin();
  for (std::sregex_iterator it(text.begin(), text.end(), re), end; it != end; ++it) {
    const auto& m = *it;
    out.append(last, m[0].first);
    out += m[1].str();
    for (std::size_t g = 0; g < cands.size(); ++g) {
      if (m[g + 2].matched) {
        out += cands[g].placeholder;
        break;
      }
    }
    last = m[0].second;
  }
  out.append(last, text.cend());
  return out;
}

// ---------------------------------------------------------------------------
// Corpus BLEU-4 with a regex tokenizer and string-keyed n-gram tables.

inline std::vector<std::string> tokens(const std::string& s) {
  static const std::regex re(R"(\[value_[^\]]*\]|[A-Za-z0-9_]+(?:'[A-Za-z0-9_]+)*|\S)");
  std::vector<std::string> out;
  for (std::sregex_iterator it(s.begin(), s.end(), re), end; it != end; ++it) out.push_back(lower(it->str()));
  return out;
}

inline std::unordered_map<std::string, int> grams(const std::vector<std::string>& t, std::size_t n) {
  std::unordered_map<std::string, int> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) key += t[i + k] + '\x1f';
    ++out[key];
  }
  return out;
}

inline double bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  double clipped[4] = {0, 0, 0, 0};
  double possible[4] = {0, 0, 0, 0};
  double c = 0;
  double r = 0;
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    const auto h = tokens(hyps[k]);
    const auto ref = tokens(refs[k]);
    c += static_cast<double>(h.size());
    r += static_cast<double>(ref.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hg = grams(h, n);
      const auto rg = grams(ref, n);
      for (const auto& [g, cnt] : hg) {
        possible[n - 1] += cnt;
        const auto it = rg.find(g);
        if (it != rg.end()) clipped[n - 1] += std::min(cnt, it->second);
      }
    }
  }
  if (c == 0) return 0.0;
  double product = 1.0;
  for (int n = 0; n < 4; ++n) {
    if (possible[n] == 0) return 0.0;
    product *= (clipped[n] > 0 ? clipped[n] : 0.1) / possible[n];
  }
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return 100.0 * bp * std::pow(product, 0.25);
}

// ---------------------------------------------------------------------------
// Role-sequence grammars for the three stage prompts and for training samples.

enum class Grammar { kDs, kDst, kRg, kSample };

inline char role_letter(spectod::Role r) {
  switch (r) {
    case spectod::Role::kSystem: return 'S';
    case spectod::Role::kUser: return 'U';
    case spectod::Role::kDomain: return 'D';
    case spectod::Role::kFunction: return 'F';
    case spectod::Role::kObservation: return 'O';
    case spectod::Role::kAssistant: return 'A';
  }
  return '?';
}

inline bool follows(const std::vector<spectod::Role>& roles, Grammar g) {
  std::string word;
  for (auto r : roles) word.push_back(role_letter(r));
  static const std::regex ds("^S(UDA)*U$");
  static const std::regex dst("^S(UFA)*U$");
  static const std::regex rg("^S(UFOA)*UFO$");
  static const std::regex sample("^S(UDFOA)+$");
  switch (g) {
    case Grammar::kDs: return std::regex_match(word, ds);
    case Grammar::kDst: return std::regex_match(word, dst);
    case Grammar::kRg: return std::regex_match(word, rg);
    case Grammar::kSample: return std::regex_match(word, sample);
  }
  return false;
}

inline std::vector<spectod::Role> roles_of(const spectod::ChatPayload& p) {
  std::vector<spectod::Role> out;
  for (const auto& m : p.messages) out.push_back(m.role);
  return out;
}

// ---------------------------------------------------------------------------
// Hand-built clock table: raw spelling to canonical 24h time.

inline const std::vector<std::pair<std::string, std::string>>& time_table() {
  static const std::vector<std::pair<std::string, std::string>> t = {
      {"9:05 am", "09:05"},  {"9:05am", "09:05"},   {"9.05 AM", "09:05"}, {"09:05", "09:05"},
      {"0905", "09:05"},     {"12:00 pm", "12:00"}, {"12:30 am", "00:30"}, {"12 am", "00:00"},
      {"5pm", "17:00"},      {"5 p.m.", "17:00"},   {"11:45 p.m", "23:45"}, {"17.15", "17:15"},
      {"1715", "17:15"},     {"noon", "12:00"},     {"midnight", "00:00"}, {"Midday", "12:00"},
      {"7:5", "7:5"},        {"25:00", "25:00"},    {"after lunch", "after lunch"}, {" 08:00 ", "08:00"},
  };
  return t;
}

}  // namespace oracle
