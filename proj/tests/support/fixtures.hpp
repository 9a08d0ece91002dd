#pragma once

// Paths, resource loading and golden-file comparison shared by the suites.

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <random>
#include <string>

#include <spectod/spectod.hpp>

#ifndef SPECTOD_TEST_DATA_DIR
#error "SPECTOD_TEST_DATA_DIR must point at the data directory"
#endif
#ifndef SPECTOD_TEST_FIXTURES_DIR
#error "SPECTOD_TEST_FIXTURES_DIR must point at tests/fixtures"
#endif

namespace fixture {

namespace fs = std::filesystem;

inline fs::path data_dir() { return SPECTOD_TEST_DATA_DIR; }
inline fs::path dir() { return SPECTOD_TEST_FIXTURES_DIR; }
inline fs::path golden(const std::string& name) { return dir() / "golden" / name; }

inline spectod::Resources resources(const std::optional<fs::path>& db = dir() / "db") {
  auto paths = spectod::ResourcePaths::under(data_dir());
  paths.db_dir = db;
  return spectod::load_resources(paths);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("spectod-" + tag + "-" + std::to_string(rd()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline bool updating_goldens() {
  const char* v = std::getenv("SPECTOD_UPDATE_GOLDEN");
  return v && *v && std::string(v) != "0";
}

/// Empty when `actual` equals the golden file; otherwise a short description
/// of the first difference. SPECTOD_UPDATE_GOLDEN=1 rewrites the file instead.
inline std::string compare_golden(const std::string& name, const std::string& actual) {
  const fs::path p = golden(name);
  if (updating_goldens()) {
    spectod::io::write_file(p, actual);
    return {};
  }
  if (!fs::exists(p)) return "golden file missing: " + p.string();
  const std::string expected = spectod::io::read_file(p);
  if (expected == actual) return {};
  std::size_t i = 0;
  while (i < expected.size() && i < actual.size() && expected[i] == actual[i]) ++i;
  return name + " differs at byte " + std::to_string(i) + " (golden " + std::to_string(expected.size()) +
         " bytes, actual " + std::to_string(actual.size()) + " bytes)";
}

/// The hand-written restaurant booking dialogue, converted.
inline spectod::SixRoleDialogue booking_dialogue(const spectod::Resources& res) {
  const auto corpus = spectod::ingest(dir() / "raw_v21", spectod::CorpusVersion::k21);
  for (const auto& d : corpus.train) {
    if (d.id == "PMUL9001.json") return spectod::convert(d, res);
  }
  throw spectod::Error("fixture dialogue PMUL9001.json not found");
}

/// Session holding the first `n` gold turns of a dialogue.
inline spectod::DialogueSession session_prefix(const spectod::SixRoleDialogue& d, std::size_t n) {
  spectod::DialogueSession s;
  s.dialogue_id = d.id;
  for (std::size_t i = 0; i < n && i < d.turns.size(); ++i) {
    const auto& t = d.turns[i];
    spectod::SessionTurn st;
    st.index = s.next_index();
    st.user = t.user;
    st.domain = t.domain;
    st.predicted_call = t.call;
    st.call = t.call;
    st.observation = t.observation;
    st.frame = t.frame;
    s.append(std::move(st));
  }
  return s;
}

}  // namespace fixture
