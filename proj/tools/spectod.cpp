// spectod: ingest, export, run, eval and chat over the six-role dialogue format.

#include <atomic>
#include <cstdlib>
#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "spectod/spectod.hpp"

#ifndef SPECTOD_DEFAULT_DATA_DIR
#define SPECTOD_DEFAULT_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace spectod;

namespace {

/// Resolves settings as flag > environment > config file > default and
/// remembers where each value came from.
class Settings {
 public:
  void load_config(const std::string& path) {
    if (path.empty()) return;
    config_ = io::read_json(path);
    if (!config_.is_object()) throw ConfigError(path + ": config must be a JSON object");
    config_path_ = path;
  }

  std::string get(const std::string& key, const CLI::Option* flag, const std::string& flag_value, const char* env,
                  const std::string& fallback) {
    Entry e;
    if (flag && flag->count() > 0) {
      e = {flag_value, "flag"};
    } else if (const char* v = env ? std::getenv(env) : nullptr; v && *v) {
      e = {v, std::string("env:") + env};
    } else if (config_.contains(key)) {
      const Json& j = config_[key];
      e = {j.is_string() ? j.get<std::string>() : j.dump(), "config:" + config_path_};
    } else {
      e = {fallback, "default"};
    }
    entries_[key] = e;
    return e.value;
  }

  void secret(const std::string& key) { secrets_.insert(key); }

  Json header(const std::string& command) const {
    Json j;
    j["command"] = command;
    Json s = Json::object();
    for (const auto& [k, e] : entries_) {
      const std::string shown = secrets_.count(k) && !e.value.empty() ? "<redacted>" : e.value;
      s[k] = Json{{"value", shown}, {"source", e.source}};
    }
    j["settings"] = std::move(s);
    return j;
  }

 private:
  struct Entry {
    std::string value;
    std::string source;
  };
  Json config_ = Json::object();
  std::string config_path_;
  std::map<std::string, Entry> entries_;
  std::set<std::string> secrets_;
};

void require_dir(const std::string& what, const std::string& path) {
  if (!fs::is_directory(path)) throw IoError(what + " directory not found: " + path);
}

void require_file(const std::string& what, const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError(what + " file not found: " + path);
}

Resources load_all(const std::string& data_dir, const std::string& db_dir) {
  require_dir("data", data_dir);
  auto paths = ResourcePaths::under(data_dir);
  if (!db_dir.empty()) {
    require_dir("database", db_dir);
    paths.db_dir = db_dir;
  }
  return load_resources(paths);
}

struct BackendChoice {
  std::string mock;      // fixture JSONL
  bool mock_gold = false;  // replay gold completions
  std::string endpoint;
  std::string model;
  std::string api_key;
  std::string trace;
};

std::unique_ptr<Backend> make_backend(const BackendChoice& c, const std::vector<SixRoleDialogue>* gold) {
  const int chosen = (c.mock.empty() ? 0 : 1) + (c.mock_gold ? 1 : 0) + (c.endpoint.empty() ? 0 : 1);
  if (chosen != 1) throw ConfigError("choose exactly one backend: --mock, --mock-gold or --endpoint");
  if (!c.mock.empty()) {
    require_file("mock fixture", c.mock);
    return std::make_unique<MockBackend>(MockBackend::load_fixtures(c.mock));
  }
  if (c.mock_gold) {
    if (!gold) throw ConfigError("--mock-gold needs gold dialogues");
    return std::make_unique<MockBackend>(gold_replay_backend(*gold));
  }
  HttpBackendConfig cfg;
  cfg.base_url = c.endpoint;
  cfg.api_key = c.api_key;
  if (!c.model.empty()) cfg.model = c.model;
  return std::make_unique<HttpBackend>(cfg);
}

class Traced : public Backend {
 public:
  Traced(std::unique_ptr<Backend> inner, const std::string& path)
      : inner_(std::move(inner)), tracing_(*inner_, std::make_shared<TraceLog>(path)) {}
  GenerationResult generate(const GenerationRequest& r) override { return tracing_.generate(r); }

 private:
  std::unique_ptr<Backend> inner_;
  TracingBackend tracing_;
};

std::unique_ptr<Backend> with_trace(std::unique_ptr<Backend> b, const std::string& trace) {
  if (trace.empty()) return b;
  return std::make_unique<Traced>(std::move(b), trace);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  for (auto& p : text::split(s, ',')) out.push_back(text::trim(p));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-oriented dialogue runtime: corpus conversion, fine-tuning export, pipeline runs and evaluation."};
  app.require_subcommand(1);
  Settings settings;

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; flags and SPECTOD_* variables take precedence");
  std::string data_dir;
  auto* data_opt = app.add_option("--data", data_dir, "Resource directory (schema, templates, act mapping) [env SPECTOD_DATA_DIR]");
  std::string db_dir;
  auto* db_opt = app.add_option("--db", db_dir, "Directory of <domain>_db.json entity tables [env SPECTOD_DB_DIR]");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Convert a raw MultiWOZ release into six-role JSONL per split");
  std::string raw_dir, out_dir, version = "2.1";
  ingest->add_option("--raw", raw_dir, "Raw corpus directory")->required();
  ingest->add_option("--out", out_dir, "Output directory for train/dev/test.jsonl")->required();
  ingest->add_option("--version", version, "Corpus release: 2.0, 2.1 or 2.2")->capture_default_str();

  // export
  auto* exp = app.add_subcommand("export", "Write loss-masked fine-tuning JSONL and the training manifest");
  std::string corpus_path, export_out, overflow = "split";
  double fraction = 1.0;
  std::uint64_t seed = 42;
  bool stratified = false;
  std::vector<std::string> overrides;
  exp->add_option("--corpus", corpus_path, "Six-role JSONL (usually train.jsonl)")->required();
  exp->add_option("--out", export_out, "Output directory")->required();
  exp->add_option("--fraction", fraction, "Share of dialogues to sample, in (0, 1]")->capture_default_str();
  exp->add_option("--seed", seed, "Sampling seed")->capture_default_str();
  exp->add_flag("--stratified", stratified, "Keep goal-domain proportions when sampling");
  exp->add_option("--overflow", overflow, "Dialogues over the context limit: split or skip")->capture_default_str();
  exp->add_option("--set", overrides, "Manifest override key=value (JSON value), repeatable");

  // run
  auto* run = app.add_subcommand("run", "Run the per-turn pipeline over gold user turns");
  std::string gold_path, transcript_out, mode_name;
  std::size_t limit = 0;
  std::string workers_str;
  bool with_latency = false;
  BackendChoice bc;
  run->add_option("--gold", gold_path, "Six-role JSONL whose user turns drive the run")->required();
  run->add_option("--out", transcript_out, "Transcript JSONL")->required();
  auto* mode_opt = run->add_option("--mode", mode_name, "policy or gold_state [env SPECTOD_MODE]");
  auto* workers_opt = run->add_option("--workers", workers_str, "Dialogues in flight [env SPECTOD_WORKERS]");
  run->add_option("--limit", limit, "Only the first N dialogues (0: all)");
  run->add_flag("--latency", with_latency, "Record per-stage latency in the transcript");
  auto* mock_opt = run->add_option("--mock", bc.mock, "Mock fixture JSONL");
  run->add_flag("--mock-gold", bc.mock_gold, "Replay the gold completions");
  auto* ep_opt = run->add_option("--endpoint", bc.endpoint, "OpenAI-compatible base URL [env SPECTOD_API_BASE]");
  auto* model_opt = run->add_option("--model", bc.model, "Model name [env SPECTOD_MODEL]");
  auto* key_opt = run->add_option("--api-key", bc.api_key, "API key [env SPECTOD_API_KEY]");
  run->add_option("--trace", bc.trace, "Append every backend exchange to this JSONL file");
  (void)mock_opt;

  // eval
  auto* ev = app.add_subcommand("eval", "Score transcripts against gold dialogues");
  std::string transcripts_path, report_path, combined_from, judge_mock, judge_endpoint;
  std::string criteria_path;
  bool raw_jga = false;
  std::size_t judge_max = 0;
  ev->add_option("--transcripts", transcripts_path, "Transcript JSONL from `run`");
  ev->add_option("--gold", gold_path, "Gold six-role JSONL");
  ev->add_option("--report", report_path, "Write the report JSON here");
  ev->add_flag("--raw-jga", raw_jga, "Compare belief values without normalization");
  ev->add_option("--combined-from", combined_from, "Print Combined for BLEU,Inform,Success and exit");
  ev->add_option("--judge-mock", judge_mock, "Judge-score with a mock fixture JSONL");
  ev->add_option("--judge-endpoint", judge_endpoint, "Judge-score with an OpenAI-compatible endpoint");
  ev->add_option("--judge-max", judge_max, "Judge at most N responses (0: all)");
  ev->add_option("--criteria", criteria_path, "Judge criteria JSON (default: <data>/gpt_score_criteria.json)");

  // chat
  auto* chat = app.add_subcommand("chat", "Interactive session; type quit to leave");
  std::string chat_transcript = "chat_transcript.jsonl";
  BackendChoice cc;
  chat->add_option("--transcript", chat_transcript, "Transcript written on exit")->capture_default_str();
  chat->add_option("--mock", cc.mock, "Mock fixture JSONL");
  auto* chat_ep = chat->add_option("--endpoint", cc.endpoint, "OpenAI-compatible base URL [env SPECTOD_API_BASE]");
  auto* chat_model = chat->add_option("--model", cc.model, "Model name [env SPECTOD_MODEL]");
  auto* chat_key = chat->add_option("--api-key", cc.api_key, "API key [env SPECTOD_API_KEY]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    settings.load_config(config_path);
    data_dir = settings.get("data", data_opt, data_dir, "SPECTOD_DATA_DIR", SPECTOD_DEFAULT_DATA_DIR);
    db_dir = settings.get("db", db_opt, db_dir, "SPECTOD_DB_DIR", "");

    if (*ingest) {
      const auto v = parse_corpus_version(version);
      if (!v) {
        std::cerr << "usage error: --version must be 2.0, 2.1 or 2.2\n";
        return 2;
      }
      if (db_dir.empty()) throw ConfigError("ingest needs --db to recompute observations");
      const Resources res = load_all(data_dir, db_dir);
      const RawCorpus raw = spectod::ingest(raw_dir, *v);
      std::size_t dropped = 0;
      auto write_split = [&](const std::vector<RawDialogue>& split, const char* name) {
        std::vector<SixRoleDialogue> out;
        out.reserve(split.size());
        for (const auto& d : split) {
          out.push_back(convert(d, res));
          dropped += out.back().dropped.size();
        }
        io::write_file(fs::path(out_dir) / (std::string(name) + ".jsonl"), dialogues_to_jsonl(out));
        return out.size();
      };
      const auto n_train = write_split(raw.train, "train");
      const auto n_dev = write_split(raw.dev, "dev");
      const auto n_test = write_split(raw.test, "test");
      Json header = settings.header("ingest");
      header["version"] = version;
      header["counts"] = Json{{"train", n_train}, {"dev", n_dev}, {"test", n_test}};
      header["dropped_annotations"] = dropped;
      io::write_file(fs::path(out_dir) / "run_header.json", header.dump(2) + "\n");
      std::cout << "train " << n_train << "\ndev " << n_dev << "\ntest " << n_test << "\n";
      if (dropped) std::cout << "dropped annotations " << dropped << " (see dialogue \"dropped\" fields)\n";
      return 0;
    }

    if (*exp) {
      if (!(fraction > 0.0 && fraction <= 1.0)) {
        std::cerr << "usage error: --fraction must be in (0, 1], got " << fraction << "\n";
        return 2;
      }
      const auto policy = parse_overflow_policy(overflow);
      if (!policy) {
        std::cerr << "usage error: --overflow must be split or skip\n";
        return 2;
      }
      require_file("corpus", corpus_path);
      const auto all = load_dialogues(corpus_path);
      const auto sample = stratified ? sample_fewshot_stratified(all, fraction, seed, goal_domain_signature)
                                     : sample_fewshot(all, fraction, seed);
      TrainingManifest manifest;
      for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) {
          std::cerr << "usage error: --set expects key=value, got " << o << "\n";
          return 2;
        }
        const std::string raw_value = o.substr(eq + 1);
        Json value = Json::parse(raw_value, nullptr, false);
        if (value.is_discarded()) value = raw_value;
        manifest.apply(o.substr(0, eq), value, "flag");
      }
      ExportOptions opt;
      opt.overflow = *policy;
      const auto report = export_split(sample, export_out, manifest, opt);
      Json header = settings.header("export");
      header["corpus"] = corpus_path;
      header["fraction"] = fraction;
      header["seed"] = seed;
      header["stratified"] = stratified;
      io::write_file(fs::path(export_out) / "run_header.json", header.dump(2) + "\n");
      std::cout << "samples " << report.samples << " (from " << sample.size() << " of " << all.size()
                << " dialogues), skipped " << report.skipped << ", split " << report.split << "\n";
      return 0;
    }

    if (*run) {
      mode_name = settings.get("mode", mode_opt, mode_name, "SPECTOD_MODE", "policy");
      const auto mode = parse_run_mode(mode_name);
      if (!mode) {
        std::cerr << "usage error: --mode must be policy or gold_state\n";
        return 2;
      }
      const std::string workers_s = settings.get("workers", workers_opt, workers_str, "SPECTOD_WORKERS", "1");
      int workers = 1;
      try {
        workers = std::stoi(workers_s);
      } catch (const std::exception&) {
        workers = 0;
      }
      if (workers < 1) {
        std::cerr << "usage error: --workers must be a positive integer\n";
        return 2;
      }
      bc.endpoint = settings.get("endpoint", ep_opt, bc.endpoint, bc.mock.empty() && !bc.mock_gold ? "SPECTOD_API_BASE" : nullptr, "");
      bc.model = settings.get("model", model_opt, bc.model, "SPECTOD_MODEL", "");
      bc.api_key = settings.get("api_key", key_opt, bc.api_key, "SPECTOD_API_KEY", "");
      settings.secret("api_key");

      // Everything is validated before the first dialogue starts.
      require_file("gold", gold_path);
      if (!bc.endpoint.empty()) parse_endpoint(bc.endpoint);
      if (db_dir.empty()) throw ConfigError("run needs --db for policy instruction lookups");
      const Resources res = load_all(data_dir, db_dir);
      auto gold = load_dialogues(gold_path);
      if (limit && gold.size() > limit) gold.resize(limit);
      auto backend = with_trace(make_backend(bc, &gold), bc.trace);
      Dependencies deps{res, *backend};

      std::vector<DialogueRun> runs(gold.size());
      std::atomic<std::size_t> next{0};
      auto worker = [&] {
        for (std::size_t i = next++; i < gold.size(); i = next++) runs[i] = run_dialogue(gold[i], deps, *mode);
      };
      std::vector<std::thread> pool;
      for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
      worker();
      for (auto& t : pool) t.join();

      std::string lines;
      std::size_t repairs = 0, fallbacks = 0, aborted = 0, turns = 0;
      Json aborted_ids = Json::array();
      std::map<std::string, std::size_t> by_stage;
      for (const auto& r : runs) {
        for (const auto& o : r.outcomes) {
          if (o.index <= static_cast<int>(r.session.turns.size())) {
            lines += io::dump(transcript_line(r.session, o, *mode, with_latency)) + "\n";
            ++turns;
          }
          for (const auto& d : o.diagnostics) {
            (d.kind == DiagnosticKind::kRepair ? repairs : fallbacks) += 1;
            by_stage[d.stage] += 1;
          }
        }
        if (r.aborted) {
          ++aborted;
          aborted_ids.push_back(Json{{"dialogue_id", r.session.dialogue_id}, {"error", *r.aborted}});
          std::cerr << "error: " << r.session.dialogue_id << ": " << *r.aborted << "\n";
        }
      }
      io::write_file(transcript_out, lines);
      Json summary;
      summary["dialogues"] = runs.size();
      summary["turns"] = turns;
      summary["repairs"] = repairs;
      summary["fallbacks"] = fallbacks;
      Json stages = Json::object();
      for (const auto& [k, v] : by_stage) stages[k] = v;
      summary["by_stage"] = std::move(stages);
      summary["aborted"] = std::move(aborted_ids);
      io::write_file(transcript_out + ".diagnostics.json", summary.dump(2) + "\n");
      Json header = settings.header("run");
      header["gold"] = gold_path;
      header["mode"] = std::string(to_string(*mode));
      header["dialogues"] = runs.size();
      io::write_file(transcript_out + ".run_header.json", header.dump(2) + "\n");
      std::cout << "dialogues " << runs.size() << ", turns " << turns << ", repairs " << repairs << ", fallbacks "
                << fallbacks << ", aborted " << aborted << "\n";
      return aborted ? 1 : 0;
    }

    if (*ev) {
      if (!combined_from.empty()) {
        const auto parts = split_csv(combined_from);
        if (parts.size() != 3) {
          std::cerr << "usage error: --combined-from expects BLEU,Inform,Success\n";
          return 2;
        }
        double v[3];
        for (int i = 0; i < 3; ++i) {
          try {
            v[i] = std::stod(parts[static_cast<std::size_t>(i)]);
          } catch (const std::exception&) {
            std::cerr << "usage error: not a number: " << parts[static_cast<std::size_t>(i)] << "\n";
            return 2;
          }
        }
        std::printf("%.2f\n", combined(v[0], v[1], v[2]));
        return 0;
      }
      if (transcripts_path.empty() || gold_path.empty()) {
        std::cerr << "usage error: eval needs --transcripts and --gold (or --combined-from)\n";
        return 2;
      }
      require_file("transcript", transcripts_path);
      require_file("gold", gold_path);
      if (db_dir.empty()) throw ConfigError("eval needs --db for venue matching");
      const Resources res = load_all(data_dir, db_dir);
      const auto gold = load_dialogues(gold_path);
      const auto sessions = sessions_from_transcript(io::read_file(transcripts_path));
      EvalOptions eo;
      eo.raw_jga = raw_jga;
      EvalReport rep = evaluate(sessions, gold, res, eo);
      int rc = 0;
      if (!judge_mock.empty() || !judge_endpoint.empty()) {
        BackendChoice jc;
        jc.mock = judge_mock;
        jc.endpoint = judge_endpoint;
        jc.api_key = settings.get("api_key", nullptr, "", "SPECTOD_API_KEY", "");
        settings.secret("api_key");
        auto judge_backend = make_backend(jc, nullptr);
        const auto criteria =
            load_criteria(criteria_path.empty() ? fs::path(data_dir) / "gpt_score_criteria.json" : fs::path(criteria_path));
        std::vector<DialogueSession> ordered;
        for (const auto& g : gold) ordered.push_back(sessions.at(g.id));
        GptScoreOptions go;
        go.max_responses = judge_max;
        try {
          rep.gpt = gpt_score(ordered, *judge_backend, criteria, go);
        } catch (const GptScoreAborted& e) {
          std::cerr << "error: " << e.what() << "\n";
          rep.gpt = e.partial();
          rc = 1;
        }
      }
      std::cout << rep.table();
      if (!report_path.empty()) {
        Json j = rep.to_json();
        j["run_header"] = settings.header("eval");
        io::write_file(report_path, j.dump(2) + "\n");
      }
      return rc;
    }

    if (*chat) {
      cc.endpoint = settings.get("endpoint", chat_ep, cc.endpoint, cc.mock.empty() ? "SPECTOD_API_BASE" : nullptr, "");
      cc.model = settings.get("model", chat_model, cc.model, "SPECTOD_MODEL", "");
      cc.api_key = settings.get("api_key", chat_key, cc.api_key, "SPECTOD_API_KEY", "");
      if (!cc.endpoint.empty()) parse_endpoint(cc.endpoint);
      if (db_dir.empty()) throw ConfigError("chat needs --db for policy instruction lookups");
      const Resources res = load_all(data_dir, db_dir);
      auto backend = make_backend(cc, nullptr);
      Dependencies deps{res, *backend};
      DialogueSession session;
      session.dialogue_id = "chat";
      std::string lines;
      std::string line;
      int rc = 0;
      std::cout << "> " << std::flush;
      while (std::getline(std::cin, line)) {
        const std::string t = text::trim(line);
        if (text::fold(t) == "quit" || text::fold(t) == "exit") break;
        if (t.empty()) {
          std::cout << "> " << std::flush;
          continue;
        }
        try {
          const auto o = run_turn(session, t, deps);
          lines += io::dump(transcript_line(session, o, RunMode::kPolicy, true)) + "\n";
          std::cout << render_frame(o.frame) << "\n";
          for (const auto& d : o.diagnostics) std::cout << "  [" << d.stage << " " << to_string(d.kind) << "] " << d.detail << "\n";
        } catch (const TurnAborted& e) {
          std::cerr << "error: " << e.what() << "\n";
          rc = 1;
        }
        std::cout << "> " << std::flush;
      }
      std::cout << "\n";
      io::write_file(chat_transcript, lines);
      std::cout << "transcript saved to " << chat_transcript << "\n";
      return rc;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
