#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include <httplib.h>

#include "checks.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "synthetic_corpus.hpp"

using namespace spectod;
namespace fs = std::filesystem;

namespace {

const Resources& res() {
  static const Resources r = fixture::resources();
  return r;
}

const SixRoleDialogue& booking() {
  static const SixRoleDialogue d = fixture::booking_dialogue(res());
  return d;
}

/// Small synthetic corpus converted against the fixture database.
const std::vector<SixRoleDialogue>& synthetic_dev() {
  static const std::vector<SixRoleDialogue> out = [] {
    fixture::TempDir tmp("dev");
    synth::Options opt;
    opt.train = 0;
    opt.dev = 30;
    opt.test = 0;
    synth::write_v21(synth::make_corpus(opt), tmp.path());
    std::vector<SixRoleDialogue> v;
    for (const auto& r : ingest(tmp.path(), CorpusVersion::k21).dev) v.push_back(convert(r, res()));
    return v;
  }();
  return out;
}

std::string chat_reply(const std::string& content) {
  return Json{{"choices", Json::array({Json{{"message", Json{{"role", "assistant"}, {"content", content}}}}})},
              {"usage", Json{{"prompt_tokens", 12}, {"completion_tokens", 3}}}}
      .dump();
}

GenerationRequest simple_request() {
  GenerationRequest req;
  req.payload.messages = {{Role::kSystem, "sys"}, {Role::kUser, "hi"}};
  req.tag = RequestTag{"d1", 1, "DS"};
  req.timeout = std::chrono::milliseconds(2000);
  return req;
}

}  // namespace

// ---------------------------------------------------------------------------
// llm_backend

TEST(MockBackend, ReplayAndMiss) {
  MockBackend m;
  m.add("d1", 1, "DS", "hotel");
  m.add("*", 0, "RG", "Action: General\nResponse: ok");
  auto req = simple_request();
  EXPECT_EQ(m.generate(req).text, "hotel");
  req.tag.task = "RG";
  req.tag.turn = 7;
  EXPECT_EQ(m.generate(req).text, "Action: General\nResponse: ok");
  req.tag.task = "DST";
  try {
    m.generate(req);
    FAIL() << "expected a fixture miss";
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::kFixtureMiss);
    EXPECT_NE(std::string(e.what()).find("d1#7#DST"), std::string::npos);
  }
  req.decoding.max_new_tokens = 0;
  EXPECT_THROW(m.generate(req), BackendError);
}

TEST(MockBackend, LoadsFixtureFile) {
  fixture::TempDir tmp("mock");
  io::write_file(tmp.path() / "m.jsonl", R"({"dialogue_id": "d1", "turn": 1, "task": "DS", "text": "train"}
{"task": "DST", "text": "{}"}
)");
  auto m = MockBackend::load_fixtures(tmp.path() / "m.jsonl");
  EXPECT_EQ(m.size(), 2u);
  auto req = simple_request();
  EXPECT_EQ(m.generate(req).text, "train");
}

TEST(HttpBackend, EndpointParsing) {
  EXPECT_EQ(parse_endpoint("http://localhost:8000").path, "/v1/chat/completions");
  EXPECT_EQ(parse_endpoint("http://localhost:8000/v1/").path, "/v1/chat/completions");
  EXPECT_EQ(parse_endpoint("http://10.0.0.1/api/v1/chat/completions").path, "/api/v1/chat/completions");
  EXPECT_EQ(parse_endpoint("http://10.0.0.1").port, 80);
  EXPECT_EQ(parse_endpoint("http://h:9").origin(), "http://h:9");
  EXPECT_THROW(parse_endpoint("localhost:8000"), ConfigError);
  EXPECT_THROW(parse_endpoint("http://h:70000"), ConfigError);
  EXPECT_THROW(HttpBackend(HttpBackendConfig{"http://h", "", "m", {0}, 1}), ConfigError);
}

TEST(HttpBackend, FoldsRolesForChatEndpoints) {
  ChatPayload p;
  p.messages = {{Role::kSystem, "s"},   {Role::kUser, "u"},        {Role::kDomain, "hotel"},
                {Role::kFunction, "{}"}, {Role::kObservation, "o"}, {Role::kAssistant, "a"}};
  const Json j = fold_roles(p);
  ASSERT_EQ(j.size(), 6u);
  EXPECT_EQ(j[2]["role"], "assistant");
  EXPECT_EQ(j[2]["content"], "<|domain|>\nhotel");
  EXPECT_EQ(j[3]["content"], "<|function|>\n{}");
  EXPECT_EQ(j[4]["role"], "user");
  EXPECT_EQ(j[4]["content"], "<|observation|>\no");
  EXPECT_EQ(j[5]["content"], "a");
}

class StubServer : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post(R"(/flaky/v1/chat/completions)", [this](const httplib::Request& req, httplib::Response& rsp) {
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      if (++flaky_ <= 2) {
        rsp.status = 503;
        rsp.set_content("busy", "text/plain");
        return;
      }
      rsp.set_content(chat_reply("restaurant"), "application/json");
    });
    server_.Post(R"(/bad/v1/chat/completions)", [this](const httplib::Request&, httplib::Response& rsp) {
      ++bad_;
      rsp.status = 400;
      rsp.set_content("no", "text/plain");
    });
    server_.Post(R"(/garbled/v1/chat/completions)", [](const httplib::Request&, httplib::Response& rsp) {
      rsp.set_content(R"({"choices": [])", "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }

  HttpBackend backend(const std::string& prefix) {
    HttpBackendConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port_) + prefix;
    cfg.api_key = "k-test";
    cfg.model = "stub";
    cfg.retry.max_attempts = 3;
    cfg.retry.initial_backoff = std::chrono::milliseconds(5);
    return HttpBackend(cfg);
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> flaky_{0};
  std::atomic<int> bad_{0};
  std::string last_body_;
  std::string last_auth_;
};

TEST_F(StubServer, RetriesServerErrors) {
  auto b = backend("/flaky");
  const auto r = b.generate(simple_request());
  EXPECT_EQ(r.text, "restaurant");
  EXPECT_EQ(r.attempts, 3);
  EXPECT_EQ(flaky_.load(), 3);
  EXPECT_EQ(r.usage.prompt_tokens, 12u);
  EXPECT_EQ(last_auth_, "Bearer k-test");
  const Json body = Json::parse(last_body_);
  EXPECT_EQ(body["model"], "stub");
  EXPECT_EQ(body["messages"].size(), 2u);
  EXPECT_EQ(body["temperature"], 0.0);
}

TEST_F(StubServer, ClientErrorsAreFinal) {
  auto b = backend("/bad");
  try {
    b.generate(simple_request());
    FAIL() << "expected an HTTP error";
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::kHttpStatus);
    EXPECT_EQ(e.status(), 400);
    EXPECT_EQ(e.attempts(), 1);
  }
  EXPECT_EQ(bad_.load(), 1);
}

TEST_F(StubServer, MalformedBodyAndExhaustedRetries) {
  auto garbled = backend("/garbled");
  try {
    garbled.generate(simple_request());
    FAIL() << "expected a malformed response";
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::kMalformedResponse);
  }
  HttpBackendConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port_) + "/missing";
  cfg.retry.max_attempts = 1;
  HttpBackend missing(cfg);
  EXPECT_THROW(missing.generate(simple_request()), BackendError);
}

TEST(Judge, ScoreParsing) {
  EXPECT_DOUBLE_EQ(parse_judge_score("Score: 3"), 3.0);
  EXPECT_DOUBLE_EQ(parse_judge_score("I would rate this 4.5 overall."), 4.5);
  EXPECT_DOUBLE_EQ(parse_judge_score("score=5"), 5.0);
  EXPECT_THROW(parse_judge_score("great!"), ParseError);
  EXPECT_THROW(parse_judge_score("Score: 9"), ParseError);
}

// ---------------------------------------------------------------------------
// orchestrator

TEST(Parsing, MalformedFixtureCases) {
  const auto cases = checks::malformed_cases();
  ASSERT_EQ(cases.size(), 20u);
  for (const auto& c : cases) EXPECT_EQ(checks::check_malformed_parse(c, res()), "") << c.text;
}

TEST(Parsing, EveryMalformedCaseCompletesATurn) {
  const auto r = checks::malformed_totality(res());
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(RunTurn, StageOrderAndNoBackendCallForPolicy) {
  std::vector<std::string> seen;
  CallbackBackend backend([&](const GenerationRequest& req) -> std::string {
    seen.push_back(req.tag.task);
    if (req.tag.task == "DS") return "restaurant";
    if (req.tag.task == "DST") return R"({"name": "restaurant", "arguments": {"area": "east"}})";
    EXPECT_EQ(oracle::roles_of(req.payload).back(), Role::kObservation);
    return "Action: Recommend\nResponse: How about [value_name]?";
  });
  DialogueSession s;
  s.dialogue_id = "x";
  const auto out = run_turn(s, "somewhere in the east", Dependencies{res(), backend});
  EXPECT_EQ(out.stages, (std::vector<std::string>{"DS", "DST", "PI", "RG"}));
  EXPECT_EQ(seen, (std::vector<std::string>{"DS", "DST", "RG"}));
  EXPECT_EQ(out.backend_calls, seen);
  EXPECT_TRUE(out.diagnostics.empty());
  const auto& ec = std::get<EntityCount>(out.observation);
  EXPECT_EQ(ec.count, 3u);
  ASSERT_EQ(s.turns.size(), 1u);
  EXPECT_EQ(s.turns[0].frame.action, Action::kRecommend);
}

TEST(RunTurn, GreetingSelectsNull) {
  CallbackBackend backend([](const GenerationRequest& req) -> std::string {
    if (req.tag.task == "DS") return "null";
    if (req.tag.task == "DST") return R"({"name": "null", "arguments": {}})";
    return "Action: General\nResponse: Hello, how can I help?";
  });
  DialogueSession s;
  const auto out = run_turn(s, "hi", Dependencies{res(), backend});
  EXPECT_EQ(out.selected.name, "null");
  EXPECT_TRUE(is_no_call(out.observation));
  EXPECT_EQ(out.frame.action, Action::kGeneral);
  EXPECT_TRUE(out.diagnostics.empty());
}

TEST(RunTurn, BrokenCallFallsBackAndResponseStillRuns) {
  CallbackBackend backend([](const GenerationRequest& req) -> std::string {
    if (req.tag.task == "DS") return "hotel";
    if (req.tag.task == "DST") return "I am not sure what you mean.";
    return "Action: Request\nResponse: What area would you like?";
  });
  DialogueSession s;
  const auto out = run_turn(s, "a hotel please", Dependencies{res(), backend});
  ASSERT_EQ(out.diagnostics.size(), 1u);
  EXPECT_EQ(out.diagnostics[0].stage, "DST");
  EXPECT_EQ(out.diagnostics[0].kind, DiagnosticKind::kFallback);
  EXPECT_EQ(out.call, (FunctionCall{"hotel", {}}));
  EXPECT_EQ(out.frame.action, Action::kRequest);

  DialogueSession strict;
  TurnOptions opt;
  opt.abort_on_fallback = true;
  EXPECT_THROW(run_turn(strict, "a hotel please", Dependencies{res(), backend}, opt), TurnAborted);
  EXPECT_TRUE(strict.turns.empty());
}

TEST(RunTurn, RepairRetryReasksOnce) {
  int dst_calls = 0;
  CallbackBackend backend([&](const GenerationRequest& req) -> std::string {
    if (req.tag.task == "DS") return "hotel";
    if (req.tag.task == "DST") return ++dst_calls == 1 ? "no idea" : R"({"arguments": {"area": "north"}})";
    return "Action: Info\nResponse: Done.";
  });
  DialogueSession s;
  TurnOptions opt;
  opt.dst_repair_retries = 1;
  const auto out = run_turn(s, "north", Dependencies{res(), backend}, opt);
  EXPECT_EQ(dst_calls, 2);
  EXPECT_EQ(out.call, (FunctionCall{"hotel", {{"area", "north"}}}));
  EXPECT_TRUE(out.diagnostics.empty());
}

TEST(RunDialogue, GoldReplayReproducesGold) {
  std::vector<SixRoleDialogue> gold = synthetic_dev();
  gold.push_back(booking());
  auto mock = gold_replay_backend(gold);
  std::map<std::string, DialogueSession> sessions;
  for (const auto& g : gold) {
    const auto run = run_dialogue(g, Dependencies{res(), mock}, RunMode::kPolicy);
    ASSERT_FALSE(run.aborted) << *run.aborted;
    for (std::size_t i = 0; i < g.turns.size(); ++i) {
      EXPECT_EQ(run.session.turns[i].call, g.turns[i].call) << g.id << " turn " << i + 1;
      EXPECT_EQ(run.session.turns[i].observation, g.turns[i].observation) << g.id << " turn " << i + 1;
      EXPECT_EQ(run.session.turns[i].frame, g.turns[i].frame) << g.id << " turn " << i + 1;
    }
    sessions[g.id] = run.session;
  }
  const auto rep = evaluate(sessions, gold, res());
  EXPECT_DOUBLE_EQ(rep.jga, 100.0);
  EXPECT_DOUBLE_EQ(rep.fn_se, 100.0);
  EXPECT_DOUBLE_EQ(rep.inform, 100.0);
  EXPECT_DOUBLE_EQ(rep.success, 100.0);
  EXPECT_NEAR(rep.bleu, 100.0, 1e-9);
}

TEST(RunDialogue, GoldStateUsesGoldCall) {
  const auto& g = booking();
  CallbackBackend backend([](const GenerationRequest& req) -> std::string {
    if (req.tag.task == "DS") return "restaurant";
    if (req.tag.task == "DST") return R"({"arguments": {"area": "north"}})";
    return "Action: General\nResponse: Fine.";
  });
  const auto run = run_dialogue(g, Dependencies{res(), backend}, RunMode::kGoldState);
  ASSERT_EQ(run.session.turns.size(), g.turns.size());
  for (std::size_t i = 0; i < g.turns.size(); ++i) {
    EXPECT_EQ(run.session.turns[i].call, g.turns[i].call);
    EXPECT_EQ(run.session.turns[i].observation, g.turns[i].observation);
  }
  EXPECT_EQ(run.session.turns[0].predicted_call, (FunctionCall{"restaurant", {{"area", "north"}}}));
  DialogueSession s;
  TurnOptions opt;
  opt.mode = RunMode::kGoldState;
  EXPECT_THROW(run_turn(s, "x", Dependencies{res(), backend}, opt), Error);
}

TEST(RunDialogue, OneBadCompletionGivesOneFallback) {
  const auto& g = booking();
  auto mock = gold_replay_backend({g});
  mock.add(g.id, 2, "DST", "```\nnot json at all\n```");
  const auto run = run_dialogue(g, Dependencies{res(), mock}, RunMode::kPolicy);
  ASSERT_FALSE(run.aborted);
  std::size_t fallbacks = 0;
  for (const auto& o : run.outcomes) {
    for (const auto& d : o.diagnostics) fallbacks += d.kind == DiagnosticKind::kFallback ? 1 : 0;
  }
  EXPECT_EQ(fallbacks, 1u);
  EXPECT_EQ(run.outcomes[1].diagnostics.at(0).stage, "DST");
}

TEST(Transcript, DeterministicAndRoundTrips) {
  const auto& g = booking();
  auto transcript = [&] {
    auto mock = gold_replay_backend({g});
    std::string out;
    run_dialogue(g, Dependencies{res(), mock}, RunMode::kPolicy, [&](const DialogueSession& s, const TurnOutcome& o) {
      out += io::dump(transcript_line(s, o, RunMode::kPolicy, false)) + "\n";
    });
    return out;
  };
  const auto a = transcript();
  EXPECT_EQ(a, transcript());
  std::map<std::string, std::size_t> diag_counts;
  const auto sessions = sessions_from_transcript(a, &diag_counts);
  ASSERT_EQ(sessions.size(), 1u);
  EXPECT_EQ(sessions.at(g.id).turns, sessions_from_gold({g}).at(g.id).turns);
  EXPECT_EQ(diag_counts.at(g.id), 0u);
  EXPECT_THROW(sessions_from_transcript(R"({"dialogue_id": "x"})"), ParseError);
}

// ---------------------------------------------------------------------------
// exporter

TEST(Export, LossMaskPartitionsRoles) {
  for (const auto& d : synthetic_dev()) {
    for (const auto& s : export_dialogue(d)) {
      std::vector<Role> roles;
      std::size_t trained = 0;
      for (const auto& m : s.messages) {
        roles.push_back(m.role);
        const bool want = m.role == Role::kDomain || m.role == Role::kFunction || m.role == Role::kAssistant;
        ASSERT_EQ(m.loss, want ? 1 : 0) << d.id << " " << to_string(m.role);
        trained += static_cast<std::size_t>(m.loss);
      }
      EXPECT_TRUE(oracle::follows(roles, oracle::Grammar::kSample)) << d.id;
      EXPECT_EQ(trained, 3 * d.turns.size());
    }
  }
}

TEST(Export, GoldenLineAndRoundTrip) {
  const auto r = export_samples({booking()});
  EXPECT_EQ(r.report.samples, 1u);
  EXPECT_EQ(fixture::compare_golden("PMUL9001.export.jsonl", r.jsonl), "");
  const auto samples = samples_from_jsonl(r.jsonl);
  ASSERT_EQ(samples.size(), 1u);
  const auto back = dialogue_from_sample(samples[0]);
  EXPECT_EQ(back.id, booking().id);
  EXPECT_EQ(back.system_prompt, booking().system_prompt);
  EXPECT_EQ(back.turns.size(), booking().turns.size());
  for (std::size_t i = 0; i < back.turns.size(); ++i) {
    EXPECT_EQ(back.turns[i].user, booking().turns[i].user);
    EXPECT_EQ(back.turns[i].domain, booking().turns[i].domain);
    EXPECT_EQ(back.turns[i].call, booking().turns[i].call);
    EXPECT_EQ(back.turns[i].observation, booking().turns[i].observation);
    EXPECT_EQ(back.turns[i].frame, booking().turns[i].frame);
  }
}

TEST(Export, EmptySplit) {
  const auto r = export_samples({});
  EXPECT_EQ(r.jsonl, "");
  EXPECT_EQ(r.report.samples, 0u);
  EXPECT_EQ(r.report.dialogues, 0u);
  EXPECT_DOUBLE_EQ(r.report.masked_token_share, 0.0);
}

TEST(Export, OverflowPolicies) {
  std::size_t turn_chars = 0;
  const auto records = booking().records();
  for (std::size_t i = 1; i < records.size(); ++i) turn_chars = std::max(turn_chars, records[i].content.size());
  ExportOptions opt;
  opt.counter = [](std::string_view s) { return s.size(); };
  const std::size_t system = records[0].content.size();
  opt.context_limit = system + 2 * 5 * turn_chars;  // at least two turns per window

  const auto windows = export_dialogue(booking(), opt);
  ASSERT_GE(windows.size(), 1u);
  std::size_t turns = 0;
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto& w = windows[k];
    if (windows.size() > 1) EXPECT_EQ(w.id, booking().id + "#" + std::to_string(k + 1));
    EXPECT_EQ(w.messages.front().content, records[0].content);
    EXPECT_LE(sample_tokens(w.messages, opt.counter), opt.context_limit);
    turns += (w.messages.size() - 1) / 5;
  }
  EXPECT_EQ(turns, booking().turns.size());

  opt.context_limit = system + 10;
  EXPECT_TRUE(export_dialogue(booking(), opt).empty());
  opt.overflow = OverflowPolicy::kSkip;
  opt.context_limit = system + 2 * turn_chars;
  EXPECT_TRUE(export_dialogue(booking(), opt).empty());
  const auto skipped = export_samples({booking()}, opt);
  EXPECT_EQ(skipped.report.skipped, 1u);
  EXPECT_EQ(skipped.report.skipped_ids, std::vector<std::string>{booking().id});
}

TEST(Manifest, DefaultsOverridesAndFiles) {
  TrainingManifest m;
  const Json j = m.to_json();
  EXPECT_EQ(j["lora_rank"], 32);
  EXPECT_EQ(j["lora_alpha"], 16);
  EXPECT_EQ(j["target_modules"], Json({"q_proj", "v_proj"}));
  EXPECT_EQ(j["epochs"], 4);
  EXPECT_DOUBLE_EQ(j["learning_rate"].get<double>(), 3e-4);
  EXPECT_EQ(j["global_batch_size"], 8);
  EXPECT_EQ(j["context_limit"], 4096);

  m.apply("lora_rank", 8, "flag");
  m.apply("role_loss_weights.function", 0.5, "config:x.json");
  EXPECT_EQ(m.lora_rank, 8);
  ASSERT_EQ(m.overrides.size(), 2u);
  EXPECT_EQ(m.to_json()["overrides"][1]["source"], "config:x.json");
  EXPECT_THROW(m.apply("dropout", 0.1, "flag"), ExportError);
  EXPECT_THROW(m.apply("epochs", "many", "flag"), ExportError);
  EXPECT_THROW(m.apply("role_loss_weights.user", 1.0, "flag"), ExportError);

  fixture::TempDir tmp("export");
  const auto rep = export_split(synthetic_dev(), tmp.path(), m);
  EXPECT_EQ(rep.samples, synthetic_dev().size());
  const Json written = io::read_json(tmp.path() / "manifest.json");
  EXPECT_EQ(written["samples"], rep.samples);
  EXPECT_EQ(written["lora_rank"], 8);
  EXPECT_EQ(samples_from_jsonl(io::read_file(tmp.path() / "train.jsonl")).size(), rep.samples);
  EXPECT_TRUE(fs::exists(tmp.path() / "export_report.json"));
}

// ---------------------------------------------------------------------------
// evaluator

TEST(Metrics, CombinedScore) {
  // One printed row disagrees with its own components by 0.02.
  for (const auto& row : checks::table_rows()) {
    const double got = combined(row.bleu, row.inform, row.success);
    const double tol = (row.decimals == 2 ? 0.01 : 0.05) + 1e-9;
    if (std::string(row.source) == "backbone LLama3 2.1") {
      EXPECT_NEAR(got, 91.16, 1e-9);
      EXPECT_GT(std::abs(got - row.printed), tol);
    } else {
      EXPECT_LE(std::abs(got - row.printed), tol) << row.source;
    }
  }
  EXPECT_DOUBLE_EQ(combined(0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(combined(20, 80, 60), 90.0);
}

TEST(Metrics, BleuAgainstOracle) {
  const auto r = checks::bleu_oracle(150, 3);
  EXPECT_TRUE(r.ok) << r.detail;
  EXPECT_EQ(bleu_tokens("Don't book [value_name], OK?"),
            (std::vector<std::string>{"don't", "book", "[value_name]", ",", "ok", "?"}));
  EXPECT_THROW(bleu({"a"}, {}), EvalError);
}

TEST(Metrics, JointGoalAccuracy) {
  const auto& reg = res().registry;
  const auto& norm = res().normalizer;
  const FunctionCall a{"hotel", {{"area", "east"}}};
  const FunctionCall b{"train", {{"day", "monday"}}};
  const FunctionCall c{"hotel", {{"area", "north"}}};
  EXPECT_NEAR(jga({a, b, a}, {a, b, c}, reg, norm), 200.0 / 3.0, 1e-9);
  const FunctionCall loose{"Restaurant", {{"area", " Centre"}}};
  const FunctionCall tight{"restaurant", {{"area", "centre"}}};
  EXPECT_DOUBLE_EQ(jga({loose}, {tight}, reg, norm), 100.0);
  EXPECT_DOUBLE_EQ(jga({loose}, {tight}, reg, norm, true), 0.0);
  EXPECT_THROW(jga({a}, {}, reg, norm), EvalError);
}

TEST(Metrics, DomainSelectionAccuracy) {
  EXPECT_DOUBLE_EQ(fn_se({"hotel", "train", "null", "taxi"}, {"hotel", "train", "null", "hotel"}), 75.0);
  EXPECT_DOUBLE_EQ(fn_se({"hotel", "Train"}, {"hotel", "train"}), 100.0);
  EXPECT_DOUBLE_EQ(fn_se({"taxi", "taxi"}, {"hotel", "train"}), 0.0);
}

TEST(Metrics, InformSuccessHandCount) {
  // 10 copies of the booking dialogue: 4 untouched, 2 without the phone,
  // 2 without the offered name, 2 whose final call matches no venue.
  std::vector<SixRoleDialogue> gold;
  for (int i = 0; i < 10; ++i) {
    auto d = booking();
    d.id = "TOY" + std::to_string(i);
    gold.push_back(d);
  }
  auto sessions = sessions_from_gold(gold);
  const FunctionCall nowhere{"restaurant", {{"area", "east"}, {"food", "martian"}}};
  sessions["TOY4"].turns[2].frame.response = "Sure.";
  sessions["TOY5"].turns[2].frame.response = "Sure.";
  sessions["TOY6"].turns[0].frame.response = "There is one place. Shall I book a table?";
  sessions["TOY7"].turns[0].frame.response = "There is one place. Shall I book a table?";
  for (const char* id : {"TOY8", "TOY9"}) {
    for (auto& t : sessions[id].turns) {
      if (t.call.name == "restaurant") t.call = t.predicted_call = nowhere;
    }
  }
  sessions["TOY0"].turns[3].domain = "hotel";

  const auto rep = evaluate(sessions, gold, res());
  EXPECT_DOUBLE_EQ(rep.inform, 60.0);
  EXPECT_DOUBLE_EQ(rep.success, 40.0);
  EXPECT_DOUBLE_EQ(rep.jga, 100.0 * 34.0 / 40.0);
  EXPECT_DOUBLE_EQ(rep.fn_se, 100.0 * 39.0 / 40.0);

  std::vector<std::string> hyps;
  std::vector<std::string> refs;
  for (const auto& g : gold) {
    for (std::size_t i = 0; i < g.turns.size(); ++i) {
      hyps.push_back(sessions.at(g.id).turns[i].frame.response);
      refs.push_back(g.turns[i].frame.response);
    }
  }
  EXPECT_NEAR(rep.bleu, oracle::bleu(hyps, refs), 1e-9);
  EXPECT_NEAR(rep.combined, rep.bleu + 50.0, 1e-9);
}

TEST(Metrics, MissingRequestableFailsOnlySuccess) {
  const auto& g = booking();
  auto sessions = sessions_from_gold({g});
  sessions[g.id].turns[2].frame.response = "Sure, their number is on the website.";
  const auto rep = evaluate(sessions, {g}, res());
  EXPECT_DOUBLE_EQ(rep.inform, 100.0);
  EXPECT_DOUBLE_EQ(rep.success, 0.0);
  const auto io = inform_success_dialogue(sessions[g.id], g.goal, res());
  EXPECT_EQ(io.domains.at("restaurant").missing, std::vector<std::string>{"[value_phone]"});
}

TEST(Metrics, GoldIsSelfConsistent) {
  std::vector<SixRoleDialogue> gold = synthetic_dev();
  gold.push_back(booking());
  const auto rep = evaluate(sessions_from_gold(gold), gold, res());
  EXPECT_DOUBLE_EQ(rep.inform, 100.0);
  EXPECT_DOUBLE_EQ(rep.success, 100.0);
  EXPECT_DOUBLE_EQ(rep.jga, 100.0);
  EXPECT_DOUBLE_EQ(rep.fn_se, 100.0);
  EXPECT_NEAR(rep.bleu, 100.0, 1e-9);
  EXPECT_NEAR(rep.combined, 200.0, 1e-9);
}

TEST(Metrics, Mismatches) {
  const auto& g = booking();
  auto sessions = sessions_from_gold({g});
  EXPECT_THROW(evaluate({}, {g}, res()), EvalError);
  sessions[g.id].turns.pop_back();
  EXPECT_THROW(evaluate(sessions, {g}, res()), EvalError);
  auto renamed = sessions_from_gold({g});
  renamed["other"] = renamed[g.id];
  renamed.erase(g.id);
  EXPECT_THROW(evaluate(renamed, {g}, res()), EvalError);
}

TEST(JudgeScore, MeansAndAbort) {
  const auto criteria = load_criteria(fixture::data_dir() / "gpt_score_criteria.json");
  ASSERT_EQ(criteria.size(), 6u);
  std::vector<DialogueSession> sessions;
  for (const auto& [id, s] : sessions_from_gold({booking()})) sessions.push_back(s);

  MockBackend mock;
  for (const auto& c : criteria) mock.add("*", 0, "JUDGE:" + c.name, "Score: 4");
  const auto rep = gpt_score(sessions, mock, criteria);
  ASSERT_EQ(rep.means.size(), 6u);
  for (const auto& [name, mean] : rep.means) {
    EXPECT_DOUBLE_EQ(mean, 4.0) << name;
    EXPECT_EQ(rep.judged.at(name), booking().turns.size());
  }

  CallbackBackend rambling([](const GenerationRequest&) { return std::string("great!"); });
  try {
    gpt_score(sessions, rambling, criteria);
    FAIL() << "expected an abort";
  } catch (const GptScoreAborted& e) {
    EXPECT_TRUE(e.partial().aborted);
    EXPECT_EQ(e.partial().failed.begin()->second, booking().turns.size());
  }
}
