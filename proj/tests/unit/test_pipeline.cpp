#include <cmath>
#include <map>
#include <mutex>
#include <random>
#include <sstream>

#include "depsel/error.hpp"
#include "depsel/pipeline.hpp"
#include "doctest.h"
#include "scratch.hpp"

using namespace depsel;
using protocol::Mode;

namespace {

// CopyLM with an adjustable descriptor and scripted failures.
class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(const std::string& spec, bool attention = true) : engine_(CopyLMParams::parse(spec)) {
    descriptor_ = engine_.descriptor();
    descriptor_.supports_attention = attention;
  }
  const protocol::BackendDescriptor& descriptor() const override { return descriptor_; }
  std::future<protocol::ScoringResponse> submit(protocol::ScoringRequest request) override {
    count_request();
    std::promise<protocol::ScoringResponse> p;
    std::lock_guard lock(mutex_);
    if (auto it = failures_.find(request.request_id); it != failures_.end() && it->second.remaining > 0) {
      --it->second.remaining;
      p.set_value(protocol::make_error(request.request_id, it->second.code, "scripted"));
    } else {
      p.set_value(engine_.handle(request));
    }
    return p.get_future();
  }
  void fail(const std::string& request_id, const std::string& code, int times) {
    failures_[request_id] = {code, times};
  }

 private:
  struct Failure {
    std::string code;
    int remaining = 0;
  };
  CopyLM engine_;
  protocol::BackendDescriptor descriptor_;
  std::mutex mutex_;
  std::map<std::string, Failure> failures_;
};

std::string make_corpus(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::ostringstream out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string c, y;
    for (int k = 0, len = 4 + static_cast<int>(rng() % 40); k < len; ++k) c += std::to_string(rng() % 32) + " ";
    for (int k = 0, len = 1 + static_cast<int>(rng() % 4); k < len; ++k) y += std::to_string(rng() % 32) + " ";
    out << R"({"id":"s)" << i << R"(","context":")" << c << R"(","instruction":"5 6","response":")" << y << "\"}\n";
  }
  return out.str();
}

RunConfig base_config(const Scratch& s) {
  RunConfig c;
  c.corpus = s.path("corpus.jsonl");
  c.backend_a = "mock:V=32,window=4,ctx=40";
  c.backend_b = "mock:V=32,window=inf,ctx=4096";
  c.segment_length = 8;
  c.cut_ratio = 0.3;
  c.cache = s.path("cache.jsonl");
  c.manifest = s.path("manifest.jsonl");
  c.output = s.path("train.jsonl");
  c.concurrency = 3;
  return c;
}

std::string manifest_text(const SelectionManifest& m) {
  std::ostringstream out;
  write_manifest(m, out);
  return out.str();
}

}  // namespace

TEST_CASE("warm cache issues no requests") {
  Scratch s;
  s.write("corpus.jsonl", make_corpus(20, 1));
  const auto config = base_config(s);
  ScriptedBackend a(config.backend_a.substr(5)), b(config.backend_b.substr(5));
  const auto first = run_score(config, &a, b);
  CHECK(first.samples == 20);
  CHECK(first.requests > 0);
  CHECK(first.requests == a.requests_issued() + b.requests_issued());

  ScriptedBackend a2(config.backend_a.substr(5)), b2(config.backend_b.substr(5));
  const auto second = run_score(config, &a2, b2);
  CHECK(second.requests == 0);
  CHECK(a2.requests_issued() + b2.requests_issued() == 0);
  CHECK(second.cache_hits == first.requests);
}

TEST_CASE("interrupted scoring resumes to the same manifest") {
  Scratch s;
  s.write("corpus.jsonl", make_corpus(25, 2));
  auto config = base_config(s);
  ScriptedBackend a(config.backend_a.substr(5)), b(config.backend_b.substr(5));
  run_score(config, &a, b);
  const auto reference = manifest_text(run_select(config).manifest);
  const auto total = a.requests_issued() + b.requests_issued();

  Scratch t;
  t.write("corpus.jsonl", make_corpus(25, 2));
  auto resumed = base_config(t);
  resumed.request_limit = total / 2;
  ScriptedBackend a1(config.backend_a.substr(5)), b1(config.backend_b.substr(5));
  CHECK_THROWS_AS(run_score(resumed, &a1, b1), Interrupted);
  const auto before = a1.requests_issued() + b1.requests_issued();
  CHECK(before == total / 2);
  CHECK_THROWS_AS(run_select(resumed), UserError);

  resumed.request_limit.reset();
  ScriptedBackend a2(config.backend_a.substr(5)), b2(config.backend_b.substr(5));
  run_score(resumed, &a2, b2);
  CHECK(a2.requests_issued() + b2.requests_issued() == total - before);
  CHECK(manifest_text(run_select(resumed).manifest) == reference);
}

TEST_CASE("incomplete cache names missing scores") {
  Scratch s;
  s.write("corpus.jsonl", make_corpus(5, 3));
  auto config = base_config(s);
  CHECK_THROWS_AS(run_select(config), UserError);
  config.request_limit = 7;
  ScriptedBackend a(config.backend_a.substr(5)), b(config.backend_b.substr(5));
  CHECK_THROWS_AS(run_score(config, &a, b), Interrupted);
  try {
    run_select(config);
    FAIL("expected UserError");
  } catch (const UserError& e) {
    const std::string what = e.what();
    CHECK(what.find("scores missing") != std::string::npos);
    CHECK(what.find("s") != std::string::npos);
  }
}

TEST_CASE("tokenizer mismatch is fatal") {
  Scratch s;
  s.write("corpus.jsonl", make_corpus(3, 4));
  const auto config = base_config(s);
  ScriptedBackend a("V=31,window=4,ctx=40"), b(config.backend_b.substr(5));
  try {
    run_score(config, &a, b);
    FAIL("expected UserError");
  } catch (const UserError& e) {
    CHECK(std::string(e.what()).find("tokenize differently") != std::string::npos);
  }
  CHECK(a.requests_issued() + b.requests_issued() == 0);
}

TEST_CASE("selection parameters change without rescoring") {
  Scratch s;
  s.write("corpus.jsonl", make_corpus(30, 5));
  auto config = base_config(s);
  // Without backend A in play only this keeps every mode on the same budget.
  config.truncation.max_tokens = 40;
  ScriptedBackend a(config.backend_a.substr(5)), b(config.backend_b.substr(5));
  run_score(config, &a, b);

  config.alpha = 1.0;
  const auto at_one = run_select(config).manifest;
  config.mode = RunMode::hmg_only;
  config.alpha.reset();
  const auto hmg = run_select(config).manifest;
  CHECK(at_one.selected == hmg.selected);
  for (std::size_t i = 0; i < hmg.ranked.size(); ++i) {
    CHECK(at_one.ranked[i].sample_id == hmg.ranked[i].sample_id);
    CHECK(at_one.ranked[i].final_score == hmg.ranked[i].final_score);
  }

  config.mode = RunMode::gateau;
  config.alpha = 0.0;
  const auto at_zero = run_select(config).manifest;
  config.mode = RunMode::cam_only;
  const auto cam = run_select(config).manifest;
  for (std::size_t i = 0; i < cam.ranked.size(); ++i) CHECK(at_zero.ranked[i].sample_id == cam.ranked[i].sample_id);

  config.mode = RunMode::ppl_guidance;
  const auto guide = run_select(config).manifest;
  for (std::size_t i = 1; i < guide.ranked.size(); ++i) CHECK(*guide.ranked[i - 1].ppl_b >= *guide.ranked[i].ppl_b);

  config.mode = RunMode::gateau;
  config.alpha = 0.8;
  config.cut_ratio = 0.5;
  config.temperature = 0.5;
  const auto other = run_select(config).manifest;
  CHECK(other.selected.size() == 15);
  CHECK(other.fingerprint != at_one.fingerprint);
  CHECK(a.requests_issued() + b.requests_issued() > 0);
}

TEST_CASE("unscoreable and failed samples are excluded with reasons") {
  Scratch s;
  std::string corpus = make_corpus(6, 6);
  corpus += R"({"id":"long_tail","context":"1 2","instruction":")" + std::string(80, ' ') +
            std::string("1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20 21 22 23 24 25 26 27 28 29 30 31 1 2 3 4 5 6 7 8 9 10") +
            R"(","response":"1"})" + "\n";
  s.write("corpus.jsonl", corpus);
  auto config = base_config(s);
  config.retries = 1;
  ScriptedBackend a(config.backend_a.substr(5)), b(config.backend_b.substr(5));
  b.fail("s2#B:attn", "internal", 1);       // recovered by a retry
  b.fail("s3#B:seg0", "internal", 5);       // exhausts retries
  a.fail("s4#A:full", "context_overflow", 1);
  const auto summary = run_score(config, &a, b);
  CHECK(summary.unscoreable == 1);
  CHECK(summary.failed == 2);

  const auto m = run_select(config).manifest;
  CHECK(m.ranked.size() == 4);
  REQUIRE(m.excluded.size() == 3);
  CHECK(m.excluded[0].sample_id == "s3");
  CHECK(m.excluded[0].reason.find("internal") != std::string::npos);
  CHECK(m.excluded[1].sample_id == "s4");
  CHECK(m.excluded[1].reason.find("context_overflow") != std::string::npos);
  CHECK(m.excluded[2].sample_id == "long_tail");
  CHECK(m.excluded[2].reason.find("unscoreable") != std::string::npos);
  CHECK(report(m).find("long_tail: unscoreable") != std::string::npos);

  // Failures are cached: a rerun does not retry them.
  ScriptedBackend a2(config.backend_a.substr(5)), b2(config.backend_b.substr(5));
  CHECK(run_score(config, &a2, b2).requests == 0);
}

TEST_CASE("missing attention degrades to homologous guidance") {
  Scratch s;
  s.write("corpus.jsonl", make_corpus(10, 7));
  auto config = base_config(s);
  ScriptedBackend a(config.backend_a.substr(5)), b(config.backend_b.substr(5), false);
  run_score(config, &a, b);
  const auto m = run_select(config).manifest;
  CHECK(m.mode == RunMode::hmg_only);
  CHECK(m.config_json.find(R"("effective_mode":"hmg_only")") != std::string::npos);
  for (const auto& r : m.ranked) CHECK_FALSE(r.cas);

  config.mode = RunMode::cam_only;
  ScriptedBackend b2(config.backend_b.substr(5), false);
  CHECK_THROWS_AS(run_score(config, nullptr, b2), UserError);
}

TEST_CASE("truncation budget is capped by the backend windows") {
  Scratch s;
  s.write("corpus.jsonl", make_corpus(10, 8));
  auto config = base_config(s);
  const auto plan = make_plan(config, CopyLM(CopyLMParams::parse("V=32,window=4,ctx=40")).descriptor(),
                              CopyLM(CopyLMParams::parse("V=32,ctx=4096")).descriptor());
  CHECK(plan.truncation.max_tokens == 40);
  config.mode = RunMode::ppl_guidance;
  config.truncation.max_tokens = 100;
  const auto guide = make_plan(config, std::nullopt, CopyLM(CopyLMParams::parse("V=32,ctx=64")).descriptor());
  CHECK(guide.truncation.max_tokens == 64);
  CHECK_FALSE(guide.backend_a);
}

TEST_CASE("stages through the command entry points") {
  Scratch s;
  s.write("corpus.jsonl", make_corpus(20, 9));
  std::ostringstream shorts;
  for (int i = 0; i < 10; ++i) shorts << R"({"id":"q)" << i << R"(","instruction":"hi","response":"ok"})" << "\n";
  s.write("short.jsonl", shorts.str());
  auto config = base_config(s);
  config.backend_b = std::string("exec:") + DEPSEL_BIN + " serve-mock --params V=32,window=inf,ctx=4096";
  config.profile_dump = s.path("profiles.jsonl");
  config.short_source = s.path("short.jsonl");
  config.setting = MixSetting::limited_short;
  config.long_ratio = 0.3;

  const auto scored = cmd_score(config);
  CHECK(scored.samples == 20);
  const auto outcome = cmd_select(config);
  CHECK(outcome.manifest.selected.size() == 6);
  CHECK(outcome.manifest.ranked[0].alpha == kAlphaLimitedShort);
  CHECK(read_manifest(config.manifest) == outcome.manifest);
  const auto profiles = Scratch::read(*config.profile_dump);
  CHECK(std::count(profiles.begin(), profiles.end(), '\n') == 20);
  const auto first = Scratch::read(config.manifest);

  const auto mixed = cmd_emit(config);
  CHECK(mixed.long_count == 6);
  CHECK(mixed.short_count == 1);
  const auto train = Scratch::read(config.output);

  cmd_select(config);
  cmd_emit(config);
  CHECK(Scratch::read(config.manifest) == first);
  CHECK(Scratch::read(config.output) == train);
  CHECK(cmd_score(config).requests == 0);
}
