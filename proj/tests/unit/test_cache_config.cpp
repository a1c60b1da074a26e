#include <cmath>

#include "depsel/cache.hpp"
#include "depsel/config.hpp"
#include "depsel/error.hpp"
#include "doctest.h"
#include "scratch.hpp"

using namespace depsel;
using protocol::Mode;

namespace {

CacheKey key(const std::string& id, Mode mode, std::int64_t index = -1) {
  CacheKey k;
  k.sample_id = id;
  k.backend = "b";
  k.tokenizer = "tok";
  k.truncation = "left:64";
  k.mode = mode;
  if (index >= 0) {
    k.segment_length = 4;
    k.segment_index = index;
  }
  return k;
}

}  // namespace

TEST_CASE("cache entries persist across reopen") {
  Scratch s;
  const auto path = s.path("sub/cache.jsonl");
  {
    ScoreCache c(path);
    CHECK(c.size() == 0);
    c.put(CacheEntry{key("a", Mode::full_ppl), 1.25, std::nullopt, std::nullopt, std::nullopt});
    c.put(CacheEntry{key("a", Mode::segment_ppl, 0), 0.1 + 0.2, std::nullopt, std::nullopt, std::nullopt});
    c.put(CacheEntry{key("a", Mode::attention_profile), std::nullopt, std::vector<double>{0.125, 1.0 / 3.0},
                     std::nullopt, std::nullopt});
    c.put(CacheEntry{key("a", Mode::tokenize_info), std::nullopt, std::nullopt, TokenCounts{10, 2, 3}, std::nullopt});
    c.put(CacheEntry{key("b", Mode::full_ppl), std::nullopt, std::nullopt, std::nullopt,
                     protocol::ErrorInfo{"context_overflow", "too long"}});
    c.put_descriptor("B", protocol::BackendDescriptor{"long", 4096, true, "tok"});
  }
  ScoreCache c(path);
  CHECK(c.size() == 5);
  CHECK(*c.find(key("a", Mode::full_ppl))->mean_nll == 1.25);
  CHECK(*c.find(key("a", Mode::segment_ppl, 0))->mean_nll == 0.1 + 0.2);
  CHECK_FALSE(c.find(key("a", Mode::segment_ppl, 1)));
  CHECK(*c.find(key("a", Mode::attention_profile))->attention == std::vector<double>{0.125, 1.0 / 3.0});
  const auto counts = *c.find(key("a", Mode::tokenize_info))->counts;
  CHECK(counts.context == 10);
  CHECK(counts.instruction == 2);
  CHECK(counts.response == 3);
  CHECK(c.find(key("b", Mode::full_ppl))->error->code == "context_overflow");
  CHECK(c.descriptor("B")->context_window == 4096);
  CHECK_FALSE(c.descriptor("A"));
}

TEST_CASE("keys separate every component") {
  const auto base = key("a", Mode::segment_ppl, 0);
  auto other = base;
  other.backend = "b2";
  CHECK(other.str() != base.str());
  other = base;
  other.tokenizer = "tok2";
  CHECK(other.str() != base.str());
  other = base;
  other.truncation = "left:65";
  CHECK(other.str() != base.str());
  other = base;
  other.segment_length = 8;
  CHECK(other.str() != base.str());
  other = base;
  other.segment_index = 1;
  CHECK(other.str() != base.str());
  other = base;
  other.mode = Mode::full_ppl;
  CHECK(other.str() != base.str());
}

TEST_CASE("torn tail is discarded and appends continue cleanly") {
  Scratch s;
  const auto path = s.path("cache.jsonl");
  {
    ScoreCache c(path);
    c.put(CacheEntry{key("a", Mode::full_ppl), 1.0, std::nullopt, std::nullopt, std::nullopt});
  }
  const auto good = Scratch::read(path);
  std::ofstream(path, std::ios::app) << R"({"type":"score","key":{"sample_id":"b")";
  {
    ScoreCache c(path);
    CHECK(c.size() == 1);
    CHECK(Scratch::read(path) == good);
    c.put(CacheEntry{key("c", Mode::full_ppl), 2.0, std::nullopt, std::nullopt, std::nullopt});
  }
  ScoreCache c(path);
  CHECK(c.size() == 2);
  CHECK(*c.find(key("c", Mode::full_ppl))->mean_nll == 2.0);
}

TEST_CASE("bad records are skipped") {
  Scratch s;
  const auto path = s.write("cache.jsonl", "nonsense\n{\"type\":\"score\"}\n");
  ScoreCache c(path);
  CHECK(c.size() == 0);
}

TEST_CASE("descriptors are appended only when they change") {
  Scratch s;
  const auto path = s.path("cache.jsonl");
  const protocol::BackendDescriptor d{"long", 4096, true, "tok"};
  {
    ScoreCache c(path);
    c.put_descriptor("B", d);
    c.put_descriptor("B", d);
  }
  const auto once = Scratch::read(path);
  {
    ScoreCache c(path);
    c.put_descriptor("B", d);
  }
  CHECK(Scratch::read(path) == once);
  auto changed = d;
  changed.context_window = 8192;
  {
    ScoreCache c(path);
    c.put_descriptor("B", changed);
  }
  CHECK(ScoreCache(path).descriptor("B")->context_window == 8192);
}

TEST_CASE("config file parsing") {
  Scratch s;
  const auto path = s.write("run.json", R"({
    "corpus": "data/long.jsonl", "backend_a": "mock:window=4", "backend_b": "mock:window=inf",
    "mode": "cam_only", "segment_length": 16, "setting": "limited_short", "temperature": 2.0,
    "truncation": {"max_tokens": 512, "side": "left"}, "cut_ratio": 0.3, "no_norm": true,
    "mix": {"short_source": "short.jsonl", "long_ratio": 0.3},
    "cache": "/abs/cache.jsonl", "strict": true, "concurrency": 3, "retries": 0
  })");
  const auto c = load_config(path);
  CHECK(c.corpus == s.path("data/long.jsonl"));
  CHECK(c.cache == "/abs/cache.jsonl");
  CHECK(c.short_source == s.path("short.jsonl"));
  CHECK(c.mode == RunMode::cam_only);
  CHECK(c.segment_length == 16);
  CHECK(c.truncation.max_tokens == 512);
  CHECK(c.cut_ratio == 0.3);
  CHECK(c.no_norm);
  CHECK(c.strict);
  CHECK(c.concurrency == 3);
  CHECK(c.retries == 0);
  CHECK(c.resolved_alpha() == kAlphaLimitedShort);
  CHECK(c.mix_spec().short_fraction == 0.1);
  CHECK(*c.mix_spec().long_ratio == 0.3);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("setting defaults follow late overrides") {
  RunConfig c;
  CHECK(c.resolved_alpha() == kAlphaRealWorld);
  CHECK(c.mix_spec().short_fraction == 1.0);
  c.setting = MixSetting::limited_short;
  CHECK(c.resolved_alpha() == kAlphaLimitedShort);
  CHECK(c.mix_spec().short_fraction == 0.1);
  c.alpha = 0.5;
  c.short_fraction = 0.4;
  CHECK(c.resolved_alpha() == 0.5);
  CHECK(c.mix_spec().short_fraction == 0.4);
  CHECK(parse_setting(to_string(MixSetting::limited_short)) == MixSetting::limited_short);
  CHECK_THROWS_AS(parse_setting("lavish"), UserError);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config_from_json_text(R"({"corpse": "x"})"), UserError);
  CHECK_THROWS_AS(config_from_json_text(R"({"mix": {"ratio": 1}})"), UserError);
  CHECK_THROWS_AS(config_from_json_text(R"({"segment_length": "big"})"), UserError);
  CHECK_THROWS_AS(config_from_json_text(R"({"truncation": {"side": "middle"}})"), UserError);
  CHECK_THROWS_AS(config_from_json_text("[1]"), UserError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.json"), UserError);

  RunConfig c;
  c.backend_b = "mock:";
  CHECK_THROWS_AS(c.validate(), UserError);  // gateau needs backend A
  c.mode = RunMode::ppl_guidance;
  CHECK_NOTHROW(c.validate());
  for (auto mutate : std::vector<void (*)(RunConfig&)>{
           [](RunConfig& x) { x.alpha = 1.5; }, [](RunConfig& x) { x.temperature = 0; },
           [](RunConfig& x) { x.cut_ratio = 0; }, [](RunConfig& x) { x.segment_length = 0; },
           [](RunConfig& x) { x.truncation.side = TruncationSide::right; },
           [](RunConfig& x) { x.truncation.max_tokens = 0; }, [](RunConfig& x) { x.short_fraction = 2; },
           [](RunConfig& x) { x.concurrency = 0; }, [](RunConfig& x) { x.backend_b.clear(); }}) {
    RunConfig bad = c;
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(), UserError);
  }
}

TEST_CASE("sha256") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}
