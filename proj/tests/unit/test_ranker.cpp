#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "depsel/error.hpp"
#include "depsel/ranker.hpp"
#include "doctest.h"
#include "scratch.hpp"

using namespace depsel;

namespace {

std::vector<HmgRecord> hmg_of(const std::vector<double>& hmp) {
  std::vector<HmgRecord> out;
  for (std::size_t i = 0; i < hmp.size(); ++i) {
    HmgRecord r;
    r.sample_id = "s" + std::to_string(1000 + i);
    r.hmp = hmp[i];
    out.push_back(r);
  }
  return out;
}

std::vector<SegmentProfile> cam_of(const std::vector<double>& cas) {
  std::vector<SegmentProfile> out;
  for (std::size_t i = 0; i < cas.size(); ++i) {
    SegmentProfile p;
    p.sample_id = "s" + std::to_string(1000 + i);
    p.cas = cas[i];
    out.push_back(p);
  }
  return out;
}

std::vector<std::string> ids(const std::vector<FinalScoreRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) out.push_back(r.sample_id);
  return out;
}

// Descending by key, ties by ascending id.
std::vector<std::string> order_by(const std::vector<double>& key) {
  std::vector<std::size_t> idx(key.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return key[a] != key[b] ? key[a] > key[b] : a < b; });
  std::vector<std::string> out;
  for (auto i : idx) out.push_back("s" + std::to_string(1000 + i));
  return out;
}

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

SelectionManifest sample_manifest() {
  const auto records = combine(hmg_of({0.4, -0.1, -0.3}), cam_of({0.9, 0.5, 0.7}), CombineOptions{});
  auto m = select(records, 0.5);
  m.fingerprint = "abc123";
  m.config_json = R"({"mode":"gateau"})";
  m.excluded = {{"s9", "unscoreable: too long"}};
  return m;
}

}  // namespace

TEST_CASE("final score follows the weighted formula") {
  const std::vector<double> hmp{0.3, -0.2, -0.1}, cas{0.8, 0.95, 0.6};
  const auto r = combine(hmg_of(hmp), cam_of(cas), CombineOptions{RunMode::gateau, 0.8, 1.0});
  REQUIRE(r.size() == 3);
  const double zh = std::exp(0.3) + std::exp(-0.2) + std::exp(-0.1);
  const double zc = std::exp(0.8) + std::exp(0.95) + std::exp(0.6);
  for (const auto& x : r) {
    const auto i = static_cast<std::size_t>(std::stoi(x.sample_id.substr(1)) - 1000);
    CHECK(*x.norm_hmp == doctest::Approx(std::exp(hmp[i]) / zh).epsilon(1e-14));
    CHECK(*x.norm_cas == doctest::Approx(std::exp(cas[i]) / zc).epsilon(1e-14));
    CHECK(x.final_score == 0.8 * *x.norm_hmp + (1.0 - 0.8) * *x.norm_cas);
    CHECK(x.alpha == 0.8);
  }
  CHECK(r[0].rank == 1);
  CHECK(r[2].rank == 3);
}

TEST_CASE("limit cases of alpha") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 50;
    const auto hmp = random_values(rng, n, -0.5, 0.5);
    const auto cas = random_values(rng, n, 0.1, 1.0);
    const auto h = hmg_of(hmp);
    const auto c = cam_of(cas);
    const auto a1 = combine(h, c, CombineOptions{RunMode::gateau, 1.0, 1.0});
    const auto a0 = combine(h, c, CombineOptions{RunMode::gateau, 0.0, 1.0});
    const auto only_h = combine(h, {}, CombineOptions{RunMode::hmg_only, 0.3, 1.0});
    const auto only_c = combine({}, c, CombineOptions{RunMode::cam_only, 0.3, 1.0});
    CHECK(ids(a1) == order_by(hmp));
    CHECK(ids(a0) == order_by(cas));
    CHECK(ids(only_h) == ids(a1));
    CHECK(ids(only_c) == ids(a0));
    for (std::size_t i = 0; i < n; ++i) CHECK(only_h[i].final_score == a1[i].final_score);
    CHECK(only_h[0].alpha == 1.0);
    CHECK(only_c[0].alpha == 0.0);
  }
}

TEST_CASE("raising one HMP never lowers its rank") {
  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 30;
    auto hmp = random_values(rng, n, -0.5, 0.5);
    const auto cas = random_values(rng, n, 0.1, 1.0);
    const double alpha = 0.05 + 0.95 * static_cast<double>(rng() % 100) / 100.0;
    const std::size_t k = rng() % n;
    const std::string id = "s" + std::to_string(1000 + k);
    auto rank_of = [&](const std::vector<double>& h) {
      for (const auto& r : combine(hmg_of(h), cam_of(cas), CombineOptions{RunMode::gateau, alpha, 1.0})) {
        if (r.sample_id == id) return r.rank;
      }
      return std::size_t{0};
    };
    const auto before = rank_of(hmp);
    hmp[k] += 0.01 + static_cast<double>(rng() % 50) / 100.0;
    CHECK(rank_of(hmp) <= before);
  }
}

TEST_CASE("ranking survives shifting both score columns") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    auto hmp = random_values(rng, n, -0.5, 0.5);
    auto cas = random_values(rng, n, 0.1, 1.0);
    const auto base = combine(hmg_of(hmp), cam_of(cas), CombineOptions{});
    for (auto& x : hmp) x += 0.125;
    for (auto& x : cas) x -= 0.0625;
    const auto moved = combine(hmg_of(hmp), cam_of(cas), CombineOptions{});
    CHECK(ids(moved) == ids(base));
  }
}

TEST_CASE("combine rejects bad input") {
  CHECK_THROWS_AS(combine(hmg_of({0.1}), cam_of({0.5}), CombineOptions{RunMode::gateau, 1.5, 1.0}), UserError);
  CHECK_THROWS_AS(combine(hmg_of({0.1}), cam_of({0.5}), CombineOptions{RunMode::gateau, -0.1, 1.0}), UserError);
  CHECK_THROWS_AS(combine(hmg_of({0.1, 0.2}), cam_of({0.5}), CombineOptions{}), UserError);
  CHECK_THROWS_AS(combine(hmg_of({0.1}), cam_of({0.5, 0.6}), CombineOptions{}), UserError);
  CHECK_THROWS_AS(combine(hmg_of({0.1}), cam_of({0.5}), CombineOptions{RunMode::ppl_guidance, 0.8, 1.0}), UserError);
  CHECK(kAlphaRealWorld == 0.8);
  CHECK(kAlphaLimitedShort == 0.7);
}

TEST_CASE("equal finals rank by ascending id") {
  std::vector<FinalScoreRecord> r(3);
  r[0].sample_id = "b";
  r[1].sample_id = "c";
  r[2].sample_id = "a";
  for (auto& x : r) x.final_score = 0.5;
  const auto m = select(r, 1.0);
  CHECK(m.selected == std::vector<std::string>{"a", "b", "c"});
  CHECK(m.ranked[0].rank == 1);
}

TEST_CASE("finals that round together keep the raw score order") {
  // exp(h) rounds to the same double for these, so the finals coincide.
  const std::vector<double> hmp{1e-30, 3e-30, 2e-30, 0.0, 3e-30};
  for (auto mode : {RunMode::hmg_only, RunMode::gateau}) {
    const auto cam = mode == RunMode::gateau ? cam_of({0.1, 0.1, 0.1, 0.1, 0.1}) : std::vector<SegmentProfile>{};
    const auto out = combine(hmg_of(hmp), cam, {mode, 1.0, 1.0});
    CHECK(out.front().final_score == out.back().final_score);
    CHECK(ids(out) == std::vector<std::string>{"s1001", "s1004", "s1002", "s1000", "s1003"});
  }
  const auto out = combine({}, cam_of(hmp), {RunMode::cam_only, 0.0, 2.0});
  CHECK(ids(out) == std::vector<std::string>{"s1001", "s1004", "s1002", "s1000", "s1003"});
}

TEST_CASE("selection count examples") {
  std::vector<FinalScoreRecord> r(10000);
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i].sample_id = "s" + std::to_string(i);
    r[i].final_score = static_cast<double>(i % 977);
  }
  CHECK(select(r, 0.1).selected.size() == 1000);
  const auto all = select(r, 1.0);
  CHECK(all.selected.size() == 10000);
  CHECK(all.ranked.size() == 10000);
  CHECK_THROWS_AS(select({}, 0.1), UserError);
  CHECK_THROWS_AS(select(r, 0.0), UserError);
  CHECK_THROWS_AS(select(r, 1.01), UserError);
}

TEST_CASE("selection count matches exact decimal rounding") {
  // For a ratio of k/100, round-half-away of k*m/100 in integers.
  for (std::size_t k = 1; k <= 100; ++k) {
    const double ratio = static_cast<double>(k) / 100.0;
    for (std::size_t m = 1; m <= 1000; ++m) {
      const std::size_t expect = (k * m + 50) / 100;
      if (selection_count(ratio, m) != expect) {
        CAPTURE(k);
        CAPTURE(m);
        CHECK(selection_count(ratio, m) == expect);
      }
    }
  }
  for (double ratio : {0.1, 0.3, 0.5, 1.0}) {
    for (std::size_t m = 1; m <= 1000; ++m) {
      std::vector<FinalScoreRecord> r(m);
      for (std::size_t i = 0; i < m; ++i) r[i].sample_id = std::to_string(i);
      CHECK(select(r, ratio).selected.size() == (static_cast<std::size_t>(std::lround(ratio * 10)) * m + 5) / 10);
    }
  }
}

TEST_CASE("guidance records keep the perplexity order") {
  const auto r = guidance_records(std::vector<PerplexityRank>{{"id1", 46.0, 1}, {"id3", 20.0, 2}, {"id2", 8.2, 3}});
  CHECK(ids(r) == std::vector<std::string>{"id1", "id3", "id2"});
  CHECK(*r[0].ppl_b == 46.0);
  CHECK(r[2].rank == 3);
}

TEST_CASE("manifest round-trips and is byte-stable") {
  const auto m = sample_manifest();
  std::ostringstream a, b;
  write_manifest(m, a);
  write_manifest(m, b);
  CHECK(a.str() == b.str());

  Scratch s;
  write_manifest(m, s.path("m.jsonl"));
  CHECK(Scratch::read(s.path("m.jsonl")) == a.str());
  const auto back = read_manifest(s.path("m.jsonl"));
  CHECK(back == m);
  std::ostringstream c;
  write_manifest(back, c);
  CHECK(c.str() == a.str());

  const auto first = a.str().substr(0, a.str().find('\n'));
  CHECK(first.rfind(R"({"type":"header","fingerprint":"abc123","mode":"gateau","cut_ratio":0.5,)", 0) == 0);
  CHECK_THROWS_AS(read_manifest(s.path("missing.jsonl")), UserError);
  s.write("bad.jsonl", "{\"type\":\"record\"}\n");
  CHECK_THROWS_AS(read_manifest(s.path("bad.jsonl")), UserError);
}

TEST_CASE("nearest-rank quantiles") {
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  CHECK(nearest_rank_quantile(v, 0.0) == 1);
  CHECK(nearest_rank_quantile(v, 0.1) == 1);
  CHECK(nearest_rank_quantile(v, 0.25) == 3);
  CHECK(nearest_rank_quantile(v, 0.5) == 5);
  CHECK(nearest_rank_quantile(v, 0.9) == 9);
  CHECK(nearest_rank_quantile(v, 1.0) == 10);
}

TEST_CASE("report sections") {
  auto m = sample_manifest();
  m.excluded.clear();
  auto text = report(m);
  CHECK(text.find("ranked: 3") != std::string::npos);
  for (const char* id : {"s1000", "s1001", "s1002"}) CHECK(text.find(id) != std::string::npos);
  CHECK(text.find("\nexcluded:\n") == std::string::npos);
  CHECK(text.find("timing:") == std::string::npos);

  m.excluded = {{"s9", "unscoreable: too long"}};
  const std::vector<StageTiming> timings{{"score", 1.5}};
  text = report(m, timings);
  CHECK(text.find("excluded:\n  s9: unscoreable: too long") != std::string::npos);
  CHECK(text.find("score: 1.500 s") != std::string::npos);
}

TEST_CASE("run mode literals") {
  for (auto mode : {RunMode::gateau, RunMode::hmg_only, RunMode::cam_only, RunMode::ppl_guidance}) {
    CHECK(parse_run_mode(to_string(mode)) == mode);
  }
  CHECK_THROWS_AS(parse_run_mode("best"), UserError);
  CHECK(needs_backend_a(RunMode::gateau));
  CHECK_FALSE(needs_backend_a(RunMode::cam_only));
  CHECK(needs_cam(RunMode::cam_only));
  CHECK_FALSE(needs_cam(RunMode::ppl_guidance));
}
