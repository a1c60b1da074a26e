#include "depsel/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include "json.hpp"

namespace depsel {

using protocol::Mode;
using ojson = nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Keeps up to `window` requests in flight on one backend and appends each
// answer to the cache in submission order.
class RequestPump {
 public:
  RequestPump(Backend& backend, ScoreCache& cache, std::size_t window, std::size_t retries,
              std::optional<std::uint64_t> limit, std::uint64_t& issued, ScoreSummary& summary)
      : backend_(backend),
        cache_(cache),
        window_(std::max<std::size_t>(window, 1)),
        retries_(retries),
        limit_(limit),
        issued_(issued),
        summary_(summary) {}

  void push(PlannedRequest planned) {
    while (in_flight_.size() >= window_) drain_one();
    if (limit_ && issued_ >= *limit_) {
      throw Interrupted("stopped after " + std::to_string(issued_) + " scoring requests (request limit)");
    }
    ++issued_;
    auto future = backend_.submit(planned.request);
    in_flight_.push_back({std::move(planned), std::move(future)});
  }

  void finish() {
    while (!in_flight_.empty()) drain_one();
  }

 private:
  struct Pending {
    PlannedRequest planned;
    std::future<protocol::ScoringResponse> future;
  };

  void drain_one() {
    Pending p = std::move(in_flight_.front());
    in_flight_.pop_front();
    auto response = p.future.get();
    for (std::size_t attempt = 0; attempt < retries_ && response.error && response.error->code == protocol::codes::internal;
         ++attempt) {
      ++issued_;
      response = backend_.submit(p.planned.request).get();
    }
    record(p.planned, response);
  }

  void record(const PlannedRequest& planned, const protocol::ScoringResponse& response) {
    CacheEntry entry;
    entry.key = planned.key;
    if (response.error) {
      ++summary_.failed;
      entry.error = response.error;
      std::cerr << "depsel: warning: " << planned.request.request_id << " failed [" << response.error->code
                << "]: " << response.error->message << '\n';
      cache_.put(std::move(entry));
      return;
    }
    switch (planned.key.mode) {
      case Mode::tokenize_info:
        if (!response.token_count_context || !response.token_count_response) {
          throw BackendError("tokenize_info response " + response.request_id + " lacks token counts");
        }
        entry.counts = TokenCounts{static_cast<std::size_t>(*response.token_count_context),
                                   static_cast<std::size_t>(response.token_count_instruction.value_or(0)),
                                   static_cast<std::size_t>(*response.token_count_response)};
        break;
      case Mode::full_ppl:
      case Mode::segment_ppl:
        entry.mean_nll = response_nll(response);
        break;
      case Mode::attention_profile: {
        if (!response.per_segment_attention) {
          throw BackendError("attention response " + response.request_id + " lacks per_segment_attention");
        }
        const auto& values = *response.per_segment_attention;
        if (values.size() != planned.expected_segments) {
          throw BackendError("attention response " + response.request_id + " has " + std::to_string(values.size()) +
                             " segments, expected " + std::to_string(planned.expected_segments));
        }
        for (double v : values) {
          if (!std::isfinite(v) || v < 0.0) {
            throw BackendError("attention response " + response.request_id + " has an invalid entry");
          }
        }
        entry.attention = values;
        break;
      }
    }
    cache_.put(std::move(entry));
  }

  Backend& backend_;
  ScoreCache& cache_;
  std::size_t window_;
  std::size_t retries_;
  std::optional<std::uint64_t> limit_;
  std::uint64_t& issued_;
  ScoreSummary& summary_;
  std::deque<Pending> in_flight_;
};

ojson descriptor_json(const protocol::BackendDescriptor& d) {
  ojson j;
  j["name"] = d.name;
  j["context_window"] = d.context_window;
  j["supports_attention"] = d.supports_attention;
  j["tokenizer_fingerprint"] = d.tokenizer_fingerprint;
  return j;
}

std::string failure_reason(const CacheEntry& e) {
  return std::string(protocol::to_string(e.key.mode)) + " failed [" + e.error->code + "]: " + e.error->message;
}

void enqueue_all(const ScoringPlan& plan, const std::vector<Sample>& samples, ScoreCache& cache, RequestPump* pump_a,
                 RequestPump& pump_b, ScoreSummary& summary) {
  for (const auto& s : samples) {
    auto key = tokenize_key(plan, s.id);
    if (cache.find(key)) {
      ++summary.cache_hits;
      continue;
    }
    pump_b.push({BackendRole::b, std::move(key), tokenize_request(s, s.id + "#B:tokenize"), 0});
  }
  pump_b.finish();

  for (const auto& s : samples) {
    const auto* tok = cache.find(tokenize_key(plan, s.id));
    if (!tok || !tok->counts) continue;  // tokenization failed; recorded in the cache
    auto ts = truncate_for_scoring(s, plan.truncation, *tok->counts);
    if (!ts.scoreable) {
      ++summary.unscoreable;
      continue;
    }
    if (needs_cam(plan.mode) && ts.context_tokens == 0) {
      ++summary.unscoreable;
      continue;
    }
    for (auto& planned : required_requests(plan, ts)) {
      if (cache.find(planned.key)) {
        ++summary.cache_hits;
        continue;
      }
      if (planned.role == BackendRole::a) {
        pump_a->push(std::move(planned));
      } else {
        pump_b.push(std::move(planned));
      }
    }
  }
  if (pump_a) pump_a->finish();
  pump_b.finish();
}

}  // namespace

BackendSet open_backends(const RunConfig& config) {
  BackendSet set;
  if (needs_backend_a(config.mode)) set.a = open_backend(config.backend_a, config.concurrency);
  set.b = open_backend(config.backend_b, config.concurrency);
  return set;
}

ScoringPlan make_plan(const RunConfig& config, const std::optional<protocol::BackendDescriptor>& a,
                      const protocol::BackendDescriptor& b) {
  ScoringPlan plan;
  plan.requested_mode = config.mode;
  plan.mode = config.mode;
  plan.backend_b = b;
  plan.segment_length = config.segment_length;
  if (needs_backend_a(config.mode)) {
    if (!a) throw UserError("mode " + std::string(to_string(config.mode)) + " needs backend A");
    check_homologous(*a, b, config.allow_nonhomologous);
    plan.backend_a = a;
  }
  if (needs_cam(config.mode) && !b.supports_attention) {
    if (config.mode == RunMode::cam_only) {
      throw UserError("backend " + b.name + " does not report attention; cam_only mode is unavailable");
    }
    std::cerr << "depsel: warning: backend " << b.name
              << " does not report attention; falling back to homologous-model guidance only\n";
    plan.mode = RunMode::hmg_only;
  }
  plan.truncation = config.truncation;
  plan.truncation.max_tokens = std::min<std::int64_t>(plan.truncation.max_tokens, b.context_window);
  if (plan.backend_a) {
    plan.truncation.max_tokens = std::min<std::int64_t>(plan.truncation.max_tokens, plan.backend_a->context_window);
  }
  return plan;
}

CacheKey tokenize_key(const ScoringPlan& plan, const std::string& sample_id) {
  CacheKey k;
  k.sample_id = sample_id;
  k.backend = plan.backend_b.name;
  k.tokenizer = plan.backend_b.tokenizer_fingerprint;
  k.mode = Mode::tokenize_info;
  return k;
}

std::vector<PlannedRequest> required_requests(const ScoringPlan& plan, const TruncatedSample& sample) {
  std::vector<PlannedRequest> out;
  const auto& id = sample.sample.id;
  auto key_for = [&](const protocol::BackendDescriptor& d, Mode mode) {
    CacheKey k;
    k.sample_id = id;
    k.backend = d.name;
    k.tokenizer = d.tokenizer_fingerprint;
    k.truncation = plan.truncation.key();
    k.mode = mode;
    return k;
  };

  if (plan.mode != RunMode::cam_only) {
    if (plan.backend_a) {
      out.push_back({BackendRole::a, key_for(*plan.backend_a, Mode::full_ppl), full_request(sample, id + "#A:full"), 0});
    }
    out.push_back({BackendRole::b, key_for(plan.backend_b, Mode::full_ppl), full_request(sample, id + "#B:full"), 0});
  }
  if (needs_cam(plan.mode)) {
    const auto segments = segment_plan(sample.context_tokens, plan.segment_length).size();
    const auto length = static_cast<std::int64_t>(plan.segment_length);
    for (std::size_t i = 0; i < segments; ++i) {
      auto k = key_for(plan.backend_b, Mode::segment_ppl);
      k.segment_length = length;
      k.segment_index = static_cast<std::int64_t>(i);
      out.push_back({BackendRole::b, std::move(k),
                     segment_request(sample, plan.segment_length, i, id + "#B:seg" + std::to_string(i)), 0});
    }
    auto k = key_for(plan.backend_b, Mode::attention_profile);
    k.segment_length = length;
    out.push_back(
        {BackendRole::b, std::move(k), attention_request(sample, plan.segment_length, id + "#B:attn"), segments});
  }
  return out;
}

ScoreSummary run_score(const RunConfig& config, Backend* backend_a, Backend& backend_b) {
  config.validate();
  std::optional<protocol::BackendDescriptor> a_desc;
  if (needs_backend_a(config.mode)) {
    if (!backend_a) throw UserError("mode " + std::string(to_string(config.mode)) + " needs backend A");
    a_desc = backend_a->descriptor();
  }
  const auto plan = make_plan(config, a_desc, backend_b.descriptor());

  ScoreCache cache(config.cache);
  if (plan.backend_a) cache.put_descriptor("A", *plan.backend_a);
  cache.put_descriptor("B", plan.backend_b);

  ScoreSummary summary;
  LoadOptions load_options;
  load_options.strict = config.strict;
  load_options.skip_log = config.cache.string() + ".skips.log";
  const auto samples = load_corpus(config.corpus, SampleKind::long_context, load_options, &summary.load);
  summary.samples = samples.size();

  std::uint64_t issued = 0;
  const std::size_t window = config.concurrency * 2;
  RequestPump pump_b(backend_b, cache, window, config.retries, config.request_limit, issued, summary);
  std::optional<RequestPump> pump_a;
  if (plan.backend_a) pump_a.emplace(*backend_a, cache, window, config.retries, config.request_limit, issued, summary);

  try {
    enqueue_all(plan, samples, cache, pump_a ? &*pump_a : nullptr, pump_b, summary);
  } catch (const Interrupted&) {
    // Keep whatever is already in flight so a rerun does not ask again.
    if (pump_a) pump_a->finish();
    pump_b.finish();
    summary.requests = issued;
    throw;
  }
  summary.requests = issued;
  return summary;
}

ScoreSummary cmd_score(const RunConfig& config) {
  config.validate();
  auto backends = open_backends(config);
  return run_score(config, backends.a.get(), *backends.b);
}

SelectOutcome run_select(const RunConfig& config) {
  config.validate();
  SelectOutcome outcome;
  auto stage_start = Clock::now();

  if (!std::filesystem::exists(config.cache)) {
    throw UserError("score cache " + config.cache.string() + " does not exist; run the score stage first");
  }
  ScoreCache cache(config.cache);
  auto b_desc = cache.descriptor("B");
  if (!b_desc) throw UserError("score cache has no descriptor for backend B; run the score stage first");
  std::optional<protocol::BackendDescriptor> a_desc;
  if (needs_backend_a(config.mode)) {
    a_desc = cache.descriptor("A");
    if (!a_desc) throw UserError("score cache has no descriptor for backend A; run the score stage first");
  }
  const auto plan = make_plan(config, a_desc, *b_desc);

  LoadOptions load_options;
  load_options.strict = config.strict;
  const auto samples = load_corpus(config.corpus, SampleKind::long_context, load_options);
  outcome.timings.push_back({"load", seconds_since(stage_start)});
  stage_start = Clock::now();

  std::vector<std::string> missing;
  std::size_t missing_count = 0;
  auto note_missing = [&](const CacheKey& k) {
    ++missing_count;
    if (missing.size() < 10) {
      std::string text = k.sample_id + " " + std::string(protocol::to_string(k.mode)) + " on " + k.backend;
      if (k.segment_index >= 0) text += " segment " + std::to_string(k.segment_index);
      missing.push_back(std::move(text));
    }
  };

  std::vector<Exclusion> excluded;
  std::vector<PerplexityPair> pairs;
  std::vector<PerplexityRank> guidance;
  std::vector<SegmentProfile> profiles;

  for (const auto& s : samples) {
    const auto* tok = cache.find(tokenize_key(plan, s.id));
    if (!tok) {
      note_missing(tokenize_key(plan, s.id));
      continue;
    }
    if (tok->error) {
      excluded.push_back({s.id, failure_reason(*tok)});
      continue;
    }
    auto ts = truncate_for_scoring(s, plan.truncation, *tok->counts);
    if (!ts.scoreable) {
      excluded.push_back({s.id, "unscoreable: " + ts.reason});
      continue;
    }
    if (needs_cam(plan.mode) && ts.context_tokens == 0) {
      excluded.push_back({s.id, "unscoreable: no context tokens left after truncation"});
      continue;
    }

    const auto planned = required_requests(plan, ts);
    std::vector<const CacheEntry*> entries;
    bool complete = true;
    const CacheEntry* failure = nullptr;
    for (const auto& p : planned) {
      const auto* e = cache.find(p.key);
      if (!e) {
        note_missing(p.key);
        complete = false;
        continue;
      }
      if (e->error && !failure) failure = e;
      entries.push_back(e);
    }
    if (!complete) continue;
    if (failure) {
      excluded.push_back({s.id, failure_reason(*failure)});
      continue;
    }

    std::optional<double> nll_a, nll_b;
    std::vector<double> segment_nlls;
    const std::vector<double>* attention = nullptr;
    for (std::size_t i = 0; i < planned.size(); ++i) {
      const auto& p = planned[i];
      const auto* e = entries[i];
      switch (p.key.mode) {
        case Mode::full_ppl:
          (p.role == BackendRole::a ? nll_a : nll_b) = e->mean_nll.value();
          break;
        case Mode::segment_ppl:
          segment_nlls.push_back(e->mean_nll.value());
          break;
        case Mode::attention_profile:
          attention = &e->attention.value();
          break;
        case Mode::tokenize_info:
          break;
      }
    }

    switch (plan.mode) {
      case RunMode::ppl_guidance:
        guidance.push_back({s.id, std::exp(*nll_b), 0});
        break;
      case RunMode::hmg_only:
        pairs.push_back({s.id, std::exp(*nll_a), std::exp(*nll_b)});
        break;
      case RunMode::cam_only:
        profiles.push_back(make_profile(s.id, plan.segment_length, segment_nlls, *attention));
        break;
      case RunMode::gateau:
        pairs.push_back({s.id, std::exp(*nll_a), std::exp(*nll_b)});
        profiles.push_back(make_profile(s.id, plan.segment_length, segment_nlls, *attention));
        break;
    }
  }

  if (missing_count > 0) {
    std::string text = "score cache is incomplete: " + std::to_string(missing_count) + " scores missing, e.g.";
    for (const auto& m : missing) text += "\n  " + m;
    throw UserError(text + "\nrun the score stage again to fill them in");
  }
  outcome.timings.push_back({"gather", seconds_since(stage_start)});
  stage_start = Clock::now();

  std::vector<FinalScoreRecord> records;
  const CombineOptions combine_options{plan.mode, config.resolved_alpha(), config.temperature};
  switch (plan.mode) {
    case RunMode::ppl_guidance:
      records = guidance_records(rank_by_perplexity(std::move(guidance)));
      break;
    case RunMode::hmg_only:
    case RunMode::gateau: {
      const auto hmg = compute_hmg(pairs, HmgOptions{config.temperature, config.no_norm});
      records = combine(hmg, profiles, combine_options);
      break;
    }
    case RunMode::cam_only:
      records = combine({}, profiles, combine_options);
      break;
  }
  outcome.timings.push_back({"score", seconds_since(stage_start)});
  stage_start = Clock::now();

  outcome.manifest = select(std::move(records), config.cut_ratio);
  outcome.manifest.mode = plan.mode;
  outcome.manifest.excluded = std::move(excluded);

  ojson cfg;
  cfg["mode"] = to_string(plan.requested_mode);
  cfg["effective_mode"] = to_string(plan.mode);
  cfg["backend_a"] = plan.backend_a ? descriptor_json(*plan.backend_a) : ojson();
  cfg["backend_b"] = descriptor_json(plan.backend_b);
  cfg["segment_length"] = plan.segment_length;
  cfg["alpha"] = config.resolved_alpha();
  cfg["temperature"] = config.temperature;
  cfg["no_norm"] = config.no_norm;
  cfg["truncation"] = plan.truncation.key();
  cfg["cut_ratio"] = config.cut_ratio;
  outcome.manifest.config_json = cfg.dump();
  outcome.manifest.fingerprint = sha256_hex(outcome.manifest.config_json);
  outcome.profiles = std::move(profiles);
  outcome.timings.push_back({"select", seconds_since(stage_start)});
  return outcome;
}

SelectOutcome cmd_select(const RunConfig& config) {
  auto outcome = run_select(config);
  const auto start = Clock::now();
  write_manifest(outcome.manifest, config.manifest);
  if (config.profile_dump) {
    std::ofstream out(*config.profile_dump, std::ios::binary | std::ios::trunc);
    if (!out) throw UserError("cannot write profile dump " + config.profile_dump->string());
    for (const auto& p : outcome.profiles) {
      ojson j;
      j["sample_id"] = p.sample_id;
      j["segment_length"] = p.segment_length;
      j["n_segments"] = p.n_segments;
      j["importance"] = p.importance;
      j["attention"] = p.attention;
      j["cas"] = p.cas;
      out << j.dump() << '\n';
    }
  }
  outcome.timings.push_back({"write", seconds_since(start)});
  return outcome;
}

MixSummary cmd_emit(const RunConfig& config) {
  const auto manifest = read_manifest(config.manifest);
  LoadOptions options;
  options.strict = config.strict;
  return mix_training_set(manifest, config.corpus, config.mix_spec(), config.output, options);
}

}  // namespace depsel
