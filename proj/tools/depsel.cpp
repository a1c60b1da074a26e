// depsel: long-context instruction data selection.
//   score      fill the score cache from the scoring backends
//   select     rank and cut from the cache, write the manifest
//   emit       mix selected long samples with short data into a training set
//   report     summarise an existing manifest
//   serve-mock serve the built-in CopyLM backend over stdio or TCP

#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "depsel/config.hpp"
#include "depsel/copylm.hpp"
#include "depsel/error.hpp"
#include "depsel/gateway.hpp"
#include "depsel/pipeline.hpp"
#include "depsel/ranker.hpp"
#include "depsel/transport.hpp"

namespace {

using namespace depsel;

struct Overrides {
  std::string config;
  std::optional<std::string> corpus, backend_a, backend_b, mode, setting, cache, manifest, output, profile_dump,
      short_source;
  std::optional<std::size_t> segment_length, concurrency, retries;
  std::optional<double> alpha, temperature, cut_ratio, short_fraction, long_ratio;
  std::optional<std::int64_t> max_tokens;
  std::optional<std::uint64_t> request_limit;
  bool no_norm = false, strict = false, allow_nonhomologous = false;
};

void add_run_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON config file");
  cmd->add_option("--corpus", o.corpus, "long-context corpus (JSONL)");
  cmd->add_option("--backend-a", o.backend_a, "short-window backend endpoint (mock:, exec:, tcp:)");
  cmd->add_option("--backend-b", o.backend_b, "long-window backend endpoint");
  cmd->add_option("--mode", o.mode, "gateau | hmg_only | cam_only | ppl_guidance");
  cmd->add_option("--segment-length", o.segment_length, "context segment length in tokens");
  cmd->add_option("--setting", o.setting, "real_world | limited_short");
  cmd->add_option("--alpha", o.alpha, "weight of the HMP term");
  cmd->add_option("--temperature", o.temperature, "softmax temperature");
  cmd->add_flag("--no-norm", o.no_norm, "HMP as raw perplexity difference");
  cmd->add_option("--max-tokens", o.max_tokens, "token budget per scored sample");
  cmd->add_option("--cut-ratio", o.cut_ratio, "fraction of the corpus to select");
  cmd->add_option("--short-source", o.short_source, "short instruction data (JSONL)");
  cmd->add_option("--short-fraction", o.short_fraction, "fraction of the short data to mix in");
  cmd->add_option("--long-ratio", o.long_ratio, "expected cut ratio of the manifest");
  cmd->add_option("--cache", o.cache, "score cache path");
  cmd->add_option("--manifest", o.manifest, "selection manifest path");
  cmd->add_option("--output", o.output, "training-set output path");
  cmd->add_option("--profile-dump", o.profile_dump, "write per-sample segment profiles here");
  cmd->add_flag("--strict", o.strict, "abort on malformed corpus lines");
  cmd->add_flag("--allow-nonhomologous", o.allow_nonhomologous, "downgrade the homologous-model check to a warning");
  cmd->add_option("--concurrency", o.concurrency, "in-flight requests per backend");
  cmd->add_option("--retries", o.retries, "retries for retryable backend errors");
  cmd->add_option("--request-limit", o.request_limit, "stop after this many scoring requests");
}

RunConfig resolve_config(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.corpus) c.corpus = *o.corpus;
  if (o.backend_a) c.backend_a = *o.backend_a;
  if (o.backend_b) c.backend_b = *o.backend_b;
  if (o.mode) c.mode = parse_run_mode(*o.mode);
  if (o.setting) c.setting = parse_setting(*o.setting);
  if (o.segment_length) c.segment_length = *o.segment_length;
  if (o.alpha) c.alpha = *o.alpha;
  if (o.temperature) c.temperature = *o.temperature;
  if (o.no_norm) c.no_norm = true;
  if (o.max_tokens) c.truncation.max_tokens = *o.max_tokens;
  if (o.cut_ratio) c.cut_ratio = *o.cut_ratio;
  if (o.short_source) c.short_source = *o.short_source;
  if (o.short_fraction) c.short_fraction = *o.short_fraction;
  if (o.long_ratio) c.long_ratio = *o.long_ratio;
  if (o.cache) c.cache = *o.cache;
  if (o.manifest) c.manifest = *o.manifest;
  if (o.output) c.output = *o.output;
  if (o.profile_dump) c.profile_dump = *o.profile_dump;
  if (o.strict) c.strict = true;
  if (o.allow_nonhomologous) c.allow_nonhomologous = true;
  if (o.concurrency) c.concurrency = *o.concurrency;
  if (o.retries) c.retries = *o.retries;
  if (o.request_limit) c.request_limit = *o.request_limit;
  return c;
}

int run_score_cmd(const Overrides& o) {
  const auto config = resolve_config(o);
  const auto s = cmd_score(config);
  std::cerr << "depsel: scored " << s.samples << " samples: " << s.requests << " requests, " << s.cache_hits
            << " cache hits, " << s.failed << " failed, " << s.unscoreable << " unscoreable, "
            << s.load.empty_response << " empty responses and " << s.load.malformed << " malformed lines skipped\n";
  return 0;
}

int run_select_cmd(const Overrides& o) {
  const auto config = resolve_config(o);
  const auto outcome = cmd_select(config);
  std::cout << report(outcome.manifest, outcome.timings);
  std::cerr << "depsel: wrote " << config.manifest.string() << '\n';
  return 0;
}

int run_emit_cmd(const Overrides& o) {
  const auto config = resolve_config(o);
  const auto s = cmd_emit(config);
  std::cerr << "depsel: wrote " << config.output.string() << ": " << s.long_count << " long + " << s.short_count
            << " short samples\n";
  return 0;
}

int run_report_cmd(const std::string& manifest) {
  std::cout << report(read_manifest(manifest));
  return 0;
}

int run_serve_mock(const std::string& params_spec, std::optional<std::uint16_t> tcp_port,
                   const std::string& port_file, std::optional<std::size_t> max_connections) {
  const auto params = CopyLMParams::parse(params_spec);
  if (!tcp_port) {
    auto channel = stdio_channel();
    serve_mock(params, *channel);
    return 0;
  }
  TcpListener listener(*tcp_port);
  std::cerr << "depsel: serving " << params.resolved_name() << " on 127.0.0.1:" << listener.port() << '\n';
  if (!port_file.empty()) {
    const std::string tmp = port_file + ".tmp";
    std::ofstream(tmp) << listener.port() << '\n';
    std::filesystem::rename(tmp, port_file);
  }
  serve_mock_tcp(params, listener, max_connections);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  ignore_sigpipe();
  CLI::App app{"Long-context instruction data selection"};
  app.require_subcommand(1);

  Overrides score_o, select_o, emit_o;
  add_run_options(app.add_subcommand("score", "fill the score cache"), score_o);
  add_run_options(app.add_subcommand("select", "rank, cut and write the manifest"), select_o);
  add_run_options(app.add_subcommand("emit", "write the mixed training set"), emit_o);

  std::string report_manifest;
  auto* report_cmd = app.add_subcommand("report", "summarise a manifest");
  report_cmd->add_option("manifest", report_manifest, "manifest path")->required();

  std::string params_spec;
  std::optional<std::uint16_t> tcp_port;
  std::string port_file;
  std::optional<std::size_t> max_connections;
  auto* serve_cmd = app.add_subcommand("serve-mock", "serve CopyLM over stdio or TCP");
  serve_cmd->add_option("--params", params_spec, "e.g. V=32,beta=9,window=4,gamma=9,shift=0,ctx=4096");
  serve_cmd->add_option("--tcp", tcp_port, "listen on this port (0 picks one) instead of stdio");
  serve_cmd->add_option("--port-file", port_file, "write the bound port here");
  serve_cmd->add_option("--max-connections", max_connections, "exit after serving this many connections");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (app.got_subcommand("score")) return run_score_cmd(score_o);
    if (app.got_subcommand("select")) return run_select_cmd(select_o);
    if (app.got_subcommand("emit")) return run_emit_cmd(emit_o);
    if (app.got_subcommand("report")) return run_report_cmd(report_manifest);
    return run_serve_mock(params_spec, tcp_port, port_file, max_connections);
  } catch (const Error& e) {
    std::cerr << "depsel: error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::invalid_argument& e) {
    std::cerr << "depsel: error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "depsel: error: " << e.what() << '\n';
    return 2;
  }
}
