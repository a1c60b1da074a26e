#include "depsel/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "depsel/error.hpp"
#include "json.hpp"

namespace depsel {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string_view to_string(RunMode mode) {
  switch (mode) {
    case RunMode::gateau: return "gateau";
    case RunMode::hmg_only: return "hmg_only";
    case RunMode::cam_only: return "cam_only";
    case RunMode::ppl_guidance: return "ppl_guidance";
  }
  return "unknown";
}

RunMode parse_run_mode(std::string_view text) {
  for (RunMode m : {RunMode::gateau, RunMode::hmg_only, RunMode::cam_only, RunMode::ppl_guidance}) {
    if (to_string(m) == text) return m;
  }
  throw UserError("unknown mode '" + std::string(text) + "' (gateau, hmg_only, cam_only, ppl_guidance)");
}

bool needs_backend_a(RunMode mode) { return mode == RunMode::gateau || mode == RunMode::hmg_only; }
bool needs_cam(RunMode mode) { return mode == RunMode::gateau || mode == RunMode::cam_only; }

namespace {

// Sign-accurate final(a) - final(b) for two records whose computed finals
// coincide: softmax(x)_a - softmax(x)_b = softmax(x)_b * expm1((x_a - x_b) / tau).
double exact_gap(const FinalScoreRecord& a, const FinalScoreRecord& b, double temperature) {
  double gap = 0.0;
  if (a.alpha > 0.0 && a.hmp && b.hmp && b.norm_hmp) {
    gap += a.alpha * *b.norm_hmp * std::expm1((*a.hmp - *b.hmp) / temperature);
  }
  if (a.alpha < 1.0 && a.cas && b.cas && b.norm_cas) {
    gap += (1.0 - a.alpha) * *b.norm_cas * std::expm1((*a.cas - *b.cas) / temperature);
  }
  return gap;
}

}  // namespace

void assign_ranks(std::vector<FinalScoreRecord>& records, double temperature) {
  std::sort(records.begin(), records.end(), [](const FinalScoreRecord& a, const FinalScoreRecord& b) {
    if (a.final_score != b.final_score) return a.final_score > b.final_score;
    return a.sample_id < b.sample_id;
  });
  // Equal finals form short runs; insertion sort keeps id order on exact ties.
  for (auto first = records.begin(); first != records.end();) {
    auto last = std::find_if(first, records.end(), [&](const auto& r) { return r.final_score != first->final_score; });
    for (auto it = first + 1; it < last; ++it) {
      for (auto j = it; j != first && exact_gap(*j, *(j - 1), temperature) > 0.0; --j) std::iter_swap(j, j - 1);
    }
    first = last;
  }
  for (std::size_t i = 0; i < records.size(); ++i) records[i].rank = i + 1;
}

std::vector<FinalScoreRecord> combine(std::span<const HmgRecord> hmg, std::span<const SegmentProfile> cam,
                                      const CombineOptions& options) {
  if (!(options.alpha >= 0.0 && options.alpha <= 1.0)) {
    throw UserError("alpha must lie in [0, 1], got " + std::to_string(options.alpha));
  }
  std::vector<FinalScoreRecord> out;
  switch (options.mode) {
    case RunMode::hmg_only: {
      if (hmg.empty()) return out;
      std::vector<double> hmp;
      for (const auto& r : hmg) hmp.push_back(r.hmp);
      const auto norm = softmax_normalize(hmp, options.temperature);
      for (std::size_t i = 0; i < hmg.size(); ++i) {
        FinalScoreRecord r;
        r.sample_id = hmg[i].sample_id;
        r.hmp = hmg[i].hmp;
        r.norm_hmp = norm[i];
        r.alpha = 1.0;
        r.final_score = norm[i];
        out.push_back(std::move(r));
      }
      break;
    }
    case RunMode::cam_only: {
      if (cam.empty()) return out;
      std::vector<double> cas;
      for (const auto& p : cam) cas.push_back(p.cas);
      const auto norm = softmax_normalize(cas, options.temperature);
      for (std::size_t i = 0; i < cam.size(); ++i) {
        FinalScoreRecord r;
        r.sample_id = cam[i].sample_id;
        r.cas = cam[i].cas;
        r.norm_cas = norm[i];
        r.alpha = 0.0;
        r.final_score = norm[i];
        out.push_back(std::move(r));
      }
      break;
    }
    case RunMode::gateau: {
      std::unordered_map<std::string_view, const SegmentProfile*> by_id;
      for (const auto& p : cam) by_id.emplace(p.sample_id, &p);
      if (by_id.size() != cam.size()) throw UserError("duplicate sample id among segment profiles");
      std::vector<double> hmp, cas;
      for (const auto& r : hmg) {
        auto it = by_id.find(r.sample_id);
        if (it == by_id.end()) {
          throw UserError("sample " + r.sample_id +
                          " has no contextual awareness score; combined mode needs it for every sample");
        }
        hmp.push_back(r.hmp);
        cas.push_back(it->second->cas);
      }
      if (cam.size() != hmg.size()) {
        throw UserError("segment profiles exist for samples without a homologous-model score");
      }
      if (hmg.empty()) return out;
      const auto norm_hmp = softmax_normalize(hmp, options.temperature);
      const auto norm_cas = softmax_normalize(cas, options.temperature);
      for (std::size_t i = 0; i < hmg.size(); ++i) {
        FinalScoreRecord r;
        r.sample_id = hmg[i].sample_id;
        r.hmp = hmp[i];
        r.cas = cas[i];
        r.norm_hmp = norm_hmp[i];
        r.norm_cas = norm_cas[i];
        r.alpha = options.alpha;
        r.final_score = options.alpha * norm_hmp[i] + (1.0 - options.alpha) * norm_cas[i];
        out.push_back(std::move(r));
      }
      break;
    }
    case RunMode::ppl_guidance:
      throw UserError("perplexity guidance is ranked by guidance_records, not combine");
  }
  assign_ranks(out, options.temperature);
  return out;
}

std::vector<FinalScoreRecord> guidance_records(std::span<const PerplexityRank> ranking) {
  std::vector<FinalScoreRecord> out;
  out.reserve(ranking.size());
  for (const auto& r : ranking) {
    FinalScoreRecord rec;
    rec.sample_id = r.sample_id;
    rec.ppl_b = r.ppl_b;
    rec.final_score = r.ppl_b;
    out.push_back(std::move(rec));
  }
  assign_ranks(out);
  return out;
}

std::size_t selection_count(double cut_ratio, std::size_t m) {
  // A decimal ratio times m may land a hair below an exact half (0.15 * 10);
  // such products still round up.
  const double x = cut_ratio * static_cast<double>(m);
  const double whole = std::floor(x);
  const double slack = 1e-9 * std::max(1.0, x);
  return static_cast<std::size_t>(whole) + (x - whole >= 0.5 - slack ? 1 : 0);
}

SelectionManifest select(std::vector<FinalScoreRecord> records, double cut_ratio) {
  if (!(cut_ratio > 0.0 && cut_ratio <= 1.0)) {
    throw UserError("cut ratio must lie in (0, 1], got " + std::to_string(cut_ratio));
  }
  if (records.empty()) throw UserError("nothing to select from: no scored samples");
  assign_ranks(records);
  SelectionManifest m;
  m.cut_ratio = cut_ratio;
  const auto k = std::min(selection_count(cut_ratio, records.size()), records.size());
  m.selected.reserve(k);
  for (std::size_t i = 0; i < k; ++i) m.selected.push_back(records[i].sample_id);
  m.ranked = std::move(records);
  return m;
}

namespace {

void put_optional(ojson& j, const char* key, const std::optional<double>& v) {
  if (v) j[key] = *v;
}

std::string dump(const ojson& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

}  // namespace

void write_manifest(const SelectionManifest& m, std::ostream& out) {
  ojson header;
  header["type"] = "header";
  header["fingerprint"] = m.fingerprint;
  header["mode"] = to_string(m.mode);
  header["cut_ratio"] = m.cut_ratio;
  header["ranked"] = m.ranked.size();
  header["selected"] = m.selected.size();
  header["excluded"] = m.excluded.size();
  header["config"] = m.config_json.empty() ? ojson::object() : ojson::parse(m.config_json);
  out << dump(header) << '\n';

  for (std::size_t i = 0; i < m.ranked.size(); ++i) {
    const auto& r = m.ranked[i];
    ojson j;
    j["type"] = "record";
    j["rank"] = r.rank;
    j["sample_id"] = r.sample_id;
    j["selected"] = i < m.selected.size();
    put_optional(j, "hmp", r.hmp);
    put_optional(j, "cas", r.cas);
    put_optional(j, "norm_hmp", r.norm_hmp);
    put_optional(j, "norm_cas", r.norm_cas);
    put_optional(j, "ppl_b", r.ppl_b);
    j["alpha"] = r.alpha;
    j["final"] = r.final_score;
    out << dump(j) << '\n';
  }
  for (const auto& e : m.excluded) {
    ojson j;
    j["type"] = "excluded";
    j["sample_id"] = e.sample_id;
    j["reason"] = e.reason;
    out << dump(j) << '\n';
  }
}

void write_manifest(const SelectionManifest& manifest, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UserError("cannot write manifest " + path.string());
    write_manifest(manifest, out);
    out.flush();
    if (!out) throw UserError("error while writing manifest " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

SelectionManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot read manifest " + path.string());
  SelectionManifest m;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  auto fail = [&](const std::string& why) {
    throw UserError(path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  auto opt = [](const ojson& j, const char* key) -> std::optional<double> {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return it->get<double>();
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ojson j = ojson::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail("not a JSON object");
    try {
      const auto type = j.at("type").get<std::string>();
      if (type == "header") {
        m.fingerprint = j.at("fingerprint").get<std::string>();
        m.mode = parse_run_mode(j.at("mode").get<std::string>());
        m.cut_ratio = j.at("cut_ratio").get<double>();
        m.config_json = dump(j.at("config"));
        have_header = true;
      } else if (type == "record") {
        if (!have_header) fail("record before header");
        FinalScoreRecord r;
        r.rank = j.at("rank").get<std::size_t>();
        r.sample_id = j.at("sample_id").get<std::string>();
        r.hmp = opt(j, "hmp");
        r.cas = opt(j, "cas");
        r.norm_hmp = opt(j, "norm_hmp");
        r.norm_cas = opt(j, "norm_cas");
        r.ppl_b = opt(j, "ppl_b");
        r.alpha = j.at("alpha").get<double>();
        r.final_score = j.at("final").get<double>();
        if (j.at("selected").get<bool>()) m.selected.push_back(r.sample_id);
        m.ranked.push_back(std::move(r));
      } else if (type == "excluded") {
        m.excluded.push_back({j.at("sample_id").get<std::string>(), j.at("reason").get<std::string>()});
      } else {
        fail("unknown record type '" + type + "'");
      }
    } catch (const json::exception& e) {
      fail(e.what());
    }
  }
  if (!have_header) throw UserError(path.string() + ": manifest has no header");
  return m;
}

double nearest_rank_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty sequence");
  if (q <= 0.0) return sorted.front();
  auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  k = std::clamp<std::size_t>(k, 1, sorted.size());
  return sorted[k - 1];
}

std::string report(const SelectionManifest& m, std::span<const StageTiming> timings) {
  std::ostringstream out;
  out << std::setprecision(6);
  out << "selection manifest " << (m.fingerprint.size() > 16 ? m.fingerprint.substr(0, 16) : m.fingerprint) << '\n';
  out << "mode: " << to_string(m.mode) << ", cut ratio: " << m.cut_ratio << '\n';
  out << "ranked: " << m.ranked.size() << ", selected: " << m.selected.size() << ", excluded: " << m.excluded.size()
      << '\n';

  if (!m.ranked.empty()) {
    std::vector<double> finals;
    for (const auto& r : m.ranked) finals.push_back(r.final_score);
    std::sort(finals.begin(), finals.end());
    out << "final score quantiles (nearest rank):\n";
    const std::pair<const char*, double> qs[] = {{"min", 0.0}, {"p10", 0.1}, {"p25", 0.25}, {"p50", 0.5},
                                                 {"p75", 0.75}, {"p90", 0.9}, {"max", 1.0}};
    for (const auto& [label, q] : qs) {
      out << "  " << std::left << std::setw(4) << label << ' ' << nearest_rank_quantile(finals, q) << '\n';
    }

    constexpr std::size_t kShown = 20;
    out << "ranks:\n";
    for (std::size_t i = 0; i < m.ranked.size() && i < kShown; ++i) {
      const auto& r = m.ranked[i];
      out << "  " << std::right << std::setw(6) << r.rank << "  " << r.sample_id << "  " << r.final_score
          << (i < m.selected.size() ? "  *" : "") << '\n';
    }
    if (m.ranked.size() > kShown) out << "  ... " << (m.ranked.size() - kShown) << " more\n";
  }

  if (!m.excluded.empty()) {
    out << "excluded:\n";
    for (const auto& e : m.excluded) out << "  " << e.sample_id << ": " << e.reason << '\n';
  }
  if (!timings.empty()) {
    out << "timing:\n";
    out << std::fixed << std::setprecision(3);
    for (const auto& t : timings) out << "  " << t.stage << ": " << t.seconds << " s\n";
  }
  return out.str();
}

}  // namespace depsel
