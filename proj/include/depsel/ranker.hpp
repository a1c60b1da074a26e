#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "depsel/cam.hpp"
#include "depsel/hmg.hpp"

namespace depsel {

enum class RunMode { gateau, hmg_only, cam_only, ppl_guidance };

std::string_view to_string(RunMode mode);
RunMode parse_run_mode(std::string_view text);
bool needs_backend_a(RunMode mode);
bool needs_cam(RunMode mode);

inline constexpr double kAlphaRealWorld = 0.8;
inline constexpr double kAlphaLimitedShort = 0.7;

struct FinalScoreRecord {
  std::string sample_id;
  std::optional<double> hmp;
  std::optional<double> cas;
  std::optional<double> norm_hmp;
  std::optional<double> norm_cas;
  std::optional<double> ppl_b;  // perplexity-guidance mode only
  double alpha = 1.0;
  double final_score = 0.0;
  std::size_t rank = 0;

  bool operator==(const FinalScoreRecord&) const = default;
};

struct CombineOptions {
  RunMode mode = RunMode::gateau;
  double alpha = kAlphaRealWorld;
  double temperature = 1.0;
};

// final = alpha * softmax(hmp) + (1 - alpha) * softmax(cas), both softmaxes
// taken over the whole record set. hmg_only uses only the HMP term and
// cam_only only the CAS term. In gateau mode every sample must have both
// an HmgRecord and a SegmentProfile. Returned records are ranked.
std::vector<FinalScoreRecord> combine(std::span<const HmgRecord> hmg, std::span<const SegmentProfile> cam,
                                      const CombineOptions& options);

std::vector<FinalScoreRecord> guidance_records(std::span<const PerplexityRank> ranking);

// Sorts by final score descending, ties by ascending sample id, and numbers
// the ranks from 1. Finals that round to the same double are ordered by
// their exact difference, rebuilt from the raw HMP and CAS values and the
// temperature of the softmax that produced them.
void assign_ranks(std::vector<FinalScoreRecord>& records, double temperature = 1.0);

// round(cut_ratio * m), halves away from zero.
std::size_t selection_count(double cut_ratio, std::size_t m);

struct Exclusion {
  std::string sample_id;
  std::string reason;
  bool operator==(const Exclusion&) const = default;
};

struct SelectionManifest {
  std::string fingerprint;
  std::string config_json;  // canonical JSON of the resolved configuration
  RunMode mode = RunMode::gateau;
  double cut_ratio = 0.1;
  std::vector<FinalScoreRecord> ranked;
  std::vector<std::string> selected;  // rank order
  std::vector<Exclusion> excluded;

  bool operator==(const SelectionManifest&) const = default;
};

// Throws UserError on an empty record set or a cut ratio outside (0, 1].
SelectionManifest select(std::vector<FinalScoreRecord> records, double cut_ratio);

// Header line, then one line per ranked record, then one per exclusion.
void write_manifest(const SelectionManifest& manifest, std::ostream& out);
void write_manifest(const SelectionManifest& manifest, const std::filesystem::path& path);
SelectionManifest read_manifest(const std::filesystem::path& path);

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

// Nearest-rank quantile of an ascending-sorted, nonempty sequence.
double nearest_rank_quantile(std::span<const double> sorted, double q);

std::string report(const SelectionManifest& manifest, std::span<const StageTiming> timings = {});

}  // namespace depsel
