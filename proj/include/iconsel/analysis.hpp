#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "iconsel/corpus.hpp"
#include "iconsel/lm_backend.hpp"
#include "iconsel/scoring.hpp"
#include "json.hpp"

namespace iconsel::analysis {

using corpus::Sample;

// ---------------------------------------------------------------------------
// Difficulty

/// PPL(y | query(x)) / PPL(y), the unconditioned PPL taken with an empty
/// prompt.
double ifd_score(lm::LogprobService& service, const Sample& sample, scoring::Template query_template);

struct DifficultyRecord {
  std::string sample_id;
  double ifd = 0.0;
  bool selected = false;

  bool operator==(const DifficultyRecord&) const = default;
};

std::vector<DifficultyRecord> difficulty(lm::LogprobService& service, const std::vector<Sample>& samples,
                                         const std::set<std::string>& selected_ids, scoring::Template query_template);

nlohmann::json to_json(const DifficultyRecord& r);
std::string serialize_difficulty_jsonl(const std::vector<DifficultyRecord>& records);
std::vector<DifficultyRecord> load_difficulty(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pairwise judgments

enum class Verdict { Win, Tie, Lose };

/// Accepts "win", "tie", "lose" in any case; anything else is a DataError.
Verdict parse_verdict(const std::string& label);
std::string verdict_name(Verdict v);

/// Both orders agree, or one decides and the other ties: that side. A win
/// and a loss cancel to a tie.
Verdict combine_pairwise(Verdict order1, Verdict order2);
Verdict combine_pairwise(const std::string& order1, const std::string& order2);

/// (wins - losses) / total + 1. Throws std::invalid_argument when total is 0
/// or wins + losses exceeds total.
double winning_score(std::size_t wins, std::size_t losses, std::size_t total);

struct Judgment {
  std::string instruction_id;
  Verdict order1 = Verdict::Tie;
  Verdict order2 = Verdict::Tie;
};

std::vector<Judgment> parse_judgments(std::string_view jsonl);
std::vector<Judgment> load_judgments(const std::filesystem::path& path);

struct PairwiseSummary {
  std::size_t wins = 0;
  std::size_t ties = 0;
  std::size_t losses = 0;
  std::size_t total = 0;
  double winning_score = 0.0;
};

PairwiseSummary summarize_judgments(const std::vector<Judgment>& judgments);
nlohmann::json to_json(const PairwiseSummary& s);

// ---------------------------------------------------------------------------
// Distributions

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

/// Unequal-variance two-sample t-test with a two-sided p-value. Sample
/// variances are floored at 1e-12. Both groups need at least 2 values.
WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> selected;
  std::vector<std::size_t> full;
};

struct GroupStats {
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
};

struct DistributionReport {
  std::string metric;  // "global_icon" or "ifd"
  GroupStats selected;
  GroupStats full;
  Histogram histogram;
  std::optional<WelchResult> t_test;
  std::string notice;  // why the t-test was omitted, if it was
};

inline constexpr std::size_t kHistogramBins = 20;

/// Compares the selected values against the full pool. Throws
/// std::invalid_argument when either group is empty.
DistributionReport distribution_report(const std::string& metric, const std::vector<double>& selected,
                                       const std::vector<double>& full);
DistributionReport distribution_report(const std::vector<scoring::GlobalScore>& scores,
                                       const std::set<std::string>& selected_ids);
DistributionReport distribution_report(const std::vector<DifficultyRecord>& records);

nlohmann::json to_json(const DistributionReport& r);
std::string render_text(const DistributionReport& r);
std::string histogram_csv(const DistributionReport& r);

double mean(const std::vector<double>& v);
double median(std::vector<double> v);

}  // namespace iconsel::analysis
