#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "iconsel/corpus.hpp"
#include "iconsel/lm_backend.hpp"
#include "json.hpp"

namespace iconsel::scoring {

using corpus::AssessmentItem;
using corpus::Sample;

/// Prompt layouts. `alpaca` wraps text in instruction/response headers;
/// `plain` adds nothing but a newline between prompt and response.
enum class Template { Alpaca, Plain };

Template parse_template(const std::string& name);
std::string template_name(Template t);

/// How random controls are matched to the demonstration's length.
/// `characters` is the degraded mode for endpoints that cannot echo tokens.
enum class LengthMode { Tokens, Characters };

LengthMode parse_length_mode(const std::string& name);
std::string length_mode_name(LengthMode m);

struct ScoringConfig {
  double epsilon = 1e-8;
  std::size_t random_draws = 1;
  std::uint64_t random_seed = 42;
  Template demo_template = Template::Alpaca;
  Template query_template = Template::Alpaca;
  LengthMode length_mode = LengthMode::Tokens;

  void validate() const;
};

/// Query prompt: the template applied to x (continuation y follows it).
std::string query_prompt(Template t, std::string_view prompt);

/// A training sample rendered as an in-context demonstration.
std::string serialize_demonstration(Template t, const Sample& sample);

/// Demonstration block, a blank line, then the query prompt.
std::string conditional_prompt(std::string_view demonstration, std::string_view query);

/// exp(-mean(logprobs)). Throws std::invalid_argument on an empty sequence.
double ppl_from_logprobs(std::span<const double> logprobs);

/// (ppl_rand - ppl_cond) / (ppl_base + epsilon).
double task_icon(double ppl_base, double ppl_cond, double ppl_rand, double epsilon);

/// Arithmetic mean with equal task weights.
double global_icon(std::span<const double> task_scores);

struct RandomControl {
  std::string sample_id;
  std::size_t draw_index = 0;
  std::vector<std::string> tokens;
  std::string text;
  std::size_t target_length = 0;  // tokens, or characters in degraded mode
};

struct ScoreRecord {
  std::string sample_id;
  std::string assessment_id;
  double ppl_base = 0.0;
  double ppl_cond = 0.0;
  double ppl_rand = 0.0;
  std::vector<double> ppl_rand_draws;
  double task_icon = 0.0;

  bool operator==(const ScoreRecord&) const = default;
};

struct GlobalScore {
  std::string sample_id;
  double global_icon = 0.0;
  std::size_t task_count = 0;
  std::size_t rank = 0;

  bool operator==(const GlobalScore&) const = default;
};

/// Sorts by descending global_icon, ties by ascending sample_id, and assigns
/// ranks 1..m.
void assign_ranks(std::vector<GlobalScore>& scores);

/// A scoring session over one LogprobService. Safe for concurrent use.
class Scorer {
 public:
  Scorer(lm::LogprobService& service, ScoringConfig config);

  const ScoringConfig& config() const { return config_; }
  lm::LogprobService& service() { return service_; }

  /// PPL(y^a | x^a); memoized per item.
  double base_ppl(const AssessmentItem& item);
  /// Number of backend tokens in the item's reference, known after base_ppl.
  std::size_t reference_token_count(const AssessmentItem& item);

  /// PPL(y^a | demonstration, x^a).
  double conditional_ppl(const Sample& sample, const AssessmentItem& item);

  /// Control for (sample, draw), deterministic in (random_seed, sample id,
  /// draw index) and memoized.
  const RandomControl& random_control(const Sample& sample, std::size_t draw_index);

  /// PPL(y^a | control, x^a) for one draw.
  double random_draw_ppl(const Sample& sample, const AssessmentItem& item, std::size_t draw_index);
  /// Per-draw PPL(y^a | control, x^a) for draws 0..R-1.
  std::vector<double> random_control_ppls(const Sample& sample, const AssessmentItem& item);
  /// Mean of random_control_ppls.
  double random_control_ppl(const Sample& sample, const AssessmentItem& item);

  ScoreRecord score(const Sample& sample, const AssessmentItem& item);

 private:
  double ppl_of(std::string_view prompt, std::string_view continuation);

  lm::LogprobService& service_;
  ScoringConfig config_;

  std::mutex mu_;
  std::map<std::string, std::pair<double, std::size_t>> base_memo_;
  std::map<std::pair<std::string, std::size_t>, RandomControl> control_memo_;
};

/// Completed (sample, assessment item, draw) triples. `draw` is "demo" for
/// the demonstration itself or the index of a random control.
class Checkpoint {
 public:
  Checkpoint() = default;
  /// Opens `file`; with `resume` existing entries are loaded, otherwise the
  /// file is truncated.
  Checkpoint(std::filesystem::path file, bool resume);

  bool contains(const std::string& sample_id, const std::string& assessment_id, const std::string& draw) const;
  void mark(const std::string& sample_id, const std::string& assessment_id, const std::string& draw);
  std::size_t size() const;

 private:
  static std::string key(const std::string& s, const std::string& a, const std::string& d);

  mutable std::mutex mu_;
  std::set<std::string> done_;
  std::optional<std::filesystem::path> file_;
  std::ofstream log_;
};

struct PoolOptions {
  std::size_t concurrency = 1;
  Checkpoint* checkpoint = nullptr;
};

struct PoolResult {
  std::vector<ScoreRecord> records;   // sample-major, assessment order within a sample
  std::vector<GlobalScore> global;    // rank order
  std::vector<std::size_t> reference_token_counts;  // aligned with the assessment set
  std::size_t resumed_triples = 0;
};

/// Scores every (sample, item) pair. On cold cache the backend sees exactly
/// n + m*n*(1+R) calls (fewer when prompts coincide). Results do not depend
/// on concurrency or completion order. A persistent backend failure halts
/// the run with IncompleteRun after all in-flight work is recorded.
PoolResult score_pool(lm::LogprobService& service, const std::vector<Sample>& samples,
                      const std::vector<AssessmentItem>& assessment, const ScoringConfig& config,
                      const PoolOptions& options = {});

nlohmann::json to_json(const ScoreRecord& r);
nlohmann::json to_json(const GlobalScore& g);
ScoreRecord score_record_from_json(const nlohmann::json& j);
GlobalScore global_score_from_json(const nlohmann::json& j);

std::string serialize_records_jsonl(const std::vector<ScoreRecord>& records);
std::string serialize_global_jsonl(const std::vector<GlobalScore>& global);
std::string serialize_records_csv(const std::vector<ScoreRecord>& records);
std::string serialize_global_csv(const std::vector<GlobalScore>& global);
std::vector<GlobalScore> load_global_scores(const std::filesystem::path& path);
std::vector<ScoreRecord> load_score_records(const std::filesystem::path& path);

}  // namespace iconsel::scoring
