#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "iconsel/corpus.hpp"
#include "iconsel/lm_backend.hpp"
#include "iconsel/scoring.hpp"
#include "json.hpp"

namespace iconsel::selection {

using corpus::Sample;
using scoring::GlobalScore;

struct SelectionConfig {
  double k_percent = 15.0;
  std::size_t labeling_subset_size = 0;  // 0 = the whole scored pool
  std::uint64_t seed = 42;

  void validate() const;
};

/// The ceil(m*K/100) best-ranked ids, in rank order. `scores` must carry
/// ranks 1..m (as produced by scoring::assign_ranks).
std::vector<std::string> select_top_k(const std::vector<GlobalScore>& scores, double k_percent);

enum class BaselineMethod { Random, LowPpl, TopPpl };

BaselineMethod parse_baseline(const std::string& name);
std::string baseline_name(BaselineMethod m);

/// PPL of each sample's response given its own instruction under the
/// query template.
std::map<std::string, double> sample_ppls(lm::LogprobService& service, const std::vector<Sample>& samples,
                                          scoring::Template query_template, std::size_t concurrency = 1);

/// Random / lowest-PPL / highest-PPL subsets of size ceil(m * fraction).
/// PPL ties are broken by ascending sample id. `ppls` is required for the
/// PPL methods.
std::vector<std::string> baseline_select(const std::vector<Sample>& samples, BaselineMethod method, double fraction,
                                         std::uint64_t seed, const std::map<std::string, double>* ppls = nullptr);

// ---------------------------------------------------------------------------
// Labeling

struct LabeledSample {
  std::string sample_id;
  bool high_contribution = false;
  double global_icon = 0.0;

  bool operator==(const LabeledSample&) const = default;
};

std::string label_name(bool high_contribution);

/// Seeded subset of the scored pool used for labeling; size 0 or >= m keeps
/// every sample. Returned in rank order.
std::vector<GlobalScore> labeling_subset(const std::vector<GlobalScore>& scores, std::size_t size,
                                         std::uint64_t seed);

/// Labels the top ceil(|subset| * K / 100) of `subset` (re-ranked within the
/// subset) as high-contribution.
std::vector<LabeledSample> label_top_k(const std::vector<GlobalScore>& subset, double k_percent);

struct LabeledText {
  std::string instruction;
  std::string input;
  std::string response;
  std::string label;

  bool operator==(const LabeledText&) const = default;
};

/// JSONL of {instruction, input, response, label} in `labeled` order.
/// Returns the number of positive lines.
std::size_t export_labeled(const std::vector<LabeledSample>& labeled, const std::vector<Sample>& pool,
                           const std::filesystem::path& path);
std::vector<LabeledText> load_labeled(const std::filesystem::path& path);

/// Writes the selected samples in `ids` order.
void export_subset(const std::vector<Sample>& pool, const std::vector<std::string>& ids,
                   const std::filesystem::path& path, corpus::Format format);

// ---------------------------------------------------------------------------
// Selector

struct FeatureSpec {
  int ngram_min = 1;
  int ngram_max = 2;
  std::uint32_t hash_buckets = 1u << 18;
  bool lowercase = true;

  bool operator==(const FeatureSpec&) const = default;
};

struct TrainConfig {
  double k_percent = 15.0;
  std::uint64_t seed = 42;
  std::size_t epochs = 10;
  double learning_rate = 0.5;
  double l2 = 1e-6;
  double holdout_fraction = 0.2;
  FeatureSpec features;
};

struct SelectorMetadata {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double k_percent = 0.0;
  double learning_rate = 0.0;
  double l2 = 0.0;
  std::string data_hash;
  std::size_t train_size = 0;
  std::size_t heldout_size = 0;
  std::optional<double> heldout_accuracy;
  std::optional<double> heldout_auc;

  bool operator==(const SelectorMetadata&) const = default;
};

/// Logistic model over L2-normalized hashed n-gram counts of
/// instruction + input + response.
struct SelectorModel {
  FeatureSpec features;
  std::vector<double> weights;  // hash_buckets entries
  double bias = 0.0;
  double threshold = 0.5;
  SelectorMetadata metadata;

  double probability(const Sample& s) const;

  bool operator==(const SelectorModel&) const = default;
};

using SparseVector = std::vector<std::pair<std::uint32_t, double>>;
SparseVector extract_features(const FeatureSpec& spec, const Sample& s);

struct LabeledExample {
  Sample sample;
  bool positive = false;
};

/// SGD on logistic loss over a seeded 80/20 split. The threshold is the
/// training-set score at the K% positive rate. Throws std::invalid_argument
/// when only one class is present.
SelectorModel train_selector(const std::vector<LabeledExample>& examples, const TrainConfig& config);

struct SelectorScore {
  std::string sample_id;
  double probability = 0.0;
  bool selected = false;
};

struct ApplyResult {
  std::vector<SelectorScore> rows;  // input order
  std::size_t evaluations = 0;
};

/// One local pass over the pool; never touches a backend.
ApplyResult apply_selector(const SelectorModel& model, const std::vector<Sample>& pool);

nlohmann::json to_json(const SelectorModel& model);
SelectorModel selector_from_json(const nlohmann::json& j);
void save_selector(const SelectorModel& model, const std::filesystem::path& path);
SelectorModel load_selector(const std::filesystem::path& path);

/// Area under the ROC curve (Mann-Whitney, ties count half).
double auc(const std::vector<double>& scores, const std::vector<bool>& labels);

std::string hex_double(double v);
double parse_hex_double(const std::string& s);

}  // namespace iconsel::selection
