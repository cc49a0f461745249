#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace iconsel::corpus {

/// One instruction-tuning record. An absent input is stored as the empty
/// string, so "missing" and "" compare equal.
struct Sample {
  std::string id;
  std::string instruction;
  std::string input;
  std::string response;
  std::string source;

  bool operator==(const Sample&) const = default;
};

/// One held-out evaluation record. `prompt` is already the joined
/// instruction/input text.
struct AssessmentItem {
  std::string id;
  std::string prompt;
  std::string reference;
  std::string source;
  // Filled lazily per backend tokenizer; 0 means not yet computed.
  std::size_t reference_token_count = 0;

  bool operator==(const AssessmentItem&) const = default;
};

enum class Format { AlpacaJson, Jsonl };

Format parse_format(const std::string& name);
std::string format_name(Format f);
/// `.json` is Alpaca-style, everything else JSONL.
Format format_from_extension(const std::filesystem::path& path);

/// Instruction, then a blank line and the input when present.
std::string join_prompt(std::string_view instruction, std::string_view input);

/// Canonical text used for content hashes and exact-duplicate detection:
/// prompt and response separated by a unit separator. Only the absent/empty
/// input distinction is normalized; case and whitespace are significant.
std::string canonical_text(const Sample& s);
std::string canonical_text(const AssessmentItem& a);

/// Parses a corpus. Ids missing from a record become `<source>-<ordinal>`,
/// where source defaults to the file stem.
std::vector<Sample> parse_corpus(std::string_view text, Format format, const std::string& source_tag);
std::vector<Sample> load_corpus(const std::filesystem::path& path, Format format,
                                std::optional<std::string> source_tag = std::nullopt);

std::string serialize_corpus(const std::vector<Sample>& samples, Format format);
void save_corpus(const std::vector<Sample>& samples, const std::filesystem::path& path, Format format);

struct SourceSpec {
  std::filesystem::path path;
  std::string tag;
};

struct SourceCount {
  std::string tag;
  std::size_t available = 0;
  std::size_t drawn = 0;
};

struct RecordHash {
  std::string id;
  std::string source;
  std::string sha256;
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  std::size_t n_total = 0;
  std::vector<SourceCount> sources;
  std::vector<RecordHash> records;
};

nlohmann::json to_json(const CorpusManifest& m);

struct AssessmentSet {
  std::vector<AssessmentItem> items;
  CorpusManifest manifest;
};

/// Quotas are n_total / k per source, with the remainder going one each to
/// the earliest-declared sources. A source that cannot meet its quota is an
/// error.
AssessmentSet build_assessment(const std::vector<std::pair<std::vector<Sample>, std::string>>& sources,
                               std::size_t n_total, std::uint64_t seed);
AssessmentSet build_assessment(const std::vector<SourceSpec>& sources, std::size_t n_total, std::uint64_t seed);

std::string serialize_assessment(const std::vector<AssessmentItem>& items);
std::vector<AssessmentItem> parse_assessment(std::string_view text);
std::vector<AssessmentItem> load_assessment(const std::filesystem::path& path);

struct Collision {
  std::string assessment_id;
  std::string sample_id;
};

struct DisjointnessReport {
  std::vector<Collision> collisions;
  bool disjoint() const { return collisions.empty(); }
};

DisjointnessReport check_disjoint(const std::vector<AssessmentItem>& assessment,
                                  const std::vector<Sample>& candidates);

nlohmann::json to_json(const DisjointnessReport& r);

}  // namespace iconsel::corpus
