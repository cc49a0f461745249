#include "iconsel/corpus.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "iconsel/error.hpp"
#include "iconsel/util.hpp"

namespace iconsel::corpus {

using nlohmann::json;

namespace {

std::string ordinal_id(const std::string& source, std::size_t ordinal) {
  std::string digits = std::to_string(ordinal);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return source + "-" + digits;
}

std::string record_where(std::size_t index) { return "record " + std::to_string(index); }

// Optional string field; null and absent are both "not present".
std::optional<std::string> opt_string(const json& rec, const char* field, std::size_t index) {
  auto it = rec.find(field);
  if (it == rec.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw DataError(record_where(index) + ": field \"" + field + "\" must be a string");
  }
  return it->get<std::string>();
}

std::string required_string(const json& rec, const char* field, std::size_t index) {
  auto v = opt_string(rec, field, index);
  if (!v) throw DataError(record_where(index) + ": missing field \"" + field + "\"");
  if (trim(*v).empty()) throw DataError(record_where(index) + ": field \"" + field + "\" is empty");
  return *v;
}

Sample sample_from_record(const json& rec, Format format, std::size_t index, const std::string& source_tag) {
  if (!rec.is_object()) throw DataError(record_where(index) + ": expected a JSON object");
  Sample s;
  s.instruction = required_string(rec, "instruction", index);
  s.input = opt_string(rec, "input", index).value_or("");
  s.response = required_string(rec, format == Format::AlpacaJson ? "output" : "response", index);
  s.source = opt_string(rec, "source", index).value_or(source_tag);
  s.id = opt_string(rec, "id", index).value_or(ordinal_id(source_tag, index));
  return s;
}

void check_unique_ids(const std::vector<Sample>& samples) {
  std::map<std::string, std::size_t> seen;
  for (const auto& s : samples) ++seen[s.id];
  std::vector<std::string> dups;
  for (const auto& [id, n] : seen) {
    if (n > 1) dups.push_back(id);
  }
  if (!dups.empty()) {
    std::string msg = "duplicate sample ids:";
    for (const auto& d : dups) msg += " " + d;
    throw DataError(msg);
  }
}

}  // namespace

Format parse_format(const std::string& name) {
  if (name == "alpaca-json") return Format::AlpacaJson;
  if (name == "jsonl") return Format::Jsonl;
  throw std::invalid_argument("unknown corpus format '" + name + "' (expected alpaca-json or jsonl)");
}

std::string format_name(Format f) { return f == Format::AlpacaJson ? "alpaca-json" : "jsonl"; }

Format format_from_extension(const std::filesystem::path& path) {
  return path.extension() == ".json" ? Format::AlpacaJson : Format::Jsonl;
}

std::string join_prompt(std::string_view instruction, std::string_view input) {
  std::string out(instruction);
  if (!input.empty()) {
    out += "\n\n";
    out += input;
  }
  return out;
}

std::string canonical_text(const Sample& s) {
  return join_prompt(s.instruction, s.input) + '\x1f' + s.response;
}

std::string canonical_text(const AssessmentItem& a) { return a.prompt + '\x1f' + a.reference; }

std::vector<Sample> parse_corpus(std::string_view text, Format format, const std::string& source_tag) {
  std::vector<Sample> out;
  if (format == Format::AlpacaJson) {
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DataError("parse error at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    if (!doc.is_array()) throw DataError("alpaca-json corpus must be a JSON array");
    out.reserve(doc.size());
    for (std::size_t i = 0; i < doc.size(); ++i) out.push_back(sample_from_record(doc[i], format, i, source_tag));
  } else {
    std::size_t offset = 0;
    std::size_t index = 0;
    while (offset < text.size()) {
      std::size_t end = text.find('\n', offset);
      if (end == std::string_view::npos) end = text.size();
      const std::string_view line = text.substr(offset, end - offset);
      if (!trim(line).empty()) {
        json rec;
        try {
          rec = json::parse(line);
        } catch (const json::parse_error& e) {
          throw DataError(record_where(index) + ": parse error at byte " + std::to_string(offset + e.byte - 1) +
                          ": " + e.what());
        }
        out.push_back(sample_from_record(rec, format, index, source_tag));
        ++index;
      }
      offset = end + 1;
    }
  }
  check_unique_ids(out);
  return out;
}

std::vector<Sample> load_corpus(const std::filesystem::path& path, Format format,
                                std::optional<std::string> source_tag) {
  return parse_corpus(read_file(path), format, source_tag.value_or(path.stem().string()));
}

std::string serialize_corpus(const std::vector<Sample>& samples, Format format) {
  if (format == Format::AlpacaJson) {
    json arr = json::array();
    for (const auto& s : samples) {
      json rec = json::object();
      rec["instruction"] = s.instruction;
      rec["input"] = s.input;
      rec["output"] = s.response;
      arr.push_back(std::move(rec));
    }
    return arr.dump(4) + "\n";
  }
  std::string out;
  for (const auto& s : samples) {
    json rec = json::object();
    rec["id"] = s.id;
    rec["instruction"] = s.instruction;
    if (!s.input.empty()) rec["input"] = s.input;
    rec["response"] = s.response;
    rec["source"] = s.source;
    out += rec.dump() + "\n";
  }
  return out;
}

void save_corpus(const std::vector<Sample>& samples, const std::filesystem::path& path, Format format) {
  write_file_atomic(path, serialize_corpus(samples, format));
}

json to_json(const CorpusManifest& m) {
  json j = json::object();
  j["seed"] = m.seed;
  j["n_total"] = m.n_total;
  j["sources"] = json::array();
  for (const auto& s : m.sources) {
    j["sources"].push_back({{"tag", s.tag}, {"available", s.available}, {"count", s.drawn}});
  }
  j["records"] = json::array();
  for (const auto& r : m.records) {
    j["records"].push_back({{"id", r.id}, {"source", r.source}, {"sha256", r.sha256}});
  }
  return j;
}

AssessmentSet build_assessment(const std::vector<std::pair<std::vector<Sample>, std::string>>& sources,
                               std::size_t n_total, std::uint64_t seed) {
  if (sources.empty()) throw std::invalid_argument("build_assessment: no sources declared");
  std::set<std::string> tags;
  for (const auto& [samples, tag] : sources) {
    if (tag.empty()) throw std::invalid_argument("build_assessment: empty source tag");
    if (!tags.insert(tag).second) throw std::invalid_argument("build_assessment: duplicate source tag '" + tag + "'");
    if (samples.empty()) throw DataError("assessment source '" + tag + "' is empty");
  }

  const std::size_t k = sources.size();
  AssessmentSet out;
  out.manifest.seed = seed;
  out.manifest.n_total = n_total;

  std::vector<std::size_t> quota(k, n_total / k);
  for (std::size_t i = 0; i < n_total % k; ++i) ++quota[i];

  std::string shortfall;
  for (std::size_t i = 0; i < k; ++i) {
    const auto available = sources[i].first.size();
    if (available < quota[i]) {
      shortfall += " '" + sources[i].second + "' has " + std::to_string(available) + " records but quota is " +
                   std::to_string(quota[i]) + " (short by " + std::to_string(quota[i] - available) + ");";
    }
  }
  if (!shortfall.empty()) throw DataError("assessment quota shortfall:" + shortfall);

  for (std::size_t i = 0; i < k; ++i) {
    const auto& [samples, tag] = sources[i];
    auto rng = seeded_engine({"assessment", std::to_string(seed), tag});
    auto picked = sample_without_replacement(rng, samples.size(), quota[i]);
    std::sort(picked.begin(), picked.end());
    for (std::size_t idx : picked) {
      const Sample& s = samples[idx];
      AssessmentItem item;
      item.id = ordinal_id(tag, idx);
      item.prompt = join_prompt(s.instruction, s.input);
      item.reference = s.response;
      item.source = tag;
      out.manifest.records.push_back({item.id, tag, sha256_hex(canonical_text(item))});
      out.items.push_back(std::move(item));
    }
    out.manifest.sources.push_back({tag, samples.size(), quota[i]});
  }
  return out;
}

AssessmentSet build_assessment(const std::vector<SourceSpec>& sources, std::size_t n_total, std::uint64_t seed) {
  std::vector<std::pair<std::vector<Sample>, std::string>> loaded;
  loaded.reserve(sources.size());
  for (const auto& src : sources) {
    loaded.emplace_back(load_corpus(src.path, format_from_extension(src.path), src.tag), src.tag);
  }
  return build_assessment(loaded, n_total, seed);
}

std::string serialize_assessment(const std::vector<AssessmentItem>& items) {
  std::string out;
  for (const auto& a : items) {
    json rec = {{"id", a.id}, {"prompt", a.prompt}, {"reference", a.reference}, {"source", a.source}};
    out += rec.dump() + "\n";
  }
  return out;
}

std::vector<AssessmentItem> parse_assessment(std::string_view text) {
  std::vector<AssessmentItem> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t index = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("assessment " + record_where(index) + ": " + e.what());
    }
    AssessmentItem a;
    a.id = required_string(rec, "id", index);
    a.prompt = required_string(rec, "prompt", index);
    a.reference = required_string(rec, "reference", index);
    a.source = required_string(rec, "source", index);
    if (!ids.insert(a.id).second) throw DataError("duplicate assessment id " + a.id);
    out.push_back(std::move(a));
    ++index;
  }
  return out;
}

std::vector<AssessmentItem> load_assessment(const std::filesystem::path& path) {
  return parse_assessment(read_file(path));
}

DisjointnessReport check_disjoint(const std::vector<AssessmentItem>& assessment,
                                  const std::vector<Sample>& candidates) {
  std::unordered_map<std::string, std::vector<std::size_t>> by_text;
  for (std::size_t i = 0; i < assessment.size(); ++i) by_text[canonical_text(assessment[i])].push_back(i);
  DisjointnessReport report;
  for (const auto& s : candidates) {
    auto it = by_text.find(canonical_text(s));
    if (it == by_text.end()) continue;
    for (std::size_t i : it->second) report.collisions.push_back({assessment[i].id, s.id});
  }
  return report;
}

json to_json(const DisjointnessReport& r) {
  json j = json::object();
  j["collision_count"] = r.collisions.size();
  j["collisions"] = json::array();
  for (const auto& c : r.collisions) {
    j["collisions"].push_back({{"assessment_id", c.assessment_id}, {"sample_id", c.sample_id}});
  }
  return j;
}

}  // namespace iconsel::corpus
