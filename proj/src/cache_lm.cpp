#include "iconsel/cache_lm.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "iconsel/error.hpp"
#include "iconsel/util.hpp"

namespace iconsel::lm {

using nlohmann::json;

void CacheLmParams::validate() const {
  if (vocabulary.empty()) throw ConfigError("cache-lm vocabulary is empty");
  if (vocabulary.size() != base_unigram.size()) {
    throw ConfigError("cache-lm vocabulary and base_unigram differ in length");
  }
  if (!(lambda >= 0.0 && lambda < 1.0)) throw ConfigError("cache-lm lambda must lie in [0, 1)");
  std::set<std::string_view> seen;
  for (const auto& tok : vocabulary) {
    if (tok.empty() || split_whitespace(tok).size() != 1 || split_whitespace(tok).front() != tok) {
      throw ConfigError("cache-lm token '" + tok + "' is empty or contains whitespace");
    }
    if (!seen.insert(tok).second) throw ConfigError("duplicate cache-lm token '" + tok + "'");
  }
  long double sum = 0.0L;
  for (double p : base_unigram) {
    if (!(p > 0.0) || !std::isfinite(p)) throw ConfigError("cache-lm probabilities must be strictly positive");
    sum += p;
  }
  if (std::fabs(static_cast<double>(sum) - 1.0) > 1e-12) {
    throw ConfigError("cache-lm base_unigram sums to " + format_double(static_cast<double>(sum)) + ", not 1");
  }
}

CacheLmParams CacheLmParams::uniform(std::vector<std::string> vocabulary, double lambda) {
  CacheLmParams p;
  const double mass = 1.0 / static_cast<double>(vocabulary.size());
  p.base_unigram.assign(vocabulary.size(), mass);
  p.vocabulary = std::move(vocabulary);
  p.lambda = lambda;
  p.validate();
  return p;
}

CacheLmParams CacheLmParams::from_texts(const std::vector<std::string>& texts, double lambda) {
  std::map<std::string, std::uint64_t> counts;
  counts[std::string(kUnkToken)] = 0;
  for (const auto& t : texts) {
    for (auto& tok : split_whitespace(t)) ++counts[tok];
  }
  std::uint64_t total = 0;
  for (const auto& [tok, c] : counts) total += c + 1;
  CacheLmParams p;
  p.lambda = lambda;
  for (const auto& [tok, c] : counts) {
    p.vocabulary.push_back(tok);
    p.base_unigram.push_back(static_cast<double>(c + 1) / static_cast<double>(total));
  }
  p.validate();
  return p;
}

json CacheLmParams::to_json() const {
  return {{"vocabulary", vocabulary}, {"base_unigram", base_unigram}, {"lambda", lambda}};
}

CacheLmParams CacheLmParams::from_json(const json& j) {
  CacheLmParams p;
  try {
    p.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    p.base_unigram = j.at("base_unigram").get<std::vector<double>>();
    p.lambda = j.at("lambda").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed cache-lm parameters: ") + e.what());
  }
  p.validate();
  return p;
}

std::string CacheLmParams::fingerprint() const { return sha256_hex(to_json().dump()).substr(0, 16); }

double cache_lm_prob(const CacheLmParams& params, std::span<const std::string> history, std::string_view token) {
  const auto it = std::find(params.vocabulary.begin(), params.vocabulary.end(), token);
  if (it == params.vocabulary.end()) throw DataError("token '" + std::string(token) + "' is not in the vocabulary");
  const double base = params.base_unigram[static_cast<std::size_t>(it - params.vocabulary.begin())];
  if (history.empty()) return base;
  const auto count = std::count(history.begin(), history.end(), token);
  return params.lambda * (static_cast<double>(count) / static_cast<double>(history.size())) +
         (1.0 - params.lambda) * base;
}

CacheLm::CacheLm(CacheLmParams params) : params_(std::move(params)) {
  params_.validate();
  for (std::size_t i = 0; i < params_.vocabulary.size(); ++i) index_.emplace(params_.vocabulary[i], i);
  if (auto it = index_.find(std::string(kUnkToken)); it != index_.end()) unk_ = it->second;
}

std::optional<std::size_t> CacheLm::token_id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t CacheLm::id_or_throw(std::string_view token) const {
  if (auto id = token_id(token)) return *id;
  throw DataError("token '" + std::string(token) + "' is not in the vocabulary");
}

std::vector<std::string> CacheLm::tokenize(std::string_view text) const {
  auto words = split_whitespace(text);
  for (auto& w : words) {
    if (index_.count(w)) continue;
    if (!unk_) throw DataError("word '" + w + "' is out of vocabulary and the vocabulary has no <unk> entry");
    w = std::string(kUnkToken);
  }
  return words;
}

std::vector<double> CacheLm::logprobs(std::span<const std::string> prompt,
                                      std::span<const std::string> continuation) const {
  std::vector<std::uint64_t> counts(params_.vocabulary.size(), 0);
  std::uint64_t history = 0;
  for (const auto& tok : prompt) {
    ++counts[id_or_throw(tok)];
    ++history;
  }
  std::vector<double> out;
  out.reserve(continuation.size());
  const double lambda = params_.lambda;
  for (const auto& tok : continuation) {
    const std::size_t id = id_or_throw(tok);
    const double base = params_.base_unigram[id];
    const double p = history == 0 ? base
                                  : lambda * (static_cast<double>(counts[id]) / static_cast<double>(history)) +
                                        (1.0 - lambda) * base;
    out.push_back(std::log(p));
    ++counts[id];
    ++history;
  }
  return out;
}

CacheLmBackend::CacheLmBackend(CacheLmParams params, std::string model_name, std::size_t context_limit)
    : lm_(std::move(params)), context_limit_(context_limit) {
  model_id_ = (model_name.empty() ? std::string("cache-lm") : model_name) + "@" + lm_.params().fingerprint();
}

BackendResponse CacheLmBackend::score(std::string_view prompt, std::string_view continuation) {
  const auto prompt_tokens = lm_.tokenize(prompt);
  auto cont_tokens = lm_.tokenize(continuation);
  if (cont_tokens.empty()) throw std::invalid_argument("continuation has no tokens");
  if (context_limit_ > 0 && prompt_tokens.size() + cont_tokens.size() > context_limit_) {
    throw ContextOverflow("sequence of " + std::to_string(prompt_tokens.size() + cont_tokens.size()) +
                          " tokens exceeds the context limit of " + std::to_string(context_limit_));
  }
  BackendResponse resp;
  resp.prompt_tokens = prompt_tokens.size();
  resp.continuation.logprobs = lm_.logprobs(prompt_tokens, cont_tokens);
  resp.continuation.tokens = std::move(cont_tokens);
  return resp;
}

std::vector<std::string> CacheLmBackend::control_vocabulary() const {
  std::vector<std::string> out;
  for (const auto& tok : lm_.params().vocabulary) {
    if (tok != kUnkToken) out.push_back(tok);
  }
  return out;
}

}  // namespace iconsel::lm
