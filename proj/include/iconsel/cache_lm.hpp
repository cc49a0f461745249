#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "iconsel/lm_backend.hpp"
#include "json.hpp"

namespace iconsel::lm {

inline constexpr std::string_view kUnkToken = "<unk>";

/// Unigram-cache mixture over a closed whitespace vocabulary:
///
///   p(t | h) = lambda * count(t, h) / |h| + (1 - lambda) * base(t)
///
/// and p(t | h) = base(t) when h is empty. Demonstrations placed in the
/// prompt genuinely shift continuation likelihoods through the cache term.
struct CacheLmParams {
  std::vector<std::string> vocabulary;
  std::vector<double> base_unigram;
  double lambda = 0.0;

  // Strictly positive probabilities summing to 1 within 1e-12, lambda in
  // [0, 1), unique non-empty whitespace-free tokens. Throws ConfigError.
  void validate() const;

  static CacheLmParams uniform(std::vector<std::string> vocabulary, double lambda);

  /// Add-one smoothed unigram estimated from whitespace tokens of `texts`,
  /// with a reserved <unk> entry. Vocabulary is sorted for determinism.
  static CacheLmParams from_texts(const std::vector<std::string>& texts, double lambda);

  nlohmann::json to_json() const;
  static CacheLmParams from_json(const nlohmann::json& j);

  /// Short content hash; part of the backend model id so that caches built
  /// under different parameters never mix.
  std::string fingerprint() const;
};

/// The mixture probability with string tokens. `history` must already be
/// mapped into the vocabulary; an unknown `token` throws.
double cache_lm_prob(const CacheLmParams& params, std::span<const std::string> history, std::string_view token);

class CacheLm {
 public:
  explicit CacheLm(CacheLmParams params);

  const CacheLmParams& params() const { return params_; }

  /// Whitespace split; out-of-vocabulary words become <unk>, or throw
  /// DataError when the vocabulary has no <unk> entry.
  std::vector<std::string> tokenize(std::string_view text) const;

  std::optional<std::size_t> token_id(std::string_view token) const;

  /// Per-token logprobs of `continuation` given `prompt` tokens.
  std::vector<double> logprobs(std::span<const std::string> prompt, std::span<const std::string> continuation) const;

 private:
  std::size_t id_or_throw(std::string_view token) const;

  CacheLmParams params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::optional<std::size_t> unk_;
};

class CacheLmBackend : public Backend {
 public:
  CacheLmBackend(CacheLmParams params, std::string model_name = {}, std::size_t context_limit = 0);

  std::string model_id() const override { return model_id_; }
  BackendResponse score(std::string_view prompt, std::string_view continuation) override;
  std::vector<std::string> tokenize(std::string_view text) override { return lm_.tokenize(text); }
  bool local_tokenizer() const override { return true; }
  std::vector<std::string> control_vocabulary() const override;

  const CacheLm& model() const { return lm_; }

 private:
  CacheLm lm_;
  std::string model_id_;
  std::size_t context_limit_;
};

}  // namespace iconsel::lm
