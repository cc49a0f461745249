#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "iconsel/lm_backend.hpp"
#include "json.hpp"

namespace iconsel::lm {

/// Client for an OpenAI-style completions endpoint that can echo the prompt
/// with per-token logprobs. Each request sends prompt + continuation with
/// max_tokens 0 and recovers the continuation's token range from the echoed
/// text offsets.
class RemoteBackend : public Backend {
 public:
  RemoteBackend(BackendConfig config, std::vector<std::string> control_vocabulary);

  std::string model_id() const override { return config_.model_id; }
  BackendResponse score(std::string_view prompt, std::string_view continuation) override;
  std::vector<std::string> tokenize(std::string_view text) override;
  bool local_tokenizer() const override { return false; }
  std::vector<std::string> control_vocabulary() const override { return control_vocab_; }

 private:
  nlohmann::json post_with_retry(const nlohmann::json& body);

  BackendConfig config_;
  std::string scheme_host_port_;
  std::string base_path_;
  std::vector<std::string> control_vocab_;
};

struct EchoedTokens {
  std::vector<std::string> tokens;
  std::vector<std::optional<double>> logprobs;
  std::vector<std::size_t> text_offsets;  // empty when the server omitted them
};

/// Parses choices[0].logprobs of a completions response. Throws
/// TokenizationMismatch when the response carries no echoed tokens.
EchoedTokens parse_echoed_tokens(const nlohmann::json& response);

/// Splits an echoed prompt + continuation into the continuation's
/// logprobs. Offsets are in code points, as the reference API reports them.
/// When the prompt is empty the first token has no logprob and is left out.
BackendResponse split_continuation(const EchoedTokens& echoed, std::string_view prompt,
                                   std::string_view continuation);

}  // namespace iconsel::lm
