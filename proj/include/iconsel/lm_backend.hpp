#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace iconsel::lm {

enum class BackendKind { Remote, CacheLm };

BackendKind parse_backend_kind(const std::string& name);
std::string backend_kind_name(BackendKind kind);

struct BackendConfig {
  BackendKind kind = BackendKind::CacheLm;
  std::string endpoint;  // remote only, e.g. http://localhost:8000/v1
  std::string model_id;
  std::size_t max_concurrency = 1;
  std::size_t retry_limit = 3;
  std::chrono::milliseconds timeout{30000};
  std::chrono::milliseconds backoff_base{250};
  std::size_t context_limit = 0;  // in backend tokens; 0 disables the check
  int logprobs = 1;
  std::string api_key_env = "ICONSEL_API_KEY";

  // Throws ConfigError.
  void validate() const;
};

/// Per-token natural-log probabilities of a continuation.
struct TokenLogprobs {
  std::vector<std::string> tokens;
  std::vector<double> logprobs;

  // Equal lengths, non-empty, every logprob finite and <= 0.
  void validate() const;
  bool operator==(const TokenLogprobs&) const = default;
};

struct BackendResponse {
  TokenLogprobs continuation;
  std::size_t prompt_tokens = 0;
};

/// A log-probability oracle. Implementations must be safe to call from
/// several threads at once.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::string model_id() const = 0;

  /// One backend call: logprobs of `continuation` conditioned on `prompt`.
  virtual BackendResponse score(std::string_view prompt, std::string_view continuation) = 0;

  virtual std::vector<std::string> tokenize(std::string_view text) = 0;

  /// True when tokenize() is computed locally and costs no backend request.
  virtual bool local_tokenizer() const = 0;

  /// Tokens that random length-matched controls are drawn from.
  virtual std::vector<std::string> control_vocabulary() const = 0;
};

struct CallAccounting {
  std::uint64_t backend_calls = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t continuation_tokens = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t tokenize_calls = 0;
};

class ScoreCache;

/// Backend + score cache + exact call accounting. Concurrent identical
/// queries are coalesced so that cache hits plus backend calls always equal
/// the number of queries.
class LogprobService {
 public:
  LogprobService(std::shared_ptr<Backend> backend, std::shared_ptr<ScoreCache> cache);
  explicit LogprobService(std::shared_ptr<Backend> backend);

  TokenLogprobs continuation_logprobs(std::string_view prompt, std::string_view continuation);
  std::vector<std::string> tokenize(std::string_view text);
  const std::vector<std::string>& control_vocabulary() const { return control_vocab_; }

  CallAccounting accounting() const;
  Backend& backend() { return *backend_; }
  const std::string& model_id() const { return model_id_; }

  /// Invoked after every real backend call with the running call count.
  /// Used for fault injection in tests and by the CLI.
  void set_call_hook(std::function<void(std::uint64_t)> hook) { call_hook_ = std::move(hook); }

 private:
  std::shared_ptr<Backend> backend_;
  std::shared_ptr<ScoreCache> cache_;
  std::string model_id_;
  std::vector<std::string> control_vocab_;
  std::function<void(std::uint64_t)> call_hook_;

  std::mutex inflight_mu_;
  std::unordered_map<std::string, std::shared_future<TokenLogprobs>> inflight_;

  std::mutex tokenize_mu_;
  std::unordered_map<std::string, std::vector<std::string>> tokenize_memo_;

  std::atomic<std::uint64_t> backend_calls_{0};
  std::atomic<std::uint64_t> prompt_tokens_{0};
  std::atomic<std::uint64_t> continuation_tokens_{0};
  std::atomic<std::uint64_t> cache_hits_{0};
  std::atomic<std::uint64_t> tokenize_calls_{0};
};

}  // namespace iconsel::lm
