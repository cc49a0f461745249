#include "iconsel/lm_backend.hpp"

#include <cmath>

#include "iconsel/error.hpp"
#include "iconsel/score_cache.hpp"

namespace iconsel::lm {

BackendKind parse_backend_kind(const std::string& name) {
  if (name == "remote") return BackendKind::Remote;
  if (name == "cache-lm") return BackendKind::CacheLm;
  throw ConfigError("unknown backend kind '" + name + "' (expected remote or cache-lm)");
}

std::string backend_kind_name(BackendKind kind) { return kind == BackendKind::Remote ? "remote" : "cache-lm"; }

void BackendConfig::validate() const {
  if (max_concurrency < 1) throw ConfigError("backend.max_concurrency must be >= 1");
  if (kind == BackendKind::Remote && endpoint.empty()) throw ConfigError("remote backend requires backend.endpoint");
  if (kind == BackendKind::CacheLm && !endpoint.empty()) {
    throw ConfigError("backend.endpoint is only valid for the remote backend");
  }
  if (kind == BackendKind::Remote && model_id.empty()) throw ConfigError("remote backend requires backend.model_id");
  if (timeout.count() <= 0) throw ConfigError("backend.timeout must be positive");
}

void TokenLogprobs::validate() const {
  if (tokens.size() != logprobs.size()) {
    throw BackendError("token/logprob length mismatch: " + std::to_string(tokens.size()) + " vs " +
                       std::to_string(logprobs.size()));
  }
  if (tokens.empty()) throw BackendError("empty token sequence");
  for (double lp : logprobs) {
    if (!std::isfinite(lp) || lp > 0.0) throw BackendError("invalid logprob " + std::to_string(lp));
  }
}

LogprobService::LogprobService(std::shared_ptr<Backend> backend, std::shared_ptr<ScoreCache> cache)
    : backend_(std::move(backend)), cache_(std::move(cache)) {
  if (!backend_) throw std::invalid_argument("LogprobService: null backend");
  if (!cache_) cache_ = std::make_shared<ScoreCache>();
  model_id_ = backend_->model_id();
  control_vocab_ = backend_->control_vocabulary();
}

LogprobService::LogprobService(std::shared_ptr<Backend> backend)
    : LogprobService(std::move(backend), std::make_shared<ScoreCache>()) {}

TokenLogprobs LogprobService::continuation_logprobs(std::string_view prompt, std::string_view continuation) {
  if (continuation.empty()) throw std::invalid_argument("continuation_logprobs: empty continuation");
  const auto key = ScoreCacheKey::make(model_id_, prompt, continuation);
  const std::string flat = key.flat();

  std::promise<TokenLogprobs> promise;
  {
    std::unique_lock lock(inflight_mu_);
    if (auto hit = cache_->find(key)) {
      ++cache_hits_;
      return *hit;
    }
    auto it = inflight_.find(flat);
    if (it != inflight_.end()) {
      // Another thread is fetching this key; share its result.
      auto fut = it->second;
      ++cache_hits_;
      lock.unlock();
      return fut.get();
    }
    inflight_.emplace(flat, promise.get_future().share());
  }

  try {
    BackendResponse resp = backend_->score(prompt, continuation);
    resp.continuation.validate();
    const auto calls = ++backend_calls_;
    prompt_tokens_ += resp.prompt_tokens;
    continuation_tokens_ += resp.continuation.tokens.size();
    cache_->insert(key, resp.continuation);
    promise.set_value(resp.continuation);
    {
      std::lock_guard lock(inflight_mu_);
      inflight_.erase(flat);
    }
    if (call_hook_) call_hook_(calls);
    return resp.continuation;
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard lock(inflight_mu_);
    inflight_.erase(flat);
    throw;
  }
}

std::vector<std::string> LogprobService::tokenize(std::string_view text) {
  if (backend_->local_tokenizer()) return backend_->tokenize(text);
  const std::string key(text);
  {
    std::lock_guard lock(tokenize_mu_);
    auto it = tokenize_memo_.find(key);
    if (it != tokenize_memo_.end()) return it->second;
  }
  auto tokens = backend_->tokenize(text);
  ++tokenize_calls_;
  std::lock_guard lock(tokenize_mu_);
  tokenize_memo_.emplace(key, tokens);
  return tokens;
}

CallAccounting LogprobService::accounting() const {
  return {backend_calls_.load(), prompt_tokens_.load(), continuation_tokens_.load(), cache_hits_.load(),
          tokenize_calls_.load()};
}

}  // namespace iconsel::lm
