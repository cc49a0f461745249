#include "iconsel/remote_backend.hpp"

#include <cmath>
#include <cstdlib>
#include <random>
#include <thread>

#include "httplib.h"
#include "iconsel/error.hpp"
#include "iconsel/util.hpp"

namespace iconsel::lm {

using nlohmann::json;

namespace {

std::size_t count_code_points(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

std::string preview(std::string_view s, std::size_t max = 200) {
  if (s.size() <= max) return std::string(s);
  return std::string(s.substr(0, max)) + "...";
}

}  // namespace

EchoedTokens parse_echoed_tokens(const json& response) {
  const json* lp = nullptr;
  if (response.contains("choices") && response["choices"].is_array() && !response["choices"].empty()) {
    const auto& choice = response["choices"][0];
    if (choice.contains("logprobs") && choice["logprobs"].is_object()) lp = &choice["logprobs"];
  }
  if (lp == nullptr || !lp->contains("tokens") || !(*lp)["tokens"].is_array()) {
    throw TokenizationMismatch(
        "backend response carries no echoed tokens; this endpoint cannot echo tokenization "
        "(use scoring.length_mode = characters for random controls)");
  }
  EchoedTokens out;
  out.tokens = (*lp)["tokens"].get<std::vector<std::string>>();
  if (lp->contains("token_logprobs") && (*lp)["token_logprobs"].is_array()) {
    for (const auto& v : (*lp)["token_logprobs"]) {
      out.logprobs.push_back(v.is_number() ? std::optional<double>(v.get<double>()) : std::nullopt);
    }
  }
  if (out.logprobs.size() != out.tokens.size()) {
    throw TokenizationMismatch("echoed token_logprobs length differs from tokens length");
  }
  if (lp->contains("text_offset") && (*lp)["text_offset"].is_array()) {
    out.text_offsets = (*lp)["text_offset"].get<std::vector<std::size_t>>();
    if (out.text_offsets.size() != out.tokens.size()) {
      throw TokenizationMismatch("echoed text_offset length differs from tokens length");
    }
  }
  return out;
}

BackendResponse split_continuation(const EchoedTokens& echoed, std::string_view prompt,
                                   std::string_view continuation) {
  const std::size_t n = echoed.tokens.size();
  std::size_t boundary = n;
  if (!echoed.text_offsets.empty()) {
    const std::size_t prompt_cp = count_code_points(prompt);
    for (std::size_t i = 0; i < n; ++i) {
      if (echoed.text_offsets[i] >= prompt_cp) {
        boundary = i;
        break;
      }
    }
  } else {
    std::size_t bytes = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (bytes >= prompt.size()) {
        boundary = i;
        break;
      }
      bytes += echoed.tokens[i].size();
    }
  }

  std::string covered;
  for (std::size_t i = boundary; i < n; ++i) covered += echoed.tokens[i];
  if (covered != continuation) {
    throw TokenizationMismatch("echoed tokens do not cover the continuation exactly: expected \"" +
                               preview(continuation) + "\", got \"" + preview(covered) + "\"");
  }

  std::size_t start = boundary;
  if (prompt.empty() && start == 0 && start < n && !echoed.logprobs[0]) ++start;
  if (start >= n) throw TokenizationMismatch("no scorable continuation tokens in the echoed response");

  BackendResponse resp;
  resp.prompt_tokens = boundary;
  for (std::size_t i = start; i < n; ++i) {
    if (!echoed.logprobs[i]) {
      throw TokenizationMismatch("continuation token " + std::to_string(i) + " has no logprob");
    }
    double lp = *echoed.logprobs[i];
    // Servers occasionally report tiny positive values from float noise.
    if (lp > 0.0 && lp <= 1e-6) lp = 0.0;
    resp.continuation.tokens.push_back(echoed.tokens[i]);
    resp.continuation.logprobs.push_back(lp);
  }
  resp.continuation.validate();
  return resp;
}

RemoteBackend::RemoteBackend(BackendConfig config, std::vector<std::string> control_vocabulary)
    : config_(std::move(config)), control_vocab_(std::move(control_vocabulary)) {
  config_.validate();
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("backend.endpoint must include a scheme: " + config_.endpoint);
  }
  const auto path_start = config_.endpoint.find('/', scheme_end + 3);
  scheme_host_port_ = config_.endpoint.substr(0, path_start);
  base_path_ = path_start == std::string::npos ? "" : config_.endpoint.substr(path_start);
  while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
}

json RemoteBackend::post_with_retry(const json& body) {
  const std::string path = base_path_ + "/completions";
  const std::string payload = body.dump();
  httplib::Headers headers;
  if (const char* key = std::getenv(config_.api_key_env.c_str()); key != nullptr && *key != '\0') {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  thread_local std::mt19937_64 jitter_rng{std::random_device{}()};

  std::string attempt_log;
  const std::size_t attempts = config_.retry_limit + 1;
  for (std::size_t attempt = 1; attempt <= attempts; ++attempt) {
    if (attempt > 1) {
      const double factor = std::ldexp(1.0, static_cast<int>(attempt - 2)) * (1.0 + uniform_unit(jitter_rng));
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(
          static_cast<double>(config_.backoff_base.count()) * factor));
    }
    httplib::Client client(scheme_host_port_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());

    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      attempt_log += "\n  attempt " + std::to_string(attempt) + ": transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      attempt_log += "\n  attempt " + std::to_string(attempt) + ": HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw BackendError("backend rejected request with HTTP " + std::to_string(res->status) + ": " +
                         preview(res->body));
    }
    try {
      return json::parse(res->body);
    } catch (const json::parse_error& e) {
      throw BackendError(std::string("backend returned malformed JSON: ") + e.what());
    }
  }
  throw TransportError("backend unreachable after " + std::to_string(attempts) + " attempt(s):" + attempt_log);
}

BackendResponse RemoteBackend::score(std::string_view prompt, std::string_view continuation) {
  if (continuation.empty()) throw std::invalid_argument("continuation_logprobs: empty continuation");
  std::string full(prompt);
  full += continuation;
  const json body = {{"model", config_.model_id},
                     {"prompt", full},
                     {"max_tokens", 0},
                     {"echo", true},
                     {"logprobs", config_.logprobs}};
  const auto echoed = parse_echoed_tokens(post_with_retry(body));
  auto resp = split_continuation(echoed, prompt, continuation);
  if (config_.context_limit > 0 && echoed.tokens.size() > config_.context_limit) {
    throw ContextOverflow("sequence of " + std::to_string(echoed.tokens.size()) +
                          " tokens exceeds the context limit of " + std::to_string(config_.context_limit));
  }
  return resp;
}

std::vector<std::string> RemoteBackend::tokenize(std::string_view text) {
  if (text.empty()) return {};
  const json body = {{"model", config_.model_id},
                     {"prompt", std::string(text)},
                     {"max_tokens", 0},
                     {"echo", true},
                     {"logprobs", config_.logprobs}};
  return parse_echoed_tokens(post_with_retry(body)).tokens;
}

}  // namespace iconsel::lm
