#pragma once

#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>

#include "iconsel/lm_backend.hpp"

namespace iconsel::lm {

struct ScoreCacheKey {
  std::string model_id;
  std::string prompt_hash;
  std::string continuation_hash;

  static ScoreCacheKey make(std::string_view model_id, std::string_view prompt, std::string_view continuation);
  std::string flat() const;
};

/// Persistent (model, prompt, continuation) -> logprobs store, backed by an
/// append-only JSONL log. On load the last record for a key wins; in memory
/// the first value inserted for a key is kept. Lines that fail to parse (for
/// example a record torn by a killed process) are skipped.
class ScoreCache {
 public:
  ScoreCache() = default;
  explicit ScoreCache(std::filesystem::path file);

  ScoreCache(const ScoreCache&) = delete;
  ScoreCache& operator=(const ScoreCache&) = delete;

  std::optional<TokenLogprobs> find(const ScoreCacheKey& key) const;
  void insert(const ScoreCacheKey& key, const TokenLogprobs& value);

  std::size_t size() const;
  std::size_t skipped_lines() const { return skipped_lines_; }
  const std::optional<std::filesystem::path>& file() const { return file_; }

 private:
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, TokenLogprobs> entries_;
  std::optional<std::filesystem::path> file_;
  std::ofstream log_;
  std::size_t skipped_lines_ = 0;
};

}  // namespace iconsel::lm
