#include "iconsel/score_cache.hpp"

#include <chrono>
#include <ctime>

#include "iconsel/error.hpp"
#include "iconsel/util.hpp"
#include "json.hpp"

namespace iconsel::lm {

using nlohmann::json;

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

ScoreCacheKey ScoreCacheKey::make(std::string_view model_id, std::string_view prompt, std::string_view continuation) {
  return {std::string(model_id), sha256_hex(prompt), sha256_hex(continuation)};
}

std::string ScoreCacheKey::flat() const { return model_id + '\x1f' + prompt_hash + '\x1f' + continuation_hash; }

ScoreCache::ScoreCache(std::filesystem::path file) : file_(file) {
  bool needs_newline = false;
  if (std::filesystem::exists(file)) {
    const std::string text = read_file(file);
    needs_newline = !text.empty() && text.back() != '\n';
    std::size_t offset = 0;
    while (offset < text.size()) {
      std::size_t end = text.find('\n', offset);
      if (end == std::string::npos) end = text.size();
      std::string_view line(text.data() + offset, end - offset);
      offset = end + 1;
      if (trim(line).empty()) continue;
      try {
        const json rec = json::parse(line);
        ScoreCacheKey key{rec.at("model_id").get<std::string>(), rec.at("prompt_hash").get<std::string>(),
                          rec.at("continuation_hash").get<std::string>()};
        TokenLogprobs value{rec.at("tokens").get<std::vector<std::string>>(),
                            rec.at("logprobs").get<std::vector<double>>()};
        value.validate();
        entries_.insert_or_assign(key.flat(), std::move(value));
      } catch (const std::exception&) {
        ++skipped_lines_;
      }
    }
  } else if (file.has_parent_path()) {
    std::filesystem::create_directories(file.parent_path());
  }
  log_.open(file, std::ios::app | std::ios::binary);
  if (!log_) throw DataError("cannot open score cache " + file.string());
  // A torn final record must not swallow the next append.
  if (needs_newline) log_ << '\n' << std::flush;
}

std::optional<TokenLogprobs> ScoreCache::find(const ScoreCacheKey& key) const {
  std::shared_lock lock(mu_);
  auto it = entries_.find(key.flat());
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ScoreCache::insert(const ScoreCacheKey& key, const TokenLogprobs& value) {
  std::unique_lock lock(mu_);
  auto [it, inserted] = entries_.try_emplace(key.flat(), value);
  if (!inserted || !file_) return;
  json rec = json::object();
  rec["model_id"] = key.model_id;
  rec["prompt_hash"] = key.prompt_hash;
  rec["continuation_hash"] = key.continuation_hash;
  rec["tokens"] = value.tokens;
  rec["logprobs"] = value.logprobs;
  rec["created_at"] = utc_timestamp();
  log_ << rec.dump() << '\n' << std::flush;
  if (!log_) throw DataError("append to score cache failed: " + file_->string());
}

std::size_t ScoreCache::size() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

}  // namespace iconsel::lm
