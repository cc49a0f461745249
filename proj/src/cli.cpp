#include "iconsel/cli.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <set>

#include "CLI11.hpp"
#include "iconsel/analysis.hpp"
#include "iconsel/cache_lm.hpp"
#include "iconsel/corpus.hpp"
#include "iconsel/error.hpp"
#include "iconsel/lm_backend.hpp"
#include "iconsel/remote_backend.hpp"
#include "iconsel/score_cache.hpp"
#include "iconsel/scoring.hpp"
#include "iconsel/selection.hpp"
#include "iconsel/util.hpp"

namespace iconsel::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string source_name(Source s) {
  switch (s) {
    case Source::Default:
      return "default";
    case Source::File:
      return "file";
    case Source::Env:
      return "env";
    case Source::Flag:
      return "flag";
  }
  return "?";
}

const std::map<std::string, std::string>& Settings::defaults() {
  static const std::map<std::string, std::string> kDefaults = {
      {"seed", "42"},
      {"output_dir", "out"},
      {"log_level", "info"},
      {"resume", "false"},
      {"backend.kind", "cache-lm"},
      {"backend.endpoint", ""},
      {"backend.model_id", ""},
      {"backend.concurrency", "1"},
      {"backend.retry_limit", "3"},
      {"backend.timeout_ms", "30000"},
      {"backend.backoff_ms", "250"},
      {"backend.context_limit", "0"},
      {"backend.logprobs", "1"},
      {"backend.api_key_env", "ICONSEL_API_KEY"},
      {"backend.control_vocab", ""},
      {"cache_lm.params", ""},
      {"cache_lm.lambda", "0.5"},
      {"scoring.epsilon", "1e-8"},
      {"scoring.random_draws", "1"},
      {"scoring.demo_template", "alpaca"},
      {"scoring.query_template", "alpaca"},
      {"scoring.length_mode", "tokens"},
      {"selection.k_percent", "15"},
      {"selection.method", "icon"},
      {"selection.labeling_subset_size", "0"},
      {"selector.epochs", "10"},
      {"selector.learning_rate", "0.5"},
      {"selector.l2", "1e-6"},
      {"selector.holdout_fraction", "0.2"},
      {"selector.hash_buckets", "262144"},
      {"selector.ngram_max", "2"},
      {"analysis.difficulty", "false"},
      {"paths.corpus", ""},
      {"paths.corpus_format", "auto"},
      {"paths.assessment", ""},
      {"paths.assessment_sources", ""},
      {"paths.assessment_size", "0"},
      {"paths.cache", ""},
      {"paths.scores", ""},
      {"paths.labeled", ""},
      {"paths.selector", ""},
      {"paths.pool", ""},
      {"paths.judgments", ""},
  };
  return kDefaults;
}

bool Settings::known(const std::string& key) { return defaults().count(key) > 0; }

std::string Settings::env_name(const std::string& key) {
  std::string out = "ICONSEL_";
  for (char c : key) out.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return out;
}

Settings::Settings() {
  for (const auto& [k, v] : defaults()) entries_[k] = {v, Source::Default};
}

void Settings::set(const std::string& key, std::string value, Source source) {
  if (!known(key)) throw ConfigError("unknown setting '" + key + "'");
  entries_[key] = {std::move(value), source};
}

const std::string& Settings::str(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown setting '" + key + "'");
  return it->second.value;
}

double Settings::number(const std::string& key) const {
  const auto& v = str(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

std::uint64_t Settings::u64(const std::string& key) const {
  const auto& v = str(key);
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

std::size_t Settings::count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

bool Settings::flag(const std::string& key) const {
  const auto& v = str(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off" || v.empty()) return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::string Settings::render_table() const {
  std::size_t width = 0;
  for (const auto& [k, s] : entries_) width = std::max(width, k.size());
  std::string out;
  for (const auto& [k, s] : entries_) {
    out += fmt::format("  {:<{}} = {:<24} [{}]\n", k, width, s.value.empty() ? "\"\"" : s.value,
                       source_name(s.source));
  }
  return out;
}

std::string Settings::config_hash() const {
  static const std::set<std::string> kExcluded = {"resume", "log_level", "backend.concurrency", "output_dir",
                                                  "paths.cache"};
  json j = json::object();
  for (const auto& [k, s] : entries_) {
    if (!kExcluded.count(k)) j[k] = s.value;
  }
  return sha256_hex(j.dump());
}

json Settings::to_json() const {
  json j = json::object();
  for (const auto& [k, s] : entries_) j[k] = {{"value", s.value}, {"source", source_name(s.source)}};
  return j;
}

std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(path.string());
  } catch (const CLI::Error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // table open/close markers
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) {
      if (i) value += ",";
      value += item.inputs[i];
    }
    out.emplace_back(item.fullname(), value);
  }
  return out;
}

Settings resolve_settings(const std::optional<fs::path>& config_file,
                          const std::vector<std::pair<std::string, std::string>>& flag_values, const EnvLookup& env) {
  Settings s;
  if (config_file) {
    for (const auto& [k, v] : read_config_file(*config_file)) {
      if (!Settings::known(k)) throw ConfigError(config_file->string() + ": unknown setting '" + k + "'");
      s.set(k, v, Source::File);
    }
  }
  for (const auto& [k, def] : Settings::defaults()) {
    if (auto v = env(Settings::env_name(k))) s.set(k, *v, Source::Env);
  }
  for (const auto& [k, v] : flag_values) s.set(k, v, Source::Flag);
  return s;
}

// ---------------------------------------------------------------------------

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Collects the per-command run manifest while the command runs.
class RunContext {
 public:
  RunContext(std::string command, const Settings& settings)
      : command_(std::move(command)), settings_(settings), started_(utc_now()) {
    out_dir_ = settings.str("output_dir");
    fs::create_directories(out_dir_);
  }

  const Settings& settings() const { return settings_; }
  const fs::path& out_dir() const { return out_dir_; }
  std::string config_hash() const { return settings_.config_hash(); }

  fs::path output(const std::string& name) const { return out_dir_ / name; }

  /// Writes an output file and records its digest.
  void write(const std::string& name, const std::string& contents) {
    write_file_atomic(output(name), contents);
    outputs_[name] = sha256_hex(contents);
  }
  void record_existing(const std::string& name) { outputs_[name] = sha256_hex(read_file(output(name))); }

  /// JSON outputs carry the config hash of the run that produced them.
  void write_json(const std::string& name, json j) {
    j["config_hash"] = config_hash();
    write(name, j.dump(2) + "\n");
  }

  json& extra() { return extra_; }

  void set_accounting(const lm::CallAccounting& a) {
    extra_["accounting"] = {{"backend_calls", a.backend_calls},
                            {"cache_hits", a.cache_hits},
                            {"prompt_tokens", a.prompt_tokens},
                            {"continuation_tokens", a.continuation_tokens},
                            {"tokenize_calls", a.tokenize_calls}};
  }

  void finish(const std::string& status) {
    json m = {{"command", command_},
              {"status", status},
              {"config_hash", config_hash()},
              {"config", settings_.to_json()},
              {"seed", settings_.u64("seed")},
              {"started_at", started_},
              {"finished_at", utc_now()},
              {"outputs", outputs_}};
    for (auto it = extra_.begin(); it != extra_.end(); ++it) m[it.key()] = it.value();
    write_file_atomic(output(command_ + ".manifest.json"), m.dump(2) + "\n");
  }

 private:
  std::string command_;
  const Settings& settings_;
  std::string started_;
  fs::path out_dir_;
  std::map<std::string, std::string> outputs_;
  json extra_ = json::object();
};

fs::path require_input(const Settings& s, const std::string& key, const fs::path& fallback = {}) {
  fs::path p = s.str(key).empty() ? fallback : fs::path(s.str(key));
  if (p.empty()) throw ConfigError(key + " is required for this command");
  if (!fs::exists(p)) throw ConfigError(key + ": no such file " + p.string());
  return p;
}

corpus::Format corpus_format(const Settings& s, const fs::path& path) {
  const auto& f = s.str("paths.corpus_format");
  if (f == "auto") return corpus::format_from_extension(path);
  try {
    return corpus::parse_format(f);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("paths.corpus_format: ") + e.what());
  }
}

std::string subset_extension(corpus::Format f) { return f == corpus::Format::AlpacaJson ? ".json" : ".jsonl"; }

scoring::ScoringConfig scoring_config(const Settings& s) {
  scoring::ScoringConfig c;
  c.epsilon = s.number("scoring.epsilon");
  c.random_draws = s.count("scoring.random_draws");
  c.random_seed = s.u64("seed");
  try {
    c.demo_template = scoring::parse_template(s.str("scoring.demo_template"));
    c.query_template = scoring::parse_template(s.str("scoring.query_template"));
    c.length_mode = scoring::parse_length_mode(s.str("scoring.length_mode"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

lm::BackendConfig backend_config(const Settings& s) {
  lm::BackendConfig c;
  c.kind = lm::parse_backend_kind(s.str("backend.kind"));
  c.endpoint = s.str("backend.endpoint");
  c.model_id = s.str("backend.model_id");
  c.max_concurrency = std::max<std::size_t>(1, s.count("backend.concurrency"));
  c.retry_limit = s.count("backend.retry_limit");
  c.timeout = std::chrono::milliseconds(s.u64("backend.timeout_ms"));
  c.backoff_base = std::chrono::milliseconds(s.u64("backend.backoff_ms"));
  c.context_limit = s.count("backend.context_limit");
  c.logprobs = static_cast<int>(s.count("backend.logprobs"));
  c.api_key_env = s.str("backend.api_key_env");
  c.validate();
  return c;
}

std::vector<std::string> corpus_texts(const std::vector<corpus::Sample>& samples,
                                      const std::vector<corpus::AssessmentItem>& items) {
  std::vector<std::string> texts;
  for (const auto& x : samples) {
    texts.push_back(x.instruction);
    texts.push_back(x.input);
    texts.push_back(x.response);
  }
  for (const auto& a : items) {
    texts.push_back(a.prompt);
    texts.push_back(a.reference);
  }
  return texts;
}

/// The backend plus its score cache. Cache-LM parameters come from
/// cache_lm.params when set, otherwise they are estimated from the texts the
/// command works on.
std::shared_ptr<lm::LogprobService> make_service(RunContext& ctx, const std::vector<corpus::Sample>& samples,
                                                 const std::vector<corpus::AssessmentItem>& items) {
  const Settings& s = ctx.settings();
  const auto config = backend_config(s);
  std::shared_ptr<lm::Backend> backend;
  if (config.kind == lm::BackendKind::CacheLm) {
    lm::CacheLmParams params;
    if (!s.str("cache_lm.params").empty()) {
      const auto path = require_input(s, "cache_lm.params");
      try {
        params = lm::CacheLmParams::from_json(json::parse(read_file(path)));
      } catch (const json::exception& e) {
        throw ConfigError("cache_lm.params: " + std::string(e.what()));
      }
    } else {
      params = lm::CacheLmParams::from_texts(corpus_texts(samples, items), s.number("cache_lm.lambda"));
    }
    params.validate();
    backend = std::make_shared<lm::CacheLmBackend>(params, config.model_id, config.context_limit);
  } else {
    std::vector<std::string> vocab;
    if (!s.str("backend.control_vocab").empty()) {
      vocab = split_whitespace(read_file(require_input(s, "backend.control_vocab")));
    } else {
      std::set<std::string> words;
      for (const auto& text : corpus_texts(samples, items)) {
        for (auto& w : split_whitespace(text)) words.insert(std::move(w));
      }
      vocab.assign(words.begin(), words.end());
    }
    if (vocab.empty()) throw ConfigError("remote backend needs a non-empty control vocabulary");
    backend = std::make_shared<lm::RemoteBackend>(config, std::move(vocab));
  }

  const fs::path cache_path = s.str("paths.cache").empty() ? ctx.output("score_cache.jsonl") : fs::path(s.str("paths.cache"));
  auto cache = std::make_shared<lm::ScoreCache>(cache_path);
  if (cache->skipped_lines() > 0) {
    spdlog::warn("score cache {}: skipped {} malformed line(s)", cache_path.string(), cache->skipped_lines());
  }
  auto service = std::make_shared<lm::LogprobService>(backend, cache);

  // Test hook: die abruptly after N real backend calls, as a crash would.
  if (const char* kill_after = std::getenv("ICONSEL_FAULT_KILL_AFTER_CALLS")) {
    const std::uint64_t limit = std::strtoull(kill_after, nullptr, 10);
    service->set_call_hook([limit](std::uint64_t calls) {
      if (calls >= limit) std::raise(SIGKILL);
    });
  }
  ctx.extra()["backend"] = {{"kind", lm::backend_kind_name(config.kind)}, {"model_id", service->model_id()}};
  return service;
}

std::set<std::string> top_k_ids(const std::vector<scoring::GlobalScore>& scores, double k_percent) {
  const auto ids = selection::select_top_k(scores, k_percent);
  return {ids.begin(), ids.end()};
}

// ---------------------------------------------------------------------------

void cmd_build_assessment(RunContext& ctx) {
  const Settings& s = ctx.settings();
  const auto& spec = s.str("paths.assessment_sources");
  if (spec.empty()) throw ConfigError("paths.assessment_sources is required (tag=path,tag=path,...)");
  std::vector<corpus::SourceSpec> sources;
  for (const auto& part : split_whitespace([&] {
         std::string t = spec;
         std::replace(t.begin(), t.end(), ',', ' ');
         return t;
       }())) {
    const auto eq = part.find('=');
    corpus::SourceSpec src;
    if (eq == std::string::npos) {
      src.path = part;
      src.tag = src.path.stem().string();
    } else {
      src.tag = part.substr(0, eq);
      src.path = part.substr(eq + 1);
    }
    if (src.tag.empty() || src.path.empty()) throw ConfigError("malformed assessment source '" + part + "'");
    if (!fs::exists(src.path)) throw ConfigError("assessment source " + src.tag + ": no such file " + src.path.string());
    sources.push_back(std::move(src));
  }
  const std::size_t n_total = s.count("paths.assessment_size");
  if (n_total == 0) throw ConfigError("paths.assessment_size must be positive");
  std::optional<fs::path> corpus_path;
  if (!s.str("paths.corpus").empty()) corpus_path = require_input(s, "paths.corpus");

  auto set = corpus::build_assessment(sources, n_total, s.u64("seed"));
  ctx.write("assessment.jsonl", corpus::serialize_assessment(set.items));
  ctx.write_json("assessment_manifest.json", corpus::to_json(set.manifest));
  ctx.extra()["assessment_size"] = set.items.size();

  if (corpus_path) {
    const auto pool = corpus::load_corpus(*corpus_path, corpus_format(s, *corpus_path));
    const auto report = corpus::check_disjoint(set.items, pool);
    ctx.write_json("disjointness.json", corpus::to_json(report));
    if (!report.disjoint()) {
      ctx.finish("failed");
      std::string msg = fmt::format("{} assessment item(s) also appear in the candidate pool:", report.collisions.size());
      for (const auto& c : report.collisions) msg += fmt::format(" {}={}", c.assessment_id, c.sample_id);
      throw DataError(msg);
    }
  } else {
    spdlog::warn("paths.corpus not set; disjointness against the candidate pool was not checked");
  }
  spdlog::info("wrote {} assessment items to {}", set.items.size(), ctx.output("assessment.jsonl").string());
  ctx.finish("ok");
}

void cmd_score(RunContext& ctx) {
  const Settings& s = ctx.settings();
  const auto corpus_path = require_input(s, "paths.corpus");
  const auto assessment_path = require_input(s, "paths.assessment", ctx.output("assessment.jsonl"));
  const auto config = scoring_config(s);
  const auto samples = corpus::load_corpus(corpus_path, corpus_format(s, corpus_path));
  const auto items = corpus::load_assessment(assessment_path);
  if (samples.empty()) throw DataError("candidate pool is empty");
  if (items.empty()) throw DataError("assessment set is empty");

  auto service = make_service(ctx, samples, items);
  scoring::Checkpoint checkpoint(ctx.output("score_checkpoint.jsonl"), s.flag("resume"));
  scoring::PoolOptions options;
  options.concurrency = backend_config(s).max_concurrency;
  options.checkpoint = &checkpoint;

  ctx.extra()["pool_size"] = samples.size();
  ctx.extra()["assessment_size"] = items.size();
  ctx.extra()["random_draws"] = config.random_draws;
  scoring::PoolResult result;
  try {
    result = scoring::score_pool(*service, samples, items, config, options);
  } catch (const IncompleteRun&) {
    ctx.set_accounting(service->accounting());
    ctx.finish("incomplete");
    throw;
  }
  ctx.set_accounting(service->accounting());
  ctx.extra()["resumed_triples"] = result.resumed_triples;

  ctx.write("scores.jsonl", scoring::serialize_records_jsonl(result.records));
  ctx.write("scores.csv", scoring::serialize_records_csv(result.records));
  ctx.write("global_scores.jsonl", scoring::serialize_global_jsonl(result.global));
  ctx.write("global_scores.csv", scoring::serialize_global_csv(result.global));
  const auto acc = service->accounting();
  spdlog::info("scored {} x {} pairs; backend calls {}, cache hits {}", samples.size(), items.size(),
               acc.backend_calls, acc.cache_hits);
  ctx.finish("ok");
}

void cmd_select(RunContext& ctx) {
  const Settings& s = ctx.settings();
  const auto corpus_path = require_input(s, "paths.corpus");
  const auto format = corpus_format(s, corpus_path);
  const auto pool = corpus::load_corpus(corpus_path, format);
  const double k = s.number("selection.k_percent");
  selection::SelectionConfig sel{k, s.count("selection.labeling_subset_size"), s.u64("seed")};
  sel.validate();
  const auto& method = s.str("selection.method");
  ctx.extra()["method"] = method;

  std::vector<std::string> ids;
  if (method == "icon") {
    const auto scores_path = require_input(s, "paths.scores", ctx.output("global_scores.jsonl"));
    const auto scores = scoring::load_global_scores(scores_path);
    std::set<std::string> pool_ids;
    for (const auto& x : pool) pool_ids.insert(x.id);
    for (const auto& g : scores) {
      if (!pool_ids.count(g.sample_id)) throw DataError("scored sample " + g.sample_id + " is not in the corpus");
    }
    ids = selection::select_top_k(scores, k);
    const auto subset = selection::labeling_subset(scores, sel.labeling_subset_size, sel.seed);
    const auto labeled = selection::label_top_k(subset, k);
    const auto positives = selection::export_labeled(labeled, pool, ctx.output("labeled.jsonl"));
    ctx.record_existing("labeled.jsonl");
    ctx.extra()["labeled"] = {{"size", labeled.size()}, {"positives", positives}};
  } else {
    selection::BaselineMethod baseline;
    try {
      baseline = selection::parse_baseline(method);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("selection.method: ") + e.what());
    }
    std::map<std::string, double> ppls;
    if (baseline != selection::BaselineMethod::Random) {
      auto service = make_service(ctx, pool, {});
      ppls = selection::sample_ppls(*service, pool, scoring_config(s).query_template,
                                    backend_config(s).max_concurrency);
      ctx.set_accounting(service->accounting());
    }
    ids = selection::baseline_select(pool, baseline, k / 100.0, sel.seed, ppls.empty() ? nullptr : &ppls);
  }

  const std::string name = "selected" + subset_extension(format);
  selection::export_subset(pool, ids, ctx.output(name), format);
  ctx.record_existing(name);
  ctx.extra()["selected"] = ids.size();
  spdlog::info("selected {} of {} samples ({}%) into {}", ids.size(), pool.size(), format_double(k),
               ctx.output(name).string());
  ctx.finish("ok");
}

void cmd_train_selector(RunContext& ctx) {
  const Settings& s = ctx.settings();
  const auto labeled_path = require_input(s, "paths.labeled", ctx.output("labeled.jsonl"));
  const auto labeled = selection::load_labeled(labeled_path);
  std::vector<selection::LabeledExample> examples;
  examples.reserve(labeled.size());
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const auto& l = labeled[i];
    if (l.label != selection::label_name(true) && l.label != selection::label_name(false)) {
      throw DataError(fmt::format("{}: line {}: unknown label '{}'", labeled_path.string(), i + 1, l.label));
    }
    examples.push_back({{fmt::format("labeled-{:06d}", i), l.instruction, l.input, l.response, "labeled"},
                        l.label == selection::label_name(true)});
  }

  selection::TrainConfig tc;
  tc.k_percent = s.number("selection.k_percent");
  tc.seed = s.u64("seed");
  tc.epochs = s.count("selector.epochs");
  tc.learning_rate = s.number("selector.learning_rate");
  tc.l2 = s.number("selector.l2");
  tc.holdout_fraction = s.number("selector.holdout_fraction");
  tc.features.hash_buckets = static_cast<std::uint32_t>(s.count("selector.hash_buckets"));
  tc.features.ngram_max = static_cast<int>(s.count("selector.ngram_max"));
  if (!(tc.holdout_fraction >= 0.0 && tc.holdout_fraction < 1.0)) {
    throw ConfigError("selector.holdout_fraction must lie in [0, 1)");
  }
  if (tc.features.hash_buckets == 0 || tc.features.ngram_max < 1) throw ConfigError("invalid selector feature settings");

  const auto model = selection::train_selector(examples, tc);
  ctx.write_json("selector.json", selection::to_json(model));
  ctx.extra()["train_size"] = model.metadata.train_size;
  ctx.extra()["heldout_size"] = model.metadata.heldout_size;
  if (model.metadata.heldout_accuracy) ctx.extra()["heldout_accuracy"] = *model.metadata.heldout_accuracy;
  if (model.metadata.heldout_auc) ctx.extra()["heldout_auc"] = *model.metadata.heldout_auc;
  spdlog::info("trained selector on {} examples; held-out accuracy {}, AUC {}", model.metadata.train_size,
               model.metadata.heldout_accuracy ? format_double(*model.metadata.heldout_accuracy) : "n/a",
               model.metadata.heldout_auc ? format_double(*model.metadata.heldout_auc) : "n/a");
  ctx.finish("ok");
}

void cmd_apply_selector(RunContext& ctx) {
  const Settings& s = ctx.settings();
  const auto model_path = require_input(s, "paths.selector", ctx.output("selector.json"));
  const auto pool_path = s.str("paths.pool").empty() ? require_input(s, "paths.corpus") : require_input(s, "paths.pool");
  const auto format = corpus_format(s, pool_path);
  const auto model = selection::load_selector(model_path);
  const auto pool = corpus::load_corpus(pool_path, format);

  const auto result = selection::apply_selector(model, pool);
  std::string csv = "sample_id,probability,selected\n";
  std::vector<std::string> ids;
  for (const auto& row : result.rows) {
    csv += fmt::format("{},{},{}\n", csv_escape(row.sample_id), format_double(row.probability), row.selected ? 1 : 0);
    if (row.selected) ids.push_back(row.sample_id);
  }
  ctx.write("selector_scores.csv", csv);
  const std::string name = "selector_selected" + subset_extension(format);
  selection::export_subset(pool, ids, ctx.output(name), format);
  ctx.record_existing(name);
  ctx.extra()["evaluations"] = result.evaluations;
  ctx.extra()["selected"] = ids.size();
  ctx.extra()["accounting"] = {{"backend_calls", 0}};
  spdlog::info("applied selector to {} samples; {} selected", pool.size(), ids.size());
  ctx.finish("ok");
}

void write_distribution(RunContext& ctx, const std::string& stem, const analysis::DistributionReport& r) {
  if (!r.t_test) spdlog::warn("{}", r.notice);
  ctx.write_json(stem + ".json", analysis::to_json(r));
  ctx.write(stem + ".txt", analysis::render_text(r));
  ctx.write(stem + "_histogram.csv", analysis::histogram_csv(r));
}

void cmd_analyze(RunContext& ctx) {
  const Settings& s = ctx.settings();
  bool did_something = false;

  if (!s.str("paths.judgments").empty()) {
    const auto summary = analysis::summarize_judgments(analysis::load_judgments(require_input(s, "paths.judgments")));
    ctx.write_json("pairwise.json", analysis::to_json(summary));
    spdlog::info("pairwise: {} win / {} tie / {} lose, winning score {}", summary.wins, summary.ties, summary.losses,
                 format_double(summary.winning_score));
    did_something = true;
  }

  const fs::path default_scores = ctx.output("global_scores.jsonl");
  const bool have_scores = !s.str("paths.scores").empty() || fs::exists(default_scores);
  std::set<std::string> selected;
  if (have_scores) {
    const auto scores = scoring::load_global_scores(require_input(s, "paths.scores", default_scores));
    selected = top_k_ids(scores, s.number("selection.k_percent"));
    write_distribution(ctx, "icon_distribution", analysis::distribution_report(scores, selected));
    did_something = true;
  }

  if (s.flag("analysis.difficulty")) {
    if (!have_scores) throw ConfigError("analysis.difficulty needs scores to know which samples were selected");
    const auto corpus_path = require_input(s, "paths.corpus");
    const auto pool = corpus::load_corpus(corpus_path, corpus_format(s, corpus_path));
    auto service = make_service(ctx, pool, {});
    const auto records = analysis::difficulty(*service, pool, selected, scoring_config(s).query_template);
    ctx.set_accounting(service->accounting());
    ctx.write("difficulty.jsonl", analysis::serialize_difficulty_jsonl(records));
    write_distribution(ctx, "ifd_distribution", analysis::distribution_report(records));
    did_something = true;
  }

  if (!did_something) {
    throw ConfigError("analyze needs paths.judgments, paths.scores (or scores in the output dir), or analysis.difficulty");
  }
  ctx.finish("ok");
}

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) return err->exit_code();
  if (dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const json::exception*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e)) {
    return static_cast<int>(ErrorKind::Data);
  }
  return 1;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Instruction-tuning data selection by in-context contribution scores", "iconsel"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::pair<std::string, std::string>> flags;
  std::vector<std::string> overrides;
  auto flag_into = [&](const std::string& key) {
    return [&flags, key](const std::string& v) { flags.emplace_back(key, v); };
  };

  app.add_option("--config", config_path, "TOML config file");
  app.add_option_function<std::string>("--seed", flag_into("seed"), "Seed for every random choice");
  app.add_option_function<std::string>("--output-dir", flag_into("output_dir"), "Directory for all outputs");
  app.add_option_function<std::string>("--backend", flag_into("backend.kind"), "cache-lm or remote");
  app.add_option_function<std::string>("--concurrency", flag_into("backend.concurrency"), "Parallel backend requests");
  app.add_flag_callback("--resume", [&flags] { flags.emplace_back("resume", "true"); }, "Continue from the checkpoint");
  app.add_option_function<std::string>("--log-level", flag_into("log_level"), "trace, debug, info, warn or error");
  app.add_option("--set", overrides, "Override any setting, key=value (repeatable)");

  struct Command {
    CLI::App* app;
    void (*fn)(RunContext&);
  };
  std::vector<Command> commands;
  auto* build = app.add_subcommand("build-assessment", "Draw the stratified assessment set");
  build->add_option_function<std::string>("--sources", flag_into("paths.assessment_sources"), "tag=path,...");
  build->add_option_function<std::string>("--size", flag_into("paths.assessment_size"), "Total number of items");
  build->add_option_function<std::string>("--corpus", flag_into("paths.corpus"), "Candidate pool for the overlap check");
  commands.push_back({build, cmd_build_assessment});

  auto* score = app.add_subcommand("score", "Score every candidate against the assessment set");
  score->add_option_function<std::string>("--corpus", flag_into("paths.corpus"), "Candidate pool");
  score->add_option_function<std::string>("--assessment", flag_into("paths.assessment"), "Assessment JSONL");
  score->add_option_function<std::string>("--draws", flag_into("scoring.random_draws"), "Random controls per pair");
  commands.push_back({score, cmd_score});

  auto* select = app.add_subcommand("select", "Export the top-K% subset or a baseline subset");
  select->add_option_function<std::string>("--corpus", flag_into("paths.corpus"), "Candidate pool");
  select->add_option_function<std::string>("--scores", flag_into("paths.scores"), "Global scores JSONL");
  select->add_option_function<std::string>("--k", flag_into("selection.k_percent"), "Percentage to keep");
  select->add_option_function<std::string>("--method", flag_into("selection.method"), "icon, random, low-ppl, top-ppl");
  commands.push_back({select, cmd_select});

  auto* train = app.add_subcommand("train-selector", "Fit the lightweight selector on labeled samples");
  train->add_option_function<std::string>("--labeled", flag_into("paths.labeled"), "Labeled JSONL");
  commands.push_back({train, cmd_train_selector});

  auto* apply = app.add_subcommand("apply-selector", "Score a pool with a trained selector");
  apply->add_option_function<std::string>("--model", flag_into("paths.selector"), "Selector model JSON");
  apply->add_option_function<std::string>("--pool", flag_into("paths.pool"), "Pool to score");
  apply->add_option_function<std::string>("--corpus", flag_into("paths.corpus"), "Pool to score when --pool is unset");
  commands.push_back({apply, cmd_apply_selector});

  auto* analyze = app.add_subcommand("analyze", "Distribution, difficulty and pairwise reports");
  analyze->add_option_function<std::string>("--judgments", flag_into("paths.judgments"), "Judgments JSONL");
  analyze->add_option_function<std::string>("--scores", flag_into("paths.scores"), "Global scores JSONL");
  analyze->add_option_function<std::string>("--corpus", flag_into("paths.corpus"), "Pool for difficulty analysis");
  analyze->add_flag_callback("--difficulty", [&flags] { flags.emplace_back("analysis.difficulty", "true"); },
                             "Compute IFD difficulty");
  commands.push_back({analyze, cmd_analyze});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::Config);
  }

  auto logger = spdlog::get("iconsel");
  if (!logger) logger = spdlog::stderr_color_mt("iconsel");
  spdlog::set_default_logger(logger);
  try {
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
      flags.emplace_back(o.substr(0, eq), o.substr(eq + 1));
    }
    const auto settings = resolve_settings(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path),
                                           flags, [](const std::string& name) -> std::optional<std::string> {
                                             if (const char* v = std::getenv(name.c_str())) return std::string(v);
                                             return std::nullopt;
                                           });
    const auto level = spdlog::level::from_str(settings.str("log_level"));
    if (level == spdlog::level::off && settings.str("log_level") != "off") {
      throw ConfigError("log_level: unknown level '" + settings.str("log_level") + "'");
    }
    spdlog::set_level(level);

    for (const auto& c : commands) {
      if (!c.app->parsed()) continue;
      if (level <= spdlog::level::info) {
        fmt::print(stderr, "iconsel {} (config hash {})\n{}", c.app->get_name(), settings.config_hash().substr(0, 16),
                   settings.render_table());
      }
      RunContext ctx(c.app->get_name(), settings);
      c.fn(ctx);
    }
    return 0;
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    spdlog::error("{}", e.what());
    return code;
  }
}

}  // namespace iconsel::cli
