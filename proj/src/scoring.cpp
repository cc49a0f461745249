#include "iconsel/scoring.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <sstream>
#include <thread>

#include "iconsel/error.hpp"
#include "iconsel/util.hpp"

namespace iconsel::scoring {

using nlohmann::json;

namespace {

constexpr std::string_view kDemoDraw = "demo";

std::size_t code_points(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

std::string truncate_code_points(std::string_view s, std::size_t n) {
  std::size_t seen = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) {
      if (seen == n) return std::string(s.substr(0, i));
      ++seen;
    }
  }
  return std::string(s);
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

}  // namespace

Template parse_template(const std::string& name) {
  if (name == "alpaca") return Template::Alpaca;
  if (name == "plain") return Template::Plain;
  throw ConfigError("unknown template '" + name + "' (expected alpaca or plain)");
}

std::string template_name(Template t) { return t == Template::Alpaca ? "alpaca" : "plain"; }

LengthMode parse_length_mode(const std::string& name) {
  if (name == "tokens") return LengthMode::Tokens;
  if (name == "characters") return LengthMode::Characters;
  throw ConfigError("unknown length mode '" + name + "' (expected tokens or characters)");
}

std::string length_mode_name(LengthMode m) { return m == LengthMode::Tokens ? "tokens" : "characters"; }

void ScoringConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("scoring.epsilon must be positive");
  if (random_draws < 1) throw ConfigError("scoring.random_draws must be >= 1");
}

std::string query_prompt(Template t, std::string_view prompt) {
  std::string out;
  if (t == Template::Alpaca) {
    out = "### Instruction:\n";
    out += prompt;
    out += "\n\n### Response:\n";
  } else {
    out = prompt;
    out += "\n";
  }
  return out;
}

std::string serialize_demonstration(Template t, const Sample& sample) {
  return query_prompt(t, corpus::join_prompt(sample.instruction, sample.input)) + sample.response;
}

std::string conditional_prompt(std::string_view demonstration, std::string_view query) {
  std::string out(demonstration);
  out += "\n\n";
  out += query;
  return out;
}

double ppl_from_logprobs(std::span<const double> logprobs) {
  if (logprobs.empty()) throw std::invalid_argument("perplexity of an empty sequence");
  double sum = 0.0;
  for (double lp : logprobs) sum += lp;
  return std::exp(-sum / static_cast<double>(logprobs.size()));
}

double task_icon(double ppl_base, double ppl_cond, double ppl_rand, double epsilon) {
  for (double v : {ppl_base, ppl_cond, ppl_rand, epsilon}) {
    if (!std::isfinite(v)) throw std::invalid_argument("task_icon: non-finite input");
  }
  if (epsilon < 0.0) throw std::invalid_argument("task_icon: negative epsilon");
  return (ppl_rand - ppl_cond) / (ppl_base + epsilon);
}

double global_icon(std::span<const double> task_scores) {
  if (task_scores.empty()) throw std::invalid_argument("global_icon: no task scores");
  double sum = 0.0;
  for (double s : task_scores) sum += s;
  return sum / static_cast<double>(task_scores.size());
}

void assign_ranks(std::vector<GlobalScore>& scores) {
  std::sort(scores.begin(), scores.end(), [](const GlobalScore& a, const GlobalScore& b) {
    if (a.global_icon != b.global_icon) return a.global_icon > b.global_icon;
    return a.sample_id < b.sample_id;
  });
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i].rank = i + 1;
}

// ---------------------------------------------------------------------------

Scorer::Scorer(lm::LogprobService& service, ScoringConfig config) : service_(service), config_(config) {
  config_.validate();
}

double Scorer::ppl_of(std::string_view prompt, std::string_view continuation) {
  const auto lp = service_.continuation_logprobs(prompt, continuation);
  return ppl_from_logprobs(lp.logprobs);
}

double Scorer::base_ppl(const AssessmentItem& item) {
  {
    std::lock_guard lock(mu_);
    if (auto it = base_memo_.find(item.id); it != base_memo_.end()) return it->second.first;
  }
  const auto lp = service_.continuation_logprobs(query_prompt(config_.query_template, item.prompt), item.reference);
  const double ppl = ppl_from_logprobs(lp.logprobs);
  std::lock_guard lock(mu_);
  base_memo_.emplace(item.id, std::make_pair(ppl, lp.tokens.size()));
  return ppl;
}

std::size_t Scorer::reference_token_count(const AssessmentItem& item) {
  base_ppl(item);
  std::lock_guard lock(mu_);
  return base_memo_.at(item.id).second;
}

double Scorer::conditional_ppl(const Sample& sample, const AssessmentItem& item) {
  const auto prompt = conditional_prompt(serialize_demonstration(config_.demo_template, sample),
                                         query_prompt(config_.query_template, item.prompt));
  try {
    return ppl_of(prompt, item.reference);
  } catch (const ContextOverflow& e) {
    throw ContextOverflow("sample " + sample.id + " with assessment item " + item.id + ": " + e.what());
  }
}

const RandomControl& Scorer::random_control(const Sample& sample, std::size_t draw_index) {
  const auto memo_key = std::make_pair(sample.id, draw_index);
  {
    std::lock_guard lock(mu_);
    if (auto it = control_memo_.find(memo_key); it != control_memo_.end()) return it->second;
  }
  const auto& vocab = service_.control_vocabulary();
  if (vocab.empty()) throw ConfigError("backend offers no vocabulary for random controls");

  const std::string demo = serialize_demonstration(config_.demo_template, sample);
  auto rng = seeded_engine({"random-control", std::to_string(config_.random_seed), sample.id,
                            std::to_string(draw_index)});
  auto draw = [&] { return vocab[static_cast<std::size_t>(uniform_index(rng, vocab.size()))]; };

  RandomControl rc;
  rc.sample_id = sample.id;
  rc.draw_index = draw_index;
  if (config_.length_mode == LengthMode::Tokens) {
    rc.target_length = service_.tokenize(demo).size();
    for (std::size_t i = 0; i < rc.target_length; ++i) rc.tokens.push_back(draw());
    rc.text = join_tokens(rc.tokens);
    if (!service_.backend().local_tokenizer()) {
      // Joined words may not map one-to-one onto remote tokens; grow or
      // shrink the word list until the backend count matches.
      for (int iter = 0; iter < 64; ++iter) {
        const auto n = service_.tokenize(rc.text).size();
        if (n == rc.target_length) break;
        if (n > rc.target_length && !rc.tokens.empty()) {
          rc.tokens.pop_back();
        } else {
          rc.tokens.push_back(draw());
        }
        rc.text = join_tokens(rc.tokens);
      }
    }
  } else {
    rc.target_length = code_points(demo);
    std::string text;
    while (code_points(text) < rc.target_length) {
      if (!text.empty()) text.push_back(' ');
      const auto& tok = draw();
      text += tok;
      rc.tokens.push_back(tok);
    }
    rc.text = truncate_code_points(text, rc.target_length);
  }

  std::lock_guard lock(mu_);
  return control_memo_.emplace(memo_key, std::move(rc)).first->second;
}

double Scorer::random_draw_ppl(const Sample& sample, const AssessmentItem& item, std::size_t draw_index) {
  const auto& rc = random_control(sample, draw_index);
  try {
    return ppl_of(conditional_prompt(rc.text, query_prompt(config_.query_template, item.prompt)), item.reference);
  } catch (const ContextOverflow& e) {
    throw ContextOverflow("sample " + sample.id + " (random control " + std::to_string(draw_index) +
                          ") with assessment item " + item.id + ": " + e.what());
  }
}

std::vector<double> Scorer::random_control_ppls(const Sample& sample, const AssessmentItem& item) {
  std::vector<double> out;
  out.reserve(config_.random_draws);
  for (std::size_t r = 0; r < config_.random_draws; ++r) out.push_back(random_draw_ppl(sample, item, r));
  return out;
}

double Scorer::random_control_ppl(const Sample& sample, const AssessmentItem& item) {
  const auto draws = random_control_ppls(sample, item);
  return std::accumulate(draws.begin(), draws.end(), 0.0) / static_cast<double>(draws.size());
}

ScoreRecord Scorer::score(const Sample& sample, const AssessmentItem& item) {
  ScoreRecord r;
  r.sample_id = sample.id;
  r.assessment_id = item.id;
  r.ppl_base = base_ppl(item);
  r.ppl_cond = conditional_ppl(sample, item);
  r.ppl_rand_draws = random_control_ppls(sample, item);
  r.ppl_rand = std::accumulate(r.ppl_rand_draws.begin(), r.ppl_rand_draws.end(), 0.0) /
               static_cast<double>(r.ppl_rand_draws.size());
  r.task_icon = task_icon(r.ppl_base, r.ppl_cond, r.ppl_rand, config_.epsilon);
  return r;
}

// ---------------------------------------------------------------------------

Checkpoint::Checkpoint(std::filesystem::path file, bool resume) : file_(file) {
  if (resume && std::filesystem::exists(file)) {
    std::istringstream in(read_file(file));
    std::string line;
    while (std::getline(in, line)) {
      try {
        const json rec = json::parse(line);
        done_.insert(key(rec.at("sample_id").get<std::string>(), rec.at("assessment_id").get<std::string>(),
                         rec.at("draw").get<std::string>()));
      } catch (const std::exception&) {
        // Torn trailing line from an interrupted run.
      }
    }
  }
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  const bool torn = resume && std::filesystem::exists(file) && std::filesystem::file_size(file) > 0 &&
                    read_file(file).back() != '\n';
  log_.open(file, resume ? (std::ios::app | std::ios::binary) : (std::ios::trunc | std::ios::binary));
  if (!log_) throw DataError("cannot open checkpoint " + file.string());
  if (torn) log_ << '\n' << std::flush;
}

std::string Checkpoint::key(const std::string& s, const std::string& a, const std::string& d) {
  return s + '\x1f' + a + '\x1f' + d;
}

bool Checkpoint::contains(const std::string& sample_id, const std::string& assessment_id,
                          const std::string& draw) const {
  std::lock_guard lock(mu_);
  return done_.count(key(sample_id, assessment_id, draw)) > 0;
}

void Checkpoint::mark(const std::string& sample_id, const std::string& assessment_id, const std::string& draw) {
  std::lock_guard lock(mu_);
  if (!done_.insert(key(sample_id, assessment_id, draw)).second || !file_) return;
  log_ << json{{"sample_id", sample_id}, {"assessment_id", assessment_id}, {"draw", draw}}.dump() << '\n'
       << std::flush;
}

std::size_t Checkpoint::size() const {
  std::lock_guard lock(mu_);
  return done_.size();
}

// ---------------------------------------------------------------------------

namespace {

// Runs body(i) for i in [0, count) on up to `workers` threads. The first
// exception stops further dispatch and is rethrown after all threads join.
template <typename Body>
void parallel_for(std::size_t count, std::size_t workers, Body&& body) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  auto run = [&] {
    while (!failed.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    run();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) threads.emplace_back(run);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

PoolResult score_pool(lm::LogprobService& service, const std::vector<Sample>& samples,
                      const std::vector<AssessmentItem>& assessment, const ScoringConfig& config,
                      const PoolOptions& options) {
  if (assessment.empty()) throw std::invalid_argument("score_pool: empty assessment set");
  {
    std::set<std::string> ids;
    for (const auto& s : samples) {
      if (!ids.insert(s.id).second) throw DataError("duplicate sample id " + s.id);
    }
  }
  Scorer scorer(service, config);
  const std::size_t m = samples.size();
  const std::size_t n = assessment.size();
  const std::size_t workers = std::max<std::size_t>(1, options.concurrency);
  Checkpoint* ckpt = options.checkpoint;

  PoolResult result;
  result.resumed_triples = ckpt ? ckpt->size() : 0;
  result.records.resize(m * n);
  std::atomic<std::size_t> completed_pairs{0};

  try {
    parallel_for(n, workers, [&](std::size_t j) { scorer.base_ppl(assessment[j]); });
    parallel_for(m * n, workers, [&](std::size_t k) {
      const Sample& s = samples[k / n];
      const AssessmentItem& a = assessment[k % n];
      ScoreRecord r;
      r.sample_id = s.id;
      r.assessment_id = a.id;
      r.ppl_base = scorer.base_ppl(a);
      r.ppl_cond = scorer.conditional_ppl(s, a);
      if (ckpt) ckpt->mark(s.id, a.id, std::string(kDemoDraw));
      for (std::size_t d = 0; d < config.random_draws; ++d) {
        // One draw at a time so each completed draw is checkpointed.
        r.ppl_rand_draws.push_back(scorer.random_draw_ppl(s, a, d));
        if (ckpt) ckpt->mark(s.id, a.id, std::to_string(d));
      }
      r.ppl_rand = std::accumulate(r.ppl_rand_draws.begin(), r.ppl_rand_draws.end(), 0.0) /
                   static_cast<double>(r.ppl_rand_draws.size());
      r.task_icon = task_icon(r.ppl_base, r.ppl_cond, r.ppl_rand, config.epsilon);
      result.records[k] = std::move(r);
      ++completed_pairs;
    });
  } catch (const TransportError& e) {
    throw IncompleteRun("scoring halted after " + std::to_string(completed_pairs.load()) + " of " +
                        std::to_string(m * n) + " pairs; rerun with --resume to continue. Cause: " + e.what());
  }

  result.reference_token_counts.reserve(n);
  for (const auto& a : assessment) result.reference_token_counts.push_back(scorer.reference_token_count(a));

  result.global.reserve(m);
  std::vector<double> task(n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) task[j] = result.records[i * n + j].task_icon;
    result.global.push_back({samples[i].id, global_icon(task), n, 0});
  }
  assign_ranks(result.global);
  return result;
}

// ---------------------------------------------------------------------------

json to_json(const ScoreRecord& r) {
  return {{"sample_id", r.sample_id}, {"assessment_id", r.assessment_id}, {"ppl_base", r.ppl_base},
          {"ppl_cond", r.ppl_cond},   {"ppl_rand", r.ppl_rand},           {"ppl_rand_draws", r.ppl_rand_draws},
          {"task_icon", r.task_icon}};
}

json to_json(const GlobalScore& g) {
  return {{"sample_id", g.sample_id}, {"global_icon", g.global_icon}, {"task_count", g.task_count}, {"rank", g.rank}};
}

ScoreRecord score_record_from_json(const json& j) {
  ScoreRecord r;
  r.sample_id = j.at("sample_id").get<std::string>();
  r.assessment_id = j.at("assessment_id").get<std::string>();
  r.ppl_base = j.at("ppl_base").get<double>();
  r.ppl_cond = j.at("ppl_cond").get<double>();
  r.ppl_rand = j.at("ppl_rand").get<double>();
  r.ppl_rand_draws = j.at("ppl_rand_draws").get<std::vector<double>>();
  r.task_icon = j.at("task_icon").get<double>();
  return r;
}

GlobalScore global_score_from_json(const json& j) {
  return {j.at("sample_id").get<std::string>(), j.at("global_icon").get<double>(),
          j.at("task_count").get<std::size_t>(), j.at("rank").get<std::size_t>()};
}

std::string serialize_records_jsonl(const std::vector<ScoreRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

std::string serialize_global_jsonl(const std::vector<GlobalScore>& global) {
  std::string out;
  for (const auto& g : global) out += to_json(g).dump() + "\n";
  return out;
}

std::string serialize_records_csv(const std::vector<ScoreRecord>& records) {
  std::string out = "sample_id,assessment_id,ppl_base,ppl_cond,ppl_rand,task_icon,ppl_rand_draws\n";
  for (const auto& r : records) {
    std::string draws;
    for (std::size_t i = 0; i < r.ppl_rand_draws.size(); ++i) {
      if (i) draws += ";";
      draws += format_double(r.ppl_rand_draws[i]);
    }
    out += csv_escape(r.sample_id) + "," + csv_escape(r.assessment_id) + "," + format_double(r.ppl_base) + "," +
           format_double(r.ppl_cond) + "," + format_double(r.ppl_rand) + "," + format_double(r.task_icon) + "," +
           draws + "\n";
  }
  return out;
}

std::string serialize_global_csv(const std::vector<GlobalScore>& global) {
  std::string out = "sample_id,global_icon,task_count,rank\n";
  for (const auto& g : global) {
    out += csv_escape(g.sample_id) + "," + format_double(g.global_icon) + "," + std::to_string(g.task_count) + "," +
           std::to_string(g.rank) + "\n";
  }
  return out;
}

namespace {

template <typename T, typename F>
std::vector<T> load_jsonl(const std::filesystem::path& path, F&& convert) {
  std::istringstream in(read_file(path));
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(convert(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

std::vector<GlobalScore> load_global_scores(const std::filesystem::path& path) {
  auto scores = load_jsonl<GlobalScore>(path, global_score_from_json);
  std::sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) { return a.rank < b.rank; });
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].rank != i + 1) throw DataError(path.string() + ": ranks are not a permutation of 1..m");
  }
  return scores;
}

std::vector<ScoreRecord> load_score_records(const std::filesystem::path& path) {
  return load_jsonl<ScoreRecord>(path, score_record_from_json);
}

}  // namespace iconsel::scoring
