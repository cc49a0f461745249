// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Everything runs on the built-in cache-lm backend.

#include <sys/wait.h>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "iconsel/analysis.hpp"
#include "iconsel/cache_lm.hpp"
#include "iconsel/corpus.hpp"
#include "iconsel/score_cache.hpp"
#include "iconsel/scoring.hpp"
#include "iconsel/selection.hpp"
#include "iconsel/util.hpp"
#include "json.hpp"
#include "oracle/brute_force.hpp"
#include "support.hpp"

using namespace iconsel;
using lm::CacheLmBackend;
using lm::CacheLmParams;
using lm::LogprobService;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string words_from(std::mt19937_64& rng, const std::vector<std::string>& vocab, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) out += (i ? " " : "") + vocab[uniform_index(rng, vocab.size())];
  return out;
}

std::vector<std::string> numbered(const std::string& stem, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(fmt::format("{}{:03d}", stem, i));
  return out;
}

std::string fixture_query(scoring::Template t, const std::string& instruction, const std::string& input) {
  return t == scoring::Template::Alpaca ? oracle::alpaca_query(instruction, input) : oracle::plain_query(instruction, input);
}

Outcome perplexity_oracle() {
  auto rng = seeded_engine({"acceptance", "perplexity-oracle"});
  std::size_t compared = 0;
  double worst = 0;
  for (int fixture = 0; fixture < 50; ++fixture) {
    const auto vocab = numbered("v", 5 + uniform_index(rng, 40));
    std::vector<std::string> with_unk = vocab;
    with_unk.push_back("<unk>");
    std::vector<double> weights;
    double total = 0;
    for (std::size_t i = 0; i < with_unk.size(); ++i) {
      weights.push_back(0.05 + uniform_unit(rng));
      total += weights.back();
    }
    for (auto& w : weights) w /= total;
    CacheLmParams params{with_unk, weights, 0.95 * uniform_unit(rng)};
    auto service = std::make_shared<LogprobService>(std::make_shared<CacheLmBackend>(params));
    const oracle::MixtureModel o{params.vocabulary, params.base_unigram, params.lambda};

    scoring::ScoringConfig cfg;
    cfg.random_draws = 1 + uniform_index(rng, 3);
    cfg.random_seed = static_cast<std::uint64_t>(fixture);
    cfg.demo_template = uniform_index(rng, 2) ? scoring::Template::Alpaca : scoring::Template::Plain;
    cfg.query_template = uniform_index(rng, 2) ? scoring::Template::Alpaca : scoring::Template::Plain;
    scoring::Scorer scorer(*service, cfg);

    const corpus::Sample s{fmt::format("s{}", fixture), words_from(rng, vocab, 1 + uniform_index(rng, 8)),
                           uniform_index(rng, 2) ? words_from(rng, vocab, 1 + uniform_index(rng, 5)) : "",
                           words_from(rng, vocab, 1 + uniform_index(rng, 20)), "x"};
    // Out-of-vocabulary words exercise the <unk> path on the query side.
    const corpus::AssessmentItem item{"a", words_from(rng, vocab, 1 + uniform_index(rng, 6)) + " zzz",
                                      words_from(rng, vocab, 1 + uniform_index(rng, 12)), "t", 0};
    const auto rec = scorer.score(s, item);

    const std::string query = fixture_query(cfg.query_template, item.prompt, "");
    const std::string demo = fixture_query(cfg.demo_template, s.instruction, s.input) + s.response;
    const double base = o.ppl(query, item.reference);
    const double cond = o.ppl(demo + "\n\n" + query, item.reference);
    std::vector<double> draws;
    for (std::size_t d = 0; d < cfg.random_draws; ++d) {
      const auto& rc = scorer.random_control(s, d);
      if (o.tokens(rc.text).size() != o.tokens(demo).size()) return {false, "control length differs from demonstration"};
      draws.push_back(o.ppl(rc.text + "\n\n" + query, item.reference));
    }
    const double rand = oracle::mean(draws);
    for (auto [got, want] : {std::pair{rec.ppl_base, base}, {rec.ppl_cond, cond}, {rec.ppl_rand, rand}}) {
      worst = std::max(worst, std::fabs(got - want) / std::fabs(want));
      ++compared;
    }
    const double icon = oracle::task_icon(base, cond, rand, cfg.epsilon);
    worst = std::max(worst, std::fabs(rec.task_icon - icon) / std::max(1.0, std::fabs(icon)));
  }
  return {worst <= 1e-10, fmt::format("{} values, worst relative error {:.3g}", compared, worst)};
}

Outcome hand_cases() {
  const double a = scoring::task_icon(10, 8, 12, 0);
  const double b = scoring::task_icon(10, 14, 12, 0);
  const double c = scoring::task_icon(7.5, 3.25, 3.25, 1e-8);
  return {a == 0.4 && b == -0.2 && c == 0.0, fmt::format("{} {} {}", format_double(a), format_double(b), format_double(c))};
}

Outcome fairness() {
  auto rng = seeded_engine({"acceptance", "fairness"});
  const auto vocab = numbered("w", 300);
  std::vector<std::string> with_unk = vocab;
  with_unk.push_back("<unk>");
  const auto params = CacheLmParams::uniform(with_unk, 0.5);
  LogprobService service(std::make_shared<CacheLmBackend>(params));
  scoring::ScoringConfig cfg;
  // Plain layout keeps every demonstration token inside the control vocabulary.
  cfg.demo_template = scoring::Template::Plain;
  cfg.query_template = scoring::Template::Plain;
  scoring::Scorer scorer(service, cfg);

  const corpus::AssessmentItem item{"fixed", words_from(rng, vocab, 6), words_from(rng, vocab, 12), "t", 0};
  std::vector<double> cond, rand, icons;
  for (int i = 0; i < 100; ++i) {
    const corpus::Sample s{fmt::format("demo{:03d}", i), words_from(rng, vocab, 2 + uniform_index(rng, 10)), "",
                           words_from(rng, vocab, 3 + uniform_index(rng, 50)), "x"};
    const auto rec = scorer.score(s, item);
    cond.push_back(rec.ppl_cond);
    rand.push_back(rec.ppl_rand);
    icons.push_back(rec.task_icon);
  }
  const auto w = analysis::welch_t_test(cond, rand);
  const double critical = boost::math::quantile(boost::math::students_t(w.df), 1.0 - 0.01 / 2);
  return {std::fabs(w.t) < critical,
          fmt::format("mean task-ICon {:.3g}, |t| = {:.3f} < {:.3f} (df {:.1f})", oracle::mean(icons), std::fabs(w.t),
                      critical, w.df)};
}

Outcome planted_signal() {
  auto rng = seeded_engine({"acceptance", "planted"});
  const auto targets = numbered("t", 50);
  const auto others = numbered("n", 450);
  std::vector<std::string> vocab = targets;
  vocab.insert(vocab.end(), others.begin(), others.end());
  vocab.push_back("<unk>");
  LogprobService service(std::make_shared<CacheLmBackend>(CacheLmParams::uniform(vocab, 0.5)));

  std::vector<corpus::AssessmentItem> items;
  for (int j = 0; j < 10; ++j) {
    items.push_back({fmt::format("a{:02d}", j), words_from(rng, targets, 5), words_from(rng, targets, 8), "t", 0});
  }
  std::vector<corpus::Sample> pool;
  std::set<std::string> planted;
  for (int i = 0; i < 200; ++i) {
    const bool plant = i % 10 == 3;
    const auto& src = plant ? targets : others;
    pool.push_back({fmt::format("p{:03d}", i), words_from(rng, src, 4), "", words_from(rng, src, 10), "x"});
    if (plant) planted.insert(pool.back().id);
  }
  const auto result = scoring::score_pool(service, pool, items, {}, {4, nullptr});
  const auto top = selection::select_top_k(result.global, 10);
  std::size_t hit = 0;
  for (const auto& id : top) hit += planted.count(id);

  const auto random = selection::baseline_select(pool, selection::BaselineMethod::Random, 0.10, 42);
  std::size_t random_hit = 0;
  for (const auto& id : random) random_hit += planted.count(id);
  const boost::math::binomial band(static_cast<double>(random.size()), 0.10);
  const auto lo = static_cast<std::size_t>(boost::math::quantile(band, 0.025));
  const auto hi = static_cast<std::size_t>(boost::math::quantile(boost::math::complement(band, 0.025)));

  const bool ok = top.size() == 20 && hit * 10 >= planted.size() * 9 && random_hit >= lo && random_hit <= hi;
  return {ok, fmt::format("ICon top-10% recovers {}/{}; random recovers {}/{} (band {}..{})", hit, planted.size(),
                          random_hit, random.size(), lo, hi)};
}

Outcome complexity() {
  testing_support::TempDir dir("complexity");
  const auto params = CacheLmParams::from_texts({"sun moon star sky rain wind snow fog"}, 0.5);
  std::vector<corpus::Sample> pool;
  for (int i = 0; i < 5; ++i) pool.push_back({fmt::format("s{}", i), "sun moon", "", fmt::format("star {} sky", i), "x"});
  const std::vector<corpus::AssessmentItem> items = {
      {"a0", "rain", "wind snow", "t", 0}, {"a1", "fog", "moon sun", "t", 0}, {"a2", "sky", "star rain fog", "t", 0}};

  std::uint64_t cold = 0, warm = 0;
  {
    LogprobService svc(std::make_shared<CacheLmBackend>(params), std::make_shared<lm::ScoreCache>(dir / "cache.jsonl"));
    scoring::score_pool(svc, pool, items, {});
    cold = svc.accounting().backend_calls;
  }
  {
    LogprobService svc(std::make_shared<CacheLmBackend>(params), std::make_shared<lm::ScoreCache>(dir / "cache.jsonl"));
    scoring::score_pool(svc, pool, items, {});
    warm = svc.accounting().backend_calls;
  }

  std::vector<selection::LabeledExample> labeled;
  for (int i = 0; i < 40; ++i) {
    labeled.push_back({{fmt::format("l{}", i), "sun", i % 4 ? "moon" : "zebra", "star", "x"}, i % 4 == 0});
  }
  selection::TrainConfig tc;
  tc.features.hash_buckets = 1024;
  const auto model = selection::train_selector(labeled, tc);
  LogprobService watcher(std::make_shared<CacheLmBackend>(params));
  std::size_t apply_calls = 0;
  std::size_t touched = 0;
  for (std::size_t m : {0u, 1u, 5u, 500u}) {
    std::vector<corpus::Sample> big;
    for (std::size_t i = 0; i < m; ++i) big.push_back(pool[i % pool.size()]);
    const auto r = selection::apply_selector(model, big);
    touched += r.evaluations == m ? 0 : 1;
    apply_calls += watcher.accounting().backend_calls;
  }
  return {cold == 33 && warm == 0 && apply_calls == 0 && touched == 0,
          fmt::format("cold {} calls (expected 33), warm {}, apply_selector {}", cold, warm, apply_calls)};
}

std::vector<selection::LabeledExample> marker_set(std::size_t n, const std::string& seed) {
  auto rng = seeded_engine({"acceptance", "marker", seed});
  const auto filler = numbered("f", 60);
  std::vector<selection::LabeledExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = uniform_index(rng, 100) < 15;
    std::string response = words_from(rng, filler, 8 + uniform_index(rng, 8));
    if (pos) response += " marker";
    out.push_back({{fmt::format("{}{:04d}", seed, i), words_from(rng, filler, 5), "", response, "x"}, pos});
  }
  return out;
}

Outcome selector_paradigm() {
  const auto train = marker_set(1000, "train");
  selection::TrainConfig cfg;
  const auto model = selection::train_selector(train, cfg);
  const auto again = selection::train_selector(train, cfg);
  const bool deterministic = model.weights == again.weights && model.bias == again.bias &&
                             model.threshold == again.threshold;

  const auto fresh = marker_set(500, "fresh");
  std::vector<corpus::Sample> pool;
  std::vector<bool> labels;
  for (const auto& e : fresh) {
    pool.push_back(e.sample);
    labels.push_back(e.positive);
  }
  const auto applied = selection::apply_selector(model, pool);
  std::vector<double> probs;
  for (const auto& r : applied.rows) probs.push_back(r.probability);
  const double fresh_auc = selection::auc(probs, labels);
  const double acc = model.metadata.heldout_accuracy.value_or(0.0);
  return {acc >= 0.95 && fresh_auc >= 0.95 && deterministic,
          fmt::format("held-out accuracy {:.4f}, fresh-pool AUC {:.4f}, weights {}", acc, fresh_auc,
                      deterministic ? "identical across reruns" : "DIFFER across reruns")};
}

Outcome pairwise_rules() {
  std::size_t agree = 0;
  for (const std::string o1 : {"win", "tie", "lose"}) {
    for (const std::string o2 : {"win", "tie", "lose"}) {
      agree += analysis::verdict_name(analysis::combine_pairwise(o1, o2)) == oracle::adjudicate(o1, o2);
    }
  }
  std::size_t violations = 0;
  for (std::size_t n = 1; n <= 300; ++n) {
    for (std::size_t w = 0; w <= n; ++w) {
      for (std::size_t l = 0; w + l <= n; ++l) {
        violations += analysis::winning_score(w, l, n) + analysis::winning_score(l, w, n) != 2.0;
      }
    }
  }
  const double ws = analysis::winning_score(50, 30, 100);
  return {agree == 9 && violations == 0 && ws == 1.2,
          fmt::format("{}/9 combinations, {} antisymmetry violations, WS(50,30,100) = {}", agree, violations,
                      format_double(ws))};
}

Outcome subset_arithmetic() {
  testing_support::TempDir dir("subset");
  std::vector<corpus::Sample> pool;
  std::vector<scoring::GlobalScore> scores;
  for (std::size_t i = 0; i < 52002; ++i) {
    pool.push_back({fmt::format("alpaca-{:06d}", i), fmt::format("instruction {}", i), "", "response", "alpaca"});
    scores.push_back({pool.back().id, std::sin(static_cast<double>(i)), 1, 0});
  }
  scoring::assign_ranks(scores);
  std::vector<std::size_t> sizes;
  for (double k : {1.0, 5.0, 10.0, 15.0}) sizes.push_back(selection::select_top_k(scores, k).size());
  selection::export_subset(pool, selection::select_top_k(scores, 15), dir / "subset.json", corpus::Format::AlpacaJson);
  const auto reloaded = corpus::load_corpus(dir / "subset.json", corpus::Format::AlpacaJson).size();
  const bool ok = sizes == std::vector<std::size_t>{521, 2601, 5201, 7801} && reloaded == 7801;
  return {ok, fmt::format("1/5/10/15% -> {}/{}/{}/{} (ceil; exact products would give 520.02/2600.1/5200.2/7800.3), "
                          "exported 15% reloads as {}",
                          sizes[0], sizes[1], sizes[2], sizes[3], reloaded)};
}

int shell(const std::string& command) {
  const int status = std::system(command.c_str());
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome resumability() {
  testing_support::TempDir dir("resume");
  auto rng = seeded_engine({"acceptance", "resume"});
  const auto vocab = numbered("r", 80);
  std::vector<corpus::Sample> pool;
  for (int i = 0; i < 40; ++i) {
    pool.push_back({fmt::format("c{:03d}", i), words_from(rng, vocab, 4), "", words_from(rng, vocab, 9), "x"});
  }
  corpus::save_corpus(pool, dir / "pool.jsonl", corpus::Format::Jsonl);
  std::string assessment;
  for (int j = 0; j < 5; ++j) {
    assessment += json{{"id", fmt::format("a-{:06d}", j)},
                       {"prompt", words_from(rng, vocab, 5)},
                       {"reference", words_from(rng, vocab, 7)},
                       {"source", "a"}}
                      .dump() +
                  "\n";
  }
  write_file_atomic(dir / "assessment.jsonl", assessment);

  const std::string cli = ICONSEL_CLI_PATH;
  const std::string inputs =
      fmt::format(" score --corpus {} --assessment {}", (dir / "pool.jsonl").string(), (dir / "assessment.jsonl").string());
  const auto clean = dir / "clean";
  const auto interrupted = dir / "interrupted";
  const int clean_rc = shell(fmt::format("{} --log-level error --output-dir {}{} 2>/dev/null", cli, clean.string(), inputs));
  // 5 + 40*5*2 = 405 calls in total; the process is killed part way through.
  const int killed_rc = shell(fmt::format("ICONSEL_FAULT_KILL_AFTER_CALLS=150 {} --log-level error --concurrency 4 "
                                          "--output-dir {}{} 2>/dev/null",
                                          cli, interrupted.string(), inputs));
  const bool was_cut = !std::filesystem::exists(interrupted / "global_scores.jsonl");
  const int resumed_rc = shell(fmt::format("{} --log-level error --concurrency 4 --resume --output-dir {}{} 2>/dev/null",
                                           cli, interrupted.string(), inputs));
  if (clean_rc != 0 || resumed_rc != 0 || killed_rc == 0 || !was_cut) {
    return {false, fmt::format("exit codes clean {} killed {} resumed {}; interrupted before outputs: {}", clean_rc,
                               killed_rc, resumed_rc, was_cut)};
  }

  const auto manifest = json::parse(read_file(interrupted / "score.manifest.json"));
  const auto resumed_calls = manifest["accounting"]["backend_calls"].get<std::uint64_t>();
  std::size_t compared = 0;
  std::vector<std::string> differing;
  const auto clean_manifest = json::parse(read_file(clean / "score.manifest.json"));
  for (const auto& entry : clean_manifest.at("outputs").items()) {
    ++compared;
    if (read_file(clean / entry.key()) != read_file(interrupted / entry.key())) differing.push_back(entry.key());
  }
  const bool ok = differing.empty() && compared == 4 && resumed_calls < 405;
  return {ok, fmt::format("killed (status {}) then resumed with {} fresh calls; {} outputs compared, {} differ",
                          killed_rc, resumed_calls, compared, differing.size())};
}

}  // namespace

int main() {
  struct Criterion {
    std::string name;
    double budget_seconds;  // 0 = no runtime limit
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"perplexity-oracle", 5, perplexity_oracle},
      {"task-icon-hand-cases", 0, hand_cases},
      {"fairness-random-demonstrations", 30, fairness},
      {"planted-signal-retrieval", 60, planted_signal},
      {"complexity-accounting", 0, complexity},
      {"selector-paradigm", 0, selector_paradigm},
      {"pairwise-rules", 0, pairwise_rules},
      {"subset-arithmetic", 0, subset_arithmetic},
      {"resumability", 0, resumability},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_seconds > 0 && seconds >= c.budget_seconds) {
      o.pass = false;
      o.detail += fmt::format("; over the {:.0f} s budget", c.budget_seconds);
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s %s (%.2f s): %s\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), seconds, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
