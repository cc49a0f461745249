#include <cmath>
#include <set>

#include "doctest.h"
#include "iconsel/cache_lm.hpp"
#include "iconsel/error.hpp"
#include "iconsel/selection.hpp"
#include "iconsel/util.hpp"
#include "json.hpp"
#include "oracle/brute_force.hpp"
#include "support.hpp"

using namespace iconsel;
using namespace iconsel::selection;
using iconsel::scoring::GlobalScore;
using nlohmann::json;

namespace {

std::string sid(std::size_t i) {
  std::string s = std::to_string(i);
  return "s" + std::string(6 - std::min<std::size_t>(6, s.size()), '0') + s;
}

std::vector<GlobalScore> ranked_scores(std::size_t m, const std::string& seed = "scores") {
  auto rng = seeded_engine({seed});
  std::vector<GlobalScore> g;
  for (std::size_t i = 0; i < m; ++i) g.push_back({sid(i), uniform_unit(rng) - 0.5, 3, 0});
  scoring::assign_ranks(g);
  return g;
}

std::vector<corpus::Sample> pool(std::size_t m) {
  std::vector<corpus::Sample> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back({sid(i), "task " + std::to_string(i), "", "answer", "p"});
  return out;
}

// Positives carry a marker word; everything else is shared filler.
std::vector<LabeledExample> marker_examples(std::size_t n, std::size_t positives_every, const std::string& seed) {
  auto rng = seeded_engine({seed});
  const std::vector<std::string> filler = {"alpha", "beta", "gamma", "delta", "omega", "kappa", "sigma", "theta"};
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i % positives_every == 0;
    std::string text;
    for (int w = 0; w < 6; ++w) text += filler[uniform_index(rng, filler.size())] + " ";
    if (pos) text += "zebra";
    out.push_back({{seed + "-" + std::to_string(i), "write", text, "done", "p"}, pos});
  }
  return out;
}

}  // namespace

TEST_CASE("top-k sizes") {
  CHECK(select_top_k(ranked_scores(52002), 15).size() == 7801);
  CHECK(select_top_k(ranked_scores(52002), 1).size() == 521);
  CHECK(select_top_k(ranked_scores(10), 20).size() == 2);
  CHECK(select_top_k(ranked_scores(10), 100).size() == 10);
  CHECK(select_top_k({}, 15).empty());
  CHECK_THROWS_AS(select_top_k(ranked_scores(10), 0), std::invalid_argument);
  CHECK_THROWS_AS(select_top_k(ranked_scores(10), 101), std::invalid_argument);
}

TEST_CASE("top-k returns the best ranks in order") {
  const auto g = ranked_scores(200);
  const auto top = select_top_k(g, 15);
  REQUIRE(top.size() == 30);
  double floor = INFINITY;
  for (std::size_t i = 0; i < top.size(); ++i) {
    CHECK(top[i] == g[i].sample_id);
    floor = std::min(floor, g[i].global_icon);
  }
  for (std::size_t i = top.size(); i < g.size(); ++i) CHECK(g[i].global_icon <= floor);
}

TEST_CASE("top-k tie at the boundary goes to the smaller id") {
  std::vector<GlobalScore> g = {{"b", 0.5, 1, 0}, {"a", 0.5, 1, 0}, {"c", 0.1, 1, 0}, {"d", 0.9, 1, 0}};
  scoring::assign_ranks(g);
  CHECK(select_top_k(g, 50) == std::vector<std::string>{"d", "a"});
}

TEST_CASE("larger K gives a superset") {
  const auto g = ranked_scores(300, "superset");
  std::set<std::string> prev;
  for (double k : {1.0, 5.0, 10.0, 15.0, 37.5, 100.0}) {
    const auto ids = select_top_k(g, k);
    const std::set<std::string> cur(ids.begin(), ids.end());
    for (const auto& id : prev) CHECK(cur.count(id) == 1);
    prev = cur;
  }
}

TEST_CASE("baselines by perplexity") {
  const std::vector<corpus::Sample> samples = {{"x", "a", "", "r", "p"}, {"y", "b", "", "r", "p"},
                                               {"z", "c", "", "r", "p"}};
  const std::map<std::string, double> ppls = {{"x", 2.0}, {"y", 8.0}, {"z", 4.0}};
  CHECK(baseline_select(samples, BaselineMethod::LowPpl, 0.2, 1, &ppls) == std::vector<std::string>{"x"});
  CHECK(baseline_select(samples, BaselineMethod::TopPpl, 0.2, 1, &ppls) == std::vector<std::string>{"y"});
  CHECK(baseline_select(samples, BaselineMethod::LowPpl, 0.5, 1, &ppls) == std::vector<std::string>{"x", "z"});
  CHECK_THROWS_AS(baseline_select(samples, BaselineMethod::LowPpl, 0.5, 1, nullptr), std::invalid_argument);
  CHECK_THROWS_AS(baseline_select(samples, BaselineMethod::Random, 0.0, 1), std::invalid_argument);

  const std::map<std::string, double> tied = {{"x", 3.0}, {"y", 3.0}, {"z", 3.0}};
  CHECK(baseline_select(samples, BaselineMethod::LowPpl, 0.5, 1, &tied) == std::vector<std::string>{"x", "y"});
  CHECK(baseline_select(samples, BaselineMethod::TopPpl, 0.5, 1, &tied) == std::vector<std::string>{"x", "y"});
}

TEST_CASE("random baseline is seeded and distinct") {
  const auto samples = pool(1000);
  const auto a = baseline_select(samples, BaselineMethod::Random, 0.15, 42);
  const auto b = baseline_select(samples, BaselineMethod::Random, 0.15, 42);
  const auto c = baseline_select(samples, BaselineMethod::Random, 0.15, 43);
  CHECK(a.size() == 150);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(std::set<std::string>(a.begin(), a.end()).size() == 150);
}

TEST_CASE("baseline names") {
  CHECK(parse_baseline("random") == BaselineMethod::Random);
  CHECK(parse_baseline("low-ppl") == BaselineMethod::LowPpl);
  CHECK(parse_baseline("top-ppl") == BaselineMethod::TopPpl);
  CHECK(baseline_name(BaselineMethod::TopPpl) == "top-ppl");
  CHECK_THROWS_AS(parse_baseline("icon"), std::invalid_argument);
}

TEST_CASE("sample_ppls match the oracle under cache-lm") {
  const auto params = lm::CacheLmParams::from_texts({"red green blue cyan"}, 0.5);
  lm::LogprobService svc(std::make_shared<lm::CacheLmBackend>(params));
  const oracle::MixtureModel o{params.vocabulary, params.base_unigram, params.lambda};
  const std::vector<corpus::Sample> samples = {{"a", "red", "", "green blue", "p"}, {"b", "cyan", "red", "red red", "p"}};
  const auto ppls = sample_ppls(svc, samples, scoring::Template::Alpaca, 2);
  CHECK(ppls.at("a") == doctest::Approx(o.ppl(oracle::alpaca_query("red", ""), "green blue")).epsilon(1e-12));
  CHECK(ppls.at("b") == doctest::Approx(o.ppl(oracle::alpaca_query("cyan", "red"), "red red")).epsilon(1e-12));
}

TEST_CASE("labeling the whole pool marks exactly ceil(K%)") {
  const auto g = ranked_scores(100);
  const auto subset = labeling_subset(g, 0, 1);
  CHECK(subset.size() == 100);
  const auto labeled = label_top_k(subset, 15);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    pos += labeled[i].high_contribution;
    CHECK(labeled[i].high_contribution == (i < 15));
  }
  CHECK(pos == 15);
}

TEST_CASE("labeling subset is seeded and re-ranked") {
  const auto g = ranked_scores(500);
  const auto a = labeling_subset(g, 40, 9);
  const auto b = labeling_subset(g, 40, 9);
  CHECK(a == b);
  CHECK(a.size() == 40);
  CHECK(labeling_subset(g, 40, 10) != a);
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i - 1].rank < a[i].rank);
  const auto labeled = label_top_k(a, 10);
  std::size_t pos = 0;
  for (const auto& l : labeled) pos += l.high_contribution;
  CHECK(pos == 4);
  CHECK(labeled.front().sample_id == a.front().sample_id);
}

TEST_CASE("export_labeled round-trips and counts positives") {
  testing_support::TempDir dir("labeled");
  const auto g = ranked_scores(20);
  const auto labeled = label_top_k(g, 15);
  const auto samples = pool(20);
  CHECK(export_labeled(labeled, samples, dir / "l.jsonl") == 3);
  const auto back = load_labeled(dir / "l.jsonl");
  REQUIRE(back.size() == 20);
  CHECK(back[0].label == label_name(true));
  CHECK(back[19].label == label_name(false));
  CHECK(back[0].response == "answer");

  CHECK(export_labeled({}, samples, dir / "empty.jsonl") == 0);
  CHECK(read_file(dir / "empty.jsonl").empty());
  CHECK_THROWS_AS(export_labeled({{"nope", true, 1.0}}, samples, dir / "x.jsonl"), DataError);
}

TEST_CASE("export_subset") {
  testing_support::TempDir dir("subset");
  const auto samples = pool(5);
  export_subset(samples, {sid(3), sid(1)}, dir / "sel.json", corpus::Format::AlpacaJson);
  const auto back = corpus::load_corpus(dir / "sel.json", corpus::Format::AlpacaJson);
  REQUIRE(back.size() == 2);
  CHECK(back[0].instruction == "task 3");
  export_subset(samples, {}, dir / "none.json", corpus::Format::AlpacaJson);
  CHECK(json::parse(read_file(dir / "none.json")) == json::array());
  CHECK_THROWS_AS(export_subset(samples, {"ghost"}, dir / "g.json", corpus::Format::AlpacaJson), DataError);
}

TEST_CASE("features are normalized hashed n-grams") {
  FeatureSpec spec;
  spec.hash_buckets = 1024;
  const corpus::Sample s{"s", "Hello hello", "", "world", "p"};
  const auto x = extract_features(spec, s);
  double norm = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    norm += x[i].second * x[i].second;
    CHECK(x[i].first < 1024);
    if (i) CHECK(x[i - 1].first < x[i].first);
  }
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
  const corpus::Sample lower{"t", "hello HELLO", "", "WORLD", "p"};
  CHECK(extract_features(spec, lower) == x);
}

TEST_CASE("selector learns a marker word") {
  TrainConfig cfg;
  cfg.k_percent = 20;
  cfg.features.hash_buckets = 4096;
  const auto model = train_selector(marker_examples(400, 5, "train"), cfg);
  REQUIRE(model.metadata.heldout_accuracy.has_value());
  CHECK(*model.metadata.heldout_accuracy >= 0.95);
  CHECK(*model.metadata.heldout_auc >= 0.95);
  CHECK(model.metadata.train_size + model.metadata.heldout_size == 400);
  CHECK(model.metadata.heldout_size == 80);

  const auto fresh = marker_examples(300, 5, "fresh");
  std::vector<corpus::Sample> samples;
  std::vector<bool> labels;
  for (const auto& e : fresh) {
    samples.push_back(e.sample);
    labels.push_back(e.positive);
  }
  const auto applied = apply_selector(model, samples);
  CHECK(applied.evaluations == 300);
  std::vector<double> probs;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < applied.rows.size(); ++i) {
    CHECK(applied.rows[i].sample_id == samples[i].id);
    probs.push_back(applied.rows[i].probability);
    correct += applied.rows[i].selected == labels[i];
  }
  CHECK(auc(probs, labels) >= 0.95);
  CHECK(correct >= 285);
}

TEST_CASE("selector training is deterministic") {
  TrainConfig cfg;
  cfg.features.hash_buckets = 2048;
  const auto data = marker_examples(120, 4, "det");
  const auto a = train_selector(data, cfg);
  const auto b = train_selector(data, cfg);
  CHECK(a == b);
  CHECK(to_json(a).dump() == to_json(b).dump());
  cfg.seed = 7;
  CHECK_FALSE(train_selector(data, cfg).weights == a.weights);
}

TEST_CASE("selector training rejects a single class and bad specs") {
  auto data = marker_examples(50, 4, "one");
  for (auto& e : data) e.positive = false;
  CHECK_THROWS_AS(train_selector(data, {}), std::invalid_argument);
  TrainConfig cfg;
  cfg.features.ngram_min = 3;
  cfg.features.ngram_max = 2;
  CHECK_THROWS_AS(train_selector(marker_examples(50, 4, "two"), cfg), std::invalid_argument);
}

TEST_CASE("selector model file round-trips exactly") {
  testing_support::TempDir dir("selector");
  TrainConfig cfg;
  cfg.features.hash_buckets = 1024;
  const auto model = train_selector(marker_examples(100, 4, "rt"), cfg);
  save_selector(model, dir / "m.json");
  const auto back = load_selector(dir / "m.json");
  CHECK(back == model);
  const json j = json::parse(read_file(dir / "m.json"));
  CHECK(j["format"] == "iconsel-selector");
  CHECK(j["feature_spec"]["hash_buckets"] == 1024);

  write_file_atomic(dir / "bad.json", R"({"format":"something-else"})");
  CHECK_THROWS_AS(load_selector(dir / "bad.json"), DataError);
  write_file_atomic(dir / "garbage.json", "{not json");
  CHECK_THROWS_AS(load_selector(dir / "garbage.json"), DataError);
}

TEST_CASE("hex doubles are exact") {
  for (double v : {0.0, -0.0, 1.0 / 3.0, 1e-300, -123.456, 5e-324}) {
    CHECK(parse_hex_double(hex_double(v)) == v);
  }
  CHECK_THROWS_AS(parse_hex_double("zz"), DataError);
}

TEST_CASE("apply on an empty pool") {
  TrainConfig cfg;
  cfg.features.hash_buckets = 512;
  const auto model = train_selector(marker_examples(60, 3, "empty"), cfg);
  const auto r = apply_selector(model, {});
  CHECK(r.rows.empty());
  CHECK(r.evaluations == 0);
}

TEST_CASE("auc matches exhaustive pair counting") {
  auto rng = seeded_engine({"auc"});
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 60);
    std::vector<double> s;
    std::vector<bool> l;
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse scores so that ties are common.
      s.push_back(static_cast<double>(uniform_index(rng, 6)));
      l.push_back(i == 0 ? true : i == 1 ? false : uniform_index(rng, 2) == 1);
    }
    CHECK(auc(s, l) == doctest::Approx(oracle::pairwise_auc(s, l)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(auc({1, 2}, {true, true}), std::invalid_argument);
}

TEST_CASE("low-ppl and top-ppl subsets are disjoint while both fit in the pool") {
  auto rng = seeded_engine({"disjoint"});
  for (std::size_t m : {100u, 101u}) {
    const auto samples = pool(m);
    std::map<std::string, double> ppls;
    for (const auto& s : samples) ppls[s.id] = 1.0 + uniform_unit(rng) * 50;
    for (double f : {0.01, 0.1, 0.15, 0.3, 0.49, 0.5}) {
      const auto low = baseline_select(samples, BaselineMethod::LowPpl, f, 1, &ppls);
      const auto top = baseline_select(samples, BaselineMethod::TopPpl, f, 1, &ppls);
      std::set<std::string> both(low.begin(), low.end());
      both.insert(top.begin(), top.end());
      const std::size_t overlap = low.size() + top.size() - both.size();
      // Ceil rounding makes 50% of an odd pool two halves of 51 that share one sample.
      CHECK(overlap == (low.size() + top.size() > m ? low.size() + top.size() - m : 0));
    }
  }
}
