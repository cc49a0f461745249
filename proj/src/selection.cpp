#include "iconsel/selection.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <set>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "iconsel/error.hpp"
#include "iconsel/util.hpp"

namespace iconsel::selection {

using nlohmann::json;

void SelectionConfig::validate() const {
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw ConfigError("selection.k_percent must lie in (0, 100]");
}

std::vector<std::string> select_top_k(const std::vector<GlobalScore>& scores, double k_percent) {
  const std::size_t k = subset_size(scores.size(), k_percent);
  std::vector<const GlobalScore*> ordered;
  ordered.reserve(scores.size());
  for (const auto& s : scores) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) { return a->rank < b->rank; });
  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(ordered[i]->sample_id);
  return out;
}

BaselineMethod parse_baseline(const std::string& name) {
  if (name == "random") return BaselineMethod::Random;
  if (name == "low-ppl") return BaselineMethod::LowPpl;
  if (name == "top-ppl") return BaselineMethod::TopPpl;
  throw std::invalid_argument("unknown baseline method '" + name + "' (expected random, low-ppl or top-ppl)");
}

std::string baseline_name(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::Random:
      return "random";
    case BaselineMethod::LowPpl:
      return "low-ppl";
    case BaselineMethod::TopPpl:
      return "top-ppl";
  }
  return "unknown";
}

std::map<std::string, double> sample_ppls(lm::LogprobService& service, const std::vector<Sample>& samples,
                                          scoring::Template query_template, std::size_t concurrency) {
  std::vector<double> values(samples.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i = next++; i < samples.size(); i = next++) {
      try {
        const auto& s = samples[i];
        const auto lp = service.continuation_logprobs(
            scoring::query_prompt(query_template, corpus::join_prompt(s.instruction, s.input)), s.response);
        values[i] = scoring::ppl_from_logprobs(lp.logprobs);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        next = samples.size();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < std::min(std::max<std::size_t>(1, concurrency), samples.size()); ++t) {
    threads.emplace_back(work);
  }
  work();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out.emplace(samples[i].id, values[i]);
  return out;
}

std::vector<std::string> baseline_select(const std::vector<Sample>& samples, BaselineMethod method, double fraction,
                                         std::uint64_t seed, const std::map<std::string, double>* ppls) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("baseline fraction must lie in (0, 1]");
  const std::size_t k = subset_size(samples.size(), fraction * 100.0);
  std::vector<std::string> out;
  out.reserve(k);
  if (method == BaselineMethod::Random) {
    auto rng = seeded_engine({"baseline-random", std::to_string(seed)});
    for (std::size_t i : sample_without_replacement(rng, samples.size(), k)) out.push_back(samples[i].id);
    return out;
  }
  if (ppls == nullptr) throw std::invalid_argument("PPL baselines need per-sample perplexities");
  std::vector<std::pair<double, std::string>> keyed;
  keyed.reserve(samples.size());
  for (const auto& s : samples) {
    auto it = ppls->find(s.id);
    if (it == ppls->end()) throw DataError("no perplexity for sample " + s.id);
    keyed.emplace_back(it->second, s.id);
  }
  const bool ascending = method == BaselineMethod::LowPpl;
  std::sort(keyed.begin(), keyed.end(), [ascending](const auto& a, const auto& b) {
    if (a.first != b.first) return ascending ? a.first < b.first : a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t i = 0; i < k; ++i) out.push_back(keyed[i].second);
  return out;
}

// ---------------------------------------------------------------------------

std::string label_name(bool high_contribution) { return high_contribution ? "high-contribution" : "other"; }

std::vector<GlobalScore> labeling_subset(const std::vector<GlobalScore>& scores, std::size_t size,
                                         std::uint64_t seed) {
  std::vector<GlobalScore> out;
  if (size == 0 || size >= scores.size()) {
    out = scores;
  } else {
    auto rng = seeded_engine({"labeling-subset", std::to_string(seed)});
    for (std::size_t i : sample_without_replacement(rng, scores.size(), size)) out.push_back(scores[i]);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.rank < b.rank; });
  return out;
}

std::vector<LabeledSample> label_top_k(const std::vector<GlobalScore>& subset, double k_percent) {
  auto ranked = subset;
  scoring::assign_ranks(ranked);
  const std::size_t k = subset_size(ranked.size(), k_percent);
  std::vector<LabeledSample> out;
  out.reserve(ranked.size());
  for (const auto& g : ranked) out.push_back({g.sample_id, g.rank <= k, g.global_icon});
  return out;
}

namespace {

std::unordered_map<std::string, const Sample*> index_pool(const std::vector<Sample>& pool) {
  std::unordered_map<std::string, const Sample*> by_id;
  for (const auto& s : pool) by_id.emplace(s.id, &s);
  return by_id;
}

}  // namespace

std::size_t export_labeled(const std::vector<LabeledSample>& labeled, const std::vector<Sample>& pool,
                           const std::filesystem::path& path) {
  const auto by_id = index_pool(pool);
  std::string out;
  std::size_t positives = 0;
  for (const auto& l : labeled) {
    auto it = by_id.find(l.sample_id);
    if (it == by_id.end()) throw DataError("labeled sample " + l.sample_id + " is not in the pool");
    const Sample& s = *it->second;
    json rec = json::object();
    rec["instruction"] = s.instruction;
    rec["input"] = s.input;
    rec["response"] = s.response;
    rec["label"] = label_name(l.high_contribution);
    out += rec.dump() + "\n";
    positives += l.high_contribution ? 1 : 0;
  }
  if (labeled.empty()) spdlog::warn("no labeled samples; writing empty file {}", path.string());
  write_file_atomic(path, out);
  return positives;
}

std::vector<LabeledText> load_labeled(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<LabeledText> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const json rec = json::parse(line);
    out.push_back({rec.at("instruction").get<std::string>(), rec.at("input").get<std::string>(),
                   rec.at("response").get<std::string>(), rec.at("label").get<std::string>()});
  }
  return out;
}

void export_subset(const std::vector<Sample>& pool, const std::vector<std::string>& ids,
                   const std::filesystem::path& path, corpus::Format format) {
  const auto by_id = index_pool(pool);
  std::vector<Sample> selected;
  selected.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("selected id " + id + " is not in the pool");
    selected.push_back(*it->second);
  }
  corpus::save_corpus(selected, path, format);
}

// ---------------------------------------------------------------------------

SparseVector extract_features(const FeatureSpec& spec, const Sample& s) {
  std::string text = s.instruction + "\n" + s.input + "\n" + s.response;
  if (spec.lowercase) {
    std::transform(text.begin(), text.end(), text.begin(), [](unsigned char c) {
      return static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c);
    });
  }
  const auto tokens = split_whitespace(text);
  std::unordered_map<std::uint32_t, double> counts;
  for (int n = spec.ngram_min; n <= spec.ngram_max; ++n) {
    const auto width = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + width <= tokens.size(); ++i) {
      std::string feat = std::to_string(n) + ":";
      for (std::size_t k = 0; k < width; ++k) {
        if (k) feat.push_back('\x1f');
        feat += tokens[i + k];
      }
      counts[static_cast<std::uint32_t>(fnv1a64(feat) % spec.hash_buckets)] += 1.0;
    }
  }
  SparseVector out(counts.begin(), counts.end());
  std::sort(out.begin(), out.end());
  double norm = 0.0;
  for (const auto& [i, v] : out) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (auto& [i, v] : out) v /= norm;
  }
  return out;
}

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double dot(const std::vector<double>& w, const SparseVector& x) {
  double z = 0.0;
  for (const auto& [i, v] : x) z += w[i] * v;
  return z;
}

}  // namespace

double SelectorModel::probability(const Sample& s) const {
  return sigmoid(dot(weights, extract_features(features, s)) + bias);
}

SelectorModel train_selector(const std::vector<LabeledExample>& examples, const TrainConfig& config) {
  if (!(config.k_percent > 0.0 && config.k_percent <= 100.0)) {
    throw std::invalid_argument("train_selector: k_percent must lie in (0, 100]");
  }
  if (config.features.hash_buckets == 0 || config.features.ngram_min < 1 ||
      config.features.ngram_max < config.features.ngram_min) {
    throw std::invalid_argument("train_selector: invalid feature spec");
  }
  std::size_t positives = 0;
  for (const auto& e : examples) positives += e.positive ? 1 : 0;
  if (positives == 0 || positives == examples.size()) {
    throw std::invalid_argument("train_selector: labels contain a single class");
  }

  const std::size_t n = examples.size();
  auto split_rng = seeded_engine({"selector-split", std::to_string(config.seed)});
  const auto order = sample_without_replacement(split_rng, n, n);
  // Stratified by label so the training positive rate tracks the labeled rate.
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
  for (const bool label : {true, false}) {
    std::vector<std::size_t> group;
    for (std::size_t i : order) {
      if (examples[i].positive == label) group.push_back(i);
    }
    const auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(group.size()) * config.holdout_fraction));
    train.insert(train.end(), group.begin(), group.end() - static_cast<std::ptrdiff_t>(cut));
    heldout.insert(heldout.end(), group.end() - static_cast<std::ptrdiff_t>(cut), group.end());
  }
  std::size_t train_pos = 0;
  for (std::size_t i : train) train_pos += examples[i].positive ? 1 : 0;
  if (train_pos == 0 || train_pos == train.size()) {
    throw std::invalid_argument("train_selector: training split contains a single class");
  }

  std::vector<SparseVector> features(n);
  for (std::size_t i = 0; i < n; ++i) features[i] = extract_features(config.features, examples[i].sample);

  SelectorModel model;
  model.features = config.features;
  model.weights.assign(config.features.hash_buckets, 0.0);

  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    auto rng = seeded_engine({"selector-epoch", std::to_string(config.seed), std::to_string(epoch)});
    const auto perm = sample_without_replacement(rng, train.size(), train.size());
    for (std::size_t p : perm) {
      const std::size_t i = train[p];
      const double lr = config.learning_rate / (1.0 + config.learning_rate * config.l2 * static_cast<double>(step));
      const double g = sigmoid(dot(model.weights, features[i]) + model.bias) - (examples[i].positive ? 1.0 : 0.0);
      for (const auto& [j, v] : features[i]) {
        model.weights[j] -= lr * (g * v + config.l2 * model.weights[j]);
      }
      model.bias -= lr * g;
      ++step;
    }
  }

  std::vector<double> train_scores;
  train_scores.reserve(train.size());
  for (std::size_t i : train) train_scores.push_back(sigmoid(dot(model.weights, features[i]) + model.bias));
  std::vector<double> sorted = train_scores;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  // Midway between the last admitted and first rejected training score, so
  // exactly the K% prefix clears it on training data.
  const std::size_t k = subset_size(sorted.size(), config.k_percent);
  model.threshold = k < sorted.size() && sorted[k] < sorted[k - 1] ? 0.5 * (sorted[k - 1] + sorted[k]) : sorted[k - 1];

  SelectorMetadata& meta = model.metadata;
  meta.seed = config.seed;
  meta.epochs = config.epochs;
  meta.k_percent = config.k_percent;
  meta.learning_rate = config.learning_rate;
  meta.l2 = config.l2;
  meta.train_size = train.size();
  meta.heldout_size = heldout.size();
  std::string digest_input;
  for (const auto& e : examples) {
    digest_input += corpus::canonical_text(e.sample);
    digest_input += e.positive ? "\x1e" "1\x1e" : "\x1e" "0\x1e";
  }
  meta.data_hash = sha256_hex(digest_input);

  if (!heldout.empty()) {
    std::size_t correct = 0;
    std::vector<double> scores;
    std::vector<bool> labels;
    for (std::size_t i : heldout) {
      const double p = sigmoid(dot(model.weights, features[i]) + model.bias);
      correct += ((p >= model.threshold) == examples[i].positive) ? 1 : 0;
      scores.push_back(p);
      labels.push_back(examples[i].positive);
    }
    meta.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(heldout.size());
    const bool both = std::find(labels.begin(), labels.end(), true) != labels.end() &&
                      std::find(labels.begin(), labels.end(), false) != labels.end();
    if (both) meta.heldout_auc = auc(scores, labels);
  }
  return model;
}

ApplyResult apply_selector(const SelectorModel& model, const std::vector<Sample>& pool) {
  ApplyResult out;
  out.rows.reserve(pool.size());
  for (const auto& s : pool) {
    const double p = model.probability(s);
    ++out.evaluations;
    out.rows.push_back({s.id, p, p >= model.threshold});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

double parse_hex_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || !std::isfinite(v)) throw DataError("malformed hex float '" + s + "'");
  return v;
}

namespace {
constexpr std::string_view kSelectorFormat = "iconsel-selector";
constexpr int kSelectorVersion = 1;
}  // namespace

json to_json(const SelectorModel& model) {
  json weights = json::array();
  for (std::size_t i = 0; i < model.weights.size(); ++i) {
    if (model.weights[i] != 0.0) weights.push_back(json::array({i, hex_double(model.weights[i])}));
  }
  const auto& m = model.metadata;
  json meta = {{"seed", m.seed},
               {"epochs", m.epochs},
               {"k_percent", m.k_percent},
               {"learning_rate", m.learning_rate},
               {"l2", m.l2},
               {"data_hash", m.data_hash},
               {"train_size", m.train_size},
               {"heldout_size", m.heldout_size},
               {"heldout_accuracy", m.heldout_accuracy ? json(*m.heldout_accuracy) : json(nullptr)},
               {"heldout_auc", m.heldout_auc ? json(*m.heldout_auc) : json(nullptr)}};
  return {{"format", kSelectorFormat},
          {"version", kSelectorVersion},
          {"feature_spec",
           {{"ngram_min", model.features.ngram_min},
            {"ngram_max", model.features.ngram_max},
            {"hash_buckets", model.features.hash_buckets},
            {"hash", "fnv1a64"},
            {"lowercase", model.features.lowercase},
            {"normalization", "l2"}}},
          {"bias", hex_double(model.bias)},
          {"threshold", hex_double(model.threshold)},
          {"weights", std::move(weights)},
          {"metadata", std::move(meta)}};
}

SelectorModel selector_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != kSelectorFormat) throw DataError("not a selector model file");
    if (j.at("version").get<int>() != kSelectorVersion) {
      throw DataError("unsupported selector model version " + j.at("version").dump());
    }
    SelectorModel model;
    const auto& fs = j.at("feature_spec");
    model.features.ngram_min = fs.at("ngram_min").get<int>();
    model.features.ngram_max = fs.at("ngram_max").get<int>();
    model.features.hash_buckets = fs.at("hash_buckets").get<std::uint32_t>();
    model.features.lowercase = fs.at("lowercase").get<bool>();
    if (fs.at("hash").get<std::string>() != "fnv1a64") throw DataError("unsupported feature hash");
    model.weights.assign(model.features.hash_buckets, 0.0);
    for (const auto& w : j.at("weights")) {
      const auto idx = w.at(0).get<std::size_t>();
      if (idx >= model.weights.size()) throw DataError("selector weight index out of range");
      model.weights[idx] = parse_hex_double(w.at(1).get<std::string>());
    }
    model.bias = parse_hex_double(j.at("bias").get<std::string>());
    model.threshold = parse_hex_double(j.at("threshold").get<std::string>());
    const auto& m = j.at("metadata");
    auto& meta = model.metadata;
    meta.seed = m.at("seed").get<std::uint64_t>();
    meta.epochs = m.at("epochs").get<std::size_t>();
    meta.k_percent = m.at("k_percent").get<double>();
    meta.learning_rate = m.at("learning_rate").get<double>();
    meta.l2 = m.at("l2").get<double>();
    meta.data_hash = m.at("data_hash").get<std::string>();
    meta.train_size = m.at("train_size").get<std::size_t>();
    meta.heldout_size = m.at("heldout_size").get<std::size_t>();
    if (!m.at("heldout_accuracy").is_null()) meta.heldout_accuracy = m.at("heldout_accuracy").get<double>();
    if (!m.at("heldout_auc").is_null()) meta.heldout_auc = m.at("heldout_auc").get<double>();
    return model;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed selector model: ") + e.what());
  }
}

void save_selector(const SelectorModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(model).dump(2) + "\n");
}

SelectorModel load_selector(const std::filesystem::path& path) {
  try {
    return selector_from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

double auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks over tied groups.
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) rank[idx[k]] = mid;
    i = j;
  }
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      rank_sum += rank[i];
      ++pos;
    }
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("auc: needs both classes");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

}  // namespace iconsel::selection
