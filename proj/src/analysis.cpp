#include "iconsel/analysis.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

#include "iconsel/error.hpp"
#include "iconsel/util.hpp"

namespace iconsel::analysis {

using nlohmann::json;

double ifd_score(lm::LogprobService& service, const Sample& sample, scoring::Template query_template) {
  const std::string query = scoring::query_prompt(query_template, corpus::join_prompt(sample.instruction, sample.input));
  const double conditioned = scoring::ppl_from_logprobs(service.continuation_logprobs(query, sample.response).logprobs);
  const double unconditioned = scoring::ppl_from_logprobs(service.continuation_logprobs("", sample.response).logprobs);
  const double ifd = conditioned / unconditioned;
  if (!std::isfinite(ifd) || ifd <= 0.0) throw DataError("non-finite IFD for sample " + sample.id);
  return ifd;
}

std::vector<DifficultyRecord> difficulty(lm::LogprobService& service, const std::vector<Sample>& samples,
                                         const std::set<std::string>& selected_ids,
                                         scoring::Template query_template) {
  std::vector<DifficultyRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back({s.id, ifd_score(service, s, query_template), selected_ids.count(s.id) > 0});
  }
  return out;
}

json to_json(const DifficultyRecord& r) { return {{"sample_id", r.sample_id}, {"ifd", r.ifd}, {"selected", r.selected}}; }

std::string serialize_difficulty_jsonl(const std::vector<DifficultyRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

std::vector<DifficultyRecord> load_difficulty(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<DifficultyRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("sample_id").get<std::string>(), j.at("ifd").get<double>(), j.at("selected").get<bool>()});
    } catch (const json::exception& e) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Verdict parse_verdict(const std::string& label) {
  std::string lower = label;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "win") return Verdict::Win;
  if (lower == "tie") return Verdict::Tie;
  if (lower == "lose") return Verdict::Lose;
  throw DataError("invalid judgment label '" + label + "' (expected win, tie or lose)");
}

std::string verdict_name(Verdict v) {
  switch (v) {
    case Verdict::Win:
      return "Win";
    case Verdict::Tie:
      return "Tie";
    case Verdict::Lose:
      return "Lose";
  }
  return "?";
}

Verdict combine_pairwise(Verdict order1, Verdict order2) {
  auto value = [](Verdict v) { return v == Verdict::Win ? 1 : v == Verdict::Lose ? -1 : 0; };
  const int sum = value(order1) + value(order2);
  if (sum > 0) return Verdict::Win;
  if (sum < 0) return Verdict::Lose;
  return Verdict::Tie;
}

Verdict combine_pairwise(const std::string& order1, const std::string& order2) {
  return combine_pairwise(parse_verdict(order1), parse_verdict(order2));
}

double winning_score(std::size_t wins, std::size_t losses, std::size_t total) {
  if (total == 0) throw std::invalid_argument("winning_score: total must be positive");
  if (wins + losses > total) throw std::invalid_argument("winning_score: wins + losses exceeds total");
  // 1 + d with d computed first keeps w(a,b) + w(b,a) == 2 exact.
  const double d = (static_cast<double>(wins) - static_cast<double>(losses)) / static_cast<double>(total);
  return 1.0 + d;
}

std::vector<Judgment> parse_judgments(std::string_view jsonl) {
  std::vector<Judgment> out;
  std::size_t lineno = 0;
  std::size_t start = 0;
  while (start < jsonl.size()) {
    auto end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    const auto line = jsonl.substr(start, end - start);
    start = end + 1;
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      std::string id = j.at("instruction_id").is_string() ? j.at("instruction_id").get<std::string>()
                                                           : j.at("instruction_id").dump();
      out.push_back({std::move(id), parse_verdict(j.at("order1").get<std::string>()),
                     parse_verdict(j.at("order2").get<std::string>())});
    } catch (const json::exception& e) {
      throw DataError(fmt::format("judgments line {}: {}", lineno, e.what()));
    } catch (const DataError& e) {
      throw DataError(fmt::format("judgments line {}: {}", lineno, e.what()));
    }
  }
  return out;
}

std::vector<Judgment> load_judgments(const std::filesystem::path& path) { return parse_judgments(read_file(path)); }

PairwiseSummary summarize_judgments(const std::vector<Judgment>& judgments) {
  PairwiseSummary s;
  for (const auto& j : judgments) {
    switch (combine_pairwise(j.order1, j.order2)) {
      case Verdict::Win:
        ++s.wins;
        break;
      case Verdict::Tie:
        ++s.ties;
        break;
      case Verdict::Lose:
        ++s.losses;
        break;
    }
  }
  s.total = judgments.size();
  if (s.total == 0) throw DataError("no judgments to summarize");
  s.winning_score = winning_score(s.wins, s.losses, s.total);
  return s;
}

json to_json(const PairwiseSummary& s) {
  return {{"wins", s.wins},   {"ties", s.ties},   {"losses", s.losses},
          {"total", s.total}, {"winning_score", s.winning_score}};
}

// ---------------------------------------------------------------------------

double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of an empty group");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty group");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

namespace {

constexpr double kVarianceFloor = 1e-12;

double sample_variance(const std::vector<double>& v, double m) {
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::max(ss / static_cast<double>(v.size() - 1), kVarianceFloor);
}

GroupStats stats(const std::vector<double>& v) { return {v.size(), mean(v), median(v)}; }

}  // namespace

WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("welch_t_test: each group needs at least 2 values");
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double ma = mean(a);
  const double mb = mean(b);
  const double qa = sample_variance(a, ma) / na;
  const double qb = sample_variance(b, mb) / nb;
  WelchResult r;
  r.t = (ma - mb) / std::sqrt(qa + qb);
  r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t))));
  return r;
}

DistributionReport distribution_report(const std::string& metric, const std::vector<double>& selected,
                                       const std::vector<double>& full) {
  if (selected.empty() || full.empty()) throw std::invalid_argument("distribution_report: empty group");
  DistributionReport r;
  r.metric = metric;
  r.selected = stats(selected);
  r.full = stats(full);

  const auto [smin, smax] = std::minmax_element(selected.begin(), selected.end());
  const auto [fmin, fmax] = std::minmax_element(full.begin(), full.end());
  Histogram& h = r.histogram;
  h.lo = std::min(*smin, *fmin);
  h.hi = std::max(*smax, *fmax);
  h.selected.assign(kHistogramBins, 0);
  h.full.assign(kHistogramBins, 0);
  const double width = (h.hi - h.lo) / static_cast<double>(kHistogramBins);
  auto bin = [&](double x) -> std::size_t {
    if (width <= 0.0) return 0;
    const auto b = static_cast<std::size_t>(std::floor((x - h.lo) / width));
    return std::min(b, kHistogramBins - 1);
  };
  for (double x : selected) ++h.selected[bin(x)];
  for (double x : full) ++h.full[bin(x)];

  if (selected.size() < 2 || full.size() < 2) {
    r.notice = fmt::format("t-test omitted: {} group has fewer than 2 records",
                           selected.size() < 2 ? "selected" : "full");
  } else {
    r.t_test = welch_t_test(selected, full);
  }
  return r;
}

DistributionReport distribution_report(const std::vector<scoring::GlobalScore>& scores,
                                       const std::set<std::string>& selected_ids) {
  std::vector<double> selected;
  std::vector<double> full;
  for (const auto& g : scores) {
    full.push_back(g.global_icon);
    if (selected_ids.count(g.sample_id)) selected.push_back(g.global_icon);
  }
  return distribution_report("global_icon", selected, full);
}

DistributionReport distribution_report(const std::vector<DifficultyRecord>& records) {
  std::vector<double> selected;
  std::vector<double> full;
  for (const auto& r : records) {
    full.push_back(r.ifd);
    if (r.selected) selected.push_back(r.ifd);
  }
  return distribution_report("ifd", selected, full);
}

json to_json(const DistributionReport& r) {
  auto group = [](const GroupStats& g) { return json{{"count", g.count}, {"mean", g.mean}, {"median", g.median}}; };
  json out = {{"metric", r.metric},
              {"selected", group(r.selected)},
              {"full", group(r.full)},
              {"histogram",
               {{"bins", kHistogramBins},
                {"lo", r.histogram.lo},
                {"hi", r.histogram.hi},
                {"selected", r.histogram.selected},
                {"full", r.histogram.full}}}};
  if (r.t_test) {
    out["t_test"] = {{"method", "welch"}, {"t", r.t_test->t}, {"df", r.t_test->df}, {"p_value", r.t_test->p_value}};
  } else {
    out["t_test"] = nullptr;
    out["notice"] = r.notice;
  }
  return out;
}

std::string render_text(const DistributionReport& r) {
  std::string out = fmt::format("metric: {}\n", r.metric);
  out += fmt::format("{:<10} {:>8} {:>14} {:>14}\n", "group", "count", "mean", "median");
  out += fmt::format("{:<10} {:>8} {:>14.6g} {:>14.6g}\n", "selected", r.selected.count, r.selected.mean,
                     r.selected.median);
  out += fmt::format("{:<10} {:>8} {:>14.6g} {:>14.6g}\n", "full", r.full.count, r.full.mean, r.full.median);
  if (r.t_test) {
    out += fmt::format("welch t = {:.6g}, df = {:.6g}, p = {:.6g}\n", r.t_test->t, r.t_test->df, r.t_test->p_value);
  } else {
    out += r.notice + "\n";
  }
  out += fmt::format("\n{:>14} {:>14} {:>9} {:>9}\n", "bin_lo", "bin_hi", "selected", "full");
  const double width = (r.histogram.hi - r.histogram.lo) / static_cast<double>(kHistogramBins);
  for (std::size_t i = 0; i < kHistogramBins; ++i) {
    out += fmt::format("{:>14.6g} {:>14.6g} {:>9} {:>9}\n", r.histogram.lo + width * static_cast<double>(i),
                       r.histogram.lo + width * static_cast<double>(i + 1), r.histogram.selected[i],
                       r.histogram.full[i]);
  }
  return out;
}

std::string histogram_csv(const DistributionReport& r) {
  std::string out = "bin,bin_lo,bin_hi,selected,full\n";
  const double width = (r.histogram.hi - r.histogram.lo) / static_cast<double>(kHistogramBins);
  for (std::size_t i = 0; i < kHistogramBins; ++i) {
    out += fmt::format("{},{},{},{},{}\n", i, format_double(r.histogram.lo + width * static_cast<double>(i)),
                       format_double(r.histogram.lo + width * static_cast<double>(i + 1)), r.histogram.selected[i],
                       r.histogram.full[i]);
  }
  return out;
}

}  // namespace iconsel::analysis
