#include "sct/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "sct/errors.hpp"

namespace sct {

void ScoreMatrix::validate() const {
  if (scores.size() != samples * labels || targets.size() != samples * labels) {
    throw ShapeError("score matrix: expected " + std::to_string(samples * labels) + " scores and targets, got " +
                     std::to_string(scores.size()) + " / " + std::to_string(targets.size()));
  }
  for (auto t : targets) {
    if (t > 1) throw ConfigError("score matrix: targets must be 0 or 1");
  }
}

std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> targets) {
  if (scores.size() != targets.size()) {
    throw ShapeError("average_precision: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(targets.size()) + " targets");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double precision_sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (targets[order[rank]]) {
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return precision_sum / static_cast<double>(hits);
}

namespace {

void column(const ScoreMatrix& m, std::size_t label, std::vector<double>& s, std::vector<std::uint8_t>& t) {
  s.resize(m.samples);
  t.resize(m.samples);
  for (std::size_t i = 0; i < m.samples; ++i) {
    s[i] = m.scores[i * m.labels + label];
    t[i] = m.targets[i * m.labels + label];
  }
}

}  // namespace

double ap_micro(const ScoreMatrix& m) {
  m.validate();
  auto ap = average_precision(m.scores, m.targets);
  if (!ap) throw ConfigError("ap_micro: no positive targets anywhere");
  return *ap;
}

double ap_macro(const ScoreMatrix& m, std::size_t* skipped) {
  m.validate();
  std::vector<double> s;
  std::vector<std::uint8_t> t;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < m.labels; ++k) {
    column(m, k, s, t);
    if (auto ap = average_precision(s, t)) {
      total += *ap;
      ++used;
    }
  }
  if (skipped) *skipped = m.labels - used;
  if (used == 0) throw ConfigError("ap_macro: no positive targets anywhere");
  return total / static_cast<double>(used);
}

namespace {

struct LabelF {
  bool skipped = false;
  double precision = 0.0, recall = 0.0, f = 0.0;
};

LabelF label_f(const ScoreMatrix& m, std::size_t k, double beta, double threshold) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < m.samples; ++i) {
    const bool pred = m.scores[i * m.labels + k] >= threshold;
    const bool pos = m.targets[i * m.labels + k] != 0;
    tp += pred && pos;
    fp += pred && !pos;
    fn += !pred && pos;
  }
  LabelF r;
  if (tp + fn == 0) {
    r.skipped = true;
    r.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    return r;
  }
  r.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double b2 = beta * beta;
  if (r.precision == 0.0 && r.recall == 0.0) {
    r.f = 0.0;
  } else {
    r.f = (1.0 + b2) * r.precision * r.recall / (b2 * r.precision + r.recall);
  }
  return r;
}

}  // namespace

double f_beta_macro(const ScoreMatrix& m, double beta, double threshold, std::size_t* skipped) {
  m.validate();
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < m.labels; ++k) {
    const LabelF r = label_f(m, k, beta, threshold);
    if (r.skipped) continue;
    total += r.f;
    ++used;
  }
  if (skipped) *skipped = m.labels - used;
  return used == 0 ? 0.0 : total / static_cast<double>(used);
}

MetricsReport compute_metrics(const ScoreMatrix& m, double beta, double threshold) {
  m.validate();
  MetricsReport r;
  r.beta = beta;
  r.threshold = threshold;
  r.ap_micro = ap_micro(m);
  r.ap_macro = ap_macro(m, &r.ap_skipped_labels);
  r.f2_macro = f_beta_macro(m, beta, threshold, &r.f_skipped_labels);
  std::vector<double> s;
  std::vector<std::uint8_t> t;
  for (std::size_t k = 0; k < m.labels; ++k) {
    column(m, k, s, t);
    r.per_label_ap.push_back(average_precision(s, t));
    const LabelF f = label_f(m, k, beta, threshold);
    r.per_label_precision.push_back(f.precision);
    r.per_label_recall.push_back(f.recall);
  }
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json ap = nlohmann::json::array();
  for (const auto& v : r.per_label_ap) ap.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return {{"ap_micro", r.ap_micro},
          {"ap_macro", r.ap_macro},
          {"f2_macro", r.f2_macro},
          {"per_label_ap", ap},
          {"per_label_precision", r.per_label_precision},
          {"per_label_recall", r.per_label_recall},
          {"ap_skipped_labels", r.ap_skipped_labels},
          {"f_skipped_labels", r.f_skipped_labels},
          {"threshold", r.threshold},
          {"beta", r.beta}};
}

}  // namespace sct
