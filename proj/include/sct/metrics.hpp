#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

namespace sct {

// Scores and targets are row-major [samples x labels].
struct ScoreMatrix {
  std::size_t samples = 0;
  std::size_t labels = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> targets;  // 0 or 1

  void validate() const;  // throws ShapeError / ConfigError
};

struct MetricsReport {
  double ap_micro = 0.0;
  double ap_macro = 0.0;
  double f2_macro = 0.0;
  // Per label; AP is nullopt for labels without positives.
  std::vector<std::optional<double>> per_label_ap;
  std::vector<double> per_label_precision;
  std::vector<double> per_label_recall;
  std::size_t ap_skipped_labels = 0;
  std::size_t f_skipped_labels = 0;
  double threshold = 0.5;
  double beta = 2.0;
};

nlohmann::json to_json(const MetricsReport& report);

// Non-interpolated AP: mean over positives of the precision at each positive's
// rank, ranking by descending score with ties kept in input order. nullopt when
// there is no positive.
std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> targets);

// All (sample, label) pairs pooled into one ranking.
double ap_micro(const ScoreMatrix& m);
// Mean per-label AP over labels with at least one positive.
double ap_macro(const ScoreMatrix& m, std::size_t* skipped = nullptr);

// Macro F-beta with predictions score >= threshold. Labels without positives
// are skipped; P := 0 when nothing is predicted; F := 0 when P = R = 0.
double f_beta_macro(const ScoreMatrix& m, double beta = 2.0, double threshold = 0.5, std::size_t* skipped = nullptr);

MetricsReport compute_metrics(const ScoreMatrix& m, double beta = 2.0, double threshold = 0.5);

}  // namespace sct
