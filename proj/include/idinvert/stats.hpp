#pragma once

// Rank statistics and retrieval metrics used by the experiment verdicts.

#include <span>
#include <vector>

namespace idinvert::stats {

/// Ranks starting at 1; ties get their average rank.
std::vector<double> ranks(std::span<const double> v);
double pearson(std::span<const double> a, std::span<const double> b);
/// Pearson correlation of the ranks. 0 when either side is constant.
double spearman(std::span<const double> a, std::span<const double> b);

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};
/// One point per distinct score, highest threshold first.
std::vector<PrPoint> precision_recall(std::span<const double> scores, std::span<const int> labels);
/// Mean precision at the rank of every positive (ties share the lower precision).
double average_precision(std::span<const double> scores, std::span<const int> labels);

double mean(std::span<const double> v);

}  // namespace idinvert::stats
