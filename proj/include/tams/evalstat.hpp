#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tams/common.hpp"
#include "tams/ndgrad.hpp"

namespace tams::evalstat {

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

// 2|P∩T| / (|P|+|T|) on binary masks; both empty -> 1.0.
double dice(const ndgrad::Tensor& pred_mask, const ndgrad::Tensor& true_mask);

// One holdout sample as seen by the sweep: controller score plus its
// per-sample task metric (1/0 correctness or per-image Dice).
struct SweepSample {
  std::uint32_t id = 0;
  std::uint32_t group_id = 0;
  double score = 0.0;
  double metric = 0.0;
};

struct SweepPoint {
  double ratio = 0.0;
  double mean_metric = 0.0;
  double stdev_group = 0.0;  // across group-ids
  std::size_t n_kept = 0;
  std::vector<std::pair<std::uint32_t, double>> group_means;  // sorted by group id
};

struct SweepResult {
  std::vector<SweepPoint> points;
};

// For each ratio drop the floor(ratio*N) lowest-score samples (ties by
// ascending id) and evaluate the task metric on the rest.
SweepResult rejection_sweep(const std::vector<SweepSample>& samples,
                            const std::vector<double>& ratios);

struct ContingencyTable2x2 {
  // predicted-low/high vs subjective-low/high counts
  std::size_t low_low = 0;
  std::size_t low_high = 0;
  std::size_t high_low = 0;
  std::size_t high_high = 0;
  std::size_t total() const { return low_low + low_high + high_low + high_high; }
};

// predicted-low = the floor(fraction*N) lowest scores, ties by ascending id.
ContingencyTable2x2 contingency(const std::vector<std::uint32_t>& ids,
                                const std::vector<double>& scores,
                                const std::vector<bool>& subjective_low, double fraction);

double cohens_kappa(const ContingencyTable2x2& table);

// Mann-Whitney AUC, ties counted 1/2.
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
};

// Two-sided paired t-test. Zero-variance differences: p = 0 when the mean
// difference is nonzero, else p = 1.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double regularized_incomplete_beta(double a, double b, double x);

std::string sweep_to_csv(const SweepResult& sweep);
std::string contingency_to_csv(const ContingencyTable2x2& table, double kappa);

}  // namespace tams::evalstat
