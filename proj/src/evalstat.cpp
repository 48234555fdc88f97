#include "tams/evalstat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace tams::evalstat {

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.empty()) throw ValueError("accuracy: empty input");
  if (predictions.size() != labels.size()) {
    throw ShapeError("accuracy: prediction/label lengths differ");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

double dice(const ndgrad::Tensor& pred_mask, const ndgrad::Tensor& true_mask) {
  if (pred_mask.shape() != true_mask.shape()) {
    throw ShapeError("dice: mask shapes differ");
  }
  const auto& p = pred_mask.data();
  const auto& t = true_mask.data();
  std::size_t np = 0, nt = 0, inter = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] != 0.0 && p[i] != 1.0) throw ValueError("dice: non-binary prediction mask");
    if (t[i] != 0.0 && t[i] != 1.0) throw ValueError("dice: non-binary target mask");
    bool bp = p[i] == 1.0, bt = t[i] == 1.0;
    np += bp;
    nt += bt;
    inter += bp && bt;
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

namespace {

// Indices ordered worst-first: ascending score, ties by ascending id.
std::vector<std::size_t> ranked_low_first(const std::vector<std::uint32_t>& ids,
                                          const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return ids[a] < ids[b];
  });
  return order;
}

double sample_stdev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

SweepResult rejection_sweep(const std::vector<SweepSample>& samples,
                            const std::vector<double>& ratios) {
  if (samples.empty()) throw ValueError("rejection_sweep: empty holdout");
  for (double r : ratios) {
    if (r < 0.0 || r >= 1.0) {
      throw ValueError("rejection_sweep: ratio must lie in [0,1), got " + format_double(r));
    }
  }
  std::vector<std::uint32_t> ids(samples.size());
  std::vector<double> scores(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ids[i] = samples[i].id;
    scores[i] = samples[i].score;
  }
  std::vector<std::size_t> order = ranked_low_first(ids, scores);

  SweepResult result;
  std::size_t n = samples.size();
  for (double ratio : ratios) {
    std::size_t dropped = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
    SweepPoint pt;
    pt.ratio = ratio;
    pt.n_kept = n - dropped;
    double acc = 0.0;
    std::map<std::uint32_t, std::pair<double, std::size_t>> per_group;
    for (std::size_t k = dropped; k < n; ++k) {
      const SweepSample& s = samples[order[k]];
      acc += s.metric;
      auto& g = per_group[s.group_id];
      g.first += s.metric;
      g.second += 1;
    }
    pt.mean_metric = acc / static_cast<double>(pt.n_kept);
    std::vector<double> group_vals;
    for (const auto& [gid, sumcount] : per_group) {
      double gm = sumcount.first / static_cast<double>(sumcount.second);
      pt.group_means.emplace_back(gid, gm);
      group_vals.push_back(gm);
    }
    pt.stdev_group = sample_stdev(group_vals);
    result.points.push_back(std::move(pt));
  }
  return result;
}

ContingencyTable2x2 contingency(const std::vector<std::uint32_t>& ids,
                                const std::vector<double>& scores,
                                const std::vector<bool>& subjective_low, double fraction) {
  if (scores.empty()) throw ValueError("contingency: empty input");
  if (ids.size() != scores.size() || subjective_low.size() != scores.size()) {
    throw ShapeError("contingency: input lengths differ");
  }
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw ValueError("contingency: fraction must lie in (0,1)");
  }
  std::size_t n = scores.size();
  std::size_t n_low = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  std::vector<std::size_t> order = ranked_low_first(ids, scores);
  std::vector<bool> predicted_low(n, false);
  for (std::size_t k = 0; k < n_low; ++k) predicted_low[order[k]] = true;

  ContingencyTable2x2 t;
  for (std::size_t i = 0; i < n; ++i) {
    if (predicted_low[i] && subjective_low[i]) ++t.low_low;
    if (predicted_low[i] && !subjective_low[i]) ++t.low_high;
    if (!predicted_low[i] && subjective_low[i]) ++t.high_low;
    if (!predicted_low[i] && !subjective_low[i]) ++t.high_high;
  }
  return t;
}

double cohens_kappa(const ContingencyTable2x2& table) {
  std::size_t n = table.total();
  if (n == 0) throw ValueError("cohens_kappa: empty table");
  double nn = static_cast<double>(n);
  double po = (static_cast<double>(table.low_low) + static_cast<double>(table.high_high)) / nn;
  double pred_low = (static_cast<double>(table.low_low) + static_cast<double>(table.low_high)) / nn;
  double subj_low = (static_cast<double>(table.low_low) + static_cast<double>(table.high_low)) / nn;
  double pe = pred_low * subj_low + (1.0 - pred_low) * (1.0 - subj_low);
  if (pe == 1.0) return po == 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw ShapeError("roc_auc: input lengths differ");
  std::size_t npos = 0, nneg = 0;
  for (bool f : positive) (f ? npos : nneg)++;
  if (npos == 0 || nneg == 0) throw ValueError("roc_auc: both classes required");

  // Midranks handle ties.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (positive[k]) rank_sum += rank[k];
  }
  double np = static_cast<double>(npos), nm = static_cast<double>(nneg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nm);
}

namespace {

// Continued fraction for the incomplete beta (Lentz's method).
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14;
  constexpr double kFpMin = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw ValueError("regularized_incomplete_beta: x outside [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                    b * std::log(1.0 - x);
  double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * betacf(a, b, x) / a;
  }
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("paired_t_test: lengths differ");
  if (a.size() < 2) throw ValueError("paired_t_test: need at least two pairs");
  std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double acc = 0.0;
  for (double x : d) acc += (x - mean) * (x - mean);
  double sd = std::sqrt(acc / static_cast<double>(n - 1));
  TTestResult r;
  if (sd == 0.0) {
    if (mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = mean > 0.0 ? std::numeric_limits<double>::infinity()
                       : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  double nu = static_cast<double>(n - 1);
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = regularized_incomplete_beta(nu / 2.0, 0.5, nu / (nu + r.t * r.t));
  return r;
}

std::string sweep_to_csv(const SweepResult& sweep) {
  std::ostringstream out;
  out << "ratio,mean_metric,stdev_group,n_kept\n";
  for (const SweepPoint& p : sweep.points) {
    out << format_double(p.ratio) << ',' << format_double(p.mean_metric) << ','
        << format_double(p.stdev_group) << ',' << p.n_kept << '\n';
  }
  return out.str();
}

std::string contingency_to_csv(const ContingencyTable2x2& t, double kappa) {
  std::ostringstream out;
  out << "predicted_low_subjective_low,predicted_low_subjective_high,"
         "predicted_high_subjective_low,predicted_high_subjective_high,kappa\n";
  out << t.low_low << ',' << t.low_high << ',' << t.high_low << ',' << t.high_high << ','
      << format_double(kappa) << '\n';
  return out.str();
}

}  // namespace tams::evalstat
