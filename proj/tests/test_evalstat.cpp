#include <doctest.h>

#include <cmath>

#include "tams/common.hpp"
#include "tams/evalstat.hpp"

using namespace tams;
using namespace tams::evalstat;
using ndgrad::Tensor;

TEST_CASE("accuracy") {
  CHECK(accuracy({1, 0, 1}, {1, 0, 1}) == 1.0);
  CHECK(accuracy({1, 0, 1}, {1, 1, 1}) == doctest::Approx(2.0 / 3.0));
  std::vector<int> labels = {0, 1, 1, 0};
  CHECK(accuracy(labels, labels) == 1.0);
  CHECK_THROWS_AS(accuracy({}, {}), ValueError);
  CHECK_THROWS_AS(accuracy({1}, {1, 2}), ShapeError);
}

TEST_CASE("dice") {
  Tensor a({4}, {1, 1, 0, 0});
  CHECK(dice(a, a) == 1.0);
  Tensor b({4}, {0, 0, 1, 1});
  CHECK(dice(a, b) == 0.0);
  Tensor p({8}, {1, 1, 1, 1, 0, 0, 0, 0});
  Tensor t({8}, {0, 0, 1, 1, 1, 1, 0, 0});
  CHECK(dice(p, t) == doctest::Approx(0.5));
  Tensor zero({4}, 0.0);
  CHECK(dice(zero, zero) == 1.0);
  CHECK_THROWS_AS(dice(Tensor({2}, {0.5, 1.0}), Tensor({2}, {0, 1})), ValueError);
  CHECK_THROWS_AS(dice(Tensor({2}, 0.0), Tensor({3}, 0.0)), ShapeError);
  // Symmetry.
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> x(16), y(16);
    for (auto& v : x) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    for (auto& v : y) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    CHECK(dice(Tensor({16}, x), Tensor({16}, y)) == dice(Tensor({16}, y), Tensor({16}, x)));
  }
}

TEST_CASE("rejection sweep") {
  std::vector<SweepSample> samples;
  Rng rng(5);
  std::size_t n = 40;
  for (std::size_t i = 0; i < n; ++i) {
    bool corrupted = i % 4 == 0;  // 10 of 40
    SweepSample s;
    s.id = static_cast<std::uint32_t>(i);
    s.group_id = static_cast<std::uint32_t>(i / 10);
    s.score = corrupted ? 0.0 : 1.0;  // oracle scores
    s.metric = corrupted ? 0.0 : 1.0;
    samples.push_back(s);
  }
  SweepResult r = rejection_sweep(samples, {0.0, 0.25, 0.5});
  // Ratio 0 equals direct evaluation.
  CHECK(r.points[0].n_kept == n);
  CHECK(r.points[0].mean_metric == doctest::Approx(30.0 / 40.0));
  // Ratio equal to the corruption fraction keeps exactly the clean subset.
  CHECK(r.points[1].n_kept == 30);
  CHECK(r.points[1].mean_metric == 1.0);
  CHECK(r.points[2].n_kept == 20);
  CHECK_THROWS_AS(rejection_sweep(samples, {1.0}), ValueError);
  CHECK_THROWS_AS(rejection_sweep({}, {0.0}), ValueError);
}

TEST_CASE("contingency table") {
  std::size_t n = 20;
  std::vector<std::uint32_t> ids(n);
  std::vector<double> scores(n);
  std::vector<bool> low(n);
  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = static_cast<std::uint32_t>(i);
    low[i] = i < 5;  // 25% subjectively low
    scores[i] = low[i] ? 0.0 : 1.0;
  }
  ContingencyTable2x2 t = contingency(ids, scores, low, 0.25);
  CHECK(t.low_low == 5);
  CHECK(t.low_high == 0);
  CHECK(t.high_low == 0);
  CHECK(t.high_high == 15);
  CHECK(t.total() == n);
  CHECK(cohens_kappa(t) == doctest::Approx(1.0));

  // Reversed scores swap diagonal and off-diagonal roles.
  std::vector<double> rev(n);
  for (std::size_t i = 0; i < n; ++i) rev[i] = 1.0 - scores[i];
  ContingencyTable2x2 tr = contingency(ids, rev, low, 0.25);
  CHECK(tr.low_low == 0);
  CHECK(tr.low_high == 5);
  CHECK_THROWS_AS(contingency(ids, scores, low, 0.0), ValueError);
}

TEST_CASE("cohens kappa") {
  CHECK(cohens_kappa({7, 0, 0, 9}) == doctest::Approx(1.0));
  CHECK(cohens_kappa({1, 1, 1, 1}) == doctest::Approx(0.0));
  ContingencyTable2x2 t{20, 5, 10, 65};
  CHECK(std::abs(cohens_kappa(t) - 0.625) < 1e-12);
  // Transpose symmetry.
  ContingencyTable2x2 tt{20, 10, 5, 65};
  CHECK(cohens_kappa(t) == doctest::Approx(cohens_kappa(tt)));
  // Degenerate marginals.
  CHECK(cohens_kappa({4, 0, 0, 0}) == 1.0);
  CHECK(cohens_kappa({0, 4, 0, 0}) == 0.0);
  CHECK_THROWS_AS(cohens_kappa({0, 0, 0, 0}), ValueError);
}

TEST_CASE("roc auc") {
  CHECK(roc_auc({0.1, 0.2, 0.8, 0.9}, {false, false, true, true}) == 1.0);
  CHECK(roc_auc({0.1, 0.4, 0.35, 0.8}, {false, false, true, true}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {true, true}), ValueError);

  // Invariance under strictly monotone transforms.
  Rng rng(7);
  std::vector<double> scores(50);
  std::vector<bool> flags(50);
  for (std::size_t i = 0; i < 50; ++i) {
    scores[i] = rng.uniform(-2, 2);
    flags[i] = rng.bernoulli(0.5);
  }
  flags[0] = true;
  flags[1] = false;
  double base = roc_auc(scores, flags);
  std::vector<double> transformed(50);
  for (std::size_t i = 0; i < 50; ++i) transformed[i] = std::exp(3.0 * scores[i]) + 1.0;
  CHECK(roc_auc(transformed, flags) == doctest::Approx(base));

  // Independent scores hover near 1/2.
  std::vector<double> s2(4000);
  std::vector<bool> f2(4000);
  for (std::size_t i = 0; i < s2.size(); ++i) {
    s2[i] = rng.uniform(0, 1);
    f2[i] = rng.bernoulli(0.5);
  }
  f2[0] = true;
  f2[1] = false;
  CHECK(std::abs(roc_auc(s2, f2) - 0.5) < 0.05);

  // Ties count one half.
  CHECK(roc_auc({0.5, 0.5}, {true, false}) == doctest::Approx(0.5));
}

TEST_CASE("paired t test") {
  std::vector<double> a = {1.0, 2.0, 3.0};
  TTestResult same = paired_t_test(a, a);
  CHECK(same.p == 1.0);

  TTestResult consts = paired_t_test({2, 3, 4, 5}, {1, 2, 3, 4});
  CHECK(consts.p == 0.0);

  TTestResult r = paired_t_test({1.0, 2.0, 3.0}, {0.0, 0.0, 0.0});
  CHECK(std::abs(r.t - 2.0 * std::sqrt(3.0)) < 1e-3);
  CHECK(std::abs(r.t - 3.4641) < 1e-3);
  CHECK(std::abs(r.p - 0.0742) < 5e-3);

  CHECK_THROWS_AS(paired_t_test({1.0}, {2.0}), ValueError);
  CHECK_THROWS_AS(paired_t_test({1, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("regularized incomplete beta agrees with the closed form for a=1") {
  // I_x(1, b) = 1 - (1-x)^b
  for (double b : {0.5, 1.0, 2.5}) {
    for (double x : {0.01, 0.14285714285714285, 0.5, 0.9}) {
      double expected = 1.0 - std::pow(1.0 - x, b);
      CHECK(regularized_incomplete_beta(1.0, b, x) == doctest::Approx(expected).epsilon(1e-10));
    }
  }
}

TEST_CASE("csv emitters") {
  SweepResult sweep;
  sweep.points.push_back({0.0, 0.9, 0.01, 100, {}});
  std::string csv = sweep_to_csv(sweep);
  CHECK(csv.find("ratio,mean_metric,stdev_group,n_kept") == 0);
  CHECK(csv.find("0,0.9,0.01,100") != std::string::npos);
  std::string c2 = contingency_to_csv({1, 2, 3, 4}, 0.5);
  CHECK(c2.find("1,2,3,4,0.5") != std::string::npos);
}
