#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "subtail/metrics.hpp"

using namespace subtail;

namespace {

ClusterModel model_from(std::vector<int> assignments) {
  ClusterModel m;
  m.assignments = std::move(assignments);
  return m;
}

// ARI from its pair-counting definition, O(n^2).
double pair_count_ari(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size();
  double both = 0, in_a = 0, in_b = 0, pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      in_a += sa;
      in_b += sb;
      pairs += 1;
    }
  const double expected = in_a * in_b / pairs;
  const double mx = 0.5 * (in_a + in_b);
  return mx == expected ? 1.0 : (both - expected) / (mx - expected);
}

}  // namespace

TEST(SetDistance, Examples) {
  Matrix s(2, 2);
  s(0, 0) = 1;
  s(1, 1) = 1;
  const std::vector<double> z = {1, 0};
  EXPECT_DOUBLE_EQ(set_distance(z, s), std::sqrt(2.0) / 2);
  const std::vector<std::size_t> only = {1};
  EXPECT_DOUBLE_EQ(set_distance(z, s, only), std::sqrt(2.0));
  EXPECT_THROW(set_distance(z, Matrix(0, 2)), std::invalid_argument);
}

TEST(DistanceReport, IdenticalFeaturesAreZero) {
  const auto ds = make_dataset(Matrix(6, 1), {0, 0, 0, 1, 1, 2}, 3);
  const Matrix f(6, 2, std::sqrt(0.5));
  const std::vector<Split> splits = {Split::Many, Split::Medium, Split::Few};
  const auto r = distance_report(f, ds, model_from({0, 0, 1, 2, 2, 3}), splits);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(r.at(kAllSplits, static_cast<DistanceKind>(k)), 0.0);
  // Few class has a single sample: no intra-class set.
  EXPECT_TRUE(std::isnan(r.at(2, DistanceKind::IntraClass)));
}

TEST(DistanceReport, FourPointBruteForce) {
  // Class 0 = {a, b, c}, subclasses {a, b}, {c}; class 1 = {d}.
  const auto pts = std::vector<double>{0.0, 0.5, 2.0, 3.0};
  Matrix f(4, 2);
  for (std::size_t i = 0; i < 4; ++i) f(i, 0) = std::cos(pts[i]), f(i, 1) = std::sin(pts[i]);
  const auto ds = make_dataset(Matrix(4, 1), {0, 0, 0, 1}, 2);
  const std::vector<Split> splits = {Split::Many, Split::Few};
  const auto r = distance_report(f, ds, model_from({0, 0, 1, 2}), splits);
  auto d = [&](std::size_t i, std::size_t j) { return euclidean(f.row(i), f.row(j)); };
  EXPECT_NEAR(r.at(0, DistanceKind::IntraSubclass), (d(0, 1) + d(1, 0)) / 2, 1e-15);
  EXPECT_NEAR(r.at(0, DistanceKind::InterSubclass), (d(0, 2) + d(1, 2) + (d(2, 0) + d(2, 1)) / 2) / 3, 1e-15);
  EXPECT_NEAR(r.at(0, DistanceKind::IntraClass),
              ((d(0, 1) + d(0, 2)) / 2 + (d(1, 0) + d(1, 2)) / 2 + (d(2, 0) + d(2, 1)) / 2) / 3, 1e-15);
  EXPECT_NEAR(r.at(0, DistanceKind::InterClass), (d(0, 3) + d(1, 3) + d(2, 3)) / 3, 1e-15);
  EXPECT_NEAR(r.at(2, DistanceKind::InterClass), (d(3, 0) + d(3, 1) + d(3, 2)) / 3, 1e-15);
  EXPECT_NEAR(r.at(kAllSplits, DistanceKind::InterClass),
              (d(0, 3) + d(1, 3) + d(2, 3) + (d(3, 0) + d(3, 1) + d(3, 2)) / 3) / 4, 1e-15);
  EXPECT_EQ(r.samples[kAllSplits][0], 2u);
}

TEST(DistanceReport, ValuesWithinChordRangeAndCsv) {
  std::mt19937_64 rng(1);
  const Matrix f = oracle::random_unit_rows(rng, 30, 4);
  std::vector<int> y, sub;
  for (int i = 0; i < 30; ++i) y.push_back(i < 15 ? 0 : i < 25 ? 1 : 2), sub.push_back(i / 5);
  const auto ds = make_dataset(Matrix(30, 1), y, 3);
  const std::vector<Split> splits = {Split::Many, Split::Medium, Split::Few};
  const auto r = distance_report(f, ds, model_from(sub), splits, DistanceOptions{true, 3});
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t k = 0; k < 4; ++k) {
      // The Few class is a single subclass.
      if (s == 2 && k == 1) {
        EXPECT_TRUE(std::isnan(r.value[s][k]));
        continue;
      }
      EXPECT_GE(r.value[s][k], 0.0);
      EXPECT_LE(r.value[s][k], 2.0);
    }
  EXPECT_EQ(r.samples[0][3], 5u);
  std::ostringstream os;
  write_csv(r, os);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 17);
  EXPECT_EQ(text.rfind("split,statistic,value\nMany,intra_subclass,", 0), 0u);
}

TEST(Ari, KnownCases) {
  const std::vector<int> a = {0, 0, 1, 1, 2, 2};
  EXPECT_DOUBLE_EQ(adjusted_rand_index(a, a), 1.0);
  EXPECT_DOUBLE_EQ(adjusted_rand_index(a, std::vector<int>{5, 5, 3, 3, 9, 9}), 1.0);
  EXPECT_DOUBLE_EQ(adjusted_rand_index(std::vector<int>{0, 0, 0}, std::vector<int>{1, 1, 1}), 1.0);
  EXPECT_THROW(adjusted_rand_index(a, std::vector<int>{0}), std::invalid_argument);
}

TEST(Ari, MatchesPairCountingAndNearZeroForRandom) {
  std::mt19937_64 rng(2);
  for (int seed = 0; seed < 20; ++seed) {
    std::vector<int> a(300), b(300);
    for (auto& v : a) v = static_cast<int>(rng() % 4);
    for (auto& v : b) v = static_cast<int>(rng() % 3);
    const double ari = adjusted_rand_index(a, b);
    EXPECT_NEAR(ari, pair_count_ari(a, b), 1e-12);
    EXPECT_LT(std::abs(ari), 0.1);
  }
}

TEST(Recovery, SkipsClassesAtOrBelowCapacity) {
  auto ds = make_dataset(Matrix(7, 1), {0, 0, 0, 0, 0, 1, 1}, 2);
  ds.true_subclusters = std::vector<int>{0, 0, 1, 1, 1, 0, 0};
  ClusterModel m = model_from({0, 0, 1, 1, 1, 2, 2});
  m.capacity = 3;
  const auto rec = subclass_recovery(m, ds);
  ASSERT_EQ(rec.size(), 1u);
  EXPECT_EQ(rec[0].class_id, 0);
  EXPECT_DOUBLE_EQ(rec[0].ari, 1.0);
  EXPECT_DOUBLE_EQ(mean_recovery(rec), 1.0);
  EXPECT_TRUE(std::isnan(mean_recovery({})));
}

TEST(Probe, SeparableDataReachesFullAccuracy) {
  const auto ds = make_dataset(Matrix(6, 1), {0, 0, 0, 1, 1, 2}, 3);
  Matrix f(6, 3);
  for (std::size_t i = 0; i < 6; ++i) f(i, static_cast<std::size_t>(ds.labels[i])) = 1.0;
  const auto probe = train_probe(f, ds, ProbeConfig{200, 0.5, 8, 1});
  const std::vector<Split> splits = {Split::Many, Split::Medium, Split::Few};
  const auto acc = evaluate_probe(probe, f, ds, splits);
  for (std::size_t s = 0; s < 4; ++s) EXPECT_DOUBLE_EQ(acc.top1[s], 1.0);
}

TEST(Probe, ZeroRateLeavesInitialWeights) {
  std::mt19937_64 rng(3);
  const auto ds = make_dataset(Matrix(6, 1), {0, 0, 0, 1, 1, 2}, 3);
  const auto probe = train_probe(oracle::random_unit_rows(rng, 6, 3), ds, ProbeConfig{5, 0.0, 4, 1});
  EXPECT_EQ(probe, (LinearProbe{Matrix(3, 3), std::vector<double>(3, 0.0)}));
}

TEST(Probe, CrossEntropyGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const Matrix f = oracle::random_unit_rows(rng, 8, 3);
  const std::vector<int> y = {0, 1, 2, 0, 1, 2, 0, 1};
  const std::vector<std::size_t> rows = {0, 1, 2, 3, 4, 5, 6, 7};
  LinearProbe p{oracle::random_unit_rows(rng, 3, 3), {0.1, -0.2, 0.3}};
  const auto g = probe_loss(p, f, y, rows);
  const auto fd = oracle::finite_difference(
      [&](const oracle::Vec& w) {
        LinearProbe q = p;
        q.weights.data = w;
        // Literal mean of -log softmax.
        double s = 0;
        for (auto i : rows) {
          double den = 0, own = 0;
          for (std::size_t c = 0; c < 3; ++c) {
            const double l = std::exp(q.bias[c] + dot(q.weights.row(c), f.row(i)));
            den += l;
            if (static_cast<int>(c) == y[i]) own = l;
          }
          s -= std::log(own / den);
        }
        return s / 8.0;
      },
      p.weights.data);
  EXPECT_LT(oracle::max_relative_error(g.weights.data, fd), 1e-6);
}

TEST(EvaluateProbe, ConstantPredictorAndTallies) {
  // Bias-only probe that always predicts class 0.
  LinearProbe p{Matrix(2, 2), {1.0, 0.0}};
  const auto eval = make_dataset(Matrix(4, 2), {0, 0, 1, 1}, 2);
  const std::vector<Split> splits = {Split::Many, Split::Few};
  const auto acc = evaluate_probe(p, Matrix(4, 2), eval, splits);
  EXPECT_DOUBLE_EQ(acc.all(), 0.5);
  EXPECT_DOUBLE_EQ(acc.many(), 1.0);
  EXPECT_DOUBLE_EQ(acc.few(), 0.0);
  EXPECT_TRUE(std::isnan(acc.medium()));
  EXPECT_EQ(acc.samples[kAllSplits], 4u);
  std::ostringstream os;
  write_csv(acc, os);
  EXPECT_EQ(os.str(), "split,statistic,value\nMany,top1_accuracy,1\nMedium,top1_accuracy,nan\nFew,top1_accuracy,0\n"
                      "All,top1_accuracy,0.5\n");
}
