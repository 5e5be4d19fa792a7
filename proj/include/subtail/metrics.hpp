#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "subtail/clustering.hpp"
#include "subtail/common.hpp"
#include "subtail/dataset.hpp"

namespace subtail {

// ---------------------------------------------------------------------------
// Feature distances

/// Mean Euclidean distance from z to the rows of `set` selected by `members`.
inline double set_distance(std::span<const double> z, const Matrix& set, std::span<const std::size_t> members) {
  if (members.empty()) throw std::invalid_argument("set_distance: empty set");
  double s = 0.0;
  for (auto j : members) s += euclidean(z, set.row(j));
  return s / static_cast<double>(members.size());
}

inline double set_distance(std::span<const double> z, const Matrix& set) {
  if (set.rows == 0) throw std::invalid_argument("set_distance: empty set");
  double s = 0.0;
  for (std::size_t j = 0; j < set.rows; ++j) s += euclidean(z, set.row(j));
  return s / static_cast<double>(set.rows);
}

enum class DistanceKind { IntraSubclass = 0, InterSubclass = 1, IntraClass = 2, InterClass = 3 };
inline constexpr std::array<const char*, 4> kDistanceNames = {"intra_subclass", "inter_subclass", "intra_class",
                                                              "inter_class"};
// Row order of reports: Many, Medium, Few, All.
inline constexpr std::array<const char*, 4> kSplitNames = {"Many", "Medium", "Few", "All"};
inline constexpr std::size_t kAllSplits = 3;

/// Per-split means of the four per-sample distances. NaN marks a split with
/// no sample that has the corresponding reference set.
struct DistanceReport {
  std::array<std::array<double, 4>, 4> value{};
  std::array<std::array<std::size_t, 4>, 4> samples{};

  double at(std::size_t split, DistanceKind k) const { return value[split][static_cast<std::size_t>(k)]; }
};

struct DistanceOptions {
  // Subsample Many and Medium anchors down to the Few-split sample count.
  bool subsample_to_few = false;
  std::uint64_t seed = 0;
};

/// For sample i with class P_i (others of its class) and subclass M_i:
/// intra-subclass D(z_i, M_i), inter-subclass D(z_i, P_i \ M_i),
/// intra-class D(z_i, P_i), inter-class D(z_i, samples of other classes).
/// Samples whose reference set is empty are skipped for that statistic.
inline DistanceReport distance_report(const Matrix& features, const LongTailDataset& ds, const ClusterModel& clusters,
                                      std::span<const Split> class_splits, const DistanceOptions& opts = {}) {
  const std::size_t n = ds.size();
  if (features.rows != n || clusters.assignments.size() != n || class_splits.size() != ds.num_classes())
    throw std::invalid_argument("distance_report: inputs do not cover the dataset");

  std::vector<bool> anchor(n, true);
  if (opts.subsample_to_few) {
    std::array<std::vector<std::size_t>, 3> by_split;
    for (std::size_t i = 0; i < n; ++i)
      by_split[static_cast<std::size_t>(class_splits[static_cast<std::size_t>(ds.labels[i])])].push_back(i);
    const std::size_t target = by_split[static_cast<std::size_t>(Split::Few)].size();
    std::mt19937_64 rng(opts.seed);
    for (std::size_t s = 0; s < 2; ++s) {
      if (by_split[s].size() <= target) continue;
      std::vector<std::size_t> keep;
      std::sample(by_split[s].begin(), by_split[s].end(), std::back_inserter(keep),
                  static_cast<std::ptrdiff_t>(target), rng);
      for (auto i : by_split[s]) anchor[i] = false;
      for (auto i : keep) anchor[i] = true;
    }
  }

  std::array<std::array<double, 4>, 4> sums{};
  DistanceReport rep;
  for (std::size_t i = 0; i < n; ++i) {
    if (!anchor[i]) continue;
    std::array<double, 4> acc{};
    std::array<std::size_t, 4> cnt{};
    const auto zi = features.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = euclidean(zi, features.row(j));
      if (ds.labels[j] != ds.labels[i]) {
        acc[3] += d, ++cnt[3];
        continue;
      }
      acc[2] += d, ++cnt[2];
      const std::size_t k = clusters.assignments[j] == clusters.assignments[i] ? 0 : 1;
      acc[k] += d, ++cnt[k];
    }
    const auto split = static_cast<std::size_t>(class_splits[static_cast<std::size_t>(ds.labels[i])]);
    for (std::size_t k = 0; k < 4; ++k) {
      if (cnt[k] == 0) continue;
      const double mean = acc[k] / static_cast<double>(cnt[k]);
      for (std::size_t s : {split, kAllSplits}) {
        sums[s][k] += mean;
        ++rep.samples[s][k];
      }
    }
  }
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t k = 0; k < 4; ++k)
      rep.value[s][k] = rep.samples[s][k] ? sums[s][k] / static_cast<double>(rep.samples[s][k])
                                          : std::numeric_limits<double>::quiet_NaN();
  return rep;
}

inline void write_csv(const DistanceReport& rep, std::ostream& os) {
  os << "split,statistic,value\n";
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t k = 0; k < 4; ++k)
      os << kSplitNames[s] << ',' << kDistanceNames[k] << ',' << format_double(rep.value[s][k]) << '\n';
}

// ---------------------------------------------------------------------------
// Subclass recovery

/// Adjusted Rand index. Returns 1 when the chance-corrected denominator
/// vanishes (both partitions trivial).
inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw std::invalid_argument("adjusted_rand_index: length mismatch");
  auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
  std::map<std::pair<int, int>, std::size_t> joint;
  std::map<int, std::size_t> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++joint[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [k, v] : joint) index += comb2(static_cast<double>(v));
  for (const auto& [k, v] : ra) sa += comb2(static_cast<double>(v));
  for (const auto& [k, v] : rb) sb += comb2(static_cast<double>(v));
  const double total = comb2(static_cast<double>(a.size()));
  const double expected = total > 0.0 ? sa * sb / total : 0.0;
  const double maximum = 0.5 * (sa + sb);
  if (maximum - expected == 0.0) return 1.0;
  return (index - expected) / (maximum - expected);
}

struct ClassRecovery {
  int class_id = 0;
  double ari = 0.0;
};

/// ARI between recovered subclasses and generator components, for every class
/// that was split.
inline std::vector<ClassRecovery> subclass_recovery(const ClusterModel& clusters, const LongTailDataset& ds) {
  if (!ds.true_subclusters) throw std::invalid_argument("subclass_recovery: dataset has no ground-truth subclusters");
  if (clusters.assignments.size() != ds.size()) throw std::invalid_argument("subclass_recovery: size mismatch");
  const auto members = detail::class_members(ds);
  std::vector<ClassRecovery> out;
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    if (ds.class_counts[c] <= clusters.capacity) continue;
    std::vector<int> got, truth;
    for (auto i : members[c]) {
      got.push_back(clusters.assignments[i]);
      truth.push_back((*ds.true_subclusters)[i]);
    }
    out.push_back({static_cast<int>(c), adjusted_rand_index(got, truth)});
  }
  return out;
}

inline double mean_recovery(const std::vector<ClassRecovery>& r) {
  if (r.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (const auto& x : r) s += x.ari;
  return s / static_cast<double>(r.size());
}

// ---------------------------------------------------------------------------
// Linear probe

struct LinearProbe {
  Matrix weights;  // one row w_c per class
  std::vector<double> bias;

  bool operator==(const LinearProbe&) const = default;
};

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.5;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct ProbeGradient {
  double loss = 0.0;
  Matrix weights;
  std::vector<double> bias;
};

/// Mean softmax cross-entropy over the listed rows and its gradient.
inline ProbeGradient probe_loss(const LinearProbe& probe, const Matrix& features, std::span<const int> labels,
                                std::span<const std::size_t> rows) {
  const std::size_t classes = probe.weights.rows;
  ProbeGradient g{0.0, Matrix(classes, probe.weights.cols), std::vector<double>(classes, 0.0)};
  std::vector<double> logits(classes);
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (auto i : rows) {
    const auto z = features.row(i);
    double peak = -INFINITY;
    for (std::size_t c = 0; c < classes; ++c) {
      logits[c] = probe.bias[c] + dot(probe.weights.row(c), z);
      peak = std::max(peak, logits[c]);
    }
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - peak);
    const double lse = peak + std::log(sum);
    const auto y = static_cast<std::size_t>(labels[i]);
    g.loss += (lse - logits[y]) * inv;
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(logits[c] - lse) - (c == y ? 1.0 : 0.0);
      g.bias[c] += p * inv;
      auto w = g.weights.row(c);
      for (std::size_t t = 0; t < z.size(); ++t) w[t] += p * inv * z[t];
    }
  }
  return g;
}

/// Softmax regression on frozen features, SGD from zero weights. Every
/// minibatch draw picks a class uniformly, then a sample of that class
/// uniformly.
inline LinearProbe train_probe(const Matrix& features, const LongTailDataset& ds, const ProbeConfig& cfg) {
  if (features.rows != ds.size()) throw std::invalid_argument("train_probe: feature rows must equal dataset size");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_probe: batch size must be >= 1");
  const std::size_t classes = ds.num_classes();
  LinearProbe probe{Matrix(classes, features.cols), std::vector<double>(classes, 0.0)};
  const auto members = detail::class_members(ds);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_class(0, classes - 1);
  const std::size_t steps = (ds.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<std::size_t> rows(cfg.batch_size);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t s = 0; s < steps; ++s) {
      for (auto& r : rows) {
        const auto& m = members[pick_class(rng)];
        r = m[std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng)];
      }
      const auto g = probe_loss(probe, features, ds.labels, rows);
      for (std::size_t k = 0; k < probe.weights.data.size(); ++k) probe.weights.data[k] -= cfg.lr * g.weights.data[k];
      for (std::size_t c = 0; c < classes; ++c) probe.bias[c] -= cfg.lr * g.bias[c];
    }
  }
  return probe;
}

inline int predict(const LinearProbe& probe, std::span<const double> z) {
  int best = 0;
  double top = -INFINITY;
  for (std::size_t c = 0; c < probe.weights.rows; ++c) {
    const double s = probe.bias[c] + dot(probe.weights.row(c), z);
    if (s > top) top = s, best = static_cast<int>(c);
  }
  return best;
}

/// Top-1 accuracy per split (Many, Medium, Few, All); NaN for an empty split.
struct ProbeAccuracy {
  std::array<double, 4> top1{};
  std::array<std::size_t, 4> samples{};

  double many() const { return top1[0]; }
  double medium() const { return top1[1]; }
  double few() const { return top1[2]; }
  double all() const { return top1[3]; }
};

/// class_splits comes from the training set's class counts, so an evaluation
/// set with different counts is scored against the training split.
inline ProbeAccuracy evaluate_probe(const LinearProbe& probe, const Matrix& features, const LongTailDataset& eval,
                                    std::span<const Split> class_splits) {
  if (features.rows != eval.size()) throw std::invalid_argument("evaluate_probe: feature rows must equal dataset size");
  if (class_splits.size() != probe.weights.rows) throw std::invalid_argument("evaluate_probe: split table size");
  std::array<std::size_t, 4> hit{};
  ProbeAccuracy acc;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto s = static_cast<std::size_t>(class_splits[static_cast<std::size_t>(eval.labels[i])]);
    const bool ok = predict(probe, features.row(i)) == eval.labels[i];
    for (std::size_t k : {s, kAllSplits}) {
      ++acc.samples[k];
      if (ok) ++hit[k];
    }
  }
  for (std::size_t k = 0; k < 4; ++k)
    acc.top1[k] = acc.samples[k] ? static_cast<double>(hit[k]) / static_cast<double>(acc.samples[k])
                                 : std::numeric_limits<double>::quiet_NaN();
  return acc;
}

inline void write_csv(const ProbeAccuracy& acc, std::ostream& os) {
  os << "split,statistic,value\n";
  for (std::size_t s = 0; s < 4; ++s) os << kSplitNames[s] << ",top1_accuracy," << format_double(acc.top1[s]) << '\n';
}

inline void write_csv(const std::vector<ClassRecovery>& rec, std::ostream& os) {
  os << "class,ari\n";
  for (const auto& r : rec) os << r.class_id << ',' << format_double(r.ari) << '\n';
}

}  // namespace subtail
