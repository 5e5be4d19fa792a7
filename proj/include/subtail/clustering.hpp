#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "subtail/common.hpp"
#include "subtail/dataset.hpp"

namespace subtail {

struct ClusterConfig {
  std::size_t delta = 10;
  // Number of assignment rounds; round 0 uses farthest-point centers.
  std::size_t iterations = 10;
  // Kept in run manifests. Center initialization is deterministic, so the
  // value does not change any assignment.
  std::uint64_t seed = 0;
};

/// Subclass partition of a dataset. Subclass ids are global and contiguous per
/// class, in class order.
struct ClusterModel {
  std::vector<int> assignments;
  std::vector<int> subclass_of_class;
  Matrix centers;
  std::size_t capacity = 0;
  std::vector<std::size_t> per_class_cluster_count;
  // True for subclasses produced by splitting a class larger than capacity.
  std::vector<bool> clustered;

  std::size_t num_subclasses() const { return subclass_of_class.size(); }

  std::vector<std::size_t> subclass_sizes() const {
    std::vector<std::size_t> sizes(num_subclasses(), 0);
    for (int g : assignments) ++sizes[static_cast<std::size_t>(g)];
    return sizes;
  }

  bool operator==(const ClusterModel&) const = default;
};

struct ClusterStats {
  double max_size = 0, min_size = 0, mean_size = 0, std_size = 0, size_imbalance_ratio = 0;
  std::size_t count = 0;
};

/// M = max(n_C, delta).
inline std::size_t capacity_threshold(std::size_t tail_count, std::size_t delta) {
  if (tail_count < 1 || delta < 1) throw std::invalid_argument("capacity_threshold: arguments must be >= 1");
  return std::max(tail_count, delta);
}

inline std::size_t cluster_count_for(std::size_t class_size, std::size_t capacity) {
  return (class_size + capacity - 1) / capacity;
}

struct ClassClustering {
  std::vector<int> ids;
  Matrix centers;
};

namespace detail {

// Farthest-point seeding on the sphere: start from the sample farthest from the
// class mean, then repeatedly take the sample whose best similarity to the
// chosen centers is lowest. Ties go to the lowest index.
inline Matrix farthest_point_centers(const Matrix& z, std::size_t m) {
  const std::size_t n = z.rows;
  std::vector<double> mean(z.cols, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < z.cols; ++t) mean[t] += z(i, t);
  for (double& v : mean) v /= static_cast<double>(n);

  std::size_t first = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = euclidean(z.row(i), mean);
    if (d > best) best = d, first = i;
  }
  Matrix centers(m, z.cols);
  std::vector<bool> taken(n, false);
  std::vector<double> closest(n, -2.0);
  std::size_t pick = first;
  for (std::size_t j = 0; j < m; ++j) {
    taken[pick] = true;
    std::copy_n(z.row(pick).begin(), z.cols, centers.row(j).begin());
    if (j + 1 == m) break;
    for (std::size_t i = 0; i < n; ++i) closest[i] = std::max(closest[i], dot(z.row(i), centers.row(j)));
    double lowest = 3.0;
    for (std::size_t i = 0; i < n; ++i)
      if (!taken[i] && closest[i] < lowest) lowest = closest[i], pick = i;
  }
  return centers;
}

// Greedy assignment: repeatedly take the globally most similar
// (unassigned sample, open center) pair; a center closes at `capacity`.
// Validity of a pair only ever flips from valid to invalid, so scanning all
// pairs once in descending order reproduces the repeated argmax exactly.
inline std::vector<int> greedy_capacity_assign(const Matrix& z, const Matrix& centers, std::size_t capacity) {
  const std::size_t n = z.rows, m = centers.rows;
  std::vector<double> sim(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) sim[i * m + j] = dot(z.row(i), centers.row(j));
  std::vector<std::size_t> order(n * m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sim[a] != sim[b]) return sim[a] > sim[b];
    return a < b;  // sample index first, then center index
  });
  std::vector<int> ids(n, -1);
  std::vector<std::size_t> fill(m, 0);
  std::size_t remaining = n;
  for (std::size_t p : order) {
    const std::size_t i = p / m, j = p % m;
    if (ids[i] >= 0 || fill[j] >= capacity) continue;
    ids[i] = static_cast<int>(j);
    ++fill[j];
    if (--remaining == 0) break;
  }
  return ids;
}

// Renormalized member means. An empty cluster is re-seeded with the sample
// least similar to its own center; a zero-length mean keeps the old center.
inline void update_centers(const Matrix& z, const std::vector<int>& ids, Matrix& centers) {
  const std::size_t m = centers.rows;
  Matrix sums(m, z.cols);
  std::vector<std::size_t> sizes(m, 0);
  for (std::size_t i = 0; i < z.rows; ++i) {
    const auto j = static_cast<std::size_t>(ids[i]);
    ++sizes[j];
    for (std::size_t t = 0; t < z.cols; ++t) sums(j, t) += z(i, t);
  }
  std::vector<bool> reseeded(z.rows, false);
  for (std::size_t j = 0; j < m; ++j) {
    if (sizes[j] == 0) {
      std::size_t worst = 0;
      double lowest = 3.0;
      for (std::size_t i = 0; i < z.rows; ++i) {
        if (reseeded[i]) continue;
        const double s = dot(z.row(i), centers.row(static_cast<std::size_t>(ids[i])));
        if (s < lowest) lowest = s, worst = i;
      }
      reseeded[worst] = true;
      std::copy_n(z.row(worst).begin(), z.cols, centers.row(j).begin());
      continue;
    }
    const double n = norm2(sums.row(j));
    if (n < 1e-12) continue;
    for (std::size_t t = 0; t < z.cols; ++t) centers(j, t) = sums(j, t) / n;
  }
}

inline void require_unit_rows(const Matrix& z, const char* who) {
  if (!rows_unit_norm(z, 1e-6)) throw std::invalid_argument(std::string(who) + ": feature rows must be unit-norm");
}

}  // namespace detail

/// Subclass-balancing clustering of one class: ceil(n_c / M) clusters, none
/// larger than M. Runs exactly config.iterations assignment rounds.
inline ClassClustering cluster_class(const Matrix& features, std::size_t capacity, const ClusterConfig& config) {
  detail::require_unit_rows(features, "cluster_class");
  if (capacity < 1) throw std::invalid_argument("cluster_class: capacity must be >= 1");
  if (features.rows <= capacity)
    throw std::invalid_argument("cluster_class: class size must exceed capacity (smaller classes are not split)");
  if (config.iterations < 1) throw std::invalid_argument("cluster_class: iterations must be >= 1");
  const std::size_t m = cluster_count_for(features.rows, capacity);

  ClassClustering out;
  out.centers = detail::farthest_point_centers(features, m);
  out.ids = detail::greedy_capacity_assign(features, out.centers, capacity);
  for (std::size_t round = 1; round < config.iterations; ++round) {
    detail::update_centers(features, out.ids, out.centers);
    out.ids = detail::greedy_capacity_assign(features, out.centers, capacity);
  }
  detail::update_centers(features, out.ids, out.centers);
  return out;
}

/// Lloyd's k-means on the sphere with the same farthest-point seeding and no
/// capacity limit. Only used as the balance baseline.
inline std::vector<int> baseline_kmeans(const Matrix& features, std::size_t k, std::size_t iterations) {
  if (k < 1) throw std::invalid_argument("baseline_kmeans: k must be >= 1");
  if (features.rows < k) throw std::invalid_argument("baseline_kmeans: fewer samples than clusters");
  if (iterations < 1) throw std::invalid_argument("baseline_kmeans: iterations must be >= 1");
  detail::require_unit_rows(features, "baseline_kmeans");
  Matrix centers = detail::farthest_point_centers(features, k);
  std::vector<int> ids(features.rows, 0);
  auto assign = [&] {
    for (std::size_t i = 0; i < features.rows; ++i) {
      double best = -3.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double s = dot(features.row(i), centers.row(j));
        if (s > best) best = s, ids[i] = static_cast<int>(j);
      }
    }
  };
  assign();
  for (std::size_t round = 1; round < iterations; ++round) {
    Matrix sums(k, features.cols);
    for (std::size_t i = 0; i < features.rows; ++i)
      for (std::size_t t = 0; t < features.cols; ++t) sums(static_cast<std::size_t>(ids[i]), t) += features(i, t);
    for (std::size_t j = 0; j < k; ++j) {
      const double n = norm2(sums.row(j));
      if (n < 1e-12) continue;  // empty or cancelling cluster keeps its center
      for (std::size_t t = 0; t < features.cols; ++t) centers(j, t) = sums(j, t) / n;
    }
    assign();
  }
  return ids;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> class_members(const LongTailDataset& ds) {
  std::vector<std::vector<std::size_t>> members(ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) members[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  return members;
}

inline std::vector<double> normalized_mean(const Matrix& z) {
  std::vector<double> mean(z.cols, 0.0);
  for (std::size_t i = 0; i < z.rows; ++i)
    for (std::size_t t = 0; t < z.cols; ++t) mean[t] += z(i, t);
  const double n = norm2(mean);
  if (n < 1e-12) return {z.row(0).begin(), z.row(0).end()};
  for (double& v : mean) v /= n;
  return mean;
}

// Builds a ClusterModel from per-class local ids, compacting away empty local
// clusters and assigning global ids in class order.
inline ClusterModel assemble(const Matrix& features, const LongTailDataset& ds, std::size_t capacity,
                             const std::vector<std::vector<std::size_t>>& members,
                             const std::vector<std::vector<int>>& local_ids) {
  ClusterModel model;
  model.capacity = capacity;
  model.assignments.assign(ds.size(), -1);
  model.per_class_cluster_count.assign(ds.num_classes(), 0);
  std::vector<std::vector<double>> centers;
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    const auto& idx = members[c];
    const auto& local = local_ids[c];
    const int width = local.empty() ? 1 : *std::max_element(local.begin(), local.end()) + 1;
    std::vector<int> remap(static_cast<std::size_t>(width), -1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const int l = local.empty() ? 0 : local[r];
      if (remap[static_cast<std::size_t>(l)] < 0) remap[static_cast<std::size_t>(l)] = 0;
    }
    int next = static_cast<int>(model.subclass_of_class.size());
    for (int& r : remap)
      if (r == 0) r = next++;
    const std::size_t added = static_cast<std::size_t>(next) - model.subclass_of_class.size();
    model.per_class_cluster_count[c] = added;
    for (std::size_t a = 0; a < added; ++a) {
      model.subclass_of_class.push_back(static_cast<int>(c));
      model.clustered.push_back(idx.size() > capacity);
    }
    std::vector<std::vector<std::size_t>> groups(added);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const int g = remap[static_cast<std::size_t>(local.empty() ? 0 : local[r])];
      model.assignments[idx[r]] = g;
      groups[static_cast<std::size_t>(g) - (model.subclass_of_class.size() - added)].push_back(idx[r]);
    }
    for (auto& grp : groups) centers.push_back(normalized_mean(select_rows(features, grp)));
  }
  model.centers = Matrix(centers.size(), features.cols);
  for (std::size_t j = 0; j < centers.size(); ++j)
    std::copy(centers[j].begin(), centers[j].end(), model.centers.row(j).begin());
  return model;
}

}  // namespace detail

/// Splits every class larger than M = max(n_C, delta) into capacity-bounded
/// subclasses; smaller classes pass through as a single subclass. Classes are
/// clustered in parallel; the result does not depend on the thread count.
inline ClusterModel cluster_dataset(const Matrix& features, const LongTailDataset& ds, const ClusterConfig& config) {
  if (features.rows != ds.size()) throw std::invalid_argument("cluster_dataset: feature rows must equal dataset size");
  detail::require_unit_rows(features, "cluster_dataset");
  const std::size_t capacity = capacity_threshold(ds.class_counts.back(), config.delta);
  const auto members = detail::class_members(ds);
  std::vector<std::vector<int>> local(ds.num_classes());
  parallel_for(ds.num_classes(), [&](std::size_t c) {
    if (members[c].size() <= capacity) return;
    local[c] = cluster_class(select_rows(features, members[c]), capacity, config).ids;
  });
  return detail::assemble(features, ds, capacity, members, local);
}

/// Same class split as cluster_dataset (classes above M get ceil(n_c/M)
/// clusters) but with unconstrained Lloyd's k-means. Empty clusters are dropped.
inline ClusterModel baseline_cluster_dataset(const Matrix& features, const LongTailDataset& ds,
                                             const ClusterConfig& config) {
  if (features.rows != ds.size()) throw std::invalid_argument("baseline_cluster_dataset: size mismatch");
  const std::size_t capacity = capacity_threshold(ds.class_counts.back(), config.delta);
  const auto members = detail::class_members(ds);
  std::vector<std::vector<int>> local(ds.num_classes());
  parallel_for(ds.num_classes(), [&](std::size_t c) {
    if (members[c].size() <= capacity) return;
    local[c] = baseline_kmeans(select_rows(features, members[c]), cluster_count_for(members[c].size(), capacity),
                               config.iterations);
  });
  return detail::assemble(features, ds, capacity, members, local);
}

/// Size statistics over subclasses of split classes (pass-through classes are
/// included only on request). Empty when there is nothing to summarize.
inline std::optional<ClusterStats> cluster_stats(const ClusterModel& model, bool include_singletons = false) {
  const auto sizes = model.subclass_sizes();
  std::vector<double> picked;
  for (std::size_t g = 0; g < sizes.size(); ++g)
    if ((include_singletons || model.clustered[g]) && sizes[g] > 0) picked.push_back(static_cast<double>(sizes[g]));
  if (picked.empty()) return std::nullopt;
  ClusterStats s;
  s.count = picked.size();
  s.max_size = *std::max_element(picked.begin(), picked.end());
  s.min_size = *std::min_element(picked.begin(), picked.end());
  s.mean_size = std::accumulate(picked.begin(), picked.end(), 0.0) / static_cast<double>(picked.size());
  double var = 0.0;
  for (double v : picked) var += (v - s.mean_size) * (v - s.mean_size);
  s.std_size = std::sqrt(var / static_cast<double>(picked.size()));
  s.size_imbalance_ratio = s.max_size / s.min_size;
  return s;
}

// ---------------------------------------------------------------------------
// CSV: header, `sample_index,class,subclass` rows, then a `# centers` section
// of `subclass,class,c_1,...,c_d` rows.

inline void save_clusters(const ClusterModel& model, const LongTailDataset& ds, std::ostream& os) {
  os << "# capacity=" << model.capacity << '\n';
  os << "sample_index,class,subclass\n";
  for (std::size_t i = 0; i < model.assignments.size(); ++i)
    os << i << ',' << ds.labels[i] << ',' << model.assignments[i] << '\n';
  os << "# centers\n";
  for (std::size_t g = 0; g < model.num_subclasses(); ++g) {
    os << g << ',' << model.subclass_of_class[g];
    for (double v : model.centers.row(g)) os << ',' << format_double(v);
    os << '\n';
  }
}

inline ClusterModel load_clusters(std::istream& is, const LongTailDataset& ds) {
  auto fail = [](const std::string& msg) { return std::runtime_error("cluster file: " + msg); };
  std::string line;
  ClusterModel model;
  if (!std::getline(is, line) || line.rfind("# capacity=", 0) != 0) throw fail("missing capacity line");
  model.capacity = std::stoull(line.substr(11));
  if (!std::getline(is, line) || line != "sample_index,class,subclass") throw fail("missing header");
  model.assignments.assign(ds.size(), -1);
  std::size_t rows = 0;
  while (std::getline(is, line) && line != "# centers") {
    std::istringstream ls(line);
    long long i = 0, c = 0, g = 0;
    char c1 = 0, c2 = 0;
    if (!(ls >> i >> c1 >> c >> c2 >> g) || c1 != ',' || c2 != ',') throw fail("bad row '" + line + "'");
    if (i < 0 || static_cast<std::size_t>(i) >= ds.size() || c != ds.labels[static_cast<std::size_t>(i)] || g < 0)
      throw fail("row does not match dataset: '" + line + "'");
    model.assignments[static_cast<std::size_t>(i)] = static_cast<int>(g);
    ++rows;
  }
  if (rows != ds.size()) throw fail("expected " + std::to_string(ds.size()) + " rows");
  std::vector<std::vector<double>> centers;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) parts.push_back(tok);
    if (parts.size() < 3) throw fail("bad center row");
    if (std::stoul(parts[0]) != centers.size()) throw fail("center rows out of order");
    model.subclass_of_class.push_back(std::stoi(parts[1]));
    std::vector<double> c;
    for (std::size_t k = 2; k < parts.size(); ++k) c.push_back(std::strtod(parts[k].c_str(), nullptr));
    centers.push_back(std::move(c));
  }
  const std::size_t d = centers.empty() ? 0 : centers[0].size();
  model.centers = Matrix(centers.size(), d);
  for (std::size_t g = 0; g < centers.size(); ++g) {
    if (centers[g].size() != d) throw fail("ragged centers");
    std::copy(centers[g].begin(), centers[g].end(), model.centers.row(g).begin());
  }
  model.per_class_cluster_count.assign(ds.num_classes(), 0);
  for (int c : model.subclass_of_class) {
    if (c < 0 || static_cast<std::size_t>(c) >= ds.num_classes()) throw fail("center class out of range");
    ++model.per_class_cluster_count[static_cast<std::size_t>(c)];
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto g = static_cast<std::size_t>(model.assignments[i]);
    if (g >= model.num_subclasses() || model.subclass_of_class[g] != ds.labels[i])
      throw fail("sample " + std::to_string(i) + " assigned to a subclass of another class");
  }
  for (int c : model.subclass_of_class)
    model.clustered.push_back(ds.class_counts[static_cast<std::size_t>(c)] > model.capacity);
  return model;
}

}  // namespace subtail
