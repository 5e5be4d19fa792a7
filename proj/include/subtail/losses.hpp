#pragma once

#include <algorithm>
#include <cmath>
#include <iterator>
#include <random>
#include <span>
#include <vector>

#include "subtail/common.hpp"
#include "subtail/dataset.hpp"

namespace subtail {

/// One contrastive batch: N anchors z_i, one augmented view z~_i per anchor.
/// subclass_ids is only read by sbcl_loss.
struct Batch {
  Matrix anchors;
  Matrix augmented;
  std::vector<int> labels;
  std::vector<int> subclass_ids;

  std::size_t size() const { return labels.size(); }

  // Shape checks plus the unit-norm invariant (1e-6). The loss functions only
  // check shapes: the formulas and their gradients are defined off the sphere
  // too, which finite-difference checks rely on.
  void validate(bool need_subclasses = false) const {
    if (anchors.rows != labels.size() || augmented.rows != labels.size() || anchors.cols != augmented.cols)
      throw std::invalid_argument("Batch: shape mismatch");
    if (need_subclasses && subclass_ids.size() != labels.size())
      throw std::invalid_argument("Batch: subclass ids missing");
    if (!rows_unit_norm(anchors) || !rows_unit_norm(augmented))
      throw std::invalid_argument("Batch: embeddings must be unit-norm");
  }
};

struct LossReport {
  double loss = 0.0;
  Matrix grad_anchors;
  Matrix grad_augmented;
  // SBCL breakdown, unweighted: loss == subclass_term + beta * class_term.
  double subclass_term = 0.0;
  double class_term = 0.0;

  double batch_mean() const { return grad_anchors.rows ? loss / static_cast<double>(grad_anchors.rows) : 0.0; }
};

struct LossConfig {
  double tau1 = 0.1;
  double beta = 0.2;
  std::size_t k_positives = 4;
};

/// Per-class concentration and temperatures refreshed at each cluster update.
struct TemperatureTable {
  std::vector<double> phi;
  std::vector<double> tau2;
  Matrix centroids;
  double alpha = 10.0;
  double tau1 = 0.1;
};

namespace detail {

// Reference to a candidate vector relative to anchor i: j >= 0 is anchor j,
// kAugmented is z~_i.
inline constexpr int kAugmented = -1;

class TermAccumulator {
 public:
  TermAccumulator(const Batch& b, LossReport& out) : b_(b), out_(out) {}

  // -(1/|P|) sum_{p in P} log softmax over `denom` of z_i.v/tau, evaluated at p.
  // Adds weight * gradient into out_. P must be a subset of denom.
  double term(std::size_t i, double tau, std::span<const int> denom, std::span<const int> pos, double weight) {
    const auto zi = b_.anchors.row(i);
    logits_.resize(denom.size());
    double peak = -INFINITY;
    for (std::size_t a = 0; a < denom.size(); ++a) {
      logits_[a] = dot(zi, vec(i, denom[a])) / tau;
      peak = std::max(peak, logits_[a]);
    }
    double sum = 0.0;
    for (double l : logits_) sum += std::exp(l - peak);
    const double lse = peak + std::log(sum);
    double pos_mean = 0.0;
    for (int p : pos) pos_mean += dot(zi, vec(i, p)) / tau;
    pos_mean /= static_cast<double>(pos.size());
    const double value = lse - pos_mean;
    if (weight == 0.0) return value;

    auto gi = out_.grad_anchors.row(i);
    const double inv_p = 1.0 / static_cast<double>(pos.size());
    for (std::size_t a = 0; a < denom.size(); ++a) {
      const double w = weight * std::exp(logits_[a] - lse) / tau;
      const auto v = vec(i, denom[a]);
      auto gv = grad(i, denom[a]);
      for (std::size_t t = 0; t < gi.size(); ++t) {
        gi[t] += w * v[t];
        gv[t] += w * zi[t];
      }
    }
    for (int p : pos) {
      const double w = weight * inv_p / tau;
      const auto v = vec(i, p);
      auto gv = grad(i, p);
      for (std::size_t t = 0; t < gi.size(); ++t) {
        gi[t] -= w * v[t];
        gv[t] -= w * zi[t];
      }
    }
    return value;
  }

 private:
  std::span<const double> vec(std::size_t i, int ref) const {
    return ref == kAugmented ? b_.augmented.row(i) : b_.anchors.row(static_cast<std::size_t>(ref));
  }
  std::span<double> grad(std::size_t i, int ref) {
    return ref == kAugmented ? out_.grad_augmented.row(i) : out_.grad_anchors.row(static_cast<std::size_t>(ref));
  }

  const Batch& b_;
  LossReport& out_;
  std::vector<double> logits_;
};

inline LossReport empty_report(const Batch& b) {
  if (b.anchors.rows != b.labels.size() || b.augmented.rows != b.labels.size() || b.anchors.cols != b.augmented.cols)
    throw std::invalid_argument("loss: batch shape mismatch");
  LossReport r;
  r.grad_anchors = Matrix(b.anchors.rows, b.anchors.cols);
  r.grad_augmented = Matrix(b.augmented.rows, b.augmented.cols);
  return r;
}

// Anchors other than i, plus the augmented view of i.
inline std::vector<int> tilde_v(std::size_t n, std::size_t i) {
  std::vector<int> v;
  v.reserve(n);
  for (std::size_t j = 0; j < n; ++j)
    if (j != i) v.push_back(static_cast<int>(j));
  v.push_back(kAugmented);
  return v;
}

inline std::vector<int> same_label(const std::vector<int>& labels, std::size_t i) {
  std::vector<int> p;
  for (std::size_t j = 0; j < labels.size(); ++j)
    if (j != i && labels[j] == labels[i]) p.push_back(static_cast<int>(j));
  return p;
}

}  // namespace detail

/// Supervised contrastive loss, summed over anchors, with exact gradients for
/// both views.
inline LossReport scl_loss(const Batch& batch, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("scl_loss: tau must be > 0");
  LossReport out = detail::empty_report(batch);
  detail::TermAccumulator acc(batch, out);
  const std::size_t n = batch.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto denom = detail::tilde_v(n, i);
    auto pos = detail::same_label(batch.labels, i);
    pos.push_back(detail::kAugmented);
    out.loss += acc.term(i, tau, denom, pos, 1.0);
  }
  out.subclass_term = out.loss;
  return out;
}

/// k-positive contrastive loss. Each anchor draws k same-class positives
/// without replacement (all of them when fewer exist) plus its own augmented
/// view; draws happen in anchor order from `rng`.
template <class Rng>
LossReport kcl_loss(const Batch& batch, double tau, std::size_t k, Rng& rng) {
  if (!(tau > 0.0)) throw std::invalid_argument("kcl_loss: tau must be > 0");
  if (k < 1) throw std::invalid_argument("kcl_loss: k must be >= 1");
  LossReport out = detail::empty_report(batch);
  detail::TermAccumulator acc(batch, out);
  const std::size_t n = batch.size();
  std::vector<int> pos;
  for (std::size_t i = 0; i < n; ++i) {
    const auto denom = detail::tilde_v(n, i);
    const auto same = detail::same_label(batch.labels, i);
    pos.clear();
    if (same.size() <= k)
      pos = same;
    else
      std::sample(same.begin(), same.end(), std::back_inserter(pos), static_cast<std::ptrdiff_t>(k), rng);
    pos.push_back(detail::kAugmented);
    out.loss += acc.term(i, tau, denom, pos, 1.0);
  }
  out.subclass_term = out.loss;
  return out;
}

/// Bi-granularity loss: a subclass-level term at tau1 over all of V~_i, plus
/// beta times a class-level term at tau2(y_i) that removes same-subclass
/// samples from both positives and denominator.
inline LossReport sbcl_loss(const Batch& batch, const LossConfig& config, const TemperatureTable& temps) {
  if (!(config.tau1 > 0.0)) throw std::invalid_argument("sbcl_loss: tau1 must be > 0");
  if (batch.subclass_ids.size() != batch.size()) throw std::invalid_argument("sbcl_loss: batch has no subclass ids");
  for (int y : batch.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= temps.tau2.size())
      throw std::invalid_argument("sbcl_loss: no tau2 entry for class " + std::to_string(y));
  LossReport out = detail::empty_report(batch);
  detail::TermAccumulator acc(batch, out);
  const std::size_t n = batch.size();
  std::vector<int> m_pos, c_pos, c_denom;
  for (std::size_t i = 0; i < n; ++i) {
    m_pos.clear(), c_pos.clear(), c_denom.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool same_class = batch.labels[j] == batch.labels[i];
      const bool same_sub = same_class && batch.subclass_ids[j] == batch.subclass_ids[i];
      if (same_sub) {
        m_pos.push_back(static_cast<int>(j));
        continue;
      }
      c_denom.push_back(static_cast<int>(j));
      if (same_class) c_pos.push_back(static_cast<int>(j));
    }
    m_pos.push_back(detail::kAugmented);
    c_pos.push_back(detail::kAugmented);
    c_denom.push_back(detail::kAugmented);
    const auto denom = detail::tilde_v(n, i);
    const double tau2 = temps.tau2[static_cast<std::size_t>(batch.labels[i])];
    out.subclass_term += acc.term(i, config.tau1, denom, m_pos, 1.0);
    out.class_term += acc.term(i, tau2, c_denom, c_pos, config.beta);
  }
  out.loss = out.subclass_term + config.beta * out.class_term;
  return out;
}

struct ClassConcentration {
  std::vector<double> phi;
  Matrix centroids;
};

/// phi(c) = sum_i ||z_i - t_c|| / (n_c log(n_c + alpha)), t_c the raw class mean.
inline ClassConcentration concentration(const Matrix& features, const LongTailDataset& ds, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("concentration: alpha must be > 0");
  if (features.rows != ds.size()) throw std::invalid_argument("concentration: feature rows must equal dataset size");
  const std::size_t classes = ds.num_classes();
  ClassConcentration out;
  out.centroids = Matrix(classes, features.cols);
  out.phi.assign(classes, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto c = out.centroids.row(static_cast<std::size_t>(ds.labels[i]));
    const auto z = features.row(i);
    for (std::size_t t = 0; t < z.size(); ++t) c[t] += z[t];
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (double& v : out.centroids.row(c)) v /= static_cast<double>(ds.class_counts[c]);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto c = static_cast<std::size_t>(ds.labels[i]);
    out.phi[c] += euclidean(features.row(i), out.centroids.row(c));
  }
  for (std::size_t c = 0; c < classes; ++c) {
    const double n = static_cast<double>(ds.class_counts[c]);
    out.phi[c] /= n * std::log(n + alpha);
  }
  return out;
}

inline constexpr double kPhiFloor = 1e-12;

/// tau2(c) = tau1 * exp(phi(c) / mean(phi)). phi(c) is floored at 1e-12 so
/// tau2 > tau1 holds strictly; if mean(phi) < 1e-12 every class gets tau1 * e.
inline std::vector<double> dynamic_temperature(std::span<const double> phi, double tau1) {
  if (!(tau1 > 0.0)) throw std::invalid_argument("dynamic_temperature: tau1 must be > 0");
  if (phi.empty()) return {};
  // min + mean of offsets is exact when all entries are equal.
  const double lo = *std::min_element(phi.begin(), phi.end());
  if (lo < 0.0) throw std::invalid_argument("dynamic_temperature: phi must be >= 0");
  double spread = 0.0;
  for (double p : phi) spread += p - lo;
  const double mean = lo + spread / static_cast<double>(phi.size());
  std::vector<double> tau2(phi.size());
  for (std::size_t c = 0; c < phi.size(); ++c)
    tau2[c] = mean < kPhiFloor ? tau1 * std::exp(1.0) : tau1 * std::exp(std::max(phi[c], kPhiFloor) / mean);
  return tau2;
}

inline TemperatureTable temperature_table(const Matrix& features, const LongTailDataset& ds, double alpha,
                                          double tau1) {
  auto conc = concentration(features, ds, alpha);
  TemperatureTable t;
  t.tau2 = dynamic_temperature(conc.phi, tau1);
  t.phi = std::move(conc.phi);
  t.centroids = std::move(conc.centroids);
  t.alpha = alpha;
  t.tau1 = tau1;
  return t;
}

}  // namespace subtail
