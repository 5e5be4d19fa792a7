#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "subtail/clustering.hpp"
#include "subtail/dataset.hpp"
#include "subtail/encoder.hpp"
#include "subtail/losses.hpp"

namespace subtail {

enum class WarmupLoss { Scl, Kcl };

inline const char* warmup_loss_name(WarmupLoss w) { return w == WarmupLoss::Scl ? "scl" : "kcl"; }

inline WarmupLoss parse_warmup_loss(const std::string& s) {
  if (s == "scl") return WarmupLoss::Scl;
  if (s == "kcl") return WarmupLoss::Kcl;
  throw std::invalid_argument("unknown warm-up loss '" + s + "' (expected scl or kcl)");
}

struct TrainConfig {
  std::size_t warmup_epochs = 10;
  std::size_t total_epochs = 60;
  std::size_t update_interval = 10;
  std::size_t batch_size = 128;
  WarmupLoss warmup_loss = WarmupLoss::Scl;
  LossConfig loss;
  ClusterConfig cluster;
  double alpha = 10.0;

  Arch arch = Arch::Mlp1;
  std::size_t hidden = 32;
  std::size_t embed_dim = 8;
  double base_lr = 0.5;
  double momentum = 0.9;
  AugmentationConfig augmentation;
  // Step on the batch-mean loss instead of the anchor sum.
  bool mean_reduction = true;

  std::uint64_t seed = 0;

  void validate() const {
    if (warmup_epochs > total_epochs) throw std::invalid_argument("TrainConfig: warmup_epochs must be <= epochs");
    if (update_interval < 1) throw std::invalid_argument("TrainConfig: update interval must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch size must be >= 2");
    if (!(loss.tau1 > 0.0)) throw std::invalid_argument("TrainConfig: tau1 must be > 0");
    if (!(loss.beta >= 0.0)) throw std::invalid_argument("TrainConfig: beta must be >= 0");
    if (loss.k_positives < 1) throw std::invalid_argument("TrainConfig: k must be >= 1");
    if (cluster.delta < 1 || cluster.iterations < 1)
      throw std::invalid_argument("TrainConfig: delta and cluster iterations must be >= 1");
    if (!(alpha > 0.0)) throw std::invalid_argument("TrainConfig: alpha must be > 0");
  }
};

struct TrainLogRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double term1 = 0.0;
  double term2 = 0.0;
  std::optional<ClusterStats> cluster_stats;
  double mean_tau2 = 0.0;  // 0 during warm-up
  double learning_rate = 0.0;
  bool updated = false;  // clusters and temperatures refreshed this epoch
};

struct TrainHooks {
  // Encoder state at each update epoch (before that epoch's steps) and at the end.
  std::function<void(std::size_t epoch, const Encoder&)> on_checkpoint;
  std::function<void(std::size_t epoch, const ClusterModel&, const TemperatureTable&)> on_update;
};

struct TrainResult {
  Encoder encoder;
  std::vector<TrainLogRecord> log;
  std::optional<ClusterModel> clusters;
  std::optional<TemperatureTable> temperatures;
};

/// Embeddings of every sample, no augmentation.
inline Matrix extract_features(const Encoder& enc, const LongTailDataset& ds) { return embed(enc, ds.inputs); }

/// A uniform permutation chunked into batches of `batch_size`; a trailing
/// singleton is folded into the previous batch.
template <class Rng>
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < n; s += batch_size)
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(s),
                         perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  if (batches.size() > 1 && batches.back().size() < 2) {
    batches[batches.size() - 2].insert(batches[batches.size() - 2].end(), batches.back().begin(),
                                       batches.back().end());
    batches.pop_back();
  }
  return batches;
}

inline constexpr std::uint64_t kEncoderInitStream = 0xA0761D6478BD642Full;

inline Encoder initial_encoder(const LongTailDataset& ds, const TrainConfig& cfg) {
  return make_encoder(cfg.arch, ds.input_dim(), cfg.hidden, cfg.embed_dim, cfg.seed ^ kEncoderInitStream);
}

/// Warm-up with SCL or KCL on class labels for warmup_epochs, then SBCL.
/// Clusters and temperatures are refreshed at every epoch t >= warmup_epochs
/// with (t - warmup_epochs) % update_interval == 0.
inline TrainResult train(const LongTailDataset& ds, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (ds.size() < 2) throw std::invalid_argument("train: dataset needs at least 2 samples");
  std::mt19937_64 rng(cfg.seed);
  TrainResult res{initial_encoder(ds, cfg), {}, std::nullopt, std::nullopt};
  OptimizerState opt = make_optimizer(res.encoder, cfg.base_lr, cfg.momentum);
  const auto T = static_cast<double>(cfg.total_epochs);
  std::optional<ClusterStats> stats;

  for (std::size_t epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const bool sbcl = epoch >= cfg.warmup_epochs;
    TrainLogRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = cosine_lr(cfg.base_lr, static_cast<double>(epoch), T);
    if (sbcl && (epoch - cfg.warmup_epochs) % cfg.update_interval == 0) {
      if (hooks.on_checkpoint) hooks.on_checkpoint(epoch, res.encoder);
      const Matrix features = extract_features(res.encoder, ds);
      res.clusters = cluster_dataset(features, ds, cfg.cluster);
      res.temperatures = temperature_table(features, ds, cfg.alpha, cfg.loss.tau1);
      stats = cluster_stats(*res.clusters);
      rec.updated = true;
      if (hooks.on_update) hooks.on_update(epoch, *res.clusters, *res.temperatures);
    }
    if (sbcl) {
      rec.cluster_stats = stats;
      const auto& t2 = res.temperatures->tau2;
      rec.mean_tau2 = std::accumulate(t2.begin(), t2.end(), 0.0) / static_cast<double>(t2.size());
    }

    const auto batches = make_batches(ds.size(), cfg.batch_size, rng);
    for (const auto& idx : batches) {
      Batch b;
      const Matrix x = select_rows(ds.inputs, idx);
      const Matrix xt = augment(x, cfg.augmentation, rng);
      const ForwardCache fa = forward(res.encoder, x);
      const ForwardCache fb = forward(res.encoder, xt);
      b.anchors = fa.embeddings;
      b.augmented = fb.embeddings;
      b.labels.reserve(idx.size());
      for (auto i : idx) b.labels.push_back(ds.labels[i]);
      LossReport rep;
      if (sbcl) {
        for (auto i : idx) b.subclass_ids.push_back(res.clusters->assignments[i]);
        rep = sbcl_loss(b, cfg.loss, *res.temperatures);
      } else if (cfg.warmup_loss == WarmupLoss::Scl) {
        rep = scl_loss(b, cfg.loss.tau1);
      } else {
        rep = kcl_loss(b, cfg.loss.tau1, cfg.loss.k_positives, rng);
      }
      const double scale = cfg.mean_reduction ? 1.0 / static_cast<double>(idx.size()) : 1.0;
      rec.loss += rep.loss * scale;
      rec.term1 += rep.subclass_term * scale;
      rec.term2 += rep.class_term * scale;

      auto ga = backward(res.encoder, fa, rep.grad_anchors);
      const auto gb = backward(res.encoder, fb, rep.grad_augmented);
      for (std::size_t p = 0; p < ga.params.size(); ++p)
        for (std::size_t k = 0; k < ga.params[p].data.size(); ++k)
          ga.params[p].data[k] = (ga.params[p].data[k] + gb.params[p].data[k]) * scale;
      step(opt, res.encoder, ga.params, static_cast<double>(epoch), T);
    }
    const auto nb = static_cast<double>(batches.size());
    rec.loss /= nb, rec.term1 /= nb, rec.term2 /= nb;
    res.log.push_back(rec);
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(cfg.total_epochs, res.encoder);
  return res;
}

}  // namespace subtail
