// Acceptance checks. `acceptance N` runs criterion N, no argument runs all.
// Each criterion prints detail lines and then exactly one PASS/FAIL line.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "subtail/subtail.hpp"

using namespace subtail;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string summary;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark shared by criteria 5-8.

GeneratorConfig bench_data(std::uint64_t seed) {
  GeneratorConfig g;
  g.num_classes = 20;
  g.head_count = 200;
  g.imbalance_ratio = 50;
  g.subclusters_per_class = 3;
  g.input_dim = 16;
  g.noise_sigma = 1.0;
  g.class_separation = 3.0;
  g.subcluster_separation = 2.0;
  g.seed = seed;
  return g;
}

TrainConfig bench_train(std::uint64_t seed) {
  TrainConfig c;
  c.warmup_epochs = 5;
  c.total_epochs = 40;
  c.update_interval = 5;
  c.batch_size = 128;
  c.base_lr = 0.1;
  c.arch = Arch::Mlp1;
  c.hidden = 64;
  c.embed_dim = 16;
  c.augmentation.sigma = 0.3;
  c.loss.tau1 = 0.1;
  c.loss.beta = 0.2;
  c.seed = seed;
  return c;
}

constexpr std::size_t kBenchTestPerClass = 50;
constexpr std::size_t kManyThreshold = 60, kFewThreshold = 15;
const std::vector<std::uint64_t> kBenchSeeds = {1, 2, 3, 4, 5};

ProbeAccuracy probe_accuracy(const Encoder& enc, const LongTailDataset& train_set, const LongTailDataset& test_set,
                             std::uint64_t seed) {
  const auto splits = split_labels(train_set, kManyThreshold, kFewThreshold);
  const auto probe = train_probe(extract_features(enc, train_set), train_set, ProbeConfig{200, 0.5, 64, seed});
  return evaluate_probe(probe, extract_features(enc, test_set), test_set, splits);
}

// ---------------------------------------------------------------------------
// 1. Gradients through the encoder

Outcome criterion1() {
  std::mt19937_64 rng(101);
  double worst[3] = {0, 0, 0};
  const char* names[3] = {"scl", "kcl", "sbcl"};
  constexpr int kConfigs = 50;
  for (int which = 0; which < 3; ++which) {
    for (int trial = 0; trial < kConfigs; ++trial) {
      const std::size_t n = 2 + rng() % 7, din = 2 + rng() % 3, hidden = 2 + rng() % 4, emb = 2 + rng() % 3;
      const Arch arch = trial % 2 ? Arch::Mlp1 : Arch::Linear;
      const auto enc = make_encoder(arch, din, hidden, emb, rng());
      Matrix x(n, din), xt(n, din);
      std::normal_distribution<double> g(0, 1);
      for (double& v : x.data) v = g(rng);
      for (double& v : xt.data) v = g(rng);
      std::vector<int> y(n), sub(n);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(rng() % 2);
        sub[i] = y[i] * 2 + static_cast<int>(rng() % 2);
      }
      const double tau = 0.2 + 0.8 * std::uniform_real_distribution<double>(0, 1)(rng);
      const std::vector<double> tau2 = {tau * 1.7, tau * 2.4};
      const double beta = std::uniform_real_distribution<double>(0, 1)(rng);
      const std::size_t k = 1 + rng() % 3;
      const std::uint64_t draw_seed = rng();

      auto loss_of = [&](const Encoder& e) -> LossReport {
        Batch b;
        b.anchors = embed(e, x);
        b.augmented = embed(e, xt);
        b.labels = y;
        b.subclass_ids = sub;
        if (which == 0) return scl_loss(b, tau);
        if (which == 1) {
          std::mt19937_64 draws(draw_seed);
          return kcl_loss(b, tau, k, draws);
        }
        LossConfig lc;
        lc.tau1 = tau;
        lc.beta = beta;
        TemperatureTable t;
        t.tau2 = tau2;
        return sbcl_loss(b, lc, t);
      };
      // Objective for finite differences: literal transcriptions where the
      // positive sets are deterministic, the library's KCL otherwise (its
      // draws are replayed from the same seed).
      auto objective = [&](const Encoder& e) {
        if (which == 1) return loss_of(e).loss;
        const auto v = oracle::views_from(embed(e, x), embed(e, xt), y, sub);
        if (which == 0) return oracle::scl(v, tau);
        const auto p = oracle::sbcl(v, tau, tau2);
        return p.term1 + beta * p.term2;
      };

      const auto fa = forward(enc, x), fb = forward(enc, xt);
      const auto rep = loss_of(enc);
      auto ga = backward(enc, fa, rep.grad_anchors);
      const auto gb = backward(enc, fb, rep.grad_augmented);
      for (std::size_t p = 0; p < enc.params.size(); ++p) {
        for (std::size_t q = 0; q < ga.params[p].data.size(); ++q) ga.params[p].data[q] += gb.params[p].data[q];
        const auto fd = oracle::finite_difference(
            [&](const oracle::Vec& w) {
              Encoder m = enc;
              m.params[p].data = w;
              return objective(m);
            },
            enc.params[p].data);
        worst[which] = std::max(worst[which], oracle::max_relative_error(ga.params[p].data, fd));
      }
    }
    std::printf("  %s: worst relative error %.3g over %d configurations\n", names[which], worst[which], kConfigs);
  }
  const double w = std::max({worst[0], worst[1], worst[2]});
  return {w < 1e-5, fmt("max relative gradient error %.3g (< 1e-5)", w)};
}

// ---------------------------------------------------------------------------
// 2. Loss values vs literal transcriptions

Outcome criterion2() {
  std::mt19937_64 rng(202);
  double worst = 0;
  int batches = 0;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); };
  for (int trial = 0; trial < 120; ++trial, ++batches) {
    const std::size_t n = 1 + rng() % 10, d = 2 + rng() % 6;
    Batch b;
    b.anchors = oracle::random_unit_rows(rng, n, d);
    b.augmented = oracle::random_unit_rows(rng, n, d);
    const int classes = 1 + static_cast<int>(rng() % 4);
    for (std::size_t i = 0; i < n; ++i) {
      b.labels.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(classes)));
      b.subclass_ids.push_back(b.labels.back() * 3 + static_cast<int>(rng() % 3));
    }
    const double tau = 0.05 + std::uniform_real_distribution<double>(0, 1)(rng);
    const auto v = oracle::views_from(b.anchors, b.augmented, b.labels, b.subclass_ids);

    const double s = scl_loss(b, tau).loss, so = oracle::scl(v, tau);
    if (so != 0 || s != 0) worst = std::max(worst, rel(s, so));

    const std::size_t k = 1 + rng() % 4;
    const std::uint64_t seed = rng();
    std::mt19937_64 d1(seed), d2(seed);
    const double kl = kcl_loss(b, tau, k, d1).loss;
    std::vector<std::vector<std::size_t>> chosen(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> same;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i && b.labels[j] == b.labels[i]) same.push_back(j);
      if (same.size() <= k) chosen[i] = same;
      else std::sample(same.begin(), same.end(), std::back_inserter(chosen[i]), static_cast<std::ptrdiff_t>(k), d2);
    }
    const double ko = oracle::kcl(v, tau, chosen);
    if (ko != 0 || kl != 0) worst = std::max(worst, rel(kl, ko));

    std::vector<double> tau2(static_cast<std::size_t>(classes));
    for (auto& t : tau2) t = tau * (1.0 + 2.0 * std::uniform_real_distribution<double>(0, 1)(rng));
    LossConfig lc;
    lc.tau1 = tau;
    lc.beta = std::uniform_real_distribution<double>(0, 1)(rng);
    TemperatureTable tt;
    tt.tau2 = tau2;
    const auto r = sbcl_loss(b, lc, tt);
    const auto p = oracle::sbcl(v, tau, tau2);
    const double want = p.term1 + lc.beta * p.term2;
    if (want != 0 || r.loss != 0) worst = std::max(worst, rel(r.loss, want));
  }
  std::printf("  %d batches x {scl, kcl, sbcl}, worst relative deviation %.3g\n", batches, worst);
  return {worst < 1e-10, fmt("loss values match literal transcriptions, worst %.3g (< 1e-10)", worst)};
}

// ---------------------------------------------------------------------------
// 3. Clustering invariants

Outcome criterion3() {
  std::mt19937_64 rng(303);
  int bad = 0, datasets = 0;
  for (int trial = 0; trial < 110; ++trial, ++datasets) {
    GeneratorConfig g;
    g.num_classes = 2 + rng() % 12;
    g.head_count = 20 + rng() % 150;
    g.imbalance_ratio = 1.0 + std::uniform_real_distribution<double>(0, 1)(rng) *
                                  std::min(30.0, static_cast<double>(g.head_count) - 1.0);
    g.input_dim = 2 + rng() % 8;
    g.seed = rng();
    const auto ds = generate(g);
    const Matrix f = normalize_rows(ds.inputs);
    ClusterConfig cfg;
    cfg.delta = 1 + rng() % 15;
    cfg.iterations = 1 + rng() % 10;
    const auto m = cluster_dataset(f, ds, cfg);
    const auto again = cluster_dataset(f, ds, cfg);

    bool ok = m == again && m.assignments.size() == ds.size();
    const auto sizes = m.subclass_sizes();
    for (auto s : sizes) ok = ok && s >= 1 && s <= m.capacity;
    std::vector<std::size_t> covered(ds.num_classes(), 0);
    for (std::size_t i = 0; i < ds.size() && ok; ++i) {
      const int a = m.assignments[i];
      ok = a >= 0 && static_cast<std::size_t>(a) < m.num_subclasses() &&
           m.subclass_of_class[static_cast<std::size_t>(a)] == ds.labels[i];
      if (ok) ++covered[static_cast<std::size_t>(ds.labels[i])];
    }
    ok = ok && covered == ds.class_counts;
    ok = ok && m.capacity == std::max(ds.class_counts.back(), cfg.delta);
    if (!ok) {
      ++bad;
      std::printf("  dataset %d violates an invariant\n", trial);
    }
  }
  std::printf("  %d datasets, %d violations\n", datasets, bad);
  return {bad == 0, "capacity, coverage, purity and reproducibility held on " + std::to_string(datasets - bad) + "/" +
                        std::to_string(datasets) + " datasets"};
}

// ---------------------------------------------------------------------------
// 4. Balance vs k-means on the CIFAR-LT analog

Outcome criterion4() {
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    GeneratorConfig g;
    g.seed = seed;
    const auto ds = generate(g);
    const Matrix f = normalize_rows(ds.inputs);
    ClusterConfig cfg;
    cfg.delta = 10;
    const auto ours = cluster_stats(cluster_dataset(f, ds, cfg));
    const auto base = cluster_stats(baseline_cluster_dataset(f, ds, cfg));
    const bool win = ours && base && ours->size_imbalance_ratio < 0.5 * base->size_imbalance_ratio;
    wins += win;
    std::printf("  seed %2llu: capacity ratio %6.2f (max %g min %g)  kmeans ratio %6.2f  %s\n",
                static_cast<unsigned long long>(seed), ours->size_imbalance_ratio, ours->max_size, ours->min_size,
                base->size_imbalance_ratio, win ? "ok" : "miss");
  }
  return {wins >= 18, std::to_string(wins) + "/20 seeds with capacity ratio < 0.5x k-means ratio (need >= 18)"};
}

// ---------------------------------------------------------------------------
// 5. Dynamic temperature

Outcome criterion5() {
  const auto ds = generate(bench_data(kBenchSeeds.front()));
  const auto cfg = bench_train(kBenchSeeds.front());
  int updates = 0, violations = 0;
  double min_gap = INFINITY;
  TrainHooks hooks;
  hooks.on_update = [&](std::size_t, const ClusterModel&, const TemperatureTable& t) {
    ++updates;
    for (double tau2 : t.tau2) {
      min_gap = std::min(min_gap, tau2 - cfg.loss.tau1);
      if (!(tau2 > cfg.loss.tau1)) ++violations;
    }
  };
  train(ds, cfg, hooks);
  std::printf("  %d updates x %zu classes, smallest tau2 - tau1 = %.3g\n", updates, ds.num_classes(), min_gap);
  bool exact = true;
  for (double phi : {1e-6, 0.37, 2.5, 1e3}) {
    const auto t = dynamic_temperature(std::vector<double>(7, phi), 0.1);
    for (double v : t) exact = exact && v == 0.1 * std::exp(1.0);
  }
  std::printf("  equal phi -> tau1*e exactly: %s\n", exact ? "yes" : "no");
  return {violations == 0 && updates > 0 && exact,
          "tau2 > tau1 at all " + std::to_string(updates) + " updates; equal phi gives tau1*e"};
}

// ---------------------------------------------------------------------------
// 6. Distance ordering

Outcome criterion6() {
  int ok = 0;
  for (auto seed : kBenchSeeds) {
    const auto ds = generate(bench_data(seed));
    const auto r = train(ds, bench_train(seed));
    const Matrix f = extract_features(r.encoder, ds);
    const auto rep = distance_report(f, ds, *r.clusters, split_labels(ds, kManyThreshold, kFewThreshold));
    const double is = rep.at(kAllSplits, DistanceKind::IntraSubclass), xs = rep.at(kAllSplits, DistanceKind::InterSubclass);
    const double ic = rep.at(kAllSplits, DistanceKind::IntraClass), xc = rep.at(kAllSplits, DistanceKind::InterClass);
    const bool good = is < xs && ic < xc;
    ok += good;
    std::printf("  seed %llu: intra-sub %.3f < inter-sub %.3f; intra-class %.3f < inter-class %.3f  %s\n",
                static_cast<unsigned long long>(seed), is, xs, ic, xc, good ? "ok" : "violated");
  }
  return {ok == static_cast<int>(kBenchSeeds.size()),
          "All-split ordering held in " + std::to_string(ok) + "/" + std::to_string(kBenchSeeds.size()) + " runs"};
}

// ---------------------------------------------------------------------------
// 7. SBCL vs SCL linear probe

Outcome criterion7() {
  int few_wins = 0;
  double many_delta = 0;
  for (auto seed : kBenchSeeds) {
    const auto g = bench_data(seed);
    const auto ds = generate(g);
    const auto test = generate_balanced_test(g, kBenchTestPerClass);
    auto cfg = bench_train(seed);
    const auto sbcl = probe_accuracy(train(ds, cfg).encoder, ds, test, seed);
    cfg.warmup_epochs = cfg.total_epochs;
    const auto scl = probe_accuracy(train(ds, cfg).encoder, ds, test, seed);
    few_wins += sbcl.few() > scl.few();
    many_delta += sbcl.many() - scl.many();
    std::printf("  seed %llu: few %.3f vs %.3f   many %.3f vs %.3f   all %.3f vs %.3f  (sbcl vs scl)\n",
                static_cast<unsigned long long>(seed), sbcl.few(), scl.few(), sbcl.many(), scl.many(), sbcl.all(),
                scl.all());
  }
  many_delta /= static_cast<double>(kBenchSeeds.size());
  char buf[160];
  std::snprintf(buf, sizeof buf, "few-split wins %d/5 (need >= 4), mean many-split change %+.2f points (need >= -2)",
                few_wins, 100 * many_delta);
  return {few_wins >= 4 && many_delta >= -0.02, buf};
}

// ---------------------------------------------------------------------------
// 8. Adaptive re-clustering vs cluster-once

Outcome criterion8() {
  double adaptive = 0, once = 0;
  for (auto seed : kBenchSeeds) {
    const auto ds = generate(bench_data(seed));
    auto cfg = bench_train(seed);
    const double a = mean_recovery(subclass_recovery(*train(ds, cfg).clusters, ds));
    cfg.update_interval = cfg.total_epochs - cfg.warmup_epochs;
    const double o = mean_recovery(subclass_recovery(*train(ds, cfg).clusters, ds));
    adaptive += a, once += o;
    std::printf("  seed %llu: ARI adaptive (K=5) %.4f  cluster-once %.4f\n", static_cast<unsigned long long>(seed), a,
                o);
  }
  adaptive /= static_cast<double>(kBenchSeeds.size());
  once /= static_cast<double>(kBenchSeeds.size());
  char buf[128];
  std::snprintf(buf, sizeof buf, "mean ARI adaptive %.4f >= cluster-once %.4f", adaptive, once);
  return {adaptive >= once, buf};
}

// ---------------------------------------------------------------------------
// 9. Full pipeline replay

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome criterion9() {
  const fs::path dir = fs::temp_directory_path() / "subtail_acceptance_9";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto sh = [&](const std::string& args) {
    const std::string cmd = "cd '" + dir.string() + "' && '" SUBTAIL_CLI "' " + args + " 2>>log.txt";
    return std::system(cmd.c_str()) == 0;
  };
  const std::vector<std::string> stages = {
      "gen --classes 20 --head 200 --ir 50 --noise 1.0 --sub-sep 2 --seed 4 -o ds.csv --test-per-class 50 "
      "--test-out test.csv",
      "train --data ds.csv -o tr --warmup-epochs 5 --epochs 40 --interval 5 --lr 0.1 --hidden 64 --embed-dim 16 "
      "--aug-sigma 0.3 --seed 4",
      "cluster --data ds.csv --checkpoint tr/encoder.bin -o cl --baseline kmeans",
      "eval --data ds.csv --checkpoint tr/encoder.bin --clusters cl/assignments.csv --test test.csv "
      "--thresholds 60,15 --probe-epochs 200 -o ev"};
  const std::vector<std::string> manifests = {"ds.csv.manifest.json", "tr/manifest.json", "cl/manifest.json",
                                              "ev/manifest.json"};
  for (const auto& s : stages)
    if (!sh(s)) return {false, "pipeline stage failed: " + s};

  auto snapshot = [&] {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      const auto rel = fs::relative(e.path(), dir).string();
      if (e.is_regular_file() && rel != "log.txt") files[rel] = slurp(e.path());
    }
    return files;
  };
  const auto first = snapshot();
  // Keep the manifests, wipe every output, then replay.
  std::map<std::string, std::string> keep;
  for (const auto& m : manifests) keep[m] = first.at(m);
  for (const auto& [rel, bytes] : first) fs::remove(dir / rel);
  for (const auto& [rel, bytes] : keep) {
    fs::create_directories((dir / rel).parent_path());
    std::ofstream(dir / rel, std::ios::binary) << bytes;
  }
  for (const auto& m : manifests)
    if (!sh("--manifest " + m)) return {false, "replay failed for " + m};
  const auto second = snapshot();
  int csv = 0, ckpt = 0, differ = 0;
  for (const auto& [rel, bytes] : first) {
    const auto it = second.find(rel);
    if (it == second.end() || it->second != bytes) {
      ++differ;
      std::printf("  differs: %s\n", rel.c_str());
    }
    csv += rel.ends_with(".csv");
    ckpt += rel.ends_with(".bin");
  }
  if (second.size() != first.size()) ++differ;
  std::printf("  %zu files compared (%d csv, %d checkpoints), %d differ\n", first.size(), csv, ckpt, differ);
  fs::remove_all(dir);
  return {differ == 0 && csv > 0 && ckpt > 0, "replayed pipeline byte-identical across " +
                                                  std::to_string(first.size()) + " files"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> all = {criterion1, criterion2, criterion3, criterion4, criterion5,
                                                     criterion6, criterion7, criterion8, criterion9};
  std::vector<int> which;
  if (argc > 1) {
    for (int a = 1; a < argc; ++a) which.push_back(std::atoi(argv[a]));
  } else {
    for (int k = 1; k <= 9; ++k) which.push_back(k);
  }
  bool ok = true;
  for (int k : which) {
    if (k < 1 || k > 9) {
      std::printf("FAIL criterion %d: no such criterion\n", k);
      ok = false;
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = all[static_cast<std::size_t>(k - 1)]();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s criterion %d: %s [%.1f s]\n", out.pass ? "PASS" : "FAIL", k, out.summary.c_str(), secs);
    std::fflush(stdout);
    ok = ok && out.pass;
  }
  return ok ? 0 : 1;
}
