// subtail command-line front end: gen, train, cluster, eval, and manifest replay.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "subtail/subtail.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace subtail;

namespace {

struct GenOptions {
  std::size_t classes = 100;
  std::size_t head = 500;
  double ir = 100.0;
  std::size_t subclusters = 3;
  std::size_t dim = 16;
  double noise = 0.3;
  double class_sep = 3.0;
  double sub_sep = 1.5;
  std::size_t single_below = 10;
  std::uint64_t seed = 0;
  std::string format = "text";
  std::string output;
  std::size_t test_per_class = 0;
  std::string test_output;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenOptions, classes, head, ir, subclusters, dim, noise, class_sep,
                                                sub_sep, single_below, seed, format, output, test_per_class,
                                                test_output)

struct TrainOptions {
  std::string data;
  std::string out_dir;
  // -1: min(10, epochs)
  long long warmup_epochs = -1;
  std::size_t epochs = 60;
  std::size_t interval = 10;
  double beta = 0.2;
  std::size_t delta = 10;
  double alpha = 10.0;
  double tau1 = 0.1;
  std::size_t batch = 128;
  std::string warmup_loss = "scl";
  std::size_t k_positives = 4;
  std::string arch = "mlp1";
  std::size_t hidden = 32;
  std::size_t embed_dim = 8;
  double lr = 0.5;
  double momentum = 0.9;
  double aug_sigma = 0.1;
  std::size_t cluster_iters = 10;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainOptions, data, out_dir, warmup_epochs, epochs, interval, beta,
                                                delta, alpha, tau1, batch, warmup_loss, k_positives, arch, hidden,
                                                embed_dim, lr, momentum, aug_sigma, cluster_iters, seed)

struct ClusterOptions {
  std::string data;
  std::string checkpoint;
  std::string out_dir;
  std::size_t delta = 10;
  std::size_t iterations = 10;
  std::uint64_t seed = 0;
  std::string baseline;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ClusterOptions, data, checkpoint, out_dir, delta, iterations, seed,
                                                baseline)

struct EvalOptions {
  std::string data;
  std::string checkpoint;
  std::string clusters;
  std::string test;
  std::string out_dir;
  std::string thresholds = "100,20";
  std::size_t delta = 10;
  std::size_t cluster_iters = 10;
  std::size_t probe_epochs = 100;
  double probe_lr = 0.5;
  std::size_t probe_batch = 64;
  bool subsample_to_few = false;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalOptions, data, checkpoint, clusters, test, out_dir, thresholds,
                                                delta, cluster_iters, probe_epochs, probe_lr, probe_batch,
                                                subsample_to_few, seed)

// Files written by the current command, removed again if it fails.
std::vector<fs::path> g_written;

std::ofstream open_output(const fs::path& p, bool binary = false) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  g_written.push_back(p);
  std::ofstream os(p, binary ? std::ios::binary : std::ios::out);
  if (!os) throw std::runtime_error("cannot open for writing: " + p.string());
  return os;
}

void finish(std::ofstream& os, const fs::path& p) {
  os.close();
  if (!os) throw std::runtime_error("write failed: " + p.string());
}

void write_manifest(const fs::path& p, const std::string& command, std::uint64_t seed, const json& config) {
  json m;
  m["tool"] = "subtail";
  m["version"] = kVersion;
  m["command"] = command;
  m["seed"] = seed;
  m["config"] = config;
  auto os = open_output(p);
  os << m.dump(2) << '\n';
  finish(os, p);
}

std::pair<std::size_t, std::size_t> parse_thresholds(const std::string& s) {
  const auto comma = s.find(',');
  std::size_t a = 0, b = 0;
  try {
    if (comma == std::string::npos) throw std::invalid_argument("");
    std::size_t used = 0;
    a = std::stoull(s.substr(0, comma), &used);
    if (used != comma) throw std::invalid_argument("");
    const std::string rest = s.substr(comma + 1);
    b = std::stoull(rest, &used);
    if (used != rest.size()) throw std::invalid_argument("");
  } catch (const std::logic_error&) {
    throw std::invalid_argument("--thresholds expects MANY,FEW (e.g. 100,20), got '" + s + "'");
  }
  return {a, b};
}

// ---------------------------------------------------------------------------

void run_gen(const GenOptions& o) {
  if (o.output.empty()) throw std::invalid_argument("gen: -o is required");
  if (o.format != "text" && o.format != "binary") throw std::invalid_argument("--format must be text or binary");
  if (o.test_per_class > 0 && o.test_output.empty()) throw std::invalid_argument("--test-per-class needs --test-out");
  GeneratorConfig g;
  g.num_classes = o.classes;
  g.head_count = o.head;
  g.imbalance_ratio = o.ir;
  g.subclusters_per_class = o.subclusters;
  g.input_dim = o.dim;
  g.noise_sigma = o.noise;
  g.class_separation = o.class_sep;
  g.subcluster_separation = o.sub_sep;
  g.single_component_below = o.single_below;
  g.seed = o.seed;
  validate(g);
  write_manifest(o.output + ".manifest.json", "gen", o.seed, o);

  const auto fmt = o.format == "binary" ? DatasetFormat::Binary : DatasetFormat::Text;
  auto emit = [&](const LongTailDataset& ds, const std::string& path) {
    auto os = open_output(path, true);
    save(ds, os, fmt);
    finish(os, path);
  };
  const auto ds = generate(g);
  emit(ds, o.output);
  if (o.test_per_class > 0) emit(generate_balanced_test(g, o.test_per_class), o.test_output);
  std::cerr << "gen: " << ds.size() << " samples, " << ds.num_classes() << " classes, n_1=" << ds.class_counts.front()
            << " n_C=" << ds.class_counts.back() << '\n';
}

TrainOptions resolve(TrainOptions o) {
  if (o.warmup_epochs < 0) o.warmup_epochs = static_cast<long long>(std::min<std::size_t>(10, o.epochs));
  return o;
}

void run_train(const TrainOptions& raw) {
  const TrainOptions o = resolve(raw);
  if (o.data.empty() || o.out_dir.empty()) throw std::invalid_argument("train: --data and --out-dir are required");
  TrainConfig cfg;
  cfg.warmup_epochs = static_cast<std::size_t>(o.warmup_epochs);
  cfg.total_epochs = o.epochs;
  cfg.update_interval = o.interval;
  cfg.batch_size = o.batch;
  cfg.warmup_loss = parse_warmup_loss(o.warmup_loss);
  cfg.loss.tau1 = o.tau1;
  cfg.loss.beta = o.beta;
  cfg.loss.k_positives = o.k_positives;
  cfg.cluster.delta = o.delta;
  cfg.cluster.iterations = o.cluster_iters;
  cfg.alpha = o.alpha;
  cfg.arch = parse_arch(o.arch);
  cfg.hidden = o.hidden;
  cfg.embed_dim = o.embed_dim;
  cfg.base_lr = o.lr;
  cfg.momentum = o.momentum;
  cfg.augmentation.sigma = o.aug_sigma;
  cfg.seed = o.seed;
  cfg.validate();

  const fs::path dir(o.out_dir);
  write_manifest(dir / "manifest.json", "train", o.seed, o);
  const auto ds = load(o.data);

  TrainHooks hooks;
  hooks.on_checkpoint = [&](std::size_t epoch, const Encoder& enc) {
    std::vector<fs::path> targets = {dir / ("checkpoint_e" + std::to_string(epoch) + ".bin")};
    if (epoch == cfg.total_epochs) targets.push_back(dir / "encoder.bin");
    for (const auto& p : targets) {
      auto os = open_output(p, true);
      save_encoder(enc, os);
      finish(os, p);
    }
  };
  const auto res = train(ds, cfg, hooks);

  const fs::path log = dir / "train.csv";
  auto os = open_output(log);
  os << "epoch,loss,term1,term2,learning_rate,mean_tau2,updated,cluster_max,cluster_min,cluster_mean,cluster_std,"
        "cluster_ratio\n";
  for (const auto& r : res.log) {
    os << r.epoch << ',' << format_double(r.loss) << ',' << format_double(r.term1) << ',' << format_double(r.term2)
       << ',' << format_double(r.learning_rate) << ',' << format_double(r.mean_tau2) << ',' << (r.updated ? 1 : 0);
    if (r.cluster_stats) {
      const auto& s = *r.cluster_stats;
      for (double v : {s.max_size, s.min_size, s.mean_size, s.std_size, s.size_imbalance_ratio})
        os << ',' << format_double(v);
    } else {
      os << ",,,,,";
    }
    os << '\n';
  }
  finish(os, log);
  std::cerr << "train: " << res.log.size() << " epochs, final loss "
            << (res.log.empty() ? std::string("n/a") : format_double(res.log.back().loss)) << '\n';
}

void write_stats_row(std::ostream& os, const char* method, const std::optional<ClusterStats>& s,
                     std::size_t subclasses) {
  if (!s) return;
  os << method;
  for (double v : {s->max_size, s->min_size, s->mean_size, s->std_size, s->size_imbalance_ratio})
    os << ',' << format_double(v);
  os << ',' << s->count << ',' << subclasses << '\n';
}

void run_cluster(const ClusterOptions& o) {
  if (o.data.empty() || o.checkpoint.empty() || o.out_dir.empty())
    throw std::invalid_argument("cluster: --data, --checkpoint and --out-dir are required");
  if (!o.baseline.empty() && o.baseline != "kmeans") throw std::invalid_argument("--baseline must be kmeans");
  const fs::path dir(o.out_dir);
  write_manifest(dir / "manifest.json", "cluster", o.seed, o);
  const auto ds = load(o.data);
  const auto enc = load_encoder(o.checkpoint);
  const Matrix features = extract_features(enc, ds);
  ClusterConfig cfg;
  cfg.delta = o.delta;
  cfg.iterations = o.iterations;
  cfg.seed = o.seed;

  const auto model = cluster_dataset(features, ds, cfg);
  const fs::path assign = dir / "assignments.csv";
  auto as = open_output(assign);
  save_clusters(model, ds, as);
  finish(as, assign);

  const fs::path stats = dir / "cluster_stats.csv";
  auto ss = open_output(stats);
  ss << "method,max,min,mean,std,ratio,split_subclasses,total_subclasses\n";
  const auto s = cluster_stats(model);
  write_stats_row(ss, "capacity", s, model.num_subclasses());
  if (o.baseline == "kmeans") {
    const auto base = baseline_cluster_dataset(features, ds, cfg);
    const fs::path bpath = dir / "baseline_assignments.csv";
    auto bs = open_output(bpath);
    save_clusters(base, ds, bs);
    finish(bs, bpath);
    write_stats_row(ss, "kmeans", cluster_stats(base), base.num_subclasses());
  }
  finish(ss, stats);
  if (!s)
    std::cerr << "cluster: no class exceeds capacity M=" << model.capacity << "; stats section is empty\n";
  else
    std::cerr << "cluster: " << model.num_subclasses() << " subclasses, size imbalance ratio "
              << format_double(s->size_imbalance_ratio) << '\n';
}

void run_eval(const EvalOptions& o) {
  if (o.data.empty() || o.checkpoint.empty() || o.out_dir.empty())
    throw std::invalid_argument("eval: --data, --checkpoint and --out-dir are required");
  const auto [many, few] = parse_thresholds(o.thresholds);
  const fs::path dir(o.out_dir);
  write_manifest(dir / "manifest.json", "eval", o.seed, o);
  const auto ds = load(o.data);
  const auto enc = load_encoder(o.checkpoint);
  const Matrix features = extract_features(enc, ds);
  const auto splits = split_labels(ds, many, few);

  ClusterModel clusters;
  if (!o.clusters.empty()) {
    std::ifstream is(o.clusters);
    if (!is) throw std::runtime_error("cannot open: " + o.clusters);
    clusters = load_clusters(is, ds);
  } else {
    ClusterConfig cfg;
    cfg.delta = o.delta;
    cfg.iterations = o.cluster_iters;
    clusters = cluster_dataset(features, ds, cfg);
  }

  const auto report = distance_report(features, ds, clusters, splits, DistanceOptions{o.subsample_to_few, o.seed});
  const fs::path dpath = dir / "distances.csv";
  auto dos = open_output(dpath);
  write_csv(report, dos);
  finish(dos, dpath);

  if (ds.true_subclusters) {
    const auto rec = subclass_recovery(clusters, ds);
    const fs::path rpath = dir / "recovery.csv";
    auto ros = open_output(rpath);
    write_csv(rec, ros);
    finish(ros, rpath);
    std::cerr << "eval: mean subclass ARI " << format_double(mean_recovery(rec)) << " over " << rec.size()
              << " classes\n";
  }

  const auto probe = train_probe(features, ds, ProbeConfig{o.probe_epochs, o.probe_lr, o.probe_batch, o.seed});
  ProbeAccuracy acc;
  if (!o.test.empty()) {
    const auto test = load(o.test);
    if (test.num_classes() != ds.num_classes() || test.input_dim() != ds.input_dim())
      throw std::invalid_argument("eval: test set does not match training classes/dimensions");
    acc = evaluate_probe(probe, extract_features(enc, test), test, splits);
  } else {
    acc = evaluate_probe(probe, features, ds, splits);
  }
  const fs::path apath = dir / "accuracy.csv";
  auto aos = open_output(apath);
  write_csv(acc, aos);
  finish(aos, apath);
  std::cerr << "eval: top-1 many " << format_double(acc.many()) << " medium " << format_double(acc.medium())
            << " few " << format_double(acc.few()) << " all " << format_double(acc.all()) << '\n';
}

void replay(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest: " + path);
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest " + path + ": " + e.what());
  }
  const std::string cmd = m.value("command", "");
  const json& cfg = m.at("config");
  if (cmd == "gen") run_gen(cfg.get<GenOptions>());
  else if (cmd == "train") run_train(cfg.get<TrainOptions>());
  else if (cmd == "cluster") run_cluster(cfg.get<ClusterOptions>());
  else if (cmd == "eval") run_eval(cfg.get<EvalOptions>());
  else throw std::runtime_error("manifest " + path + ": unknown command '" + cmd + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"subtail: subclass-balancing contrastive learning on long-tailed data"};
  app.set_version_flag("--version", std::string(kVersion));
  std::string manifest;
  app.add_option("--manifest", manifest, "Re-run the command recorded in a manifest");
  app.require_subcommand(0, 1);

  GenOptions gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic long-tailed dataset");
  g->add_option("--classes", gen.classes, "Number of classes C")->capture_default_str();
  g->add_option("--head", gen.head, "Head class size n_1")->capture_default_str();
  g->add_option("--ir", gen.ir, "Imbalance ratio n_1 / n_C")->capture_default_str();
  g->add_option("--subclusters", gen.subclusters, "Mixture components per class")->capture_default_str();
  g->add_option("--dim", gen.dim, "Input dimension")->capture_default_str();
  g->add_option("--noise", gen.noise, "Per-coordinate noise sigma")->capture_default_str();
  g->add_option("--class-sep", gen.class_sep, "Radius of class means")->capture_default_str();
  g->add_option("--sub-sep", gen.sub_sep, "Radius of component offsets")->capture_default_str();
  g->add_option("--single-below", gen.single_below, "Classes smaller than this get one component")
      ->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--format", gen.format, "text or binary")->capture_default_str();
  g->add_option("-o,--output", gen.output, "Dataset path")->required();
  g->add_option("--test-per-class", gen.test_per_class, "Also write a balanced test split with this many per class");
  g->add_option("--test-out", gen.test_output, "Path for the balanced test split");

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Warm up, then train with the subclass-balancing loss");
  t->add_option("--data", tr.data)->required();
  t->add_option("-o,--out-dir", tr.out_dir)->required();
  t->add_option("--warmup-epochs", tr.warmup_epochs, "Warm-up epochs T0 (default min(10, epochs))");
  t->add_option("--epochs", tr.epochs)->capture_default_str();
  t->add_option("--interval", tr.interval, "Re-clustering interval K")->capture_default_str();
  t->add_option("--beta", tr.beta)->capture_default_str();
  t->add_option("--delta", tr.delta)->capture_default_str();
  t->add_option("--alpha", tr.alpha)->capture_default_str();
  t->add_option("--tau1", tr.tau1)->capture_default_str();
  t->add_option("--batch", tr.batch)->capture_default_str();
  t->add_option("--warmup-loss", tr.warmup_loss)->check(CLI::IsMember({"scl", "kcl"}))->capture_default_str();
  t->add_option("--k-positives", tr.k_positives)->capture_default_str();
  t->add_option("--arch", tr.arch)->check(CLI::IsMember({"linear", "mlp1"}))->capture_default_str();
  t->add_option("--hidden", tr.hidden)->capture_default_str();
  t->add_option("--embed-dim", tr.embed_dim)->capture_default_str();
  t->add_option("--lr", tr.lr)->capture_default_str();
  t->add_option("--momentum", tr.momentum)->capture_default_str();
  t->add_option("--aug-sigma", tr.aug_sigma)->capture_default_str();
  t->add_option("--cluster-iters", tr.cluster_iters)->capture_default_str();
  t->add_option("--seed", tr.seed)->capture_default_str();

  ClusterOptions cl;
  auto* c = app.add_subcommand("cluster", "Cluster a checkpoint's features and report balance statistics");
  c->add_option("--data", cl.data)->required();
  c->add_option("--checkpoint", cl.checkpoint)->required();
  c->add_option("-o,--out-dir", cl.out_dir)->required();
  c->add_option("--delta", cl.delta)->capture_default_str();
  c->add_option("--iterations", cl.iterations)->capture_default_str();
  c->add_option("--seed", cl.seed)->capture_default_str();
  c->add_option("--baseline", cl.baseline, "Also run the kmeans baseline")->check(CLI::IsMember({"kmeans"}));

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Distance report, subclass recovery and linear probe");
  e->add_option("--data", ev.data, "Training dataset")->required();
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("-o,--out-dir", ev.out_dir)->required();
  e->add_option("--clusters", ev.clusters, "Assignments CSV (default: cluster the features)");
  e->add_option("--test", ev.test, "Evaluation dataset for the probe (default: training set)");
  e->add_option("--thresholds", ev.thresholds, "MANY,FEW split thresholds")->capture_default_str();
  e->add_option("--delta", ev.delta)->capture_default_str();
  e->add_option("--cluster-iters", ev.cluster_iters)->capture_default_str();
  e->add_option("--probe-epochs", ev.probe_epochs)->capture_default_str();
  e->add_option("--probe-lr", ev.probe_lr)->capture_default_str();
  e->add_option("--probe-batch", ev.probe_batch)->capture_default_str();
  e->add_flag("--subsample-to-few", ev.subsample_to_few, "Subsample Many/Medium anchors to the Few size");
  e->add_option("--seed", ev.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }

  try {
    if (!manifest.empty()) replay(manifest);
    else if (*g) run_gen(gen);
    else if (*t) run_train(tr);
    else if (*c) run_cluster(cl);
    else if (*e) run_eval(ev);
    else {
      std::cerr << app.help();
      return 2;
    }
  } catch (const std::exception& ex) {
    std::error_code ec;
    for (const auto& p : g_written) fs::remove(p, ec);
    std::cerr << "subtail: error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
