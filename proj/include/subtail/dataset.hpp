#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "subtail/binary_io.hpp"
#include "subtail/common.hpp"

namespace subtail {

/// Labelled feature vectors with classes ordered by decreasing size.
///
/// Construct through make_dataset(), which derives class_counts from the
/// labels and enforces the ordering invariant.
struct LongTailDataset {
  Matrix inputs;
  std::vector<int> labels;
  std::vector<std::size_t> class_counts;
  std::optional<std::vector<int>> true_subclusters;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_counts.size(); }
  std::size_t input_dim() const { return inputs.cols; }

  bool operator==(const LongTailDataset&) const = default;
};

struct GeneratorConfig {
  std::size_t num_classes = 100;
  std::size_t head_count = 500;
  double imbalance_ratio = 100.0;
  std::size_t subclusters_per_class = 3;
  std::size_t input_dim = 16;
  double noise_sigma = 0.3;
  std::uint64_t seed = 0;
  // Radius of the sphere the class means are drawn from.
  double class_separation = 3.0;
  // Radius of each component's offset from its class mean.
  double subcluster_separation = 1.5;
  // Classes smaller than this get a single component.
  std::size_t single_component_below = 10;
};

enum class Split { Many, Medium, Few };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Many: return "Many";
    case Split::Medium: return "Medium";
    case Split::Few: return "Few";
  }
  return "?";
}

// Raised by load(); kind() tells the failure modes apart.
class DatasetFormatError : public std::runtime_error {
 public:
  enum class Kind { Io, MalformedHeader, MalformedRow, RowCountMismatch, LabelOutOfRange, InvalidCounts };

  DatasetFormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline LongTailDataset make_dataset(Matrix inputs, std::vector<int> labels, std::size_t num_classes,
                                    std::optional<std::vector<int>> true_subclusters = std::nullopt) {
  if (inputs.rows != labels.size())
    throw std::invalid_argument("make_dataset: input rows and labels differ in length");
  if (true_subclusters && true_subclusters->size() != labels.size())
    throw std::invalid_argument("make_dataset: subcluster ids and labels differ in length");
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw std::invalid_argument("make_dataset: label out of range: " + std::to_string(y));
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (counts[k] == 0) throw std::invalid_argument("make_dataset: class " + std::to_string(k) + " is empty");
    if (k > 0 && counts[k] > counts[k - 1])
      throw std::invalid_argument("make_dataset: class counts must be non-increasing");
  }
  return LongTailDataset{std::move(inputs), std::move(labels), std::move(counts), std::move(true_subclusters)};
}

/// n_k = floor(n_1 * rho^(-k/(C-1))), never below one. Truncation follows the
/// usual CIFAR-LT construction (C=100, n_1=500, rho=100 gives 10847 samples).
inline std::vector<std::size_t> long_tail_counts(std::size_t num_classes, std::size_t head_count,
                                                 double imbalance_ratio) {
  std::vector<std::size_t> counts(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double expo = num_classes > 1 ? -static_cast<double>(k) / static_cast<double>(num_classes - 1) : 0.0;
    // Tolerance keeps exact powers such as 500/100 from truncating to 4.
    const double v = std::floor(static_cast<double>(head_count) * std::pow(imbalance_ratio, expo) + 1e-9);
    counts[k] = std::max<std::size_t>(1, static_cast<std::size_t>(v));
  }
  return counts;
}

inline void validate(const GeneratorConfig& cfg) {
  if (cfg.num_classes < 2) throw std::invalid_argument("generate: need at least 2 classes");
  if (cfg.input_dim < 2) throw std::invalid_argument("generate: input_dim must be >= 2");
  if (!(cfg.imbalance_ratio >= 1.0)) throw std::invalid_argument("generate: imbalance_ratio must be >= 1");
  if (static_cast<double>(cfg.head_count) < cfg.imbalance_ratio)
    throw std::invalid_argument("generate: head_count must be >= imbalance_ratio");
  if (cfg.subclusters_per_class < 1) throw std::invalid_argument("generate: subclusters_per_class must be >= 1");
  if (!(cfg.noise_sigma >= 0.0)) throw std::invalid_argument("generate: noise_sigma must be >= 0");
}

namespace detail {

inline std::vector<double> random_on_sphere(std::mt19937_64& rng, std::size_t dim, double radius) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(dim);
  double n = 0.0;
  do {
    for (double& x : v) x = gauss(rng);
    n = norm2(v);
  } while (n < 1e-12);
  for (double& x : v) x *= radius / n;
  return v;
}

// Component means per class, drawn from the seed alone so that train and test
// splits of one configuration share the same geometry.
struct MixtureLayout {
  std::vector<std::vector<std::vector<double>>> component_means;  // [class][component]
};

inline MixtureLayout mixture_layout(const GeneratorConfig& cfg, const std::vector<std::size_t>& counts) {
  std::mt19937_64 rng(cfg.seed);
  MixtureLayout layout;
  layout.component_means.resize(cfg.num_classes);
  for (std::size_t k = 0; k < cfg.num_classes; ++k) {
    const auto center = random_on_sphere(rng, cfg.input_dim, cfg.class_separation);
    std::size_t comps = counts[k] < cfg.single_component_below ? 1 : cfg.subclusters_per_class;
    comps = std::min(comps, counts[k]);
    for (std::size_t j = 0; j < comps; ++j) {
      auto mean = center;
      if (comps > 1) {
        const auto off = random_on_sphere(rng, cfg.input_dim, cfg.subcluster_separation);
        for (std::size_t t = 0; t < mean.size(); ++t) mean[t] += off[t];
      }
      layout.component_means[k].push_back(std::move(mean));
    }
  }
  return layout;
}

inline LongTailDataset sample_mixture(const GeneratorConfig& cfg, const MixtureLayout& layout,
                                      const std::vector<std::size_t>& counts, std::uint64_t sample_seed) {
  std::mt19937_64 rng(sample_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::size_t n = 0;
  for (auto c : counts) n += c;
  Matrix x(n, cfg.input_dim);
  std::vector<int> labels(n);
  std::vector<int> comp(n);
  std::size_t i = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    const auto& means = layout.component_means[k];
    for (std::size_t j = 0; j < counts[k]; ++j, ++i) {
      const std::size_t c = j % means.size();
      auto r = x.row(i);
      for (std::size_t t = 0; t < cfg.input_dim; ++t) r[t] = means[c][t] + cfg.noise_sigma * gauss(rng);
      labels[i] = static_cast<int>(k);
      comp[i] = static_cast<int>(c);
    }
  }
  return make_dataset(std::move(x), std::move(labels), counts.size(), std::move(comp));
}

inline constexpr std::uint64_t kTrainStream = 0x9E3779B97F4A7C15ull;
inline constexpr std::uint64_t kTestStream = 0xD1B54A32D192ED03ull;

}  // namespace detail

/// Gaussian-mixture long-tailed dataset. Head classes mix several components,
/// small classes a single one. Deterministic in cfg.seed.
inline LongTailDataset generate(const GeneratorConfig& cfg) {
  validate(cfg);
  const auto counts = long_tail_counts(cfg.num_classes, cfg.head_count, cfg.imbalance_ratio);
  const auto layout = detail::mixture_layout(cfg, counts);
  return detail::sample_mixture(cfg, layout, counts, cfg.seed ^ detail::kTrainStream);
}

/// Class-balanced held-out split drawn from the same mixture as generate(cfg).
/// Components are those of the long-tailed training split.
inline LongTailDataset generate_balanced_test(const GeneratorConfig& cfg, std::size_t per_class) {
  validate(cfg);
  if (per_class < 1) throw std::invalid_argument("generate_balanced_test: per_class must be >= 1");
  const auto train_counts = long_tail_counts(cfg.num_classes, cfg.head_count, cfg.imbalance_ratio);
  const auto layout = detail::mixture_layout(cfg, train_counts);
  std::vector<std::size_t> counts(cfg.num_classes, per_class);
  return detail::sample_mixture(cfg, layout, counts, cfg.seed ^ detail::kTestStream);
}

inline double imbalance_ratio(const LongTailDataset& ds) {
  const auto [lo, hi] = std::minmax_element(ds.class_counts.begin(), ds.class_counts.end());
  return static_cast<double>(*hi) / static_cast<double>(*lo);
}

inline Split split_of(std::size_t count, std::size_t many_threshold, std::size_t few_threshold) {
  if (count > many_threshold) return Split::Many;
  if (count < few_threshold) return Split::Few;
  return Split::Medium;
}

/// Many if n_k > many_threshold, Few if n_k < few_threshold, else Medium.
inline std::vector<Split> split_labels(const LongTailDataset& ds, std::size_t many_threshold,
                                       std::size_t few_threshold) {
  if (!(many_threshold > few_threshold && few_threshold >= 1))
    throw std::invalid_argument("split_labels: need many_threshold > few_threshold >= 1");
  std::vector<Split> out;
  out.reserve(ds.num_classes());
  for (auto c : ds.class_counts) out.push_back(split_of(c, many_threshold, few_threshold));
  return out;
}

// ---------------------------------------------------------------------------
// File formats

enum class DatasetFormat { Text, Binary };

inline constexpr const char* kBinaryMagic = "subtail-ds-bin v1\n";

inline void save(const LongTailDataset& ds, std::ostream& os, DatasetFormat fmt = DatasetFormat::Text) {
  const bool sub = ds.true_subclusters.has_value();
  if (fmt == DatasetFormat::Text) {
    os << "subtail-ds v1 n=" << ds.size() << " d=" << ds.input_dim() << " C=" << ds.num_classes()
       << " subclusters=" << (sub ? 1 : 0) << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
      os << ds.labels[i];
      if (sub) os << ',' << (*ds.true_subclusters)[i];
      for (double v : ds.inputs.row(i)) os << ',' << format_double(v);
      os << '\n';
    }
  } else {
    os.write(kBinaryMagic, static_cast<std::streamsize>(std::char_traits<char>::length(kBinaryMagic)));
    binio::put_u32(os, static_cast<std::uint32_t>(ds.size()));
    binio::put_u32(os, static_cast<std::uint32_t>(ds.input_dim()));
    binio::put_u32(os, static_cast<std::uint32_t>(ds.num_classes()));
    binio::put_u32(os, sub ? 1u : 0u);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      binio::put_u32(os, static_cast<std::uint32_t>(ds.labels[i]));
      if (sub) binio::put_u32(os, static_cast<std::uint32_t>((*ds.true_subclusters)[i]));
      for (double v : ds.inputs.row(i)) binio::put_f64(os, v);
    }
  }
}

inline void save(const LongTailDataset& ds, const std::string& path, DatasetFormat fmt = DatasetFormat::Text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetFormatError(DatasetFormatError::Kind::Io, "cannot open for writing: " + path);
  save(ds, os, fmt);
  if (!os) throw DatasetFormatError(DatasetFormatError::Kind::Io, "write failed: " + path);
}

namespace detail {

using FmtKind = DatasetFormatError::Kind;

struct DatasetHeader {
  std::size_t n = 0, d = 0, classes = 0;
  bool subclusters = false;
};

inline std::size_t parse_count(const std::string& tok, const std::string& key) {
  if (tok.rfind(key + "=", 0) != 0) throw DatasetFormatError(FmtKind::MalformedHeader, "expected " + key + "=<count>");
  const std::string v = tok.substr(key.size() + 1);
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw DatasetFormatError(FmtKind::MalformedHeader, "bad value for " + key + ": '" + v + "'");
  return std::stoull(v);
}

inline LongTailDataset finish_load(const DatasetHeader& h, Matrix x, std::vector<int> labels,
                                   std::optional<std::vector<int>> sub) {
  try {
    return make_dataset(std::move(x), std::move(labels), h.classes, std::move(sub));
  } catch (const std::invalid_argument& e) {
    throw DatasetFormatError(FmtKind::InvalidCounts, e.what());
  }
}

inline int checked_label(long long y, std::size_t classes, std::size_t row) {
  if (y < 0 || static_cast<std::size_t>(y) >= classes)
    throw DatasetFormatError(FmtKind::LabelOutOfRange,
                             "label out of range at row " + std::to_string(row) + ": " + std::to_string(y));
  return static_cast<int>(y);
}

inline LongTailDataset load_text(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DatasetFormatError(FmtKind::MalformedHeader, "empty file");
  std::istringstream hs(line);
  std::string magic, ver, tn, td, tc, ts, extra;
  if (!(hs >> magic >> ver >> tn >> td >> tc >> ts) || (hs >> extra) || magic != "subtail-ds" || ver != "v1")
    throw DatasetFormatError(FmtKind::MalformedHeader, "malformed header: '" + line + "'");
  DatasetHeader h;
  h.n = parse_count(tn, "n");
  h.d = parse_count(td, "d");
  h.classes = parse_count(tc, "C");
  const auto s = parse_count(ts, "subclusters");
  if (s > 1) throw DatasetFormatError(FmtKind::MalformedHeader, "subclusters must be 0 or 1");
  h.subclusters = s == 1;

  Matrix x(h.n, h.d);
  std::vector<int> labels(h.n);
  std::optional<std::vector<int>> sub;
  if (h.subclusters) sub.emplace(h.n);
  const std::size_t fields = 1 + (h.subclusters ? 1 : 0) + h.d;
  std::size_t row = 0;
  std::vector<std::string> parts;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (row == h.n)
      throw DatasetFormatError(FmtKind::RowCountMismatch, "more rows than header n=" + std::to_string(h.n));
    parts.clear();
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      parts.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (parts.size() != fields)
      throw DatasetFormatError(FmtKind::MalformedRow, "row " + std::to_string(row) + " has " +
                                                          std::to_string(parts.size()) + " fields, expected " +
                                                          std::to_string(fields));
    auto parse_int = [&](const std::string& t) {
      char* end = nullptr;
      const long long v = std::strtoll(t.c_str(), &end, 10);
      if (t.empty() || *end != '\0')
        throw DatasetFormatError(FmtKind::MalformedRow, "bad integer at row " + std::to_string(row) + ": '" + t + "'");
      return v;
    };
    std::size_t f = 0;
    labels[row] = checked_label(parse_int(parts[f++]), h.classes, row);
    if (sub) (*sub)[row] = static_cast<int>(parse_int(parts[f++]));
    for (std::size_t j = 0; j < h.d; ++j, ++f) {
      char* end = nullptr;
      const double v = std::strtod(parts[f].c_str(), &end);
      if (parts[f].empty() || *end != '\0')
        throw DatasetFormatError(FmtKind::MalformedRow,
                                 "bad float at row " + std::to_string(row) + ": '" + parts[f] + "'");
      x(row, j) = v;
    }
    ++row;
  }
  if (row != h.n)
    throw DatasetFormatError(FmtKind::RowCountMismatch,
                             "row-count mismatch: header n=" + std::to_string(h.n) + ", found " + std::to_string(row));
  return finish_load(h, std::move(x), std::move(labels), std::move(sub));
}

inline LongTailDataset load_binary(std::istream& is) {
  DatasetHeader h;
  std::uint32_t n = 0, d = 0, c = 0, s = 0;
  if (!binio::get_u32(is, n) || !binio::get_u32(is, d) || !binio::get_u32(is, c) || !binio::get_u32(is, s) || s > 1)
    throw DatasetFormatError(FmtKind::MalformedHeader, "malformed binary header");
  h.n = n, h.d = d, h.classes = c, h.subclusters = s == 1;
  Matrix x(h.n, h.d);
  std::vector<int> labels(h.n);
  std::optional<std::vector<int>> sub;
  if (h.subclusters) sub.emplace(h.n);
  auto truncated = [&](std::size_t row) {
    return DatasetFormatError(FmtKind::RowCountMismatch, "row-count mismatch: header n=" + std::to_string(h.n) +
                                                             ", data ends in row " + std::to_string(row));
  };
  for (std::size_t row = 0; row < h.n; ++row) {
    std::uint32_t y = 0;
    if (!binio::get_u32(is, y)) throw truncated(row);
    labels[row] = checked_label(y, h.classes, row);
    if (sub) {
      std::uint32_t g = 0;
      if (!binio::get_u32(is, g)) throw truncated(row);
      (*sub)[row] = static_cast<int>(g);
    }
    for (std::size_t j = 0; j < h.d; ++j)
      if (!binio::get_f64(is, x(row, j))) throw truncated(row);
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw DatasetFormatError(FmtKind::RowCountMismatch, "trailing data after " + std::to_string(h.n) + " rows");
  return finish_load(h, std::move(x), std::move(labels), std::move(sub));
}

}  // namespace detail

/// Reads either the text or the binary format, detected from the leading magic.
inline LongTailDataset load(std::istream& is) {
  const std::string magic = kBinaryMagic;
  std::string head(magic.size(), '\0');
  is.read(head.data(), static_cast<std::streamsize>(head.size()));
  const auto got = static_cast<std::size_t>(is.gcount());
  if (got == head.size() && head == magic) return detail::load_binary(is);
  is.clear();
  is.seekg(0);
  return detail::load_text(is);
}

inline LongTailDataset load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetFormatError(DatasetFormatError::Kind::Io, "cannot open: " + path);
  return load(is);
}

}  // namespace subtail
