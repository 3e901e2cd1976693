#include "deqr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "deqr/errors.hpp"
#include "deqr/rng.hpp"

namespace deqr {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDomainLo = -3.0;
constexpr double kDomainHi = 3.0;
constexpr char kDatasetMagic[4] = {'D', 'E', 'Q', 'D'};
constexpr std::uint32_t kDatasetVersion = 1;

void assign_splits(Dataset& ds, Rng& rng) {
  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  const std::size_t n_train = (n * 70) / 100;
  const std::size_t n_val = (n * 15) / 100;
  ds.split.assign(n, Split::kTest);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train) {
      ds.split[order[i]] = Split::kTrain;
    } else if (i < n_train + n_val) {
      ds.split[order[i]] = Split::kVal;
    }
  }
}

double measured_cross_class_margin(const Dataset& ds) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = i + 1; j < ds.size(); ++j) {
      if (ds.labels[i] == ds.labels[j]) continue;
      best = std::min(best, norm2(sub(ds.features[i], ds.features[j])));
    }
  }
  return std::isfinite(best) ? best : 0.0;
}

}  // namespace

LabeledBatch Dataset::batch(Split which) const {
  LabeledBatch out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (split[i] == which) {
      out.inputs.push_back(features[i]);
      out.labels.push_back(labels[i]);
    }
  }
  return out;
}

DatasetKind dataset_kind_from_name(const std::string& name) {
  if (name == "two_moons") return DatasetKind::kTwoMoons;
  if (name == "gaussian_blobs") return DatasetKind::kGaussianBlobs;
  throw ConfigError("unknown dataset kind '" + name + "'");
}

std::string dataset_kind_name(DatasetKind kind) {
  return kind == DatasetKind::kTwoMoons ? "two_moons" : "gaussian_blobs";
}

Dataset gen_dataset(DatasetKind kind, std::size_t n, double noise,
                    std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("gen_dataset: need >= 2 classes");
  if (n < 10 * num_classes) {
    throw ConfigError("gen_dataset: need n >= 10 * classes");
  }
  if (noise < 0.0) throw ConfigError("gen_dataset: noise must be >= 0");
  if (kind == DatasetKind::kTwoMoons && num_classes != 2) {
    throw ConfigError("gen_dataset: two_moons is a 2-class set");
  }

  Dataset ds;
  ds.num_classes = num_classes;
  ds.generator = dataset_kind_name(kind);
  ds.seed = seed;
  ds.domain = DomainBox::cube(2, kDomainLo, kDomainHi);

  Rng rng(seed);
  ds.features.reserve(n);
  ds.labels.reserve(n);

  if (kind == DatasetKind::kTwoMoons) {
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % 2);
      const double angle = kPi * rng.uniform();
      double px, py;
      if (label == 0) {
        px = std::cos(angle);
        py = std::sin(angle);
      } else {
        px = 1.0 - std::cos(angle);
        py = 0.5 - std::sin(angle);
      }
      px += noise * rng.normal();
      py += noise * rng.normal();
      ds.features.push_back(
          ds.domain.clip(Tensor::vector({px, py})));
      ds.labels.push_back(label);
    }
    ds.margin = measured_cross_class_margin(ds);
  } else {
    const double radius = 2.0;
    const double chord =
        2.0 * radius * std::sin(kPi / static_cast<double>(num_classes));
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % num_classes);
      const double theta =
          2.0 * kPi * static_cast<double>(label) /
          static_cast<double>(num_classes);
      const double px = radius * std::cos(theta) + noise * rng.normal();
      const double py = radius * std::sin(theta) + noise * rng.normal();
      ds.features.push_back(ds.domain.clip(Tensor::vector({px, py})));
      ds.labels.push_back(label);
    }
    ds.margin = std::max(chord - 4.0 * noise, 0.0);
  }

  assign_splits(ds, rng);
  return ds;
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_u64(out, bits);
}

std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (in.gcount() != 4) {
    throw TruncationError(std::string("dataset: truncated while reading ") +
                          what);
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in, const char* what) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (in.gcount() != 8) {
    throw TruncationError(std::string("dataset: truncated while reading ") +
                          what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in, const char* what) {
  const std::uint64_t bits = read_u64(in, what);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_dataset: cannot open '" + path + "'");
  out.write(kDatasetMagic, 4);
  write_u32(out, kDatasetVersion);
  write_u64(out, ds.size());
  write_u64(out, ds.feature_dim());
  write_u64(out, ds.num_classes);
  write_f64(out, ds.margin);
  write_u64(out, ds.seed);
  write_u32(out, static_cast<std::uint32_t>(ds.generator.size()));
  out.write(ds.generator.data(),
            static_cast<std::streamsize>(ds.generator.size()));
  for (std::size_t i = 0; i < ds.feature_dim(); ++i) {
    write_f64(out, ds.domain.lo[i]);
    write_f64(out, ds.domain.hi[i]);
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_u32(out, static_cast<std::uint32_t>(ds.labels[i]));
    write_u32(out, static_cast<std::uint32_t>(ds.split[i]));
    for (double v : ds.features[i].data()) write_f64(out, v);
  }
  if (!out) throw IoError("save_dataset: write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_dataset: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4) throw TruncationError("dataset: truncated magic");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
    throw BadMagicError("dataset: bad magic in '" + path + "'");
  }
  const std::uint32_t version = read_u32(in, "version");
  if (version != kDatasetVersion) {
    throw VersionMismatchError(version, kDatasetVersion,
                               "dataset: version " + std::to_string(version) +
                                   ", expected " +
                                   std::to_string(kDatasetVersion));
  }
  Dataset ds;
  const std::uint64_t n = read_u64(in, "count");
  const std::uint64_t dim = read_u64(in, "feature dim");
  ds.num_classes = read_u64(in, "classes");
  ds.margin = read_f64(in, "margin");
  ds.seed = read_u64(in, "seed");
  const std::uint32_t gen_len = read_u32(in, "generator length");
  ds.generator.resize(gen_len);
  in.read(ds.generator.data(), gen_len);
  if (in.gcount() != static_cast<std::streamsize>(gen_len)) {
    throw TruncationError("dataset: truncated generator name");
  }
  ds.domain.lo.resize(dim);
  ds.domain.hi.resize(dim);
  for (std::uint64_t i = 0; i < dim; ++i) {
    ds.domain.lo[i] = read_f64(in, "domain lo");
    ds.domain.hi[i] = read_f64(in, "domain hi");
  }
  ds.features.reserve(n);
  ds.labels.reserve(n);
  ds.split.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    ds.labels.push_back(static_cast<int>(read_u32(in, "label")));
    const std::uint32_t split = read_u32(in, "split tag");
    if (split > 2) throw IoError("dataset: invalid split tag");
    ds.split.push_back(static_cast<Split>(split));
    std::vector<double> row(dim);
    for (std::uint64_t k = 0; k < dim; ++k) row[k] = read_f64(in, "feature");
    ds.features.push_back(Tensor::vector(std::move(row)));
  }
  return ds;
}

Dataset load_dataset_csv(const std::string& path, const DomainBox& domain,
                         std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw IoError("load_dataset_csv: cannot open '" + path + "'");
  Dataset ds;
  ds.domain = domain;
  ds.generator = "csv:" + path;
  ds.seed = seed;
  std::string line;
  std::size_t dim = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream row(line);
    std::string cell;
    std::vector<double> values;
    while (std::getline(row, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError("load_dataset_csv: bad number '" + cell + "' in '" +
                      path + "'");
      }
    }
    if (values.size() < 2) {
      throw IoError("load_dataset_csv: row needs a label and features");
    }
    if (dim == 0) {
      dim = values.size() - 1;
      if (domain.lo.size() != dim) {
        throw ConfigError("load_dataset_csv: domain box has " +
                          std::to_string(domain.lo.size()) +
                          " entries, rows have " + std::to_string(dim) +
                          " features");
      }
    } else if (values.size() - 1 != dim) {
      throw IoError("load_dataset_csv: inconsistent feature count");
    }
    const int label = static_cast<int>(values[0]);
    max_label = std::max(max_label, label);
    ds.labels.push_back(label);
    ds.features.push_back(
        Tensor::vector({values.begin() + 1, values.end()}));
  }
  if (ds.size() == 0) throw IoError("load_dataset_csv: no rows in '" + path + "'");
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  for (const Tensor& f : ds.features) {
    if (!ds.domain.contains(f)) {
      throw ConfigError("load_dataset_csv: feature outside the domain box");
    }
  }
  ds.margin = measured_cross_class_margin(ds);
  Rng rng(seed);
  assign_splits(ds, rng);
  return ds;
}

}  // namespace deqr
