#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deqr/data.hpp"
#include "deqr/tensor.hpp"

namespace deqr {

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

enum class DatasetKind : std::uint8_t { kTwoMoons = 0, kGaussianBlobs = 1 };

struct Dataset {
  std::vector<Tensor> features;
  std::vector<int> labels;
  std::vector<Split> split;
  DomainBox domain;
  std::size_t num_classes = 0;
  // Smallest usable perturbation scale of the geometry: for blobs the
  // documented chord - 4 * noise bound, for two moons the measured smallest
  // cross-class distance.
  double margin = 0.0;
  std::string generator;
  std::uint64_t seed = 0;

  std::size_t size() const { return features.size(); }
  std::size_t feature_dim() const {
    return features.empty() ? 0 : features.front().numel();
  }
  LabeledBatch batch(Split which) const;
};

// Deterministic synthetic data, split 70/15/15. Domain box is [-3, 3] per
// feature; points are clipped into it.
Dataset gen_dataset(DatasetKind kind, std::size_t n, double noise,
                    std::size_t num_classes, std::uint64_t seed);

DatasetKind dataset_kind_from_name(const std::string& name);
std::string dataset_kind_name(DatasetKind kind);

// Binary round trip (magic "DEQD", little-endian).
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// CSV ingestion: one row per example, label first, then the features. The
// domain box is given by the caller; splits are re-drawn from the seed.
Dataset load_dataset_csv(const std::string& path, const DomainBox& domain,
                         std::uint64_t seed);

}  // namespace deqr
