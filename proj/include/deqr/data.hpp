#pragma once

#include <vector>

#include "deqr/tensor.hpp"

namespace deqr {

// Axis-aligned box of valid inputs, one (lo, hi) pair per feature.
struct DomainBox {
  std::vector<double> lo;
  std::vector<double> hi;

  static DomainBox cube(std::size_t dims, double lo_value, double hi_value) {
    return {std::vector<double>(dims, lo_value),
            std::vector<double>(dims, hi_value)};
  }

  bool contains(const Tensor& x, double slack = 0.0) const {
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (x[i] < lo[i] - slack || x[i] > hi[i] + slack) return false;
    }
    return true;
  }

  Tensor clip(Tensor x) const {
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (x[i] < lo[i]) x[i] = lo[i];
      if (x[i] > hi[i]) x[i] = hi[i];
    }
    return x;
  }
};

// Clip every coordinate into [center - radius, center + radius].
inline Tensor clip_ball(Tensor x, const Tensor& center, double radius) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double lo = center[i] - radius;
    const double hi = center[i] + radius;
    if (x[i] < lo) x[i] = lo;
    if (x[i] > hi) x[i] = hi;
  }
  return x;
}

struct LabeledBatch {
  std::vector<Tensor> inputs;
  std::vector<int> labels;

  std::size_t size() const { return inputs.size(); }
};

}  // namespace deqr
