#include "deqr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deqr/errors.hpp"

namespace deqr {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void require_vector(const Tensor& t, const char* name) {
  if (!t.is_vector()) {
    throw DimensionError(std::string(name) + ": expected a vector, got rank " +
                         std::to_string(t.rank()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(where) + ": operand shapes differ");
  }
}

void require_finite(const Tensor& t, const char* where) {
  if (!all_finite(t)) {
    throw NumericError(std::string(where) + ": non-finite input");
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw DimensionError("Tensor: empty shape");
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("Tensor: zero dimension");
  }
  if (shape_product(shape_) != data_.size()) {
    throw DimensionError("Tensor: shape product " +
                         std::to_string(shape_product(shape_)) +
                         " != data length " + std::to_string(data_.size()));
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::vector(std::vector<double> entries) {
  std::size_t n = entries.size();
  return Tensor({n}, std::move(entries));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> entries) {
  return Tensor({rows, cols}, std::move(entries));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::size_t Tensor::rows() const {
  if (!is_matrix()) throw DimensionError("Tensor::rows: not a matrix");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (!is_matrix()) throw DimensionError("Tensor::cols: not a matrix");
  return shape_[1];
}

double Tensor::scalar_value() const {
  if (numel() != 1) {
    throw DimensionError("Tensor::scalar_value: tensor has " +
                         std::to_string(numel()) + " entries");
  }
  return data_[0];
}

bool all_finite(const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor matvec(const Tensor& W, const Tensor& v) {
  if (!W.is_matrix()) throw DimensionError("matvec: W is not a matrix");
  require_vector(v, "matvec: v");
  if (W.cols() != v.numel()) {
    throw DimensionError("matvec: W has " + std::to_string(W.cols()) +
                         " columns but v has " + std::to_string(v.numel()) +
                         " entries");
  }
  Tensor out = Tensor::zeros({W.rows()});
  for (std::size_t i = 0; i < W.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < W.cols(); ++j) acc += W(i, j) * v[j];
    out[i] = acc;
  }
  return out;
}

Tensor affine(const Tensor& W, const Tensor& v, const Tensor& b) {
  require_vector(b, "affine: b");
  Tensor out = matvec(W, v);
  if (b.numel() != out.numel()) {
    throw DimensionError("affine: b has " + std::to_string(b.numel()) +
                         " entries but W has " + std::to_string(out.numel()) +
                         " rows");
  }
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] + b[i];
  if (!all_finite(out)) throw NumericError("affine: non-finite result");
  return out;
}

Tensor softmax(const Tensor& logits) {
  require_vector(logits, "softmax: logits");
  require_finite(logits, "softmax");
  const std::size_t n = logits.numel();
  double mx = logits[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  Tensor out = Tensor::zeros({n});
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= total;
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  require_vector(logits, "log_softmax: logits");
  require_finite(logits, "log_softmax");
  const std::size_t n = logits.numel();
  double mx = logits[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += std::exp(logits[i] - mx);
  const double lse = mx + std::log(total);
  Tensor out = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = logits[i] - lse;
  return out;
}

double pred_entropy(const Tensor& logits) {
  const Tensor p = softmax(logits);
  const Tensor lp = log_softmax(logits);
  double h = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    if (p[i] > 0.0) h -= p[i] * lp[i];
  }
  return h;
}

double cross_entropy(const Tensor& logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.numel()) {
    throw IndexError("cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(logits.numel()) +
                     " classes");
  }
  const Tensor lp = log_softmax(logits);
  return -lp[static_cast<std::size_t>(label)];
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

double linf_dist(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "linf_dist");
  double mx = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    mx = std::max(mx, std::abs(a[i] - b[i]));
  }
  return mx;
}

std::size_t argmax(const Tensor& a) {
  if (a.empty()) throw DimensionError("argmax: empty tensor");
  std::size_t best = 0;
  for (std::size_t i = 1; i < a.numel(); ++i) {
    if (a[i] > a[best]) best = i;
  }
  return best;
}

}  // namespace deqr
