#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace deqr {

// Dense real-valued array, row-major.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor vector(std::vector<double> entries);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> entries);
  static Tensor scalar(double value);  // shape {1}

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  bool is_vector() const noexcept { return shape_.size() == 1; }
  bool is_matrix() const noexcept { return shape_.size() == 2; }
  std::size_t rows() const;
  std::size_t cols() const;

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  // Matrix element access.
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }
  double scalar_value() const;

  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& raw() noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  bool same_shape(const Tensor& other) const noexcept {
    return shape_ == other.shape_;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

bool all_finite(const Tensor& t);

// W[m x n] * v[n] + b[m]
Tensor affine(const Tensor& W, const Tensor& v, const Tensor& b);
// W[m x n] * v[n]
Tensor matvec(const Tensor& W, const Tensor& v);

// Probabilities from logits, max-subtracted for stability; sums to 1.
Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);
// Shannon entropy of softmax(logits), natural log, 0*log 0 := 0.
double pred_entropy(const Tensor& logits);
// -log softmax(logits)[label], evaluated in log space.
double cross_entropy(const Tensor& logits, int label);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);
double linf_dist(const Tensor& a, const Tensor& b);
std::size_t argmax(const Tensor& a);

}  // namespace deqr
