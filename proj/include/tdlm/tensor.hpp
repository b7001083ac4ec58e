#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "tdlm/error.hpp"

#ifndef TDLM_SCALAR
#define TDLM_SCALAR double
#endif

namespace tdlm {

using Scalar = TDLM_SCALAR;
using Shape = std::vector<std::size_t>;
// Per-position flags (0 or 1); used for loss masks.
using Mask = std::vector<std::uint8_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array with an optional gradient buffer of the same length.
// Rank-1 tensors behave as a single row wherever a matrix is expected.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<Scalar> values);
  static Tensor scalar(Scalar value);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  std::vector<Scalar>& values() { return data_; }
  const std::vector<Scalar>& values() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }
  Scalar& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Scalar at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool has_grad() const { return !grad_.empty(); }
  // Allocates a zeroed gradient buffer if none exists.
  std::span<Scalar> grad();
  std::span<const Scalar> grad() const { return grad_; }
  void zero_grad();
  void drop_grad() { grad_.clear(); }

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Scalar> data_;
  std::vector<Scalar> grad_;
};

}  // namespace tdlm
