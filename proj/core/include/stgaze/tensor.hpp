#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stgaze/rng.hpp"

namespace stgaze {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  return shape.empty() ? std::string("scalar") : os.str();
}

// Dense row-major tensor over a contiguous buffer. The flat index of
// (i_0, ..., i_{k-1}) is sum(i_j * stride_j) with stride_{k-1} = 1.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), S(0));
  }

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
      throw std::invalid_argument("tensor: buffer size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, double mean, double std) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<S>(rng.normal(mean, std));
    return t;
  }

  bool empty() const { return shape_.empty(); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  S& at(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
  const S& at(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }

  S& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }
  const S& at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }

  void fill(S value) {
    for (auto& x : data_) x = value;
  }

  void zero() { fill(S(0)); }

  // Converts between precisions (float training vs double verification).
  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return Tensor<T>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  void validate_shape() const {
    for (int d : shape_) {
      if (d < 1) {
        throw std::invalid_argument("tensor: all dimensions must be >= 1, got " +
                                    shape_str(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<S> data_;
};

}  // namespace stgaze
