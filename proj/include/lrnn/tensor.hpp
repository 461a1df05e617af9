// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lrnn/errors.hpp"

namespace lrnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tape;

/// Immutable dense row-major array. Copies share the underlying buffer, which is
/// never written after construction.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{0}, std::vector<T>{}) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::make_shared<const std::vector<T>>(std::move(data))) {
    if (shape_numel(shape_) != data_->size()) {
      throw DimensionError("tensor: shape " + shape_str(shape_) + " holds " +
                           std::to_string(shape_numel(shape_)) + " values, got " +
                           std::to_string(data_->size()));
    }
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T{0}); }

  static Tensor full(Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_->size(); }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  const T& operator[](std::size_t i) const { return (*data_)[i]; }

  /// Value of a one-element tensor.
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  /// Mutable copy of the values.
  std::vector<T> to_vector() const { return *data_; }

  bool requires_grad() const { return requires_grad_; }
  std::optional<std::size_t> tape_id() const { return tape_id_; }
  std::uint64_t tape_uid() const { return tape_uid_; }

  /// Same buffer viewed with another shape; the result is detached from any tape.
  Tensor view(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("view: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    out.detach_();
    return out;
  }

  Tensor detached() const {
    Tensor out = *this;
    out.detach_();
    return out;
  }

 private:
  void detach_() {
    requires_grad_ = false;
    tape_id_.reset();
    tape_uid_ = 0;
  }

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  bool requires_grad_ = false;
  std::optional<std::size_t> tape_id_;
  std::uint64_t tape_uid_ = 0;

  friend class Tape<T>;
};

}  // namespace lrnn
