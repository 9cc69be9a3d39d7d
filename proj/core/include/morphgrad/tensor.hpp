#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "morphgrad/errors.hpp"

namespace morphgrad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

/// Dense N-dimensional array of 64-bit reals, row-major.
///
/// Convention for activations: [batch, channels, depth, height, width].
/// Copies are shallow (the payload is shared); payloads are written only
/// during construction and by the optimizer, never by operations, so a
/// tensor recorded on a tape keeps the value its node saw.
class Tensor {
 public:
  Tensor() = default;

  /// Zero-filled tensor.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);  // shape {1}
  /// 1-D tensor from a braced list, handy in tests.
  static Tensor of(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const;
  std::size_t extent(std::size_t axis) const;

  std::span<const double> data() const;
  /// Mutable payload access. Callers must not mutate a tensor that has
  /// already been recorded on a tape.
  std::span<double> mutable_data();

  double operator[](std::size_t flat) const { return (*data_)[flat]; }

  bool defined() const { return static_cast<bool>(data_); }
  bool all_finite() const;

  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }
  /// Associate this tensor with a tape node. Used by Tape and by the
  /// operation implementations; not part of normal user code.
  void bind(Tape* tape, int node);
  /// Untracked alias sharing the same payload.
  Tensor detached() const;

  const std::shared_ptr<std::vector<double>>& payload() const { return data_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Row-major strides for a shape.
std::vector<std::size_t> strides_of(const Shape& shape);

}  // namespace morphgrad
