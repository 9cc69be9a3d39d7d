#include "morphgrad/tensor.hpp"

#include <cmath>
#include <sstream>

namespace morphgrad {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

namespace {
void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extent must be >= 1, got shape " + shape_str(shape));
  }
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_ = std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  check_shape(shape_);
  if (values.size() != shape_numel(shape_)) {
    throw ShapeError("payload of " + std::to_string(values.size()) +
                     " values does not fill shape " + shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : *t.data_) v = value;
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::of(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::numel() const { return data_ ? data_->size() : 0; }

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  return shape_[axis];
}

std::span<const double> Tensor::data() const {
  return data_ ? std::span<const double>(*data_) : std::span<const double>();
}

std::span<double> Tensor::mutable_data() {
  if (!data_) throw UsageError("mutable_data() on an undefined tensor");
  return std::span<double>(*data_);
}

bool Tensor::all_finite() const {
  if (!data_) return false;
  for (double v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::bind(Tape* tape, int node) {
  tape_ = tape;
  node_ = node;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

}  // namespace morphgrad
