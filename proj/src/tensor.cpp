#include "alocc/tensor.hpp"

#include <cmath>
#include <sstream>

namespace alocc::ng {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
  detail::require(data_.size() == shape_numel(shape_),
                  "tensor: data size " + std::to_string(data_.size()) +
                      " does not match shape " + shape_str(shape_));
  check_finite("tensor construction");
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

double Tensor::at(std::size_t flat_index) const {
  detail::require(flat_index < data_.size(), "tensor: flat index out of range");
  return data_[flat_index];
}

double Tensor::scalar_value() const {
  detail::require(data_.size() == 1,
                  "tensor: scalar_value() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape new_shape) const {
  detail::require(shape_numel(new_shape) == data_.size(),
                  "tensor: reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                      " changes element count");
  Tensor out = *this;
  out.shape_ = std::move(new_shape);
  return out;
}

void Tensor::check_finite(const std::string& context) const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value in " + context);
    }
  }
}

}  // namespace alocc::ng
