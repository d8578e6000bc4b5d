#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "alocc/errors.hpp"

namespace alocc::ng {

// Shape of a dense row-major tensor. Empty shape means scalar (one element).
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shape_eq(const Shape& a, const Shape& b);

// Dense f64 tensor. Data is always row-major and always finite: constructors
// reject NaN/Inf so divergence surfaces at the op that produced it instead of
// propagating silently.
//
// A tensor optionally carries the id of the tape node that produced it (see
// tape.hpp). Tensors with node() < 0 are plain constants.
class Tensor {
 public:
  Tensor() : shape_{}, data_{0.0} {}
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  std::span<const double> data() const { return data_; }
  // Mutable access for optimizer updates on parameter tensors. Finiteness is
  // re-checked by check_finite() callers after bulk writes.
  std::span<double> mutable_data() { return data_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool value) { requires_grad_ = value; }
  int node() const { return node_; }

  double at(std::size_t flat_index) const;
  // Value of a one-element tensor.
  double scalar_value() const;

  // Same data and same tape node under a different shape. The element count
  // must match; this is metadata only, no copy of the gradient structure.
  Tensor reshaped(Shape new_shape) const;

  void check_finite(const std::string& context) const;

 private:
  friend class Tape;

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  int node_ = -1;
};

}  // namespace alocc::ng
