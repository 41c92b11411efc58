#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace diffcast {

using real = double;
using Shape = std::vector<int64_t>;

// Dense row-major tensor of doubles. Value semantics throughout; all model
// state at desk scale is small enough that copies are not a concern.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<real> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, real value);
  static Tensor scalar(real value);
  static Tensor zeros_like(const Tensor& other);

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size(int64_t axis) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  real item() const;  // requires numel() == 1

  Tensor reshaped(Shape new_shape) const;
  Tensor permuted(const std::vector<int64_t>& perm) const;
  Tensor slice_axis0(int64_t start, int64_t len) const;

  void fill(real value);
  void add_(const Tensor& other);           // elementwise +=
  void scale_(real factor);
  bool all_finite() const;

  real min() const;
  real max() const;
  real sum() const;
  real mean() const;

  std::string shape_str() const;

 private:
  Shape shape_;
  std::vector<real> data_;
};

int64_t shape_numel(const Shape& shape);
bool same_shape(const Tensor& a, const Tensor& b);
std::string shape_to_string(const Shape& shape);

// Throws std::invalid_argument mentioning `what` when shapes differ.
void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace diffcast
