#include "diffcast/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace diffcast {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
    throw std::invalid_argument("tensor data size does not match shape " + shape_to_string(shape_));
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, real value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(real value) { return Tensor({1}, {value}); }

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape_); }

int64_t Tensor::size(int64_t axis) const {
  if (axis < 0) axis += ndim();
  if (axis < 0 || axis >= ndim()) throw std::out_of_range("tensor axis out of range");
  return shape_[static_cast<size_t>(axis)];
}

real Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor with numel != 1");
  return data_[0];
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel())
    throw std::invalid_argument("reshape " + shape_str() + " -> " + shape_to_string(new_shape) + " changes numel");
  Tensor out(std::move(new_shape), data_);
  return out;
}

Tensor Tensor::permuted(const std::vector<int64_t>& perm) const {
  const int64_t nd = ndim();
  if (static_cast<int64_t>(perm.size()) != nd) throw std::invalid_argument("permutation rank mismatch");
  Shape out_shape(perm.size());
  std::vector<int64_t> in_strides(perm.size()), out_strides(perm.size());
  int64_t s = 1;
  for (int64_t i = nd - 1; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] = s;
    s *= shape_[static_cast<size_t>(i)];
  }
  for (int64_t i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = shape_[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  s = 1;
  for (int64_t i = nd - 1; i >= 0; --i) {
    out_strides[static_cast<size_t>(i)] = s;
    s *= out_shape[static_cast<size_t>(i)];
  }
  Tensor out(out_shape);
  std::vector<int64_t> idx(perm.size(), 0);
  const int64_t n = numel();
  for (int64_t flat_out = 0; flat_out < n; ++flat_out) {
    int64_t rem = flat_out, flat_in = 0;
    for (int64_t i = 0; i < nd; ++i) {
      const int64_t c = rem / out_strides[static_cast<size_t>(i)];
      rem -= c * out_strides[static_cast<size_t>(i)];
      flat_in += c * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    out.data_[static_cast<size_t>(flat_out)] = data_[static_cast<size_t>(flat_in)];
  }
  return out;
}

Tensor Tensor::slice_axis0(int64_t start, int64_t len) const {
  if (ndim() < 1) throw std::invalid_argument("slice_axis0 on scalar");
  const int64_t d0 = shape_[0];
  if (start < 0 || len < 0 || start + len > d0) throw std::out_of_range("slice_axis0 range");
  const int64_t inner = numel() / std::max<int64_t>(d0, 1);
  Shape out_shape = shape_;
  out_shape[0] = len;
  Tensor out(out_shape);
  std::copy_n(data_.begin() + static_cast<size_t>(start * inner), static_cast<size_t>(len * inner), out.data_.begin());
  return out;
}

void Tensor::fill(real value) { std::fill(data_.begin(), data_.end(), value); }

void Tensor::add_(const Tensor& other) {
  check_same_shape(*this, other, "add_");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void Tensor::scale_(real factor) {
  for (auto& v : data_) v *= factor;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](real v) { return std::isfinite(v); });
}

real Tensor::min() const {
  if (data_.empty()) throw std::logic_error("min() on empty tensor");
  return *std::min_element(data_.begin(), data_.end());
}

real Tensor::max() const {
  if (data_.empty()) throw std::logic_error("max() on empty tensor");
  return *std::max_element(data_.begin(), data_.end());
}

real Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

real Tensor::mean() const {
  if (data_.empty()) throw std::logic_error("mean() on empty tensor");
  return sum() / static_cast<real>(data_.size());
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!same_shape(a, b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace diffcast
