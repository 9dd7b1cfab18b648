// Dense row-major tensor. The buffer is shared between copies and treated
// as immutable once a tensor has been handed to the graph; in-place writes
// are reserved for construction and for the optimizer update.
//
// Scalar type S is float in normal runs and double in the gradient-check
// mode.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include "duett/error.hpp"

namespace duett {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename S>
class Tensor {
 public:
  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(
            static_cast<std::size_t>(shape_numel(shape_)), S(0))) {}

  Tensor(Shape shape, S fill)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(
            static_cast<std::size_t>(shape_numel(shape_)), fill)) {}

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(std::move(data))) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_->size()))
      throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(S v) { return Tensor(Shape{}, std::vector<S>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

  // 2-D view helpers: leading dimension x everything else.
  std::int64_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::int64_t cols() const { return shape_.empty() ? 1 : numel() / std::max<std::int64_t>(shape_[0], 1); }

  std::span<S> data() { return {data_->data(), data_->size()}; }
  std::span<const S> data() const { return {data_->data(), data_->size()}; }
  S* ptr() { return data_->data(); }
  const S* ptr() const { return data_->data(); }

  S& at(std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  S at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  S& at2(std::int64_t r, std::int64_t c) { return (*data_)[static_cast<std::size_t>(r * cols() + c)]; }
  S at2(std::int64_t r, std::int64_t c) const { return (*data_)[static_cast<std::size_t>(r * cols() + c)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Shares the underlying buffer; only the shape changes.
  Tensor reshape(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<S>>(*data_);
    return t;
  }

  bool shares_buffer(const Tensor& o) const { return data_ == o.data_; }

  bool all_finite() const {
    for (S v : *data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_->size());
    for (std::size_t i = 0; i < data_->size(); ++i)
      out[i] = static_cast<T>((*data_)[i]);
    return Tensor<T>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;

  template <typename>
  friend class Tensor;
};

}  // namespace duett
