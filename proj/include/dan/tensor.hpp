#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dan/errors.hpp"

namespace dan {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense N-d array (rank <= 4, images laid out NxCxHxW) with an optional
// same-shape gradient buffer. Copies are shallow: they alias the same data
// and gradient storage.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(shape_numel(shape_), S(0))) {
    check_rank();
    if (requires_grad) grad_ = std::make_shared<std::vector<S>>(data_->size(), S(0));
  }

  Tensor(Shape shape, std::initializer_list<S> values, bool requires_grad = false)
      : Tensor(std::move(shape), std::vector<S>(values), requires_grad) {}

  Tensor(Shape shape, std::vector<S> values, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<S>>(std::move(values))) {
    check_rank();
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_->size()))
      throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                           " does not match shape " + shape_str(shape_));
    if (requires_grad) grad_ = std::make_shared<std::vector<S>>(data_->size(), S(0));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  bool requires_grad() const { return static_cast<bool>(grad_); }
  void set_requires_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<S>>(data_->size(), S(0));
  }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }
  S* grad() { return grad_ ? grad_->data() : nullptr; }
  const S* grad() const { return grad_ ? grad_->data() : nullptr; }

  std::vector<S>& data_vec() { return *data_; }
  const std::vector<S>& data_vec() const { return *data_; }
  std::vector<S>& grad_vec() { return *grad_; }
  const std::vector<S>& grad_vec() const { return *grad_; }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), S(0));
  }

  bool is_scalar() const { return size() == 1; }

  S item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  // Deep copy of data (and a fresh zero gradient buffer when requested).
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape_, *data_, requires_grad);
  }

  bool same_buffer(const Tensor& other) const { return data_ == other.data_; }

 private:
  void check_rank() const {
    if (shape_.size() > 4) throw DimensionError("rank > 4 unsupported: " + shape_str(shape_));
    for (int e : shape_)
      if (e <= 0) throw DimensionError("nonpositive extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
  std::shared_ptr<std::vector<S>> grad_;
};

// Recorded reverse pass. Operations append a pull closure in execution order;
// backward() runs them in exact reverse, each one accumulating into the
// gradient buffers of its inputs.
template <typename S>
class Tape {
 public:
  void record(std::function<void()> pull) { nodes_.push_back(std::move(pull)); }

  std::size_t size() const { return nodes_.size(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// Seeds d(root)/d(root) = 1 and pulls gradients back through the tape.
// Gradients accumulate across calls until explicitly zeroed.
template <typename S>
void backward(Tape<S>& tape, Tensor<S>& root) {
  if (!root.is_scalar())
    throw DimensionError("backward root must be scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad())
    throw DimensionError("backward root does not require grad");
  root.grad()[0] += S(1);
  tape.run_backward();
}

}  // namespace dan
