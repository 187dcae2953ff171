#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace minidrive {

/// Invalid shapes, extent mismatches, out-of-range indices.
struct DimError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Config/schema/input validation failures (CLI exit code 2).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values or a failed numerical check (CLI exit code 3).
struct NumError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File-system and (de)serialization failures (CLI exit code 4).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimError("tensor extents must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major N-d array. `S` is float for training, double for
/// gradient verification. Gradients live on the Tape during backward and
/// are exported into `grad` for tensors that requested them.
template <class S>
struct Tensor {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty or data.size() elements
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), S(0)) {}
  Tensor(Shape s, std::vector<S> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw DimError("data length does not match shape " + shape_str(shape));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int extent(int axis) const { return shape.at(static_cast<size_t>(axis)); }

  std::vector<S>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    return grad;
  }
};

template <class S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

template <class S>
TensorPtr<S> make_tensor(Shape shape) {
  return std::make_shared<Tensor<S>>(std::move(shape));
}

template <class S>
TensorPtr<S> make_tensor(Shape shape, std::vector<S> data) {
  return std::make_shared<Tensor<S>>(std::move(shape), std::move(data));
}

template <class S>
TensorPtr<S> full_like_shape(Shape shape, S value) {
  auto t = make_tensor<S>(std::move(shape));
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

template <class S>
void check_finite(const Tensor<S>& t, const char* op) {
  for (S v : t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumError(std::string("non-finite value produced by ") + op);
  }
}

}  // namespace minidrive
