#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace stacklab {

/// Raised when an operation receives or produces NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when operand shapes do not conform to an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of rank 1 or 2. Rank-1 tensors behave as column
/// vectors in every operation.
template <typename Scalar>
struct BasicTensor {
  std::vector<std::size_t> shape;
  std::vector<Scalar> data;
  bool requires_grad = false;
  std::optional<std::vector<Scalar>> grad;

  BasicTensor() = default;

  BasicTensor(std::size_t rows, std::size_t cols, Scalar fill = Scalar(0))
      : shape{rows, cols}, data(rows * cols, fill) {}

  static BasicTensor column(std::vector<Scalar> values) {
    BasicTensor t;
    t.shape = {values.size(), 1};
    t.data = std::move(values);
    return t;
  }

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  std::size_t size() const { return data.size(); }

  Scalar& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  Scalar at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool all_finite() const {
    for (Scalar v : data) {
      if (!std::isfinite(v)) return false;
    }
    if (grad) {
      for (Scalar v : *grad) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), Scalar(0));
  }

  /// Allocates the gradient accumulator if absent.
  std::vector<Scalar>& ensure_grad() {
    if (!grad) grad.emplace(data.size(), Scalar(0));
    return *grad;
  }
};

using Tensor = BasicTensor<float>;

std::string shape_string(const std::vector<std::size_t>& shape);

}  // namespace stacklab
