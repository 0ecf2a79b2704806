#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stacklab/graph.hpp"

namespace stacklab {

struct GradCheckEntry {
  std::string name;
  double max_deviation = 0.0;  // max |analytic - numeric| / (|numeric| + eps)
  double max_abs_error = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_deviation = 0.0;
  bool passed = true;
};

template <typename Scalar>
struct GradCheckOptions {
  double step = 1e-3;  // central-difference half width
  double eps = 1e-2;   // turns the relative tolerance into an absolute floor of eps * tol
  double tol = 1e-4;
  /// Test hook applied to each analytic gradient before comparison.
  std::function<void(std::string_view, std::vector<Scalar>&)> tamper;
};

template <typename Scalar>
using NamedParams = std::vector<std::pair<std::string, BasicTensor<Scalar>*>>;

/// Compares reverse-mode gradients of `builder`'s scalar output against central
/// finite differences for every listed parameter. `builder` must be
/// deterministic; it is invoked once for the analytic pass and twice per
/// parameter entry. Non-finite gradients are reported as failures.
template <typename Scalar>
GradCheckReport grad_check(const std::function<NodeId(BasicGraph<Scalar>&)>& builder,
                           const NamedParams<Scalar>& params,
                           const GradCheckOptions<Scalar>& options = {});

}  // namespace stacklab
