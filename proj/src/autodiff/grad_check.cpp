#include "stacklab/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace stacklab {

template <typename Scalar>
GradCheckReport grad_check(const std::function<NodeId(BasicGraph<Scalar>&)>& builder,
                           const NamedParams<Scalar>& params,
                           const GradCheckOptions<Scalar>& options) {
  GradCheckReport report;
  for (auto& [name, tensor] : params) {
    tensor->requires_grad = true;
    tensor->grad.reset();
  }

  std::vector<std::vector<Scalar>> analytic;
  try {
    BasicGraph<Scalar> graph;
    const NodeId loss = builder(graph);
    graph.backward(loss);
    for (auto& [name, tensor] : params) {
      std::vector<Scalar> g = tensor->grad ? *tensor->grad
                                           : std::vector<Scalar>(tensor->size(), Scalar(0));
      if (options.tamper) options.tamper(name, g);
      analytic.push_back(std::move(g));
    }
  } catch (const NonFiniteError&) {
    report.passed = false;
    report.max_deviation = INFINITY;
    for (auto& [name, tensor] : params) report.entries.push_back({name, INFINITY, INFINITY, false});
    return report;
  }

  auto evaluate = [&]() -> double {
    BasicGraph<Scalar> graph;
    return double(graph.scalar(builder(graph)));
  };

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& [name, tensor] = params[p];
    GradCheckEntry entry{name};
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double a = analytic[p][i];
      if (!std::isfinite(a)) {
        entry.finite = false;
        continue;
      }
      const Scalar saved = tensor->data[i];
      tensor->data[i] = Scalar(double(saved) + options.step);
      const double up = evaluate();
      tensor->data[i] = Scalar(double(saved) - options.step);
      const double down = evaluate();
      tensor->data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double err = std::abs(a - numeric);
      entry.max_abs_error = std::max(entry.max_abs_error, err);
      entry.max_deviation = std::max(entry.max_deviation, err / (std::abs(numeric) + options.eps));
    }
    if (!entry.finite) entry.max_deviation = INFINITY;
    report.max_deviation = std::max(report.max_deviation, entry.max_deviation);
    report.entries.push_back(std::move(entry));
  }
  for (auto& [name, tensor] : params) tensor->grad.reset();
  report.passed = report.max_deviation <= options.tol;
  return report;
}

template GradCheckReport grad_check<float>(const std::function<NodeId(BasicGraph<float>&)>&,
                                           const NamedParams<float>&,
                                           const GradCheckOptions<float>&);
template GradCheckReport grad_check<double>(const std::function<NodeId(BasicGraph<double>&)>&,
                                            const NamedParams<double>&,
                                            const GradCheckOptions<double>&);

}  // namespace stacklab
