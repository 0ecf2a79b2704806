#include "stacklab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace stacklab {

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::parameter: return "parameter";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::softmax: return "softmax";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::sum: return "sum";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::lookup: return "lookup";
    case OpKind::stack_update: return "stack_update";
    case OpKind::stack_read: return "stack_read";
  }
  return "unknown";
}

namespace {

template <typename Scalar>
void require_finite(const std::vector<Scalar>& data, std::string_view what) {
  for (Scalar v : data) {
    if (!std::isfinite(v)) {
      throw NonFiniteError("non-finite value in " + std::string(what));
    }
  }
}

[[noreturn]] void shape_mismatch(OpKind kind, const std::vector<std::size_t>& a,
                                 const std::vector<std::size_t>& b) {
  throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " + shape_string(a) +
                   " and " + shape_string(b));
}

template <typename Scalar>
Scalar sigmoid_of(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

}  // namespace

template <typename Scalar>
NodeId BasicGraph<Scalar>::parameter(TensorType& tensor) {
  if (tensor.data.size() != tensor.rows() * tensor.cols()) {
    throw ShapeError("parameter data length does not match shape " + shape_string(tensor.shape));
  }
  require_finite(tensor.data, "parameter");
  Node node;
  node.kind = OpKind::parameter;
  node.bound = &tensor;
  node.needs_grad = tensor.requires_grad;
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Scalar>
NodeId BasicGraph<Scalar>::constant(TensorType value) {
  if (value.shape.size() == 1) value.shape.push_back(1);
  if (value.data.size() != value.rows() * value.cols()) {
    throw ShapeError("constant data length does not match shape " + shape_string(value.shape));
  }
  require_finite(value.data, "constant");
  Node node;
  node.kind = OpKind::constant;
  value.requires_grad = false;
  value.grad.reset();
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Scalar>
Scalar BasicGraph<Scalar>::scalar(NodeId id) const {
  const TensorType& v = value(id);
  if (v.size() != 1) throw ShapeError("scalar() on tensor of shape " + shape_string(v.shape));
  return v.data[0];
}

template <typename Scalar>
NodeId BasicGraph<Scalar>::apply(OpKind kind, std::span<const NodeId> inputs, std::size_t arg0,
                                 std::size_t arg1) {
  if (consumed_) throw std::logic_error("graph already consumed by backward");
  for (NodeId id : inputs) {
    if (id.index >= nodes_.size()) throw std::out_of_range("unknown node id");
  }
  auto in = [&](std::size_t i) -> const TensorType& { return value(inputs[i]); };
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument(std::string(op_name(kind)) + " expects " + std::to_string(n) +
                                  " inputs");
    }
  };

  Node node;
  node.kind = kind;
  node.arg0 = arg0;
  node.arg1 = arg1;
  node.inputs.reserve(inputs.size());
  for (NodeId id : inputs) {
    node.inputs.push_back(id.index);
    node.needs_grad = node.needs_grad || nodes_[id.index].needs_grad;
  }
  TensorType& out = node.value;

  switch (kind) {
    case OpKind::matmul: {
      arity(2);
      const TensorType& a = in(0);
      const TensorType& b = in(1);
      if (a.cols() != b.rows()) shape_mismatch(kind, a.shape, b.shape);
      const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
      out = TensorType(m, n);
      if (n == 1) {
        for (std::size_t i = 0; i < m; ++i) {
          const Scalar* row = a.data.data() + i * k;
          double acc = 0.0;
          for (std::size_t j = 0; j < k; ++j) acc += double(row[j]) * double(b.data[j]);
          out.data[i] = Scalar(acc);
        }
      } else {
        std::vector<double> acc(n);
        for (std::size_t i = 0; i < m; ++i) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t j = 0; j < k; ++j) {
            const double aij = a.data[i * k + j];
            const Scalar* brow = b.data.data() + j * n;
            for (std::size_t c = 0; c < n; ++c) acc[c] += aij * double(brow[c]);
          }
          for (std::size_t c = 0; c < n; ++c) out.data[i * n + c] = Scalar(acc[c]);
        }
      }
      break;
    }
    case OpKind::add:
    case OpKind::mul: {
      arity(2);
      const TensorType& a = in(0);
      const TensorType& b = in(1);
      if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch(kind, a.shape, b.shape);
      out = TensorType(a.rows(), a.cols());
      if (kind == OpKind::add) {
        for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
      } else {
        for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
      }
      break;
    }
    case OpKind::sigmoid:
    case OpKind::tanh: {
      arity(1);
      const TensorType& a = in(0);
      out = TensorType(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.size(); ++i) {
        out.data[i] = kind == OpKind::sigmoid ? sigmoid_of(a.data[i]) : std::tanh(a.data[i]);
      }
      break;
    }
    case OpKind::softmax: {
      arity(1);
      const TensorType& a = in(0);
      const std::size_t m = a.rows(), n = a.cols();
      out = TensorType(m, n);
      for (std::size_t c = 0; c < n; ++c) {
        double mx = -INFINITY;
        for (std::size_t r = 0; r < m; ++r) mx = std::max(mx, double(a.data[r * n + c]));
        double z = 0.0;
        for (std::size_t r = 0; r < m; ++r) z += std::exp(double(a.data[r * n + c]) - mx);
        for (std::size_t r = 0; r < m; ++r) {
          out.data[r * n + c] = Scalar(std::exp(double(a.data[r * n + c]) - mx) / z);
        }
      }
      break;
    }
    case OpKind::concat: {
      if (inputs.empty()) throw std::invalid_argument("concat expects at least one input");
      const std::size_t n = in(0).cols();
      std::size_t rows = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (in(i).cols() != n) shape_mismatch(kind, in(0).shape, in(i).shape);
        rows += in(i).rows();
      }
      out = TensorType(rows, n);
      std::size_t offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::copy(in(i).data.begin(), in(i).data.end(), out.data.begin() + offset);
        offset += in(i).size();
      }
      break;
    }
    case OpKind::slice: {
      arity(1);
      const TensorType& a = in(0);
      if (arg0 > arg1 || arg1 > a.rows()) {
        throw ShapeError("slice: rows [" + std::to_string(arg0) + "," + std::to_string(arg1) +
                         ") out of range for " + shape_string(a.shape));
      }
      const std::size_t n = a.cols();
      out = TensorType(arg1 - arg0, n);
      std::copy(a.data.begin() + arg0 * n, a.data.begin() + arg1 * n, out.data.begin());
      break;
    }
    case OpKind::sum: {
      arity(1);
      double acc = 0.0;
      for (Scalar v : in(0).data) acc += v;
      out = TensorType(1, 1, Scalar(acc));
      break;
    }
    case OpKind::cross_entropy: {
      arity(1);
      const TensorType& a = in(0);
      if (a.cols() != 1 || a.rows() < 2) {
        throw ShapeError("cross_entropy expects logits [k,1] with k >= 2, got " +
                         shape_string(a.shape));
      }
      if (arg0 >= a.rows()) {
        throw std::out_of_range("cross_entropy target " + std::to_string(arg0) +
                                " out of range for " + std::to_string(a.rows()) + " classes");
      }
      double mx = -INFINITY;
      for (Scalar v : a.data) mx = std::max(mx, double(v));
      double z = 0.0;
      for (Scalar v : a.data) z += std::exp(double(v) - mx);
      const double log_z = mx + std::log(z);
      node.aux.resize(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        node.aux[i] = Scalar(std::exp(double(a.data[i]) - log_z));
      }
      out = TensorType(1, 1, Scalar(log_z - double(a.data[arg0])));
      break;
    }
    case OpKind::lookup: {
      arity(1);
      const TensorType& table = in(0);
      if (arg0 >= table.rows()) {
        throw std::out_of_range("lookup row " + std::to_string(arg0) + " out of range for " +
                                shape_string(table.shape));
      }
      const std::size_t e = table.cols();
      out = TensorType(e, 1);
      std::copy(table.data.begin() + arg0 * e, table.data.begin() + (arg0 + 1) * e,
                out.data.begin());
      break;
    }
    case OpKind::stack_update: {
      arity(3);
      const TensorType& s = in(0);
      const TensorType& act = in(1);
      const TensorType& v = in(2);
      const std::size_t depth = s.rows(), d = s.cols();
      if (act.size() != 3) shape_mismatch(kind, s.shape, act.shape);
      if (v.size() != d) shape_mismatch(kind, s.shape, v.shape);
      const Scalar push = act.data[0], pop = act.data[1], noop = act.data[2];
      out = TensorType(depth + 1, d);
      auto cell = [&](std::size_t i, std::size_t j) -> Scalar {
        return i < depth ? s.data[i * d + j] : Scalar(0);
      };
      for (std::size_t j = 0; j < d; ++j) {
        out.data[j] = push * v.data[j] + pop * cell(1, j) + noop * cell(0, j);
      }
      for (std::size_t i = 1; i <= depth; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          out.data[i * d + j] = push * cell(i - 1, j) + pop * cell(i + 1, j) + noop * cell(i, j);
        }
      }
      break;
    }
    case OpKind::stack_read: {
      arity(1);
      const TensorType& s = in(0);
      const std::size_t d = s.cols();
      out = TensorType(arg0 * d, 1);
      const std::size_t present = std::min(arg0, s.rows());
      std::copy(s.data.begin(), s.data.begin() + present * d, out.data.begin());
      break;
    }
    case OpKind::parameter:
    case OpKind::constant:
      throw std::invalid_argument("leaf nodes are created with parameter()/constant()");
  }

  require_finite(out.data, op_name(kind));
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Scalar>
void BasicGraph<Scalar>::backward(NodeId loss) {
  if (consumed_) throw std::logic_error("backward already run on this graph");
  if (loss.index >= nodes_.size()) throw std::out_of_range("unknown loss node");
  if (value(loss).size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_string(value(loss).shape));
  }
  consumed_ = true;

  std::vector<std::vector<Scalar>> grads(loss.index + 1);
  grads[loss.index].assign(1, Scalar(1));
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.needs_grad) continue;
    if (node.kind == OpKind::parameter) {
      if (node.bound->requires_grad) {
        auto& acc = node.bound->ensure_grad();
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += grads[i][k];
      }
    } else if (node.kind != OpKind::constant) {
      backward_node(node, grads[i], grads);
    }
    std::vector<Scalar>().swap(grads[i]);
  }
}

template <typename Scalar>
void BasicGraph<Scalar>::backward_node(const Node& node, const std::vector<Scalar>& g,
                                       std::vector<std::vector<Scalar>>& grads) const {
  auto target = [&](std::size_t k) -> std::vector<Scalar>* {
    const std::uint32_t id = node.inputs[k];
    if (!nodes_[id].needs_grad) return nullptr;
    auto& buf = grads[id];
    if (buf.empty()) buf.assign(value(NodeId{id}).size(), Scalar(0));
    return &buf;
  };
  auto in = [&](std::size_t k) -> const TensorType& { return value(NodeId{node.inputs[k]}); };
  const TensorType& y = node.value;

  switch (node.kind) {
    case OpKind::matmul: {
      const TensorType& a = in(0);
      const TensorType& b = in(1);
      const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < n; ++c) acc += double(g[i * n + c]) * b.data[j * n + c];
            (*ga)[i * k + j] += Scalar(acc);
          }
        }
      }
      if (auto* gb = target(1)) {
        std::vector<double> acc(n);
        for (std::size_t j = 0; j < k; ++j) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            const double aij = a.data[i * k + j];
            for (std::size_t c = 0; c < n; ++c) acc[c] += aij * double(g[i * n + c]);
          }
          for (std::size_t c = 0; c < n; ++c) (*gb)[j * n + c] += Scalar(acc[c]);
        }
      }
      break;
    }
    case OpKind::add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (auto* gx = target(k)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        }
      }
      break;
    }
    case OpKind::mul: {
      if (auto* ga = target(0)) {
        const auto& b = in(1).data;
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
      }
      if (auto* gb = target(1)) {
        const auto& a = in(0).data;
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
      }
      break;
    }
    case OpKind::sigmoid: {
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          (*ga)[i] += g[i] * y.data[i] * (Scalar(1) - y.data[i]);
        }
      }
      break;
    }
    case OpKind::tanh: {
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          (*ga)[i] += g[i] * (Scalar(1) - y.data[i] * y.data[i]);
        }
      }
      break;
    }
    case OpKind::softmax: {
      if (auto* ga = target(0)) {
        const std::size_t m = y.rows(), n = y.cols();
        for (std::size_t c = 0; c < n; ++c) {
          double dot = 0.0;
          for (std::size_t r = 0; r < m; ++r) dot += double(g[r * n + c]) * y.data[r * n + c];
          for (std::size_t r = 0; r < m; ++r) {
            (*ga)[r * n + c] += Scalar(double(y.data[r * n + c]) * (double(g[r * n + c]) - dot));
          }
        }
      }
      break;
    }
    case OpKind::concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t len = in(k).size();
        if (auto* gx = target(k)) {
          for (std::size_t i = 0; i < len; ++i) (*gx)[i] += g[offset + i];
        }
        offset += len;
      }
      break;
    }
    case OpKind::slice: {
      if (auto* ga = target(0)) {
        const std::size_t start = node.arg0 * in(0).cols();
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[start + i] += g[i];
      }
      break;
    }
    case OpKind::sum: {
      if (auto* ga = target(0)) {
        for (auto& v : *ga) v += g[0];
      }
      break;
    }
    case OpKind::cross_entropy: {
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < ga->size(); ++i) {
          const Scalar onehot = i == node.arg0 ? Scalar(1) : Scalar(0);
          (*ga)[i] += g[0] * (node.aux[i] - onehot);
        }
      }
      break;
    }
    case OpKind::lookup: {
      if (auto* ga = target(0)) {
        const std::size_t e = y.rows();
        for (std::size_t j = 0; j < e; ++j) (*ga)[node.arg0 * e + j] += g[j];
      }
      break;
    }
    case OpKind::stack_update: {
      const TensorType& s = in(0);
      const TensorType& act = in(1);
      const TensorType& v = in(2);
      const std::size_t depth = s.rows(), d = s.cols();
      const Scalar push = act.data[0], pop = act.data[1], noop = act.data[2];
      auto cell = [&](std::size_t i, std::size_t j) -> double {
        return i < depth ? double(s.data[i * d + j]) : 0.0;
      };
      auto gout = [&](std::size_t i, std::size_t j) -> Scalar { return g[i * d + j]; };
      if (auto* gs = target(0)) {
        // out[i] = push*S[i-1] + pop*S[i+1] + noop*S[i] for i >= 1; out[0] uses v.
        for (std::size_t i = 0; i < depth; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            Scalar acc = push * gout(i + 1, j) + noop * gout(i, j);
            if (i >= 1) acc += pop * gout(i - 1, j);
            (*gs)[i * d + j] += acc;
          }
        }
      }
      if (auto* ga = target(1)) {
        double d_push = 0.0, d_pop = 0.0, d_noop = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          d_push += double(gout(0, j)) * v.data[j];
        }
        for (std::size_t i = 0; i <= depth; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            const double go = gout(i, j);
            if (i >= 1) d_push += go * cell(i - 1, j);
            d_pop += go * cell(i + 1, j);
            d_noop += go * cell(i, j);
          }
        }
        (*ga)[0] += Scalar(d_push);
        (*ga)[1] += Scalar(d_pop);
        (*ga)[2] += Scalar(d_noop);
      }
      if (auto* gv = target(2)) {
        for (std::size_t j = 0; j < d; ++j) (*gv)[j] += push * gout(0, j);
      }
      break;
    }
    case OpKind::stack_read: {
      if (auto* gs = target(0)) {
        const std::size_t n = std::min(gs->size(), g.size());
        for (std::size_t i = 0; i < n; ++i) (*gs)[i] += g[i];
      }
      break;
    }
    case OpKind::parameter:
    case OpKind::constant:
      break;
  }
}

template class BasicGraph<float>;
template class BasicGraph<double>;

}  // namespace stacklab
