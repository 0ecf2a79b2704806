#include "stacklab/model.hpp"

#include <algorithm>
#include <charconv>
#include <random>
#include <stdexcept>

namespace stacklab {

std::string_view to_string(ControllerKind kind) {
  return kind == ControllerKind::lstm ? "lstm" : "elman";
}

std::string_view to_string(PushSource source) {
  return source == PushSource::hidden ? "hidden" : "learned";
}

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::controller: return "controller";
    case ParamGroup::memory: return "memory";
    case ParamGroup::classifier: return "classifier";
  }
  return "unknown";
}

ControllerKind parse_controller(std::string_view text) {
  if (text == "lstm") return ControllerKind::lstm;
  if (text == "elman") return ControllerKind::elman;
  throw std::invalid_argument("unknown controller '" + std::string(text) + "'");
}

PushSource parse_push_source(std::string_view text) {
  if (text == "learned") return PushSource::learned;
  if (text == "hidden") return PushSource::hidden;
  throw std::invalid_argument("unknown push source '" + std::string(text) + "'");
}

std::size_t StackConfig::read_width() const {
  std::size_t total = 0;
  for (std::size_t d : cell_dims) total += d * read_depth;
  return total;
}

void ModelSpec::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
  if (hidden_size < 1) throw std::invalid_argument("hidden_size must be >= 1");
  if (!stack) return;
  if (stack->num_stacks < 1) throw std::invalid_argument("num_stacks must be >= 1");
  if (stack->cell_dims.size() != stack->num_stacks) {
    throw std::invalid_argument("cell_dims length must equal num_stacks");
  }
  if (stack->read_depth < 1) throw std::invalid_argument("read_depth must be >= 1");
  for (std::size_t d : stack->cell_dims) {
    if (d < 1) throw std::invalid_argument("cell dims must be >= 1");
    if (stack->push_source == PushSource::hidden && d != hidden_size) {
      throw std::invalid_argument("push_source=hidden requires cell_dim == hidden_size");
    }
  }
}

namespace {

std::optional<std::size_t> parse_size(std::string_view text) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || value == 0) return std::nullopt;
  return value;
}

[[noreturn]] void bad_preset(std::string_view name) {
  throw std::invalid_argument("unknown model name '" + std::string(name) + "'");
}

}  // namespace

ModelSpec model_preset(std::string_view name, std::size_t vocab_size, std::size_t hidden_size,
                       std::size_t embedding_size) {
  ModelSpec spec;
  spec.vocab_size = vocab_size;
  spec.hidden_size = hidden_size;
  spec.embedding_size = embedding_size;

  auto with_hidden_suffix = [&](std::string_view prefix) -> bool {
    if (name == prefix) return true;
    if (name.size() > prefix.size() + 1 && name.substr(0, prefix.size()) == prefix &&
        name[prefix.size()] == '-') {
      auto n = parse_size(name.substr(prefix.size() + 1));
      if (!n) bad_preset(name);
      spec.hidden_size = *n;
      return true;
    }
    return false;
  };

  if (with_hidden_suffix("lstm")) {
    spec.controller = ControllerKind::lstm;
  } else if (with_hidden_suffix("elman")) {
    spec.controller = ControllerKind::elman;
  } else if (with_hidden_suffix("jm-hidden")) {
    spec.stack = StackConfig{1, {spec.hidden_size}, PushSource::hidden, 1};
  } else if (name.starts_with("jm-learned-")) {
    auto n = parse_size(name.substr(11));
    if (!n) bad_preset(name);
    spec.stack = StackConfig{1, {*n}, PushSource::learned, 1};
  } else if (name.starts_with("jm-")) {
    // jm-10 or jm-3.3.3: one stack per dot-separated cell size.
    StackConfig stack;
    std::string_view rest = name.substr(3);
    while (!rest.empty()) {
      const auto dot = rest.find('.');
      auto n = parse_size(rest.substr(0, dot));
      if (!n) bad_preset(name);
      stack.cell_dims.push_back(*n);
      if (dot == std::string_view::npos) break;
      rest = rest.substr(dot + 1);
      if (rest.empty()) bad_preset(name);
    }
    stack.num_stacks = stack.cell_dims.size();
    spec.stack = stack;
  } else {
    bad_preset(name);
  }
  spec.validate();
  return spec;
}

template <typename Scalar>
void BasicStackRnn<Scalar>::add_param(std::string name, ParamGroup group, std::size_t rows,
                                      std::size_t cols) {
  ModelParam<Scalar> p{std::move(name), group, TensorType(rows, cols)};
  p.tensor.requires_grad = true;
  params_.push_back(std::move(p));
}

template <typename Scalar>
BasicStackRnn<Scalar>::BasicStackRnn(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  const std::size_t H = spec_.hidden_size, V = spec_.vocab_size;
  gate_rows_ = spec_.controller == ControllerKind::lstm ? 4 * H : H;
  const std::size_t R = spec_.stack ? spec_.stack->read_width() : 0;

  if (spec_.embedding_size > 0) {
    embedding_ = params_.size();
    add_param("embedding", ParamGroup::controller, V, spec_.embedding_size);
    w_x_ = params_.size();
    add_param("W_x", ParamGroup::controller, gate_rows_, spec_.embedding_size);
  } else {
    // One-hot input: W_x x_t is a column of W_x, stored transposed for lookup.
    w_x_ = params_.size();
    add_param("W_x", ParamGroup::controller, V, gate_rows_);
  }
  w_h_ = params_.size();
  add_param("W_h", ParamGroup::controller, gate_rows_, H);
  b_ = params_.size();
  add_param("b", ParamGroup::controller, gate_rows_, 1);

  if (spec_.stack) {
    w_r_ = params_.size();
    add_param("W_r", ParamGroup::memory, gate_rows_, R);
    for (std::size_t k = 0; k < spec_.stack->num_stacks; ++k) {
      const std::string suffix = std::to_string(k);
      w_a_.push_back(params_.size());
      add_param("W_a" + suffix, ParamGroup::memory, 3, H);
      b_a_.push_back(params_.size());
      add_param("b_a" + suffix, ParamGroup::memory, 3, 1);
      if (spec_.stack->push_source == PushSource::learned) {
        w_v_.push_back(params_.size());
        add_param("W_v" + suffix, ParamGroup::memory, spec_.stack->cell_dims[k], H);
      }
    }
    w_s_ = params_.size();
    add_param("W_s", ParamGroup::memory, V, R);
  }
  w_y_ = params_.size();
  add_param("W_y", ParamGroup::classifier, V, H);
  b_y_ = params_.size();
  add_param("b_y", ParamGroup::classifier, V, 1);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(-0.1, 0.1);
  for (auto& p : params_) {
    const bool is_bias = p.name == "b" || p.name == "b_y" || p.name.starts_with("b_a");
    for (auto& v : p.tensor.data) v = is_bias ? Scalar(0) : Scalar(uniform(rng));
  }
  if (spec_.controller == ControllerKind::lstm) {
    auto& bias = params_[b_].tensor.data;
    for (std::size_t i = H; i < 2 * H; ++i) bias[i] = Scalar(1);  // forget gate
  }
}

template <typename Scalar>
std::size_t BasicStackRnn<Scalar>::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

template <typename Scalar>
auto BasicStackRnn<Scalar>::param(std::string_view name) -> TensorType& {
  return params_[index_of(name)].tensor;
}

template <typename Scalar>
auto BasicStackRnn<Scalar>::param(std::string_view name) const -> const TensorType& {
  return params_[index_of(name)].tensor;
}

template <typename Scalar>
bool BasicStackRnn<Scalar>::has_param(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const auto& p) { return p.name == name; });
}

template <typename Scalar>
std::vector<NodeId> BasicStackRnn<Scalar>::bind(GraphType& graph) {
  std::vector<NodeId> ids;
  ids.reserve(params_.size());
  for (auto& p : params_) ids.push_back(graph.parameter(p.tensor));
  return ids;
}

template <typename Scalar>
RecurrentState BasicStackRnn<Scalar>::initial_state(GraphType& graph) const {
  StateValues<Scalar> zero;
  zero.hidden = TensorType(spec_.hidden_size, 1);
  if (spec_.controller == ControllerKind::lstm) zero.cell = TensorType(spec_.hidden_size, 1);
  if (spec_.stack) {
    for (std::size_t d : spec_.stack->cell_dims) zero.stacks.push_back(TensorType(0, d));
  }
  zero.read = TensorType(spec_.stack ? spec_.stack->read_width() : 0, 1);
  return restore_state(graph, zero);
}

template <typename Scalar>
RecurrentState BasicStackRnn<Scalar>::restore_state(GraphType& graph,
                                                    const StateValues<Scalar>& values) const {
  RecurrentState state;
  state.hidden = graph.constant(values.hidden);
  if (values.cell) state.cell = graph.constant(*values.cell);
  for (const auto& s : values.stacks) state.stacks.push_back(graph.constant(s));
  state.read = graph.constant(values.read);
  return state;
}

template <typename Scalar>
StateValues<Scalar> BasicStackRnn<Scalar>::capture_state(const GraphType& graph,
                                                          const RecurrentState& state) const {
  auto copy = [&](NodeId id) {
    TensorType t;
    t.shape = graph.value(id).shape;
    t.data = graph.value(id).data;
    return t;
  };
  StateValues<Scalar> values;
  values.hidden = copy(state.hidden);
  if (state.cell) values.cell = copy(*state.cell);
  for (NodeId s : state.stacks) values.stacks.push_back(copy(s));
  values.read = copy(state.read);
  return values;
}

template <typename Scalar>
void BasicStackRnn<Scalar>::controller_step(GraphType& graph, std::span<const NodeId> bound,
                                            RecurrentState& state, std::size_t symbol) const {
  if (symbol >= spec_.vocab_size) {
    throw std::out_of_range("symbol " + std::to_string(symbol) + " outside vocabulary of size " +
                            std::to_string(spec_.vocab_size));
  }
  const std::size_t H = spec_.hidden_size;
  NodeId input;
  if (embedding_ != SIZE_MAX) {
    input = graph.matmul(bound[w_x_], graph.lookup(bound[embedding_], symbol));
  } else {
    input = graph.lookup(bound[w_x_], symbol);
  }
  NodeId z = graph.add(graph.add(input, graph.matmul(bound[w_h_], state.hidden)), bound[b_]);
  if (w_r_ != SIZE_MAX) z = graph.add(z, graph.matmul(bound[w_r_], state.read));

  if (spec_.controller == ControllerKind::elman) {
    state.hidden = graph.tanh(z);
    return;
  }
  const NodeId in_gate = graph.sigmoid(graph.slice(z, 0, H));
  const NodeId forget = graph.sigmoid(graph.slice(z, H, 2 * H));
  const NodeId candidate = graph.tanh(graph.slice(z, 2 * H, 3 * H));
  const NodeId out_gate = graph.sigmoid(graph.slice(z, 3 * H, 4 * H));
  const NodeId cell = graph.add(graph.mul(forget, *state.cell), graph.mul(in_gate, candidate));
  state.cell = cell;
  state.hidden = graph.mul(out_gate, graph.tanh(cell));
}

template <typename Scalar>
std::pair<NodeId, NodeId> BasicStackRnn<Scalar>::stack_action(GraphType& graph,
                                                              std::span<const NodeId> bound,
                                                              std::size_t k, NodeId hidden) const {
  const NodeId actions =
      graph.softmax(graph.add(graph.matmul(bound[w_a_.at(k)], hidden), bound[b_a_.at(k)]));
  const NodeId value = spec_.stack->push_source == PushSource::hidden
                           ? hidden
                           : graph.sigmoid(graph.matmul(bound[w_v_.at(k)], hidden));
  return {actions, value};
}

template <typename Scalar>
NodeId BasicStackRnn<Scalar>::output_step(GraphType& graph, std::span<const NodeId> bound,
                                          NodeId hidden, NodeId read) const {
  NodeId logits = graph.add(graph.matmul(bound[w_y_], hidden), bound[b_y_]);
  if (w_s_ != SIZE_MAX) logits = graph.add(logits, graph.matmul(bound[w_s_], read));
  return logits;
}

template <typename Scalar>
NodeId BasicStackRnn<Scalar>::predict(GraphType& graph, std::span<const NodeId> bound,
                                      const RecurrentState& state) const {
  return output_step(graph, bound, state.hidden, state.read);
}

template <typename Scalar>
StepNodes BasicStackRnn<Scalar>::step(GraphType& graph, std::span<const NodeId> bound,
                                      RecurrentState& state, std::size_t symbol) const {
  StepNodes out;
  try {
    controller_step(graph, bound, state, symbol);
    if (spec_.stack) {
      std::vector<NodeId> reads;
      for (std::size_t k = 0; k < spec_.stack->num_stacks; ++k) {
        auto [actions, value] = stack_action(graph, bound, k, state.hidden);
        state.stacks[k] = graph.stack_update(state.stacks[k], actions, value);
        reads.push_back(graph.stack_read(state.stacks[k], spec_.stack->read_depth));
        out.actions.push_back(actions);
      }
      state.read = reads.size() == 1 ? reads.front() : graph.concat(reads);
    }
    out.logits = output_step(graph, bound, state.hidden, state.read);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError("step " + std::to_string(state.step) + ": " + e.what());
  }
  ++state.step;
  return out;
}

template <typename Scalar>
NodeId BasicStackRnn<Scalar>::sequence_loss(GraphType& graph, std::span<const NodeId> bound,
                                            std::span<const int> symbols,
                                            std::size_t eos) const {
  RecurrentState state = initial_state(graph);
  std::vector<NodeId> terms;
  terms.reserve(symbols.size() + 1);
  NodeId logits = predict(graph, bound, state);
  for (int s : symbols) {
    terms.push_back(graph.cross_entropy(logits, static_cast<std::size_t>(s)));
    logits = step(graph, bound, state, static_cast<std::size_t>(s)).logits;
  }
  terms.push_back(graph.cross_entropy(logits, eos));
  return graph.sum(graph.concat(terms));
}

template class BasicStackRnn<float>;
template class BasicStackRnn<double>;

ModelScorer::ModelScorer(const StackRnn& model) : model_(model) {
  for (auto& p : model_.params()) {
    p.tensor.requires_grad = false;
    p.tensor.grad.reset();
  }
}

SequenceScores ModelScorer::score(std::span<const int> symbols) const {
  // Binding needs mutable tensors, but nothing here writes to them: every
  // parameter has requires_grad cleared and backward is never run.
  auto& model = const_cast<StackRnn&>(model_);
  Graph graph;
  const auto bound = model.bind(graph);
  RecurrentState state = model.initial_state(graph);
  SequenceScores scores;
  scores.actions.resize(model.num_stacks());
  auto to_double = [&](NodeId id) {
    const auto& v = graph.value(id).data;
    return std::vector<double>(v.begin(), v.end());
  };
  scores.logits.push_back(to_double(model.predict(graph, bound, state)));
  for (int s : symbols) {
    StepNodes out = model.step(graph, bound, state, static_cast<std::size_t>(s));
    scores.logits.push_back(to_double(out.logits));
    for (std::size_t k = 0; k < out.actions.size(); ++k) {
      const auto& a = graph.value(out.actions[k]).data;
      scores.actions[k].push_back({a[0], a[1], a[2]});
    }
  }
  return scores;
}

}  // namespace stacklab
