#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stacklab/graph.hpp"

namespace stacklab {

enum class ControllerKind { elman, lstm };
enum class PushSource { learned, hidden };

/// Which parameter set a weight belongs to: the recurrent controller, the
/// memory interface, or the output classifier.
enum class ParamGroup { controller, memory, classifier };

std::string_view to_string(ControllerKind kind);
std::string_view to_string(PushSource source);
std::string_view to_string(ParamGroup group);
ControllerKind parse_controller(std::string_view text);
PushSource parse_push_source(std::string_view text);

struct StackConfig {
  std::size_t num_stacks = 1;
  std::vector<std::size_t> cell_dims;
  PushSource push_source = PushSource::learned;
  std::size_t read_depth = 1;

  /// Width of the concatenated read vector fed back to controller and output.
  std::size_t read_width() const;
};

struct ModelSpec {
  ControllerKind controller = ControllerKind::lstm;
  std::size_t hidden_size = 20;
  std::size_t vocab_size = 0;
  std::size_t embedding_size = 0;  // 0 selects one-hot input
  std::optional<StackConfig> stack;

  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;
};

/// Builds a spec from a roster name: "lstm", "elman", "jm-10", "jm-3.3.3",
/// "jm-hidden", "jm-learned-22". A trailing "-<n>" on lstm/elman/jm-hidden
/// overrides the hidden size (e.g. "lstm-256", "jm-hidden-247").
ModelSpec model_preset(std::string_view name, std::size_t vocab_size, std::size_t hidden_size,
                       std::size_t embedding_size = 0);

template <typename Scalar>
struct ModelParam {
  std::string name;
  ParamGroup group;
  BasicTensor<Scalar> tensor;
};

/// Recurrent state of one unrolled sequence, as nodes of a graph.
struct RecurrentState {
  NodeId hidden;
  std::optional<NodeId> cell;  // LSTM only
  std::vector<NodeId> stacks;  // one [depth, cell_dim] node per stack
  NodeId read;                 // concatenated top reads, zero width when stackless
  std::size_t step = 0;
};

/// Materialized copy of a RecurrentState, for carrying across graphs.
template <typename Scalar>
struct StateValues {
  BasicTensor<Scalar> hidden;
  std::optional<BasicTensor<Scalar>> cell;
  std::vector<BasicTensor<Scalar>> stacks;
  BasicTensor<Scalar> read;
};

struct StepNodes {
  NodeId logits;
  std::vector<NodeId> actions;  // per stack, [3,1] = (push, pop, noop)
};

/// Controller (Elman or LSTM) optionally augmented with superposition stacks.
///
/// Per input symbol x_t the model computes
///   h_t      = controller(h_{t-1}, x_t, r_{t-1})
///   a_t, v_t = softmax(W_a h_t + b_a), push value (learned sigmoid or h_t)
///   S_t      = superposition update of S_{t-1} under a_t with v_t
///   r_t      = top read of S_t
///   logits_t = W_y h_t + W_s r_t + b_y
/// and the prediction for the first symbol comes from the zero initial state.
template <typename Scalar>
class BasicStackRnn {
 public:
  using TensorType = BasicTensor<Scalar>;
  using GraphType = BasicGraph<Scalar>;

  BasicStackRnn(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  std::vector<ModelParam<Scalar>>& params() { return params_; }
  const std::vector<ModelParam<Scalar>>& params() const { return params_; }
  TensorType& param(std::string_view name);
  const TensorType& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  std::size_t num_stacks() const { return spec_.stack ? spec_.stack->num_stacks : 0; }

  /// Binds every parameter into `graph`; the returned ids are passed to the
  /// step functions below.
  std::vector<NodeId> bind(GraphType& graph);

  RecurrentState initial_state(GraphType& graph) const;
  RecurrentState restore_state(GraphType& graph, const StateValues<Scalar>& values) const;
  StateValues<Scalar> capture_state(const GraphType& graph, const RecurrentState& state) const;

  /// h_t (and LSTM cell) from the previous state, symbol, and previous read.
  void controller_step(GraphType& graph, std::span<const NodeId> bound, RecurrentState& state,
                       std::size_t symbol) const;
  /// (push, pop, noop) distribution and push value for stack `k`.
  std::pair<NodeId, NodeId> stack_action(GraphType& graph, std::span<const NodeId> bound,
                                         std::size_t k, NodeId hidden) const;
  NodeId output_step(GraphType& graph, std::span<const NodeId> bound, NodeId hidden,
                     NodeId read) const;

  /// Logits for the next symbol given the state as is (used for the first target).
  NodeId predict(GraphType& graph, std::span<const NodeId> bound,
                 const RecurrentState& state) const;
  /// Consumes `symbol`, updates state, and returns the next-symbol logits.
  StepNodes step(GraphType& graph, std::span<const NodeId> bound, RecurrentState& state,
                 std::size_t symbol) const;

  /// Sum of per-target cross-entropies over `symbols` followed by `eos`,
  /// i.e. symbols.size() + 1 targets.
  NodeId sequence_loss(GraphType& graph, std::span<const NodeId> bound,
                       std::span<const int> symbols, std::size_t eos) const;

 private:
  std::size_t index_of(std::string_view name) const;
  void add_param(std::string name, ParamGroup group, std::size_t rows, std::size_t cols);

  ModelSpec spec_;
  std::vector<ModelParam<Scalar>> params_;
  std::size_t gate_rows_ = 0;
  // Indices into params_.
  std::size_t embedding_ = SIZE_MAX, w_x_ = 0, w_h_ = 0, b_ = 0, w_r_ = SIZE_MAX, w_s_ = SIZE_MAX,
              w_y_ = 0, b_y_ = 0;
  std::vector<std::size_t> w_a_, b_a_, w_v_;
};

using StackRnn = BasicStackRnn<float>;

/// Dense per-target output of scoring one sequence.
struct SequenceScores {
  /// logits[t] is the distribution for target t; t == length is end-of-sequence.
  std::vector<std::vector<double>> logits;
  /// actions[k][t] = (push, pop, noop) of stack k while consuming symbol t.
  std::vector<std::vector<std::array<double, 3>>> actions;
};

/// Anything that assigns next-symbol logits to every prefix of a sequence.
class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t num_stacks() const { return 0; }
  virtual SequenceScores score(std::span<const int> symbols) const = 0;
};

/// Read-only scorer over a model. Parameters are copied, so the scorer is
/// independent of later training and safe to share across threads.
class ModelScorer : public SequenceScorer {
 public:
  explicit ModelScorer(const StackRnn& model);
  std::size_t vocab_size() const override { return model_.spec().vocab_size; }
  std::size_t num_stacks() const override { return model_.num_stacks(); }
  SequenceScores score(std::span<const int> symbols) const override;

 private:
  StackRnn model_;
};

}  // namespace stacklab
