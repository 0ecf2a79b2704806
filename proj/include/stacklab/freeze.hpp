#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stacklab/model.hpp"

namespace stacklab {

enum class FreezeMode { none, c, m, cm };

std::string_view to_string(FreezeMode mode);
FreezeMode parse_freeze_mode(std::string_view text);

/// Group assignment of every model parameter, in model parameter order.
struct ParamPartition {
  std::vector<std::string> names;
  std::vector<ParamGroup> groups;
};

template <typename Scalar>
ParamPartition partition_of(const BasicStackRnn<Scalar>& model) {
  ParamPartition p;
  for (const auto& param : model.params()) {
    p.names.push_back(param.name);
    p.groups.push_back(param.group);
  }
  return p;
}

struct FreezePolicy {
  /// When false, modes c and m also freeze the classifier (strict reading).
  bool train_classifier = true;
};

struct FreezeResult {
  FreezeMode effective = FreezeMode::none;
  std::vector<bool> trainable;  // aligned with partition order
  std::optional<std::string> warning;
};

/// Trainability mask for `mode`. On a stackless model (no memory parameters)
/// m degrades to cm and c to none, with a warning.
FreezeResult apply_freeze(const ParamPartition& partition, FreezeMode mode,
                          const FreezePolicy& policy = {});

/// Sets requires_grad on every parameter according to the mask.
void apply_mask(StackRnn& model, const FreezeResult& freeze);

struct ModelMetadata {
  FreezeMode freeze = FreezeMode::none;
  bool train_classifier = true;
  std::uint64_t init_seed = 0;
  std::uint64_t data_seed = 0;
};

/// Writes `<stem>.tensors` and `<stem>.json` (spec, freeze mode, partition, seeds).
void save_model(const std::filesystem::path& stem, const StackRnn& model,
                const ModelMetadata& meta);

struct LoadedModel {
  StackRnn model;
  ModelMetadata meta;
};
LoadedModel load_model(const std::filesystem::path& stem);

}  // namespace stacklab
