#include "stacklab/freeze.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "stacklab/checkpoint.hpp"

namespace stacklab {

using nlohmann::json;

std::string_view to_string(FreezeMode mode) {
  switch (mode) {
    case FreezeMode::none: return "none";
    case FreezeMode::c: return "c";
    case FreezeMode::m: return "m";
    case FreezeMode::cm: return "cm";
  }
  return "none";
}

FreezeMode parse_freeze_mode(std::string_view text) {
  if (text == "none" || text == "n") return FreezeMode::none;
  if (text == "c") return FreezeMode::c;
  if (text == "m") return FreezeMode::m;
  if (text == "cm") return FreezeMode::cm;
  throw std::invalid_argument("unknown freeze mode '" + std::string(text) + "'");
}

FreezeResult apply_freeze(const ParamPartition& partition, FreezeMode mode,
                          const FreezePolicy& policy) {
  if (partition.names.size() != partition.groups.size()) {
    throw std::invalid_argument("partition names and groups differ in length");
  }
  FreezeResult result;
  result.effective = mode;
  bool has_memory = false;
  for (ParamGroup g : partition.groups) has_memory |= g == ParamGroup::memory;
  if (!has_memory && (mode == FreezeMode::m || mode == FreezeMode::c)) {
    result.effective = mode == FreezeMode::m ? FreezeMode::cm : FreezeMode::none;
    result.warning = "model has no memory parameters; mode " + std::string(to_string(mode)) +
                     " runs as " + std::string(to_string(result.effective));
  }

  const FreezeMode eff = result.effective;
  const bool classifier =
      policy.train_classifier || eff == FreezeMode::none || eff == FreezeMode::cm;
  for (ParamGroup g : partition.groups) {
    bool train = false;
    switch (g) {
      case ParamGroup::controller:
        // m trains memory (+classifier), c trains controller.
        train = eff == FreezeMode::none || eff == FreezeMode::c;
        break;
      case ParamGroup::memory:
        train = eff == FreezeMode::none || eff == FreezeMode::m;
        break;
      case ParamGroup::classifier:
        train = classifier;
        break;
    }
    result.trainable.push_back(train);
  }
  return result;
}

void apply_mask(StackRnn& model, const FreezeResult& freeze) {
  auto& params = model.params();
  if (params.size() != freeze.trainable.size()) {
    throw std::invalid_argument("freeze mask does not match model parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].tensor.requires_grad = freeze.trainable[i];
    if (!freeze.trainable[i]) params[i].tensor.grad.reset();
  }
}

namespace {

json spec_to_json(const ModelSpec& spec) {
  json j{{"controller", to_string(spec.controller)},
         {"hidden_size", spec.hidden_size},
         {"vocab_size", spec.vocab_size},
         {"embedding_size", spec.embedding_size},
         {"stack", nullptr}};
  if (spec.stack) {
    j["stack"] = {{"num_stacks", spec.stack->num_stacks},
                  {"cell_dims", spec.stack->cell_dims},
                  {"push_source", to_string(spec.stack->push_source)},
                  {"read_depth", spec.stack->read_depth}};
  }
  return j;
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.controller = parse_controller(j.at("controller").get<std::string>());
  spec.hidden_size = j.at("hidden_size").get<std::size_t>();
  spec.vocab_size = j.at("vocab_size").get<std::size_t>();
  spec.embedding_size = j.at("embedding_size").get<std::size_t>();
  if (!j.at("stack").is_null()) {
    const json& s = j.at("stack");
    StackConfig c;
    c.num_stacks = s.at("num_stacks").get<std::size_t>();
    c.cell_dims = s.at("cell_dims").get<std::vector<std::size_t>>();
    c.push_source = parse_push_source(s.at("push_source").get<std::string>());
    c.read_depth = s.at("read_depth").get<std::size_t>();
    spec.stack = c;
  }
  spec.validate();
  return spec;
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

}  // namespace

void save_model(const std::filesystem::path& stem, const StackRnn& model,
                const ModelMetadata& meta) {
  std::vector<NamedTensor> tensors;
  json partition = json::array();
  for (const auto& p : model.params()) {
    Tensor t;
    t.shape = p.tensor.shape;
    t.data = p.tensor.data;
    tensors.push_back({p.name, std::move(t)});
    partition.push_back({{"name", p.name}, {"group", to_string(p.group)}});
  }
  write_tensors(with_suffix(stem, ".tensors"), tensors);
  json sidecar{{"spec", spec_to_json(model.spec())},
               {"freeze_mode", to_string(meta.freeze)},
               {"train_classifier", meta.train_classifier},
               {"partition", partition},
               {"seeds", {{"init", meta.init_seed}, {"data", meta.data_seed}}}};
  write_file_atomic(with_suffix(stem, ".json"), sidecar.dump(2) + "\n");
}

LoadedModel load_model(const std::filesystem::path& stem) {
  std::ifstream in(with_suffix(stem, ".json"));
  if (!in) throw std::runtime_error("cannot open " + with_suffix(stem, ".json").string());
  const json sidecar = json::parse(in);
  ModelMetadata meta;
  meta.freeze = parse_freeze_mode(sidecar.at("freeze_mode").get<std::string>());
  meta.train_classifier = sidecar.at("train_classifier").get<bool>();
  meta.init_seed = sidecar.at("seeds").at("init").get<std::uint64_t>();
  meta.data_seed = sidecar.at("seeds").at("data").get<std::uint64_t>();

  StackRnn model(spec_from_json(sidecar.at("spec")), meta.init_seed);
  const auto tensors = read_tensors(with_suffix(stem, ".tensors"));
  if (tensors.size() != model.params().size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(tensors.size()) +
                             " tensors, model expects " +
                             std::to_string(model.params().size()));
  }
  for (const auto& nt : tensors) {
    Tensor& dst = model.param(nt.name);
    if (dst.data.size() != nt.tensor.data.size()) {
      throw ShapeError("checkpoint tensor '" + nt.name + "' has shape " +
                       shape_string(nt.tensor.shape) + ", expected " + shape_string(dst.shape));
    }
    dst.data = nt.tensor.data;
  }
  return {std::move(model), meta};
}

}  // namespace stacklab
