#include "stacklab/ptb.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "stacklab/checkpoint.hpp"

namespace stacklab {

using nlohmann::json;

int Vocabulary::id(std::string_view word) const {
  if (auto it = ids.find(std::string(word)); it != ids.end()) return it->second;
  if (unk < 0) throw std::invalid_argument("word '" + std::string(word) + "' not in vocabulary");
  return unk;
}

json to_json(const Vocabulary& vocab) {
  return json{{"words", vocab.words}, {"eos", vocab.eos}, {"unk", vocab.unk}};
}

Vocabulary vocabulary_from_json(const json& j) {
  Vocabulary v;
  v.words = j.at("words").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < v.words.size(); ++i) {
    if (!v.ids.emplace(v.words[i], int(i)).second)
      throw std::invalid_argument("duplicate vocabulary word '" + v.words[i] + "'");
  }
  v.eos = j.at("eos").get<int>();
  v.unk = j.at("unk").get<int>();
  if (v.eos < 0 || std::size_t(v.eos) >= v.size() || v.words[std::size_t(v.eos)] != kEosToken)
    throw std::invalid_argument("vocabulary eos id does not name <eos>");
  return v;
}

PtbPaths ptb_paths(const std::filesystem::path& dir) {
  return {dir / "ptb.train.txt", dir / "ptb.valid.txt", dir / "ptb.test.txt"};
}

namespace {

std::vector<std::vector<std::string>> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
  std::vector<std::vector<std::string>> lines;
  std::string line;
  std::size_t tokens = 0;
  while (std::getline(in, line)) {
    std::istringstream words(line);
    std::vector<std::string> l;
    for (std::string w; words >> w;) l.push_back(w);
    tokens += l.size();
    lines.push_back(std::move(l));
  }
  if (tokens == 0) throw std::invalid_argument("corpus split " + path.string() + " is empty");
  return lines;
}

std::vector<int> encode_lines(const Vocabulary& vocab,
                              const std::vector<std::vector<std::string>>& lines) {
  std::vector<int> ids;
  for (const auto& l : lines) {
    for (const auto& w : l) ids.push_back(vocab.id(w));
    ids.push_back(vocab.eos);
  }
  return ids;
}

}  // namespace

Corpus load_ptb(const PtbPaths& paths) {
  const auto train = read_lines(paths.train);
  const auto valid = read_lines(paths.valid);
  const auto test = read_lines(paths.test);

  std::map<std::string, std::size_t> counts;
  for (const auto& l : train) {
    for (const auto& w : l) ++counts[w];
    ++counts[kEosToken];
  }
  std::vector<std::pair<std::string, std::size_t>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Corpus c;
  for (const auto& [w, n] : order) {
    c.vocab.ids.emplace(w, int(c.vocab.words.size()));
    c.vocab.words.push_back(w);
  }
  c.vocab.eos = c.vocab.ids.at(kEosToken);
  if (auto it = c.vocab.ids.find(kUnkToken); it != c.vocab.ids.end()) c.vocab.unk = it->second;
  c.train = encode_lines(c.vocab, train);
  c.valid = encode_lines(c.vocab, valid);
  c.test = encode_lines(c.vocab, test);
  return c;
}

std::vector<int> encode_line(const Vocabulary& vocab, std::string_view line) {
  std::istringstream words{std::string(line)};
  std::vector<int> ids;
  for (std::string w; words >> w;) ids.push_back(vocab.id(w));
  ids.push_back(vocab.eos);
  return ids;
}

std::string decode(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::string out;
  bool line_start = true;
  for (int id : ids) {
    if (id == vocab.eos) {
      out += '\n';
      line_start = true;
      continue;
    }
    if (!line_start) out += ' ';
    out += vocab.word(id);
    line_start = false;
  }
  return out;
}

std::vector<int> leading_fraction(const std::vector<int>& ids, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("fraction must be in (0, 1]");
  const auto n = std::size_t(std::llround(fraction * double(ids.size())));
  return {ids.begin(), ids.begin() + std::ptrdiff_t(std::min(n, ids.size()))};
}

std::vector<Block> batchify(const std::vector<int>& ids, std::size_t batch, std::size_t bptt) {
  if (batch == 0 || bptt == 0) throw std::invalid_argument("batch and bptt must be positive");
  const std::size_t stream = ids.size() / batch;
  if (stream == 0) return {};
  const std::size_t windows = (stream - 1) / bptt;
  std::vector<Block> blocks(windows);
  for (std::size_t w = 0; w < windows; ++w) {
    auto& blk = blocks[w];
    for (std::size_t b = 0; b < batch; ++b) {
      const auto begin = ids.begin() + std::ptrdiff_t(b * stream + w * bptt);
      blk.inputs.emplace_back(begin, begin + std::ptrdiff_t(bptt));
      blk.targets.emplace_back(begin + 1, begin + 1 + std::ptrdiff_t(bptt));
    }
  }
  return blocks;
}

namespace {

// Inverse-CDF draw, portable across standard libraries.
class Categorical {
 public:
  explicit Categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) cdf_.push_back(total += w);
    for (double& c : cdf_) c /= total;
  }
  std::size_t operator()(std::mt19937_64& rng) const {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min(std::size_t(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

}  // namespace

void write_synthetic_ptb(const std::filesystem::path& dir, const SyntheticPtbOptions& o) {
  if (o.vocab_size < 4 || o.classes == 0 || o.classes > o.vocab_size - 2)
    throw std::invalid_argument("synthetic corpus needs vocab_size >= 4 and 1 <= classes <= vocab-2");
  if (std::min({o.train_tokens, o.valid_tokens, o.test_tokens}) < 2)
    throw std::invalid_argument("synthetic splits need at least two tokens");
  const std::size_t words = o.vocab_size - 1;  // every type except <eos>
  std::vector<std::string> names(words);
  for (std::size_t r = 0; r < words; ++r) names[r] = r == 1 ? kUnkToken : "w" + std::to_string(r);

  // Word rank r has Zipf weight 1/(r+1) and belongs to class r mod C.
  std::vector<std::vector<std::size_t>> members(o.classes);
  std::vector<std::vector<double>> weights(o.classes);
  std::vector<double> class_mass(o.classes, 0.0);
  for (std::size_t r = 0; r < words; ++r) {
    const std::size_t c = r % o.classes;
    members[c].push_back(r);
    weights[c].push_back(1.0 / double(r + 1));
    class_mass[c] += 1.0 / double(r + 1);
  }
  std::vector<Categorical> emit;
  for (const auto& w : weights) emit.emplace_back(w);

  // Each class prefers a few successor classes; 10% of mass follows class size.
  std::mt19937_64 rng(o.seed);
  const std::size_t successors = std::min<std::size_t>(6, o.classes);
  const double mass_total = [&] {
    double t = 0.0;
    for (double m : class_mass) t += m;
    return t;
  }();
  std::vector<Categorical> transition;
  for (std::size_t c = 0; c < o.classes; ++c) {
    std::vector<double> t(o.classes);
    for (std::size_t k = 0; k < o.classes; ++k) t[k] = 0.1 * class_mass[k] / mass_total;
    // Successors drawn without replacement in proportion to class mass, which
    // keeps the class marginals close to the Zipf masses.
    std::vector<std::size_t> pick;
    std::vector<double> avail = class_mass;
    while (pick.size() < successors) {
      const std::size_t k = Categorical(avail)(rng);
      pick.push_back(k);
      avail[k] = 0.0;
    }
    std::vector<double> share(successors);
    double total = 0.0;
    for (auto& s : share) total += s = -std::log(1.0 - double(rng() >> 11) * 0x1.0p-53);
    for (std::size_t k = 0; k < successors; ++k) t[pick[k]] += 0.9 * share[k] / total;
    transition.emplace_back(t);
  }
  const Categorical start(class_mass);

  auto write_split = [&](const std::filesystem::path& path, std::size_t tokens,
                         std::uint64_t split_seed) {
    std::mt19937_64 g(split_seed);
    std::string out;
    std::size_t c = start(g);
    bool line_start = true;
    // <eos> counts as a token, as in the loader. The last token always closes
    // a line, so no line may end on the one before it.
    for (std::size_t n = 0; n < tokens; ++n) {
      const bool end = double(g() >> 11) * 0x1.0p-53 < 1.0 / 21.0;
      if (!line_start && (n + 1 == tokens || (end && n + 2 != tokens))) {
        out += '\n';
        line_start = true;
        c = start(g);
        continue;
      }
      if (!line_start) out += ' ';
      out += names[members[c][emit[c](g)]];
      line_start = false;
      c = transition[c](g);
    }
    write_file_atomic(path, out);
  };
  std::filesystem::create_directories(dir);
  const auto paths = ptb_paths(dir);
  write_split(paths.train, o.train_tokens, o.seed ^ 0x1111);
  write_split(paths.valid, o.valid_tokens, o.seed ^ 0x2222);
  write_split(paths.test, o.test_tokens, o.seed ^ 0x3333);
}

void LmConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(clip_norm > 0)) throw std::invalid_argument("clip_norm must be > 0");
  if (batch_size == 0 || bptt == 0 || eval_batch == 0)
    throw std::invalid_argument("batch_size, bptt and eval_batch must be positive");
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must be in (0, 1]");
  if (hidden_size == 0) throw std::invalid_argument("hidden_size must be positive");
}

json to_json(const LmConfig& c) {
  return json{{"model", c.model},
              {"hidden_size", c.hidden_size},
              {"embedding_size", c.embedding_size},
              {"learning_rate", c.learning_rate},
              {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
              {"clip_norm", c.clip_norm},
              {"batch_size", c.batch_size},
              {"bptt", c.bptt},
              {"epochs", c.epochs},
              {"fraction", c.fraction},
              {"eval_batch", c.eval_batch},
              {"seed", c.seed},
              {"freeze", to_string(c.freeze)},
              {"train_classifier", c.train_classifier}};
}

LmConfig lm_config_from_json(const json& j) {
  LmConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "model") c.model = value.get<std::string>();
    else if (key == "hidden_size") c.hidden_size = value.get<std::size_t>();
    else if (key == "embedding_size") c.embedding_size = value.get<std::size_t>();
    else if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "optimizer") {
      const auto name = value.get<std::string>();
      if (name == "adam") c.optimizer = OptimizerKind::adam;
      else if (name == "sgd") c.optimizer = OptimizerKind::sgd;
      else throw std::invalid_argument("unknown optimizer '" + name + "'");
    } else if (key == "clip_norm") c.clip_norm = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "bptt") c.bptt = value.get<std::size_t>();
    else if (key == "epochs") c.epochs = value.get<std::size_t>();
    else if (key == "fraction") c.fraction = value.get<double>();
    else if (key == "eval_batch") c.eval_batch = value.get<std::size_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "freeze") c.freeze = parse_freeze_mode(value.get<std::string>());
    else if (key == "train_classifier") c.train_classifier = value.get<bool>();
    else throw std::invalid_argument("unknown LM config key '" + key + "'");
  }
  c.validate();
  return c;
}

namespace {

struct Carry {
  std::optional<Tensor> hidden;
  std::optional<Tensor> cell;
};

// Runs one window of one stream; returns the summed cross-entropy node.
NodeId window_loss(const StackRnn& model, Graph& g, std::span<const NodeId> bound, Carry& carry,
                   const std::vector<int>& inputs, const std::vector<int>& targets) {
  RecurrentState st = model.initial_state(g);
  if (carry.hidden) st.hidden = g.constant(*carry.hidden);
  if (carry.cell) st.cell = g.constant(*carry.cell);
  std::vector<NodeId> terms;
  terms.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const StepNodes n = model.step(g, bound, st, std::size_t(inputs[t]));
    terms.push_back(g.cross_entropy(n.logits, std::size_t(targets[t])));
  }
  carry.hidden = g.value(st.hidden);
  if (st.cell) carry.cell = g.value(*st.cell);
  return g.sum(g.concat(terms));
}

}  // namespace

double lm_perplexity(const StackRnn& model, const std::vector<int>& ids, std::size_t batch,
                     std::size_t bptt) {
  StackRnn frozen = model;
  for (auto& p : frozen.params()) {
    p.tensor.requires_grad = false;
    p.tensor.grad.reset();
  }
  const auto blocks = batchify(ids, batch, bptt);
  if (blocks.empty()) throw std::invalid_argument("split too short for one evaluation window");
  std::vector<Carry> carry(batch);
  double total = 0.0;
  std::size_t targets = 0;
  for (const auto& blk : blocks) {
    for (std::size_t b = 0; b < batch; ++b) {
      Graph g;
      const auto bound = frozen.bind(g);
      total += double(g.scalar(window_loss(frozen, g, bound, carry[b], blk.inputs[b], blk.targets[b])));
      targets += blk.targets[b].size();
    }
  }
  return std::exp(total / double(targets));
}

LmResult train_lm(const LmConfig& config, const Corpus& corpus,
                  const std::function<void(const LmEpoch&)>& on_epoch) {
  config.validate();
  TrainConfig tc;
  tc.model = config.model;
  tc.hidden_size = config.hidden_size;
  tc.embedding_size =
      config.embedding_size ? config.embedding_size : std::min<std::size_t>(config.hidden_size, 64);
  tc.freeze = config.freeze;
  tc.train_classifier = config.train_classifier;
  std::optional<std::string> warning;
  StackRnn model = build_model(tc, corpus.vocab.size(), config.seed, &warning);
  Optimizer opt(config.optimizer, config.learning_rate, model);
  std::vector<Tensor*> params;
  for (auto& p : model.params())
    if (p.tensor.requires_grad) params.push_back(&p.tensor);

  const auto blocks =
      batchify(leading_fraction(corpus.train, config.fraction), config.batch_size, config.bptt);
  if (blocks.empty()) throw std::invalid_argument("train split too short for one window");

  LmResult result{{}, INFINITY, 0.0, warning, model};
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<Carry> carry(config.batch_size);
    double total = 0.0;
    std::size_t targets = 0;
    for (const auto& blk : blocks) {
      std::size_t block_targets = 0;
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        Graph g;
        const auto bound = model.bind(g);
        const NodeId loss = window_loss(model, g, bound, carry[b], blk.inputs[b], blk.targets[b]);
        total += double(g.scalar(loss));
        block_targets += blk.targets[b].size();
        if (!params.empty()) g.backward(loss);
      }
      targets += block_targets;
      if (params.empty()) continue;
      for (Tensor* p : params) {
        if (!p->grad) continue;
        for (float& v : *p->grad) v = float(double(v) / double(block_targets));
        if (!p->all_finite())
          throw NonFiniteError("non-finite gradient in LM epoch " + std::to_string(epoch));
      }
      clip_gradients(params, config.clip_norm);
      opt.step();
    }
    LmEpoch e{epoch, std::exp(total / double(targets)),
              lm_perplexity(model, corpus.valid, config.eval_batch, config.bptt)};
    if (!std::isfinite(e.train_ppl) || !std::isfinite(e.valid_ppl))
      throw NonFiniteError("non-finite LM loss in epoch " + std::to_string(epoch));
    result.epochs.push_back(e);
    if (e.valid_ppl < result.valid_ppl) {
      result.valid_ppl = e.valid_ppl;
      result.model = model;
    }
    if (on_epoch) on_epoch(e);
  }
  result.test_ppl = lm_perplexity(result.model, corpus.test, config.eval_batch, config.bptt);
  return result;
}

}  // namespace stacklab
