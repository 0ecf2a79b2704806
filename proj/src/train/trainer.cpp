#include "stacklab/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

namespace stacklab {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(clip_norm > 0)) throw std::invalid_argument("clip_norm must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (restarts < 1) throw std::invalid_argument("restarts must be >= 1");
  if (hidden_size < 1) throw std::invalid_argument("hidden_size must be >= 1");
}

json to_json(const TrainConfig& c) {
  json j{{"learning_rate", c.learning_rate},
         {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
         {"clip_norm", c.clip_norm},
         {"batch_size", c.batch_size},
         {"max_epochs", c.max_epochs},
         {"patience", c.patience},
         {"restarts", c.restarts},
         {"base_seed", c.base_seed},
         {"freeze", to_string(c.freeze)},
         {"train_classifier", c.train_classifier},
         {"model", c.model},
         {"hidden_size", c.hidden_size},
         {"embedding_size", c.embedding_size}};
  if (c.checkpoint_dir) j["checkpoint_dir"] = c.checkpoint_dir->string();
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "optimizer") {
      const auto name = value.get<std::string>();
      if (name == "adam") c.optimizer = OptimizerKind::adam;
      else if (name == "sgd") c.optimizer = OptimizerKind::sgd;
      else throw std::invalid_argument("unknown optimizer '" + name + "'");
    } else if (key == "clip_norm") c.clip_norm = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "max_epochs") c.max_epochs = value.get<std::size_t>();
    else if (key == "patience") c.patience = value.get<std::size_t>();
    else if (key == "restarts") c.restarts = value.get<std::size_t>();
    else if (key == "base_seed") c.base_seed = value.get<std::uint64_t>();
    else if (key == "freeze") c.freeze = parse_freeze_mode(value.get<std::string>());
    else if (key == "train_classifier") c.train_classifier = value.get<bool>();
    else if (key == "model") c.model = value.get<std::string>();
    else if (key == "hidden_size") c.hidden_size = value.get<std::size_t>();
    else if (key == "embedding_size") c.embedding_size = value.get<std::size_t>();
    else if (key == "checkpoint_dir") c.checkpoint_dir = value.get<std::string>();
    else throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  c.validate();
  return c;
}

json to_json(const RunRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_ce", e.train_ce}, {"valid_ce", e.valid_ce}});
  }
  json j{{"restart", r.restart},
         {"seed", r.seed},
         {"epochs", epochs},
         {"best_valid_ppl", r.best_valid_ppl},
         {"best_epoch", r.best_epoch},
         {"checkpoint", r.checkpoint},
         {"wall_seconds", r.wall_seconds},
         {"failed", r.failed},
         {"failure", r.failure}};
  if (r.warning) j["warning"] = *r.warning;
  return j;
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.restart = j.at("restart").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("epochs")) {
    r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_ce").get<double>(),
                        e.at("valid_ce").get<double>()});
  }
  r.best_valid_ppl = j.at("best_valid_ppl").get<double>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.failed = j.at("failed").get<bool>();
  r.failure = j.at("failure").get<std::string>();
  if (j.contains("warning")) r.warning = j.at("warning").get<std::string>();
  return r;
}

void append_jsonl(const std::filesystem::path& path, const json& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << line.dump() << '\n';
}

double clip_gradients(std::vector<Tensor*>& params, double max_norm) {
  double sq = 0.0;
  for (Tensor* p : params) {
    if (!p->grad) continue;
    for (float g : *p->grad) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Tensor* p : params) {
      if (!p->grad) continue;
      for (float& g : *p->grad) g = float(double(g) * scale);
    }
  }
  return norm;
}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, StackRnn& model)
    : kind_(kind), lr_(learning_rate) {
  for (auto& p : model.params()) {
    if (!p.tensor.requires_grad) continue;
    params_.push_back(&p.tensor);
    if (kind_ == OptimizerKind::adam) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }
}

void Optimizer::step(double scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    if (!p.grad) continue;
    auto& g = *p.grad;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = double(g[k]) / scale;
      if (kind_ == OptimizerKind::sgd) {
        p.data[k] = float(double(p.data[k]) - lr_ * gk);
        continue;
      }
      double& m = m_[i][k];
      double& v = v_[i][k];
      m = beta1_ * m + (1.0 - beta1_) * gk;
      v = beta2_ * v + (1.0 - beta2_) * gk * gk;
      p.data[k] = float(double(p.data[k]) - lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_));
    }
    std::fill(g.begin(), g.end(), 0.0f);
  }
}

StackRnn build_model(const TrainConfig& config, std::size_t vocab_size, std::uint64_t seed,
                     std::optional<std::string>* warning) {
  StackRnn model(model_preset(config.model, vocab_size, config.hidden_size, config.embedding_size),
                 seed);
  const auto freeze = apply_freeze(partition_of(model), config.freeze,
                                   FreezePolicy{config.train_classifier});
  apply_mask(model, freeze);
  if (warning) *warning = freeze.warning;
  return model;
}

std::pair<double, std::size_t> total_cross_entropy(const StackRnn& model,
                                                   const std::vector<Sequence>& data, int eos) {
  const ModelScorer scorer(model);
  double total = 0.0;
  std::size_t targets = 0;
  for (const auto& s : data) {
    const auto scores = scorer.score(s);
    for (std::size_t t = 0; t <= s.size(); ++t) {
      const auto& l = scores.logits[t];
      const double mx = *std::max_element(l.begin(), l.end());
      double z = 0.0;
      for (double v : l) z += std::exp(v - mx);
      const int target = t < s.size() ? s[t] : eos;
      total += mx + std::log(z) - l[static_cast<std::size_t>(target)];
    }
    targets += s.size() + 1;
  }
  return {total, targets};
}

namespace {

std::vector<Tensor*> trainable(StackRnn& model) {
  std::vector<Tensor*> out;
  for (auto& p : model.params()) {
    if (p.tensor.requires_grad) out.push_back(&p.tensor);
  }
  return out;
}

}  // namespace

TrainedRun train_restart(const TrainConfig& config, std::size_t restart, const TrainData& data,
                         const EpochCallback& on_epoch) {
  config.validate();
  if (data.train.empty() || data.valid.empty()) {
    throw std::invalid_argument("training and validation sets must be nonempty");
  }
  const auto start = std::chrono::steady_clock::now();
  TrainedRun run;
  RunRecord& rec = run.record;
  rec.restart = restart;
  rec.seed = config.base_seed + restart;

  StackRnn model = build_model(config, data.vocab_size, rec.seed, &rec.warning);
  Optimizer opt(config.optimizer, config.learning_rate, model);
  auto params = trainable(model);
  std::mt19937_64 shuffle_rng(rec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.train.size());

  double best_ce = INFINITY;
  std::size_t since_best = 0;
  try {
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double epoch_loss = 0.0;
      std::size_t epoch_targets = 0;
      for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
        const std::size_t e = std::min(order.size(), b + config.batch_size);
        std::size_t targets = 0;
        for (std::size_t i = b; i < e; ++i) {
          const Sequence& s = data.train[order[i]];
          Graph g;
          const NodeId loss = model.sequence_loss(g, model.bind(g), s, std::size_t(data.eos));
          epoch_loss += g.scalar(loss);
          targets += s.size() + 1;
          if (!params.empty()) g.backward(loss);
        }
        epoch_targets += targets;
        if (params.empty()) continue;
        for (Tensor* p : params) {
          if (p->grad) {
            for (float& v : *p->grad) v = float(double(v) / double(targets));
          }
        }
        for (Tensor* p : params) {
          if (!p->all_finite()) throw NonFiniteError("non-finite gradient in epoch " + std::to_string(epoch));
        }
        clip_gradients(params, config.clip_norm);
        opt.step();
      }
      const auto [valid_total, valid_targets] = total_cross_entropy(model, data.valid, data.eos);
      const double valid_ce = valid_total / double(valid_targets);
      const double train_ce = epoch_loss / double(epoch_targets);
      if (!std::isfinite(valid_ce) || !std::isfinite(train_ce)) {
        throw NonFiniteError("non-finite loss in epoch " + std::to_string(epoch));
      }
      rec.epochs.push_back({epoch, train_ce, valid_ce});
      if (valid_ce < best_ce) {
        best_ce = valid_ce;
        since_best = 0;
        rec.best_epoch = epoch;
        rec.best_valid_ppl = std::exp(valid_ce);
        run.best = model;
        if (config.checkpoint_dir) {
          std::filesystem::create_directories(*config.checkpoint_dir);
          const auto stem = *config.checkpoint_dir / ("restart" + std::to_string(restart));
          save_model(stem, model, {config.freeze, config.train_classifier, rec.seed, 0});
          rec.checkpoint = stem.string();
        }
      } else {
        ++since_best;
      }
      if (on_epoch) on_epoch(rec);
      if (since_best >= config.patience) break;
    }
  } catch (const NonFiniteError& e) {
    rec.failed = true;
    rec.failure = e.what();
    run.best.reset();
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

std::vector<TrainedRun> train(const TrainConfig& config, const TrainData& data,
                              std::size_t workers) {
  config.validate();
  std::vector<TrainedRun> runs(config.restarts);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) runs[i] = train_restart(config, i, data);
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, runs.size()));
  if (n == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(work);
  }
  return runs;
}

std::size_t select_best(const std::vector<RunRecord>& records) {
  std::optional<std::size_t> best;
  std::string failures;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.failed) {
      failures += " restart " + std::to_string(r.restart) + ": " + r.failure + ";";
      continue;
    }
    if (!best || r.best_valid_ppl < records[*best].best_valid_ppl ||
        (r.best_valid_ppl == records[*best].best_valid_ppl &&
         r.restart < records[*best].restart)) {
      best = i;
    }
  }
  if (!best) throw std::runtime_error("every restart failed:" + failures);
  return *best;
}

}  // namespace stacklab
