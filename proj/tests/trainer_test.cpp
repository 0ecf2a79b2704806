#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "stacklab/trainer.hpp"

using namespace stacklab;

namespace {

TrainData marked_copy_data(std::size_t train, std::size_t valid) {
  const LanguageTask task(TaskId::marked_copy);
  return {task.sample({5, 15, train, 1}), task.sample({5, 15, valid, 2}), task.vocab_size(),
          task.eos()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Train, SmokeLossDecreases) {
  const auto data = marked_copy_data(200, 50);
  TrainConfig c;
  c.model = "lstm";
  c.hidden_size = 8;
  c.max_epochs = 5;
  c.patience = 5;
  c.learning_rate = 1e-2;
  const auto run = train_restart(c, 0, data);
  ASSERT_FALSE(run.record.failed) << run.record.failure;
  ASSERT_EQ(run.record.epochs.size(), 5u);
  for (std::size_t i = 1; i < 5; ++i) {
    EXPECT_LT(run.record.epochs[i].train_ce, run.record.epochs[i - 1].train_ce) << "epoch " << i;
  }
}

TEST(Train, FrozenParametersBitIdentical) {
  const auto data = marked_copy_data(60, 20);
  for (FreezeMode mode : {FreezeMode::none, FreezeMode::c, FreezeMode::m, FreezeMode::cm}) {
    TrainConfig c;
    c.model = "jm-4";
    c.hidden_size = 6;
    c.max_epochs = 2;
    c.freeze = mode;
    c.learning_rate = 1e-2;
    const StackRnn init = build_model(c, data.vocab_size, c.base_seed);
    const auto run = train_restart(c, 0, data);
    ASSERT_TRUE(run.best);
    const auto mask = apply_freeze(partition_of(init), mode);
    for (std::size_t i = 0; i < init.params().size(); ++i) {
      const bool changed = init.params()[i].tensor.data != run.best->params()[i].tensor.data;
      EXPECT_EQ(changed, bool(mask.trainable[i]))
          << to_string(mode) << " " << init.params()[i].name;
    }
  }
}

TEST(Train, StrictClassifierPolicyFreezesOutputLayer) {
  const auto data = marked_copy_data(40, 10);
  TrainConfig c;
  c.model = "jm-4";
  c.hidden_size = 6;
  c.max_epochs = 1;
  c.freeze = FreezeMode::m;
  c.train_classifier = false;
  const StackRnn init = build_model(c, data.vocab_size, c.base_seed);
  const auto run = train_restart(c, 0, data);
  EXPECT_EQ(init.param("W_y").data, run.best->param("W_y").data);
  EXPECT_NE(init.param("W_s").data, run.best->param("W_s").data);
}

TEST(Train, RestartsGetDistinctSeeds) {
  const auto data = marked_copy_data(20, 5);
  TrainConfig c;
  c.hidden_size = 4;
  c.max_epochs = 1;
  c.restarts = 10;
  c.base_seed = 100;
  const auto runs = train(c, data, 2);
  ASSERT_EQ(runs.size(), 10u);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    EXPECT_EQ(runs[i].record.restart, i);
    EXPECT_EQ(runs[i].record.seed, 100 + i);
  }
}

TEST(Train, ReproducibleRecordsAndCheckpoints) {
  const auto data = marked_copy_data(50, 10);
  const auto root = std::filesystem::temp_directory_path() / "stacklab_train_repro";
  std::filesystem::remove_all(root);
  auto run_once = [&](const char* sub) {
    TrainConfig c;
    c.model = "jm-3";
    c.hidden_size = 5;
    c.max_epochs = 3;
    c.checkpoint_dir = root / sub;
    return train_restart(c, 0, data);
  };
  const auto a = run_once("a"), b = run_once("b");
  ASSERT_EQ(a.record.epochs.size(), b.record.epochs.size());
  for (std::size_t i = 0; i < a.record.epochs.size(); ++i) {
    EXPECT_EQ(a.record.epochs[i].train_ce, b.record.epochs[i].train_ce);
    EXPECT_EQ(a.record.epochs[i].valid_ce, b.record.epochs[i].valid_ce);
  }
  EXPECT_EQ(slurp(root / "a" / "restart0.tensors"), slurp(root / "b" / "restart0.tensors"));
  std::filesystem::remove_all(root);
}

TEST(Train, BestPerplexityIsMinimumOverEpochs) {
  const auto data = marked_copy_data(40, 10);
  TrainConfig c;
  c.hidden_size = 4;
  c.max_epochs = 6;
  c.learning_rate = 0.05;
  const auto run = train_restart(c, 0, data);
  double best = INFINITY;
  for (const auto& e : run.record.epochs) best = std::min(best, e.valid_ce);
  EXPECT_DOUBLE_EQ(run.record.best_valid_ppl, std::exp(best));
}

TEST(Train, EarlyStoppingHonoursPatience) {
  const auto data = marked_copy_data(20, 5);
  TrainConfig c;
  c.hidden_size = 4;
  c.max_epochs = 100;
  c.patience = 1;
  c.learning_rate = 0.5;  // noisy enough to stop early
  const auto run = train_restart(c, 0, data);
  ASSERT_FALSE(run.record.failed);
  EXPECT_EQ(run.record.epochs.size(), run.record.best_epoch + 1);
}

TEST(Train, DivergenceMarksRestartFailed) {
  const auto data = marked_copy_data(20, 5);
  TrainConfig c;
  c.hidden_size = 4;
  c.max_epochs = 5;
  c.optimizer = OptimizerKind::sgd;
  c.learning_rate = 3e38;
  c.clip_norm = 1e30;
  const auto run = train_restart(c, 0, data);
  EXPECT_TRUE(run.record.failed);
  EXPECT_FALSE(run.record.failure.empty());
  EXPECT_FALSE(run.best);
}

TEST(Clip, NormBoundedAfterClipping) {
  Tensor a(3, 1), b(2, 2);
  a.grad = std::vector<float>{3, 4, 12};
  b.grad = std::vector<float>{1, 2, 2, 4};
  std::vector<Tensor*> params{&a, &b};
  const double pre = clip_gradients(params, 5.0);
  EXPECT_NEAR(pre, std::sqrt(9 + 16 + 144 + 1 + 4 + 4 + 16.0), 1e-9);
  double sq = 0;
  for (Tensor* p : params) {
    for (float g : *p->grad) sq += double(g) * g;
  }
  EXPECT_LE(std::sqrt(sq), 5.0 + 1e-6);
  const double again = clip_gradients(params, 100.0);
  EXPECT_NEAR(again, 5.0, 1e-5);  // untouched below threshold
}

TEST(Optimizer, AdamFirstStepIsSignedLearningRate) {
  StackRnn model(model_preset("lstm", 3, 2), 0);
  for (auto& p : model.params()) p.tensor.requires_grad = p.name == "b_y";
  Tensor& b = model.param("b_y");
  b.grad = std::vector<float>{0.5f, -2.0f, 0.0f};
  const std::vector<float> before = b.data;
  Optimizer opt(OptimizerKind::adam, 0.01, model);
  EXPECT_EQ(opt.state_count(), 1u);
  opt.step();
  EXPECT_NEAR(b.data[0], before[0] - 0.01 * 0.5 / (0.5 + 1e-8), 1e-7);
  EXPECT_NEAR(b.data[1], before[1] + 0.01, 1e-7);
  EXPECT_EQ(b.data[2], before[2]);
  for (float g : *b.grad) EXPECT_EQ(g, 0.0f);
}

TEST(SelectBest, Examples) {
  auto rec = [](std::size_t i, double ppl, bool failed = false) {
    RunRecord r;
    r.restart = i;
    r.best_valid_ppl = ppl;
    r.failed = failed;
    r.failure = failed ? "diverged" : "";
    return r;
  };
  EXPECT_EQ(select_best({rec(0, 3.2), rec(1, 2.9), rec(2, 4.1)}), 1u);
  EXPECT_EQ(select_best({rec(0, 2.0), rec(1, 2.0)}), 0u);
  EXPECT_EQ(select_best({rec(0, 1.0, true), rec(1, 2.0)}), 1u);
  try {
    select_best({rec(0, 1.0, true), rec(1, 1.0, true)});
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("restart 1"), std::string::npos);
  }
}

TEST(SelectBest, MatchesExhaustiveScan) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(1, 5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<RunRecord> records(6);
    for (std::size_t i = 0; i < records.size(); ++i) {
      records[i].restart = i;
      records[i].best_valid_ppl = u(rng);
    }
    std::size_t scan = 0;
    for (std::size_t i = 1; i < records.size(); ++i) {
      if (records[i].best_valid_ppl < records[scan].best_valid_ppl) scan = i;
    }
    EXPECT_EQ(select_best(records), scan);
  }
}

TEST(Config, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.model = "jm-3.3.3";
  c.freeze = FreezeMode::cm;
  c.restarts = 3;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json({{"learning_rte", 0.1}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"restarts", 0}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"clip_norm", 0.0}}), std::invalid_argument);
}

TEST(RunRecordJson, RoundTrip) {
  RunRecord r;
  r.restart = 2;
  r.seed = 9;
  r.epochs = {{1, 0.5, 0.6}, {2, 0.4, 0.55}};
  r.best_valid_ppl = std::exp(0.55);
  r.best_epoch = 2;
  const RunRecord back = run_record_from_json(to_json(r));
  EXPECT_EQ(to_json(back), to_json(r));
}
