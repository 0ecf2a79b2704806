#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "stacklab/ptb.hpp"

using namespace stacklab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("stacklab_ptb_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path tiny_corpus() {
  const auto dir = scratch("tiny");
  const auto p = ptb_paths(dir);
  write(p.train, " the cat sat \n the <unk> ran\n a dog sat\n");
  write(p.valid, "the dog ran\n");
  write(p.test, "the zebra sat\n");
  return dir;
}

// Distinct whitespace tokens plus the end-of-sentence token.
std::size_t count_types(const fs::path& file) {
  std::ifstream in(file);
  std::set<std::string> types{"<eos>"};
  for (std::string w; in >> w;) types.insert(w);
  return types.size();
}

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = int(i);
  return v;
}

}  // namespace

TEST(Load, VocabularyMatchesCorpusCount) {
  const auto dir = tiny_corpus();
  const Corpus c = load_ptb(ptb_paths(dir));
  EXPECT_EQ(c.vocab.size(), count_types(ptb_paths(dir).train));
  EXPECT_EQ(c.vocab.word(c.vocab.eos), "<eos>");
  // Highest count first: "<eos>" and "the" and "sat" appear 3, 2, 2 times.
  EXPECT_EQ(c.vocab.words[0], "<eos>");
  EXPECT_EQ(c.train.size(), 12u);
  for (const auto* split : {&c.train, &c.valid, &c.test})
    for (int id : *split) EXPECT_LT(std::size_t(id), c.vocab.size());
}

TEST(Load, TestOnlyTokenMapsToUnknown) {
  const Corpus c = load_ptb(ptb_paths(tiny_corpus()));
  ASSERT_GE(c.vocab.unk, 0);
  EXPECT_EQ(c.test[1], c.vocab.unk);
  EXPECT_EQ(c.test.back(), c.vocab.eos);
}

TEST(Load, Errors) {
  const auto dir = tiny_corpus();
  auto p = ptb_paths(dir);
  p.valid = dir / "missing.txt";
  try {
    load_ptb(p);
    FAIL() << "expected missing-file error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("missing.txt"), std::string::npos);
  }
  write(dir / "empty.txt", "\n\n");
  p = ptb_paths(dir);
  p.test = dir / "empty.txt";
  EXPECT_THROW(load_ptb(p), std::invalid_argument);

  // Without an unknown token in train, unseen words are rejected.
  p = ptb_paths(dir);
  write(p.train, "the cat sat\n");
  EXPECT_THROW(load_ptb(p), std::invalid_argument);
}

TEST(Load, EncodeDecodeRoundTrip) {
  const auto dir = tiny_corpus();
  const Corpus c = load_ptb(ptb_paths(dir));
  std::ifstream in(ptb_paths(dir).train);
  for (std::string line; std::getline(in, line);) {
    std::istringstream words(line);
    std::string normalized;
    for (std::string w; words >> w;) normalized += (normalized.empty() ? "" : " ") + w;
    EXPECT_EQ(decode(c.vocab, encode_line(c.vocab, line)), normalized + "\n");
  }
}

TEST(Load, VocabularyJsonRoundTrip) {
  const Corpus c = load_ptb(ptb_paths(tiny_corpus()));
  const auto back = vocabulary_from_json(nlohmann::json::parse(to_json(c.vocab).dump()));
  EXPECT_EQ(back.words, c.vocab.words);
  EXPECT_EQ(back.eos, c.vocab.eos);
  EXPECT_EQ(back.unk, c.vocab.unk);
  EXPECT_EQ(back.id("cat"), c.vocab.id("cat"));
  auto bad = to_json(c.vocab);
  bad["words"].push_back("cat");
  EXPECT_THROW(vocabulary_from_json(bad), std::invalid_argument);
}

TEST(Batchify, HundredIdsBatchOneWindowTen) {
  const auto ids = iota_ids(100);
  const auto blocks = batchify(ids, 1, 10);
  ASSERT_EQ(blocks.size(), 9u);
  std::vector<int> targets;
  for (const auto& b : blocks) {
    ASSERT_EQ(b.inputs[0].size(), 10u);
    for (std::size_t t = 0; t < 10; ++t) EXPECT_EQ(b.targets[0][t], b.inputs[0][t] + 1);
    targets.insert(targets.end(), b.targets[0].begin(), b.targets[0].end());
  }
  EXPECT_EQ(targets, std::vector<int>(ids.begin() + 1, ids.begin() + 91));
}

TEST(Batchify, StreamsContinueAndCoverOnce) {
  const auto ids = iota_ids(1003);
  const std::size_t batch = 4, bptt = 7;
  const auto blocks = batchify(ids, batch, bptt);
  std::set<int> seen;
  const std::size_t stream = ids.size() / batch;
  for (std::size_t b = 0; b < batch; ++b) {
    int expect = int(b * stream) + 1;
    for (const auto& blk : blocks) {
      for (int t : blk.targets[b]) {
        EXPECT_EQ(t, expect++);
        EXPECT_TRUE(seen.insert(t).second) << "target " << t << " scored twice";
      }
    }
    // Unscored tail of each stream is shorter than one window.
    EXPECT_LT(std::size_t(int(b * stream + stream) - expect), bptt);
  }
  EXPECT_TRUE(batchify(iota_ids(3), 4, 2).empty());
}

TEST(Batchify, Deterministic) {
  const auto ids = iota_ids(500);
  const auto a = batchify(ids, 3, 11), b = batchify(ids, 3, 11);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].inputs, b[i].inputs);
    EXPECT_EQ(a[i].targets, b[i].targets);
  }
}

TEST(Fraction, LeadingSubset) {
  const auto ids = iota_ids(10);
  EXPECT_EQ(leading_fraction(ids, 0.3), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(leading_fraction(ids, 1.0), ids);
  EXPECT_THROW(leading_fraction(ids, 0.0), std::invalid_argument);
  EXPECT_THROW(leading_fraction(ids, 1.5), std::invalid_argument);
}

TEST(Perplexity, UniformPredictorEqualsVocabulary) {
  const std::size_t vocab = 37;
  StackRnn model(model_preset("lstm", vocab, 8, 4), 1);
  for (auto& p : model.params()) std::fill(p.tensor.data.begin(), p.tensor.data.end(), 0.0f);
  std::vector<int> ids(400);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = int((i * 7) % vocab);
  EXPECT_NEAR(lm_perplexity(model, ids, 3, 9), double(vocab), 1e-4 * double(vocab));
}

TEST(Perplexity, ControllerStateCarriesAcrossWindows) {
  const std::size_t vocab = 11;
  std::vector<int> ids(101);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = int((i * i + 3) % vocab);
  const StackRnn lstm(model_preset("lstm", vocab, 6, 4), 2);
  EXPECT_NEAR(lm_perplexity(lstm, ids, 1, 10), lm_perplexity(lstm, ids, 1, 100), 1e-4);
  // Stacks are emptied per window, so a stack model sees a different history.
  const StackRnn jm(model_preset("jm-hidden", vocab, 6, 4), 2);
  EXPECT_NE(lm_perplexity(jm, ids, 1, 10), lm_perplexity(jm, ids, 1, 100));
}

TEST(Synthetic, DeterministicAndCountable) {
  SyntheticPtbOptions o;
  o.vocab_size = 200;
  o.classes = 8;
  o.train_tokens = 20000;
  o.valid_tokens = 3000;
  o.test_tokens = 3000;
  o.seed = 5;
  const auto a = scratch("syn_a"), b = scratch("syn_b");
  write_synthetic_ptb(a, o);
  write_synthetic_ptb(b, o);
  for (auto [pa, pb] : {std::pair{ptb_paths(a).train, ptb_paths(b).train},
                        std::pair{ptb_paths(a).test, ptb_paths(b).test}})
    EXPECT_EQ(slurp(pa), slurp(pb));
  const Corpus c = load_ptb(ptb_paths(a));
  EXPECT_EQ(c.vocab.size(), count_types(ptb_paths(a).train));
  EXPECT_LE(c.vocab.size(), o.vocab_size);
  EXPECT_GE(c.vocab.unk, 0);
  EXPECT_EQ(c.train.size(), o.train_tokens);
}

TEST(Train, SmokeBeatsUniform) {
  SyntheticPtbOptions o;
  o.vocab_size = 60;
  o.classes = 6;
  o.train_tokens = 12000;
  o.valid_tokens = 2000;
  o.test_tokens = 2000;
  o.seed = 1;
  const auto dir = scratch("smoke");
  write_synthetic_ptb(dir, o);
  const Corpus c = load_ptb(ptb_paths(dir));
  LmConfig cfg;
  cfg.hidden_size = 16;
  cfg.batch_size = 4;
  cfg.bptt = 20;
  cfg.learning_rate = 1e-2;
  std::vector<LmEpoch> seen;
  const auto r = train_lm(cfg, c, [&](const LmEpoch& e) { seen.push_back(e); });
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.valid_ppl));
  EXPECT_LT(r.valid_ppl, 0.7 * double(c.vocab.size()));
  EXPECT_LT(r.test_ppl, double(c.vocab.size()));
}

TEST(Train, FrozenModeKeepsControllerFixed) {
  SyntheticPtbOptions o;
  o.vocab_size = 30;
  o.classes = 3;
  o.train_tokens = 3000;
  o.valid_tokens = 500;
  o.test_tokens = 500;
  const auto dir = scratch("frozen");
  write_synthetic_ptb(dir, o);
  const Corpus c = load_ptb(ptb_paths(dir));
  LmConfig cfg;
  cfg.model = "jm-hidden";
  cfg.hidden_size = 8;
  cfg.batch_size = 2;
  cfg.bptt = 10;
  cfg.freeze = FreezeMode::cm;
  const auto r = train_lm(cfg, c);
  TrainConfig tc;
  tc.model = cfg.model;
  tc.hidden_size = 8;
  tc.embedding_size = 8;
  tc.freeze = FreezeMode::cm;
  const StackRnn init = build_model(tc, c.vocab.size(), cfg.seed);
  for (std::size_t i = 0; i < init.params().size(); ++i) {
    const auto& p = init.params()[i];
    if (p.group == ParamGroup::classifier)
      EXPECT_NE(p.tensor.data, r.model.params()[i].tensor.data) << p.name;
    else
      EXPECT_EQ(p.tensor.data, r.model.params()[i].tensor.data) << p.name;
  }
}

TEST(Config, JsonRoundTrip) {
  LmConfig cfg;
  cfg.model = "jm-10";
  cfg.fraction = 0.1;
  cfg.freeze = FreezeMode::m;
  cfg.optimizer = OptimizerKind::sgd;
  const auto back = lm_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_THROW(lm_config_from_json({{"bogus", 1}}), std::invalid_argument);
  EXPECT_THROW(lm_config_from_json({{"fraction", 0.0}}), std::invalid_argument);
}
