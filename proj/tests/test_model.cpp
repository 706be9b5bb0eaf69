#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ertest/model.hpp"
#include "ertest/training.hpp"

using namespace ertest;

namespace {

ModelConfig small_config(TaskMode mode = TaskMode::sequence, std::size_t classes = 2) {
  ModelConfig c;
  c.vocab_size = 10;
  c.embed_dim = 4;
  c.n_classes = classes;
  c.max_len = 8;
  c.mode = mode;
  c.seed = 3;
  return c;
}

// Token i of class (i % 2) with a planted embedding bit; used for fitting.
std::vector<Example> toy_examples(std::size_t n, std::uint64_t seed, bool annotate) {
  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    const std::size_t label = rng() % 2;
    const std::size_t len = 2 + rng() % 4;
    const std::size_t signal_pos = rng() % len;
    for (std::size_t t = 0; t < len; ++t) ex.ids.push_back(t == signal_pos ? 1 + label : 3 + rng() % 6);
    ex.targets = {label};
    if (annotate) {
      ex.rationale = std::vector<int>(len, 0);
      (*ex.rationale)[signal_pos] = 1;
    }
    out.push_back(ex);
  }
  return out;
}

}  // namespace

TEST(Model, ZeroWeightsGiveUniformLogitsAndLowestClass) {
  auto p = ModelParams::zeros(small_config(TaskMode::sequence, 3));
  const std::size_t ids[] = {1, 2, 3};
  const auto tr = forward(p, ids);
  for (double v : tr.logits.data) EXPECT_EQ(v, tr.logits.data[0]);
  EXPECT_EQ(tr.predicted(), 0u);
}

TEST(Model, SingleTokenAttentionIsOne) {
  auto p = ModelParams::init(small_config());
  const std::size_t ids[] = {4};
  const auto tr = forward(p, ids);
  ASSERT_EQ(tr.attention.size(), 1u);
  EXPECT_EQ(tr.attention.data[0], 1.0);
}

TEST(Model, ForwardIsDeterministic) {
  const std::size_t ids[] = {1, 5, 2, 7};
  const auto a = forward(ModelParams::init(small_config()), ids);
  const auto b = forward(ModelParams::init(small_config()), ids);
  EXPECT_EQ(a.logits.data, b.logits.data);
  EXPECT_EQ(a.attention.data, b.attention.data);
}

TEST(Model, RejectsEmptyAndOutOfRangeInput) {
  auto p = ModelParams::init(small_config());
  EXPECT_THROW(forward(p, std::span<const std::size_t>{}), ValueError);
  const std::size_t bad[] = {1, 10};
  EXPECT_THROW(forward(p, bad), ValueError);
  const std::vector<std::size_t> long_seq(9, 1);
  EXPECT_THROW(forward(p, long_seq), ValueError);
}

TEST(Model, AttentionRowsSumToOne) {
  auto p = ModelParams::init(small_config());
  const std::size_t ids[] = {1, 2, 3, 4, 5};
  const auto tr = forward(p, ids);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += tr.attention(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Model, TokenModeHasOneLogitRowPerToken) {
  auto p = ModelParams::init(small_config(TaskMode::token, 3));
  const std::size_t ids[] = {1, 2, 3};
  const auto tr = forward(p, ids);
  EXPECT_EQ(tr.logits.shape, (ad::Shape{3, 3}));
  EXPECT_EQ(tr.predicted_tokens().size(), 3u);
  EXPECT_THROW(tr.predicted(), Error);
}

TEST(Model, TiedHeadLogitsAreAntisymmetric) {
  auto cfg = small_config();
  cfg.tied_binary_head = true;
  auto p = ModelParams::init(cfg);
  EXPECT_EQ(p.w_out.shape, (ad::Shape{4, 1}));
  const std::size_t ids[] = {1, 2, 3};
  const auto tr = forward(p, ids);
  EXPECT_EQ(tr.logits.data[0], -tr.logits.data[1]);
  cfg.n_classes = 3;
  EXPECT_THROW(ModelParams::zeros(cfg), Error);
}

TEST(Model, CheckpointRoundTrip) {
  auto cfg = small_config();
  cfg.tied_binary_head = true;
  auto p = ModelParams::init(cfg);
  p.steps = 17;
  const auto path = std::filesystem::temp_directory_path() / "ertest_model_ckpt.json";
  save_checkpoint(path.string(), p, "abc");
  const auto q = load_checkpoint(path.string());
  EXPECT_EQ(q.steps, 17u);
  EXPECT_TRUE(q.config.tied_binary_head);
  const auto a = std::as_const(p).named_tensors();
  const auto b = q.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second->data, b[i].second->data) << a[i].first;
  std::filesystem::remove(path);
}

TEST(Model, CorruptCheckpointIsDataError) {
  nlohmann::json j = checkpoint_to_json(ModelParams::init(small_config()), "x");
  j["shapes"]["w_query"] = std::vector<std::size_t>{3, 3};
  EXPECT_THROW(checkpoint_from_json(j), DataError);
}

TEST(Training, ZeroLambdaMatchesTaskOnlyTraining) {
  const auto data = toy_examples(40, 1, true);
  TrainConfig with_er;
  with_er.lambda_er = 0.0;
  with_er.criterion.kind = Criterion::mse;
  TrainConfig plain = with_er;
  plain.extractor = ExtractorKind::attention;  // irrelevant when lambda is 0
  auto a = ModelParams::init(small_config()), b = a;
  Optimizer oa(with_er), ob(plain);
  for (int step = 0; step < 5; ++step) {
    const auto la = train_step(a, oa, std::span(data).subspan(step * 8, 8), with_er);
    const auto lb = train_step(b, ob, std::span(data).subspan(step * 8, 8), plain);
    EXPECT_EQ(la.total, la.task);
    EXPECT_EQ(la.total, lb.total);
  }
  EXPECT_EQ(a.embedding.data, b.embedding.data);
  EXPECT_EQ(a.w_out.data, b.w_out.data);
}

TEST(Training, OrderLossIsZeroForSelfConsistentRationales) {
  auto p = ModelParams::init(small_config());
  std::vector<Example> batch = toy_examples(6, 2, false);
  TrainConfig cfg;
  cfg.criterion.kind = Criterion::order;
  cfg.extractor = ExtractorKind::attention;
  for (auto& ex : batch) {
    const auto tr = forward(p, ex.ids);
    const auto r = extract_attention(tr);
    // Top-1 token as the human mask: every important prob >= every other.
    ex.rationale = binarize_topk(r, 100.0 / static_cast<double>(ex.ids.size())).mask;
  }
  ad::Graph g;
  const auto bound = bind(g, p, true);
  std::vector<const Example*> ptrs;
  for (const auto& ex : batch) ptrs.push_back(&ex);
  const auto loss = batch_loss(g, bound, p.config, ptrs, cfg, true);
  ASSERT_TRUE(loss.er.has_value());
  EXPECT_EQ(loss.er->mean.item(), 0.0);
}

TEST(Training, UnannotatedBatchUsesTaskLossOnly) {
  auto p = ModelParams::init(small_config());
  const auto data = toy_examples(4, 3, false);
  TrainConfig cfg;
  Optimizer opt(cfg);
  const auto lb = train_step(p, opt, std::span(data), cfg);
  EXPECT_TRUE(lb.er_flagged);
  EXPECT_EQ(lb.total, lb.task);
  EXPECT_EQ(lb.annotated, 0u);
}

TEST(Training, LogitsStayFiniteOverHundredSteps) {
  auto p = ModelParams::init(small_config());
  const auto data = toy_examples(64, 4, true);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  Optimizer opt(cfg);
  for (int step = 0; step < 100; ++step) {
    train_step(p, opt, std::span(data).subspan((step % 8) * 8, 8), cfg);
    const auto tr = forward(p, data[step % 64].ids);
    ASSERT_TRUE(tr.logits.all_finite());
  }
}

TEST(Training, EarlyStoppingReturnsBestDevCheckpoint) {
  const auto train = toy_examples(64, 5, true);
  const auto dev = toy_examples(32, 6, true);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.learning_rate = 0.2;  // large enough to overshoot and trigger patience
  cfg.max_epochs = 30;
  cfg.patience = 3;
  const auto res = fit(ModelParams::init(small_config()), train, dev, cfg);
  double best = res.log.at(res.best_epoch).dev_total;
  for (const auto& e : res.log) EXPECT_GE(e.dev_total, best);
  EXPECT_LE(res.best_epoch, res.log.back().epoch);
  const auto again = evaluate_loss(res.params, dev, cfg);
  EXPECT_NEAR(again.total, best, 1e-12);
  if (res.early_stopped) EXPECT_EQ(res.log.size(), res.best_epoch + cfg.patience + 1);
}

TEST(Training, ConstantModelStopsAfterPatiencePlusOneEpochs) {
  const auto train = toy_examples(16, 7, true);
  const auto dev = toy_examples(8, 8, true);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.patience = 4;
  cfg.max_epochs = 50;
  const auto res = fit(ModelParams::init(small_config()), train, dev, cfg);
  EXPECT_EQ(res.best_epoch, 0u);
  EXPECT_TRUE(res.early_stopped);
  EXPECT_EQ(res.log.size(), cfg.patience + 1);
}

TEST(Training, FitIsDeterministic) {
  const auto train = toy_examples(48, 9, true);
  const auto dev = toy_examples(16, 10, true);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.shuffle_seed = 4;
  const auto a = fit(ModelParams::init(small_config()), train, dev, cfg);
  const auto b = fit(ModelParams::init(small_config()), train, dev, cfg);
  EXPECT_EQ(a.params.embedding.data, b.params.embedding.data);
  EXPECT_EQ(a.log.back().dev_total, b.log.back().dev_total);
}

TEST(Training, TrainingReducesLoss) {
  const auto train = toy_examples(128, 11, true);
  const auto dev = toy_examples(64, 12, true);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.max_epochs = 10;
  auto p0 = ModelParams::init(small_config());
  const double before = evaluate_loss(p0, dev, cfg).task;
  const auto res = fit(p0, train, dev, cfg);
  EXPECT_LT(res.log.at(res.best_epoch).dev_task, before);
}

TEST(Training, AllExtractorsTrainWithEveryCriterion) {
  const auto train = toy_examples(24, 13, true);
  for (ExtractorKind k : {ExtractorKind::ixg, ExtractorKind::attention, ExtractorKind::learned})
    for (Criterion c : kAllCriteria) {
      TrainConfig cfg;
      cfg.extractor = k;
      cfg.criterion.kind = c;
      auto p = ModelParams::init(small_config());
      Optimizer opt(cfg);
      const auto lb = train_step(p, opt, std::span(train).subspan(0, 8), cfg);
      EXPECT_TRUE(std::isfinite(lb.total)) << to_string(k) << "/" << to_string(c);
      EXPECT_EQ(lb.annotated, 8u);
    }
}
