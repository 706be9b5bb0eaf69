#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ertest/runner.hpp"

using namespace ertest;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.name = "tiny";
  c.seeds = {0, 1};
  c.max_epochs = 3;
  c.patience = 3;
  c.generator.train_size = 120;
  c.generator.dev_size = 40;
  c.generator.test_size = 60;
  c.generator.ood_size = 60;
  c.generator.contrast_size = 30;
  c.generator.functional_size = 20;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ertest_runner_" + name);
  fs::remove_all(p);
  return p;
}

std::string csv_of(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  write_report_csv(out, reports);
  return out.str();
}

}  // namespace

TEST(Config, JsonRoundTripPreservesHash) {
  RunConfig c = tiny_config();
  c.criterion.kind = Criterion::huber;
  c.criterion.huber_delta = 0.5;
  c.budget_k = 15;
  c.selection = SelectionStrategy::lis;
  c.plan = AnnotationPlan{AnnotationType::label_expl, 7, 50};
  const RunConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, HashIgnoresLabelsAndExecutionSettings) {
  const RunConfig a = tiny_config();
  RunConfig b = a;
  b.name = "renamed";
  b.workers = 4;
  b.output_dir = "/elsewhere";
  b.use_cache = true;
  EXPECT_EQ(config_hash(a), config_hash(b));
}

TEST(Config, HashChangesWithSemanticFields) {
  const RunConfig a = tiny_config();
  const std::string h = config_hash(a);
  std::vector<RunConfig> variants(6, a);
  variants[0].lambda_er = 2.0;
  variants[1].criterion.kind = Criterion::mse;
  variants[2].seeds = {0, 2};
  variants[3].generator.train_size = 121;
  variants[4].learning_rate = 0.02;
  variants[5].extractor = ExtractorKind::attention;
  for (const auto& v : variants) EXPECT_NE(config_hash(v), h);
}

TEST(Config, HashIgnoresFieldsWithoutEffect) {
  RunConfig a = tiny_config();
  a.criterion.kind = Criterion::mae;
  RunConfig b = a;
  b.criterion.huber_delta = 7.0;
  EXPECT_EQ(config_hash(a), config_hash(b));
  RunConfig c = a, d = a;
  c.lambda_er = d.lambda_er = 0.0;
  d.extractor = ExtractorKind::attention;
  EXPECT_EQ(config_hash(c), config_hash(d));
}

TEST(Config, ValidationRejectsBadValues) {
  auto expect_bad = [](auto mutate) {
    RunConfig c = tiny_config();
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](RunConfig& c) { c.lambda_er = -1; });
  expect_bad([](RunConfig& c) { c.gamma_er = 0; });
  expect_bad([](RunConfig& c) { c.budget_k = 0; });
  expect_bad([](RunConfig& c) { c.budget_k = 101; });
  expect_bad([](RunConfig& c) { c.seeds = {}; });
  expect_bad([](RunConfig& c) { c.seeds = {1, 1}; });
  expect_bad([](RunConfig& c) { c.batch_size = 0; });
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(Config, UnknownSchemaVersionIsRejected) {
  auto j = to_json(tiny_config());
  j["schema_version"] = 99;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Ingest, ReadsTheDocumentedRecords) {
  std::istringstream in(
      R"({"id": 3, "tokens": ["great", "movie"], "label": 1, "rationale": [1, 0]})"
      "\n"
      R"({"tokens": ["bad"], "label": 0, "group_tags": ["x"]})"
      "\n\n"
      R"({"tokens": ["a", "b"], "label": [0, 1]})"
      "\n");
  const auto d = read_jsonl(in, "t");
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d[0].id, 3);
  EXPECT_EQ(*d[0].rationale, (std::vector<int>{1, 0}));
  EXPECT_FALSE(d[1].rationale);
  EXPECT_EQ(d[1].group_tags, (std::vector<std::string>{"x"}));
  EXPECT_EQ(d[2].token_labels, (std::vector<int>{0, 1}));
}

TEST(Ingest, ReportsEveryMalformedLine) {
  std::istringstream in(
      R"({"tokens": ["a", "b"], "label": 1, "rationale": [1]})"
      "\n"
      R"({"tokens": ["a"], "label": 0})"
      "\n"
      R"({"label": 0})"
      "\n"
      "not json\n");
  try {
    read_jsonl(in, "bad");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 1: rationale length 1 != token count 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 3: missing field 'tokens'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 4: invalid JSON"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("line 2"), std::string::npos) << msg;
  }
}

TEST(Ingest, JsonlRoundTrip) {
  const auto d = generate_id_dataset(TaskSpec::standard(), 20, 1, "rt");
  std::stringstream buf;
  write_jsonl(buf, d);
  const auto back = read_jsonl(buf, "rt");
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back[i].tokens, d[i].tokens);
    EXPECT_EQ(back[i].label, d[i].label);
    EXPECT_EQ(back[i].rationale, d[i].rationale);
    EXPECT_EQ(back[i].group_tags, d[i].group_tags);
  }
}

TEST(Report, CsvRoundTrip) {
  EvalReport r;
  r.name = "a, \"quoted\" name";
  r.config_hash = "00ff";
  MetricRow m;
  m.dataset = "id";
  m.metric = "accuracy";
  m.seeds = {0, 1, 2};
  m.values = {0.1, 0.2, 0.30000000000000004};
  summarize(m);
  m.p_value = 0.012345678901234567;
  m.significant = true;
  r.rows.push_back(m);
  MetricRow u = m;
  u.dataset = "ood";
  u.seen = false;
  u.values = {0.5};
  u.seeds = {0};
  summarize(u);
  u.p_value.reset();
  u.significant = false;
  r.rows.push_back(u);
  std::stringstream buf;
  write_report_csv(buf, {r});
  EXPECT_EQ(read_report_csv(buf), report_records({r}));
}

TEST(Report, JsonRoundTrip) {
  EvalReport r;
  r.name = "x";
  r.config_hash = "abc";
  r.failures.push_back({3, "boom"});
  MetricRow m;
  m.dataset = "id";
  m.metric = "macro_f1";
  m.seeds = {0, 1};
  m.values = {0.25, 0.75};
  summarize(m);
  r.rows.push_back(m);
  const auto back = report_from_json(report_to_json(r));
  EXPECT_EQ(report_to_json(back), report_to_json(r));
  EXPECT_FALSE(back.ok());
}

TEST(Report, SummaryStatistics) {
  MetricRow m;
  m.values = {1.0, 2.0, 4.0};
  summarize(m);
  EXPECT_NEAR(m.mean, 7.0 / 3.0, 1e-15);
  EXPECT_NEAR(*m.stddev, std::sqrt(((1 - 7.0 / 3) * (1 - 7.0 / 3) + (2 - 7.0 / 3) * (2 - 7.0 / 3) +
                                    (4 - 7.0 / 3) * (4 - 7.0 / 3)) /
                                   2.0),
              1e-14);
  m.values = {1.0};
  summarize(m);
  EXPECT_FALSE(m.stddev);
}

TEST(Sweeps, Rq1HasOneConfigPerCriterion) {
  const auto configs = rq1_configs(tiny_config());
  ASSERT_EQ(configs.size(), 6u);
  std::set<std::string> names, hashes;
  for (const auto& c : configs) {
    names.insert(c.name);
    hashes.insert(config_hash(c));
    EXPECT_EQ(config_hash(baseline_of(c)), config_hash(baseline_of(configs[0])));
  }
  EXPECT_EQ(names.size(), 6u);
  EXPECT_EQ(hashes.size(), 6u);
  EXPECT_TRUE(names.count("IxG+MAE"));
}

TEST(Sweeps, Rq3GridAndFullModel) {
  const auto configs = rq3_configs(tiny_config());
  ASSERT_EQ(configs.size(), 16u);
  EXPECT_EQ(configs.front().name, "k=5 random");
  EXPECT_EQ(configs.back().name, "k=100");
  EXPECT_EQ(configs.back().budget_k, 100.0);
}

TEST(Sweeps, Rq4VariesOnlyCounts) {
  const auto configs = rq4_configs(tiny_config(), 30, 0.01);
  ASSERT_EQ(configs.size(), 15u);
  auto strip = [](RunConfig c) {
    c.name.clear();
    c.plan->count = 0;
    c.plan->type = AnnotationType::label_only;
    c.lambda_er = 0.0;
    return to_json(c);
  };
  for (const auto& c : configs) {
    ASSERT_TRUE(c.plan);
    EXPECT_EQ(c.plan->init_size, 30u);
    EXPECT_EQ(strip(c), strip(configs[0]));
    EXPECT_EQ(c.is_no_er(), c.plan->type == AnnotationType::label_only);
  }
  // Counts grow with the time budget inside each annotation type.
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t b = 1; b < 5; ++b) EXPECT_GE(configs[t * 5 + b].plan->count, configs[t * 5 + b - 1].plan->count);
}

TEST(Runner, SingleConfigProducesBaselineComparison) {
  RunConfig c = tiny_config();
  c.criterion.kind = Criterion::mae;
  const auto reports = Runner().run_set({c});
  ASSERT_EQ(reports.size(), 2u);
  const auto& base = reports[0];
  const auto& er = reports[1];
  EXPECT_TRUE(base.is_baseline);
  EXPECT_EQ(er.baseline_hash, base.config_hash);
  for (const auto& m : base.rows) EXPECT_FALSE(m.p_value) << m.dataset << "/" << m.metric;
  const auto& acc = er.at("id", "accuracy");
  EXPECT_TRUE(acc.p_value);
  EXPECT_TRUE(acc.seen);
  EXPECT_FALSE(er.at("ood", "accuracy").seen);
  EXPECT_TRUE(er.find("contrast", "consistency"));
  EXPECT_TRUE(er.find("id", "fprd"));
  EXPECT_FALSE(er.at("id", "fprd").higher_is_better);
}

TEST(Runner, MeansRecomputableFromSeedValues) {
  const auto reports = Runner().run_set({tiny_config()});
  for (const auto& r : reports)
    for (const auto& m : r.rows) {
      ASSERT_EQ(m.values.size(), m.seeds.size());
      double s = 0;
      for (double v : m.values) s += v;
      EXPECT_NEAR(m.mean, s / m.values.size(), 1e-12) << m.metric;
    }
}

TEST(Runner, NormalizedFailureRatesLieInUnitInterval) {
  const auto reports = Runner().run_set(rq1_configs(tiny_config()));
  ASSERT_EQ(reports.size(), 7u);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.ok()) << r.name;
    const auto* m = r.find("functional", "normalized_failure_rate");
    ASSERT_TRUE(m) << r.name;
    for (double v : m->values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Runner, RepeatedRunsAreByteIdentical) {
  RunConfig c = tiny_config();
  const std::string a = csv_of(Runner().run_set({c}));
  c.workers = 3;
  const std::string b = csv_of(Runner().run_set({c}));
  EXPECT_EQ(a, b);
}

TEST(Runner, PersistsArtifactsAndReusesCheckpoints) {
  const fs::path dir = scratch("persist");
  RunConfig c = tiny_config();
  c.output_dir = dir.string();
  const auto first = Runner(options_from(c)).run_set({c});
  const fs::path member = dir / config_hash(c);
  for (const char* f : {"report.json", "report.csv", "config.json", "vocab.txt", "predictions_seed_0.csv",
                        "seed_0.ckpt.json", "seed_1.ckpt.json"})
    EXPECT_TRUE(fs::exists(member / f)) << f;
  c.use_cache = true;
  const auto second = Runner(options_from(c)).run_set({c});
  EXPECT_EQ(csv_of(first), csv_of(second));
  fs::remove_all(dir);
}

TEST(Runner, FailedSeedYieldsPartialReport) {
  const fs::path dir = scratch("partial");
  RunConfig c = tiny_config();
  c.seeds = {0, 1, 2};
  c.output_dir = dir.string();
  c.use_cache = true;
  fs::create_directories(dir / config_hash(c));
  std::ofstream(dir / config_hash(c) / "seed_1.ckpt.json") << "{ not a checkpoint";
  const auto reports = Runner(options_from(c)).run_set({c});
  const auto& er = reports.back();
  ASSERT_EQ(er.failures.size(), 1u);
  EXPECT_EQ(er.failures[0].seed, 1u);
  const auto& acc = er.at("id", "accuracy");
  EXPECT_EQ(acc.seeds, (std::vector<std::uint64_t>{0, 2}));
  EXPECT_TRUE(reports.front().ok());
  fs::remove_all(dir);
}

TEST(Runner, MismatchedBaselinesAreRejected) {
  RunConfig a = tiny_config(), b = tiny_config();
  b.learning_rate = 0.05;
  EXPECT_THROW(Runner().run_set({a, b}), ConfigError);
}

TEST(Runner, SelectionBudgetRecordsManifest) {
  const fs::path dir = scratch("budget");
  RunConfig c = tiny_config();
  c.budget_k = 15;
  c.selection = SelectionStrategy::lc;
  c.output_dir = dir.string();
  Runner(options_from(c)).run_set({c});
  std::ifstream in(dir / config_hash(c) / "selection.json");
  ASSERT_TRUE(in);
  const auto m = manifest_from_json(nlohmann::json::parse(in));
  EXPECT_EQ(m.selected_ids.size(), budget_size(120, 15));
  EXPECT_EQ(m.strategy, SelectionStrategy::lc);
  fs::remove_all(dir);
}

TEST(Runner, AnnotationPlanSizesTrainingSet) {
  RunConfig c = tiny_config();
  c.generator.train_size = 100;
  c.plan = AnnotationPlan{AnnotationType::label_expl, 10, 40};
  const auto reports = Runner().run_set({c});
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_TRUE(reports[1].ok());
}

TEST(Runner, TokenModeRuns) {
  RunConfig c = tiny_config();
  c.mode = TaskMode::token;
  const auto reports = Runner().run_set({c});
  const auto& acc = reports.back().at("id", "accuracy");
  EXPECT_GT(acc.mean, 0.5);
}
