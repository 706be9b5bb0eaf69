// Command-line front end: generate, train, evaluate, sweep, report.
// Exit codes: 0 success, 1 run failure, 2 configuration error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ertest/ertest.hpp"

namespace {

using namespace ertest;

constexpr int kExitRunFailure = 1;
constexpr int kExitConfigError = 2;

// Flags that override fields of a RunConfig loaded from --config (or the
// defaults). Unset flags leave the config untouched.
struct RunFlags {
  std::string config_path;
  std::optional<std::string> name, mode, extractor, criterion, selection, rationale_source, lexicon_path, optimizer,
      output_dir, plan_type;
  std::optional<double> lambda, gamma, budget, k_prime, huber_delta, lr, init_scale;
  std::optional<bool> bce_two_term, tied_head;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> embed_dim, max_len, batch_size, epochs, patience, workers, plan_count, plan_init;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::size_t> train_size, dev_size, test_size, ood_size;
  std::string train, dev, test, contrast, functional;
  std::vector<std::string> unseen;
  bool use_cache = false;
};

void add_run_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--config", f.config_path, "RunConfig JSON file");
  app->add_option("--name", f.name, "Config name used in reports");
  app->add_option("--mode", f.mode, "sequence | token");
  app->add_option("--extractor", f.extractor, "ixg | attention | learned");
  app->add_option("--criterion", f.criterion, "mse | mae | huber | bce | kldiv | order");
  app->add_option("--lambda", f.lambda, "ER strength; 0 trains the No-ER baseline");
  app->add_option("--gamma", f.gamma, "Normalization sharpness");
  app->add_option("--huber-delta", f.huber_delta, "Huber threshold");
  app->add_option("--bce-two-term", f.bce_two_term, "Include the negative BCE term");
  app->add_option("--budget", f.budget, "Percent of training instances with rationales");
  app->add_option("--selection", f.selection, "random | lc | hc | lis | his");
  app->add_option("--k-prime", f.k_prime, "Top-k' percent for LIS/HIS");
  app->add_option("--rationale-source", f.rationale_source, "instance | lexicon");
  app->add_option("--lexicon", f.lexicon_path, "Lexicon file (ngram<TAB>tag per line)");
  app->add_option("--seeds", f.seeds, "Training seeds");
  app->add_option("--embed-dim", f.embed_dim, "Embedding width");
  app->add_option("--tied-head", f.tied_head, "Single-score head for binary tasks");
  app->add_option("--init-scale", f.init_scale, "Initialization scale");
  app->add_option("--max-len", f.max_len, "Maximum sequence length");
  app->add_option("--optimizer", f.optimizer, "sgd | adam");
  app->add_option("--lr", f.lr, "Learning rate");
  app->add_option("--batch-size", f.batch_size, "Batch size");
  app->add_option("--epochs", f.epochs, "Maximum epochs");
  app->add_option("--patience", f.patience, "Early-stopping patience in epochs");
  app->add_option("--plan", f.plan_type, "Annotation plan: label_only | expl_only | label_expl");
  app->add_option("--plan-count", f.plan_count, "Instances added or annotated by the plan");
  app->add_option("--plan-init", f.plan_init, "Initial label-only set size");
  app->add_option("--data-seed", f.data_seed, "Generator seed");
  app->add_option("--train-size", f.train_size, "Generated training set size");
  app->add_option("--dev-size", f.dev_size, "Generated dev set size");
  app->add_option("--test-size", f.test_size, "Generated test set size");
  app->add_option("--ood-size", f.ood_size, "Generated unseen set size");
  app->add_option("--train", f.train, "Training JSONL (replaces the generator)");
  app->add_option("--dev", f.dev, "Dev JSONL");
  app->add_option("--test", f.test, "Test JSONL");
  app->add_option("--unseen", f.unseen, "Unseen-distribution JSONL files");
  app->add_option("--contrast", f.contrast, "Contrast-set JSONL");
  app->add_option("--functional", f.functional, "Functional-test JSONL");
  app->add_option("--output-dir", f.output_dir, "Directory for reports and checkpoints");
  app->add_option("--workers", f.workers, "Parallel worker slots");
  app->add_flag("--use-cache", f.use_cache, "Reuse checkpoints found in the output directory");
}

RunConfig build_config(const RunFlags& f) {
  RunConfig c = f.config_path.empty() ? RunConfig{} : load_config(f.config_path);
  try {
    if (f.name) c.name = *f.name;
    if (f.mode) c.mode = parse_task_mode(*f.mode);
    if (f.extractor) c.extractor = parse_extractor(*f.extractor);
    if (f.criterion) c.criterion.kind = parse_criterion(*f.criterion);
    if (f.selection) c.selection = parse_selection(*f.selection);
    if (f.rationale_source) c.rationale_source = parse_rationale_source(*f.rationale_source);
    if (f.optimizer) c.optimizer = parse_optimizer(*f.optimizer);
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (f.lexicon_path) c.lexicon_path = *f.lexicon_path;
  if (f.output_dir) c.output_dir = *f.output_dir;
  if (f.lambda) c.lambda_er = *f.lambda;
  if (f.gamma) c.gamma_er = *f.gamma;
  if (f.huber_delta) c.criterion.huber_delta = *f.huber_delta;
  if (f.bce_two_term) c.criterion.bce_two_term = *f.bce_two_term;
  if (f.budget) c.budget_k = *f.budget;
  if (f.k_prime) c.k_prime = *f.k_prime;
  if (!f.seeds.empty()) c.seeds = f.seeds;
  if (f.embed_dim) c.embed_dim = *f.embed_dim;
  if (f.tied_head) c.tied_binary_head = *f.tied_head;
  if (f.init_scale) c.init_scale = *f.init_scale;
  if (f.max_len) c.max_len = *f.max_len;
  if (f.lr) c.learning_rate = *f.lr;
  if (f.batch_size) c.batch_size = *f.batch_size;
  if (f.epochs) c.max_epochs = *f.epochs;
  if (f.patience) c.patience = *f.patience;
  if (f.workers) c.workers = *f.workers;
  if (f.use_cache) c.use_cache = true;
  if (f.data_seed) c.generator.data_seed = *f.data_seed;
  if (f.train_size) c.generator.train_size = *f.train_size;
  if (f.dev_size) c.generator.dev_size = *f.dev_size;
  if (f.test_size) c.generator.test_size = *f.test_size;
  if (f.ood_size) c.generator.ood_size = *f.ood_size;
  if (f.plan_type) {
    AnnotationPlan p = c.plan.value_or(AnnotationPlan{});
    try {
      p.type = parse_annotation_type(*f.plan_type);
    } catch (const ValueError& e) {
      throw ConfigError(e.what());
    }
    c.plan = p;
  }
  if (f.plan_count || f.plan_init) {
    if (!c.plan) throw ConfigError("--plan-count and --plan-init need --plan");
    if (f.plan_count) c.plan->count = *f.plan_count;
    if (f.plan_init) c.plan->init_size = *f.plan_init;
  }
  if (!f.train.empty() || !f.dev.empty() || !f.test.empty()) {
    DataPaths p;
    p.train = f.train;
    p.dev = f.dev;
    p.test = f.test;
    p.unseen = f.unseen;
    p.contrast = f.contrast;
    p.functional = f.functional;
    c.paths = p;
  }
  c.validate();
  return c;
}

void print_reports(const std::vector<EvalReport>& reports, const std::string& csv_path) {
  std::cout << render_report(reports);
  for (const auto& r : reports) {
    for (const auto& n : r.notes) std::cout << "note [" << r.name << "]: " << n << "\n";
    for (const auto& f : r.failures) std::cout << "FAILED [" << r.name << "] seed " << f.seed << ": " << f.message << "\n";
  }
  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    if (!out) throw DataError("cannot write " + csv_path);
    write_report_csv(out, reports);
  }
}

bool all_ok(const std::vector<EvalReport>& reports) {
  for (const auto& r : reports)
    if (!r.ok()) return false;
  return true;
}

int cmd_generate(const std::string& out_dir, const RunFlags& f) {
  const RunConfig c = build_config(f);
  if (c.paths) throw ConfigError("generate: data paths make no sense here");
  const DataBundle b = generate_bundle(c.generator, c.mode);
  const DataPaths p = write_bundle(b, out_dir);
  nlohmann::json j = {{"train", p.train}, {"dev", p.dev}, {"test", p.test}, {"unseen", p.unseen},
                      {"contrast", p.contrast}, {"functional", p.functional}};
  std::ofstream(std::filesystem::path(out_dir) / "paths.json") << j.dump(2) << "\n";
  std::cout << "wrote " << b.train.size() << " train, " << b.dev.size() << " dev, " << b.test.size() << " test, "
            << b.unseen.size() << " unseen sets, " << b.contrast.instances.size() << " contrast and "
            << b.functional.size() << " functional suites to " << out_dir << "\n";
  return 0;
}

int cmd_train(const RunFlags& f, const std::string& csv) {
  const RunConfig c = build_config(f);
  Runner runner(options_from(c, &std::cerr));
  const auto reports = runner.run_set({c});
  print_reports(reports, csv);
  return all_ok(reports) ? 0 : kExitRunFailure;
}

int cmd_sweep(const RunFlags& f, int rq, const std::string& csv) {
  const RunConfig base = build_config(f);
  std::vector<RunConfig> configs;
  switch (rq) {
    case 1: configs = rq1_configs(base); break;
    case 2: configs = rq2_configs(base); break;
    case 3: configs = rq3_configs(base); break;
    case 4: configs = rq4_configs(base, base.plan ? base.plan->init_size : 1000); break;
    default: throw ConfigError("sweep: --rq must be 1, 2, 3 or 4");
  }
  Runner runner(options_from(base, &std::cerr));
  const auto reports = runner.run_set(configs);
  print_reports(reports, csv);
  return all_ok(reports) ? 0 : kExitRunFailure;
}

int cmd_evaluate(const std::string& ckpt, const std::string& vocab_path, const std::string& data_path,
                 const std::string& rationale_out, const std::string& extractor, double gamma,
                 const std::string& predictions_out) {
  const ModelParams params = load_checkpoint(ckpt);
  const Vocab vocab = load_vocab(vocab_path);
  const Dataset data = ingest_jsonl(data_path);
  const auto pred = predict(params, vocab, data);
  const auto gold = gold_labels(data, params.config.mode);
  std::cout << "instances " << data.size() << "\naccuracy " << format_double(accuracy(pred, gold)) << "\nmacro_f1 "
            << format_double(macro_f1(pred, gold)) << "\n";
  if (!predictions_out.empty() && params.config.mode == TaskMode::sequence) {
    std::vector<PredictionRecord> rows;
    for (std::size_t i = 0; i < data.size(); ++i)
      rows.push_back({data[i].id, data[i].label, pred[i], detail::file_stem(data_path), data[i].group_tags});
    std::ofstream out(predictions_out);
    write_prediction_table(out, rows);
  }
  if (!rationale_out.empty()) {
    ExtractorKind kind;
    try {
      kind = parse_extractor(extractor);
    } catch (const ValueError& e) {
      throw ConfigError(e.what());
    }
    std::ofstream out(rationale_out);
    if (!out) throw DataError("cannot write " + rationale_out);
    export_rationales(out, params, vocab, data, kind, gamma);
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& csv) {
  std::vector<EvalReport> reports;
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open report " + p);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("report " + p + ": " + e.what());
    }
    reports.push_back(report_from_json(j));
  }
  print_reports(reports, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explanation-regularized training and out-of-distribution evaluation"};
  app.require_subcommand(1);

  RunFlags gen_flags, train_flags, sweep_flags;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("generate", "Write a synthetic corpus as JSONL");
  gen->add_option("--out", gen_out, "Output directory");
  add_run_flags(gen, gen_flags);

  std::string train_csv;
  auto* train = app.add_subcommand("train", "Train and evaluate one config against its No-ER baseline");
  add_run_flags(train, train_flags);
  train->add_option("--csv", train_csv, "Write the report CSV here");

  int rq = 1;
  std::string sweep_csv;
  auto* sweep = app.add_subcommand("sweep", "Run one research-question sweep");
  add_run_flags(sweep, sweep_flags);
  sweep->add_option("--rq", rq, "1 criteria, 2 rationale source, 3 budget/selection, 4 annotation trade-off")
      ->required();
  sweep->add_option("--csv", sweep_csv, "Write the combined report CSV here");

  std::string ckpt, vocab, data, rationale_out, extractor = "ixg", predictions_out;
  double gamma = kDefaultGamma;
  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on a JSONL dataset");
  eval->add_option("--checkpoint", ckpt, "Checkpoint JSON")->required();
  eval->add_option("--vocab", vocab, "vocab.txt written next to the checkpoint")->required();
  eval->add_option("--data", data, "Dataset JSONL")->required();
  eval->add_option("--rationales", rationale_out, "Write machine rationales as JSONL");
  eval->add_option("--extractor", extractor, "Extractor for --rationales");
  eval->add_option("--gamma", gamma, "Normalization sharpness for --rationales");
  eval->add_option("--predictions", predictions_out, "Write the prediction table CSV");

  std::vector<std::string> report_paths;
  std::string report_csv;
  auto* report = app.add_subcommand("report", "Render saved report.json files");
  report->add_option("reports", report_paths, "report.json files")->required();
  report->add_option("--csv", report_csv, "Write the combined CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfigError;
  }

  try {
    if (*gen) return cmd_generate(gen_out, gen_flags);
    if (*train) return cmd_train(train_flags, train_csv);
    if (*sweep) return cmd_sweep(sweep_flags, rq, sweep_csv);
    if (*eval) return cmd_evaluate(ckpt, vocab, data, rationale_out, extractor, gamma, predictions_out);
    if (*report) return cmd_report(report_paths, report_csv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRunFailure;
  }
  return 0;
}
