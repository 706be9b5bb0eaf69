#pragma once

// Experiment orchestration: trains every (config, seed) pair, evaluates on
// the seen test set, unseen datasets, contrast sets and functional suites,
// and assembles reports compared against a shared No-ER baseline.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ertest/config.hpp"
#include "ertest/report.hpp"

namespace ertest {

inline std::string now_iso8601() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Runs f(0..n-1) on up to `workers` threads. Exceptions must be handled
// inside f.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) f(i);
    });
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Prediction

inline std::vector<int> predict(const ModelParams& params, const Vocab& vocab, const Dataset& data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& inst : data.instances) {
    const ForwardTrace tr = forward(params, vocab.encode(inst.tokens));
    if (tr.mode == TaskMode::sequence) {
      out.push_back(static_cast<int>(tr.predicted()));
    } else {
      for (std::size_t p : tr.predicted_tokens()) out.push_back(static_cast<int>(p));
    }
  }
  return out;
}

// Gold labels aligned with predict(): one per instance, or one per token.
inline std::vector<int> gold_labels(const Dataset& data, TaskMode mode) {
  if (mode == TaskMode::sequence) return data.labels();
  std::vector<int> out;
  for (const auto& inst : data.instances) out.insert(out.end(), inst.token_labels.begin(), inst.token_labels.end());
  return out;
}

struct PredictionRecord {
  std::int64_t instance_id = 0;
  int gold = 0;
  int pred = 0;
  std::string split;
  std::vector<std::string> group_tags;
};

inline void write_prediction_table(std::ostream& out, const std::vector<PredictionRecord>& rows) {
  out << "instance_id,gold,pred,split,group_tags\n";
  for (const auto& r : rows) {
    std::string tags;
    for (const auto& t : r.group_tags) tags += (tags.empty() ? "" : ";") + t;
    out << r.instance_id << ',' << r.gold << ',' << r.pred << ',' << csv_field(r.split) << ',' << csv_field(tags)
        << "\n";
  }
}

// One token per line, in id order.
inline void write_vocab(std::ostream& out, const Vocab& vocab) {
  for (const auto& t : vocab.tokens()) out << t << "\n";
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path);
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) tokens.push_back(line);
  if (tokens.empty() || tokens.front() != "<unk>") throw DataError("vocabulary " + path + ": must start with <unk>");
  return Vocab::from_tokens(tokens);
}

// Machine rationales as JSONL: {instance_id, extractor, target_class,
// raw_scores, probs}. The target is the predicted class.
inline void export_rationales(std::ostream& out, const ModelParams& params, const Vocab& vocab, const Dataset& data,
                              ExtractorKind extractor, double gamma = kDefaultGamma) {
  for (const auto& inst : data.instances) {
    const ForwardTrace tr = forward(params, vocab.encode(inst.tokens));
    Rationale r;
    nlohmann::json target;
    if (tr.mode == TaskMode::sequence) {
      const std::size_t y = tr.predicted();
      target = y;
      switch (extractor) {
        case ExtractorKind::ixg: r = extract_ixg(tr, y, gamma); break;
        case ExtractorKind::attention: r = extract_attention(tr, gamma); break;
        case ExtractorKind::learned: r = extract_learned(params.head, tr, gamma); break;
      }
    } else {
      const auto ys = tr.predicted_tokens();
      target = ys;
      switch (extractor) {
        case ExtractorKind::ixg: r = extract_ixg(tr, std::span<const std::size_t>(ys), gamma); break;
        case ExtractorKind::attention: r = extract_attention(tr, gamma); break;
        case ExtractorKind::learned: r = extract_learned(params.head, tr, gamma); break;
      }
    }
    out << nlohmann::json{{"instance_id", inst.id},
                          {"extractor", to_string(extractor)},
                          {"target_class", target},
                          {"raw_scores", r.raw_scores},
                          {"probs", r.probs}}
               .dump()
        << "\n";
  }
}

// ---------------------------------------------------------------------------
// Per-seed evaluation

struct MetricValue {
  std::string dataset;
  std::string metric;
  bool seen = true;
  bool higher_is_better = true;
  double value = 0.0;
};

struct SubtestRate {
  FunctionalCategory category = FunctionalCategory::vocabulary;
  std::string name;
  double rate = 0.0;  // percent
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<MetricValue> metrics;
  std::vector<SubtestRate> subtests;
  std::vector<std::string> notes;
  std::vector<PredictionRecord> predictions;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

inline std::size_t infer_classes(const Dataset& train, TaskMode mode) {
  int top = 1;
  for (const auto& inst : train.instances) {
    if (mode == TaskMode::sequence) top = std::max(top, inst.label);
    else
      for (int l : inst.token_labels) top = std::max(top, l);
  }
  return static_cast<std::size_t>(top) + 1;
}

inline SeedOutcome evaluate_model(const ModelParams& params, const Vocab& vocab, const DataBundle& data) {
  SeedOutcome out;
  const TaskMode mode = params.config.mode;
  auto record = [&](const Dataset& d, const std::vector<int>& pred, const std::string& split) {
    if (mode != TaskMode::sequence) return;
    for (std::size_t i = 0; i < d.size(); ++i)
      out.predictions.push_back({d[i].id, d[i].label, pred[i], split, d[i].group_tags});
  };

  const auto test_pred = predict(params, vocab, data.test);
  const auto test_gold = gold_labels(data.test, mode);
  out.metrics.push_back({"id", "accuracy", true, true, accuracy(test_pred, test_gold)});
  out.metrics.push_back({"id", "macro_f1", true, true, macro_f1(test_pred, test_gold)});
  record(data.test, test_pred, "test");
  if (mode == TaskMode::sequence) {
    std::vector<std::vector<std::string>> groups;
    bool any_group = false;
    for (const auto& inst : data.test.instances) {
      groups.push_back(inst.group_tags);
      any_group = any_group || !inst.group_tags.empty();
    }
    if (any_group) {
      try {
        const FprdResult f = fprd(test_pred, test_gold, groups);
        out.metrics.push_back({"id", "fprd", true, false, f.value});
        for (const auto& z : f.excluded_groups) out.notes.push_back("fprd: group '" + z + "' has no negatives, excluded");
      } catch (const ValueError& e) {
        out.notes.push_back(std::string("fprd skipped: ") + e.what());
      }
    }
  }

  for (const auto& u : data.unseen) {
    const auto pred = predict(params, vocab, u);
    const auto gold = gold_labels(u, mode);
    out.metrics.push_back({u.name, "accuracy", false, true, accuracy(pred, gold)});
    out.metrics.push_back({u.name, "macro_f1", false, true, macro_f1(pred, gold)});
    record(u, pred, u.name);
  }

  if (mode == TaskMode::sequence && !data.contrast.groups.empty()) {
    std::unordered_map<std::int64_t, int> by_id;
    for (std::size_t i = 0; i < data.test.size(); ++i) by_id[data.test[i].id] = test_pred[i];
    const auto pred = predict(params, vocab, data.contrast.instances);
    for (std::size_t i = 0; i < pred.size(); ++i) by_id[data.contrast.instances[i].id] = pred[i];
    const ContrastResult c = contrast_consistency(data.contrast.groups, by_id);
    out.metrics.push_back({"contrast", "original_accuracy", false, true, c.original_accuracy});
    out.metrics.push_back({"contrast", "contrast_accuracy", false, true, c.contrast_accuracy});
    out.metrics.push_back({"contrast", "consistency", false, true, c.consistency});
    record(data.contrast.instances, pred, "contrast");
  }

  if (mode == TaskMode::sequence) {
    for (const auto& suite : data.functional)
      for (const auto& sub : suite.subtests) {
        const auto pred = predict(params, vocab, sub.instances);
        const double rate = failure_rate(sub, pred);
        out.subtests.push_back({suite.category, sub.name, rate});
        out.metrics.push_back({"functional", "failure_rate/" + to_string(suite.category) + "/" + sub.name, false,
                               false, rate});
      }
  }
  out.ok = true;
  return out;
}

// ---------------------------------------------------------------------------
// Runner

struct RunnerOptions {
  std::string output_dir;  // empty: nothing is written
  std::size_t workers = 1;
  bool use_cache = false;
  std::ostream* log = nullptr;
};

inline RunnerOptions options_from(const RunConfig& c, std::ostream* log = nullptr) {
  return {c.output_dir, c.workers, c.use_cache, log};
}

// Training data for a config after applying the rationale source, the
// annotation plan and the selection budget.
struct PreparedData {
  Dataset train;
  Dataset dev;
  std::vector<std::string> notes;
  std::optional<SelectionManifest> manifest;
};

class Runner {
 public:
  explicit Runner(RunnerOptions opts = {}) : opts_(std::move(opts)) {}

  // Report for `cfg`; its No-ER baseline is trained in the same run.
  EvalReport run(const RunConfig& cfg) {
    auto reports = run_set({cfg});
    return reports.back();
  }

  // Reports for the shared baseline (first) followed by each config. Every
  // config must reduce to the same baseline. Functional failure rates are
  // normalized across this whole set.
  std::vector<EvalReport> run_set(const std::vector<RunConfig>& configs) {
    if (configs.empty()) throw ConfigError("run: no configs");
    for (const auto& c : configs) c.validate();
    RunConfig base = baseline_of(configs.front());
    const std::string base_hash = config_hash(base);
    for (const auto& c : configs) {
      if (config_hash(baseline_of(c)) != base_hash) {
        throw ConfigError("run: config '" + c.name + "' does not share the baseline of '" + configs.front().name + "'");
      }
      if (c.seeds != base.seeds) throw ConfigError("run: configs in one set must use the same seeds");
    }
    std::vector<RunConfig> members = {base};
    for (const auto& c : configs) {
      if (config_hash(c) == base_hash) members[0].name = c.name;
      else members.push_back(c);
    }
    const std::string started = now_iso8601();
    const DataBundle& data = bundle(members[0]);

    std::vector<PreparedData> prepared(members.size());
    std::vector<std::vector<SeedOutcome>> outcomes(members.size());
    std::vector<std::vector<std::optional<ModelParams>>> models(members.size());

    // Baseline first: ranked selection strategies score with its models.
    prepared[0] = prepare(members[0], data, {});
    train_member(members[0], prepared[0], data, outcomes[0], models[0]);
    std::vector<ModelParams> baseline_models;
    for (const auto& m : models[0])
      if (m) baseline_models.push_back(*m);

    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t i = 1; i < members.size(); ++i) {
      prepared[i] = prepare(members[i], data, baseline_models);
      outcomes[i].resize(members[i].seeds.size());
      models[i].resize(members[i].seeds.size());
      for (std::size_t s = 0; s < members[i].seeds.size(); ++s) jobs.emplace_back(i, s);
    }
    parallel_for(jobs.size(), opts_.workers, [&](std::size_t j) {
      const auto [i, s] = jobs[j];
      run_seed(members[i], prepared[i], data, s, outcomes[i][s], models[i][s]);
    });

    auto reports = assemble(members, prepared, outcomes);
    const std::string finished = now_iso8601();
    for (auto& r : reports) {
      r.started_at = started;
      r.finished_at = finished;
    }
    if (!opts_.output_dir.empty()) {
      for (std::size_t i = 0; i < members.size(); ++i) persist(members[i], prepared[i], outcomes[i], reports[i]);
    }
    return reports;
  }

  const DataBundle& bundle(const RunConfig& cfg) {
    nlohmann::json key = semantic_json(cfg)["data"];
    key["mode"] = to_string(cfg.mode);
    const std::string h = key.dump();
    std::lock_guard<std::mutex> lock(mu_);
    auto it = bundles_.find(h);
    if (it == bundles_.end()) {
      DataBundle b = cfg.paths ? load_bundle(*cfg.paths) : generate_bundle(cfg.generator, cfg.mode);
      it = bundles_.emplace(h, std::move(b)).first;
    }
    return it->second;
  }

 private:
  void log(const std::string& line) {
    if (!opts_.log) return;
    std::lock_guard<std::mutex> lock(log_mu_);
    *opts_.log << line << std::endl;
  }

  static Dataset strip_rationales(Dataset d) {
    for (auto& inst : d.instances) inst.rationale.reset();
    return d;
  }

  PreparedData prepare(const RunConfig& cfg, const DataBundle& data, const std::vector<ModelParams>& baseline) {
    PreparedData p;
    p.train = data.train;
    p.dev = data.dev;
    if (!cfg.is_no_er() && cfg.rationale_source == RationaleSource::lexicon) {
      std::optional<Lexicon> lex;
      if (!cfg.lexicon_path.empty()) lex = load_lexicon(cfg.lexicon_path);
      else if (data.spec) lex = task_lexicon(*data.spec);
      else throw ConfigError("config: lexicon rationales need lexicon_path");
      p.train = strip_rationales(std::move(p.train));
      p.dev = strip_rationales(std::move(p.dev));
      const std::size_t n = annotate_with_lexicon(p.train, *lex);
      annotate_with_lexicon(p.dev, *lex);
      p.notes.push_back("lexicon '" + lex->name() + "' annotated " + std::to_string(n) + " of " +
                        std::to_string(p.train.size()) + " training instances");
    }
    if (cfg.plan) apply_plan(cfg, p);
    if (!cfg.is_no_er() && cfg.budget_k < 100.0) {
      if (cfg.plan) throw ConfigError("config: an annotation plan cannot be combined with a selection budget");
      std::vector<SelectionScore> scores;
      if (cfg.selection != SelectionStrategy::random) {
        if (baseline.empty()) throw Error("selection: no trained No-ER model available for scoring");
        scores = score_instances(baseline, p.train, Vocab::build(data.train), cfg.selection, cfg.k_prime,
                                 cfg.gamma_er);
      }
      SelectionManifest m;
      m.strategy = cfg.selection;
      m.k_percent = cfg.budget_k;
      m.seed = cfg.generator.data_seed;
      m.selected_ids = select(p.train, scores, cfg.budget_k, cfg.selection, m.seed);
      p.train = restrict_annotations(std::move(p.train), m.selected_ids);
      p.notes.push_back("selection " + to_string(cfg.selection) + " kept " + std::to_string(m.selected_ids.size()) +
                        " annotated instances");
      p.manifest = std::move(m);
    }
    if (!cfg.is_no_er()) {
      const bool any = std::any_of(p.train.instances.begin(), p.train.instances.end(),
                                   [](const Instance& i) { return i.annotated(); });
      if (!any) throw ConfigError("config '" + cfg.name + "': ER run without any annotated training instance");
    }
    return p;
  }

  // Initial label-only set plus `count` units of the chosen annotation type.
  // New instances are drawn uniformly from the rest of the training data.
  static void apply_plan(const RunConfig& cfg, PreparedData& p) {
    const AnnotationPlan& plan = *cfg.plan;
    if (plan.init_size > p.train.size()) {
      throw ConfigError("plan: initial set of " + std::to_string(plan.init_size) + " exceeds training data");
    }
    Dataset init = p.train, pool = p.train;
    init.instances.resize(plan.init_size);
    pool.instances.erase(pool.instances.begin(), pool.instances.begin() + static_cast<std::ptrdiff_t>(plan.init_size));
    std::mt19937_64 rng(cfg.generator.data_seed ^ 0x9e3779b97f4a7c15ull);
    std::shuffle(pool.instances.begin(), pool.instances.end(), rng);
    init = strip_rationales(std::move(init));
    std::size_t count = plan.count;
    auto take_new = [&](bool keep_rationales) {
      if (count > pool.size()) {
        throw ConfigError("plan: " + std::to_string(count) + " new instances requested, only " +
                          std::to_string(pool.size()) + " available");
      }
      for (std::size_t i = 0; i < count; ++i) {
        Instance inst = pool.instances[i];
        if (!keep_rationales) inst.rationale.reset();
        init.instances.push_back(std::move(inst));
      }
    };
    switch (plan.type) {
      case AnnotationType::label_only: take_new(false); break;
      case AnnotationType::label_expl: take_new(true); break;
      case AnnotationType::expl_only: {
        if (count > init.size()) {
          p.notes.push_back("plan: " + std::to_string(count) + " rationales requested, capped at the initial set of " +
                            std::to_string(init.size()));
          count = init.size();
        }
        std::vector<std::size_t> order(init.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i = 0; i < count; ++i) init.instances[order[i]].rationale = p.train.instances[order[i]].rationale;
        break;
      }
    }
    p.train = std::move(init);
  }

  TrainConfig train_config(const RunConfig& cfg, std::uint64_t seed) const {
    TrainConfig tc;
    tc.extractor = cfg.extractor;
    tc.criterion = cfg.criterion;
    tc.lambda_er = cfg.lambda_er;
    tc.gamma_er = cfg.gamma_er;
    tc.optimizer = cfg.optimizer;
    tc.learning_rate = cfg.learning_rate;
    tc.batch_size = cfg.batch_size;
    tc.max_epochs = cfg.max_epochs;
    tc.patience = cfg.patience;
    tc.shuffle_seed = seed;
    return tc;
  }

  std::string member_dir(const RunConfig& cfg) const {
    return (std::filesystem::path(opts_.output_dir) / config_hash(cfg)).string();
  }

  void train_member(const RunConfig& cfg, const PreparedData& p, const DataBundle& data,
                    std::vector<SeedOutcome>& outcomes, std::vector<std::optional<ModelParams>>& models) {
    outcomes.resize(cfg.seeds.size());
    models.resize(cfg.seeds.size());
    parallel_for(cfg.seeds.size(), opts_.workers,
                 [&](std::size_t s) { run_seed(cfg, p, data, s, outcomes[s], models[s]); });
  }

  void run_seed(const RunConfig& cfg, const PreparedData& p, const DataBundle& data, std::size_t seed_index,
                SeedOutcome& out, std::optional<ModelParams>& model) {
    const std::uint64_t seed = cfg.seeds[seed_index];
    out.seed = seed;
    try {
      const Vocab vocab = Vocab::build(p.train);
      ModelConfig mc;
      mc.vocab_size = vocab.size();
      mc.embed_dim = cfg.embed_dim;
      mc.n_classes = infer_classes(data.train, cfg.mode);
      mc.max_len = cfg.max_len;
      mc.mode = cfg.mode;
      mc.init_scale = cfg.init_scale;
      mc.seed = seed;
      mc.tied_binary_head = cfg.tied_binary_head && mc.n_classes == 2;
      const std::string ckpt = opts_.output_dir.empty()
                                   ? std::string()
                                   : member_dir(cfg) + "/seed_" + std::to_string(seed) + ".ckpt.json";
      std::size_t best_epoch = 0, epochs_run = 0;
      ModelParams params;
      if (opts_.use_cache && !ckpt.empty() && std::filesystem::exists(ckpt)) {
        params = load_checkpoint(ckpt);
        log("[" + cfg.name + " seed " + std::to_string(seed) + "] loaded cached checkpoint");
      } else {
        const auto train = encode(p.train, vocab, cfg.mode);
        const auto dev = encode(p.dev, vocab, cfg.mode);
        FitResult fit_result = fit(ModelParams::init(mc), train, dev, train_config(cfg, seed));
        params = std::move(fit_result.params);
        best_epoch = fit_result.best_epoch;
        epochs_run = fit_result.log.size();
        if (!ckpt.empty()) {
          std::filesystem::create_directories(member_dir(cfg));
          save_checkpoint(ckpt, params, config_hash(cfg));
        }
      }
      out = evaluate_model(params, vocab, data);
      out.seed = seed;
      out.best_epoch = best_epoch;
      out.epochs_run = epochs_run;
      model = std::move(params);
      log("[" + cfg.name + " seed " + std::to_string(seed) + "] best epoch " + std::to_string(best_epoch) + " of " +
          std::to_string(epochs_run));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      out = SeedOutcome{};
      out.seed = seed;
      out.ok = false;
      out.error = e.what();
      log("[" + cfg.name + " seed " + std::to_string(seed) + "] failed: " + e.what());
    }
  }

  static std::vector<EvalReport> assemble(const std::vector<RunConfig>& members,
                                          const std::vector<PreparedData>& prepared,
                                          std::vector<std::vector<SeedOutcome>>& outcomes) {
    const std::size_t n_members = members.size();
    std::vector<std::string> model_set;
    for (const auto& m : members) model_set.push_back(m.name);

    // Normalized failure rates per seed and subtest across members.
    // norm[member][seed] = list of (category, normalized rate)
    std::vector<std::vector<std::vector<std::pair<FunctionalCategory, double>>>> norm(n_members);
    for (std::size_t i = 0; i < n_members; ++i) norm[i].resize(members[i].seeds.size());
    const auto& seeds = members[0].seeds;
    bool normalized_any = false;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      std::vector<std::size_t> present;
      for (std::size_t i = 0; i < n_members; ++i)
        if (outcomes[i][s].ok && !outcomes[i][s].subtests.empty()) present.push_back(i);
      if (present.size() < 2) continue;
      const std::size_t n_sub = outcomes[present[0]][s].subtests.size();
      for (std::size_t t = 0; t < n_sub; ++t) {
        std::vector<double> rates;
        for (std::size_t i : present) rates.push_back(outcomes[i][s].subtests.at(t).rate);
        const auto scaled = normalize_failure_rates(rates);
        for (std::size_t k = 0; k < present.size(); ++k)
          norm[present[k]][s].push_back({outcomes[present[k]][s].subtests[t].category, scaled[k]});
      }
      normalized_any = true;
    }

    std::vector<EvalReport> reports(n_members);
    for (std::size_t i = 0; i < n_members; ++i) {
      EvalReport& r = reports[i];
      r.name = members[i].name;
      r.config_hash = config_hash(members[i]);
      r.config = to_json(members[i]);
      r.config.erase("output_dir");
      r.config.erase("workers");
      r.config.erase("use_cache");
      r.is_baseline = i == 0;
      r.baseline_hash = config_hash(members[0]);
      r.model_set = model_set;
      r.notes = prepared[i].notes;
      if (!normalized_any && !outcomes[i].empty()) {
        r.notes.push_back("normalized failure rates need at least two models with functional results");
      }

      std::vector<MetricRow> rows;
      auto row_for = [&](const std::string& ds, const std::string& metric, bool seen, bool hib) -> MetricRow& {
        for (auto& row : rows)
          if (row.dataset == ds && row.metric == metric) return row;
        rows.push_back({ds, metric, seen, hib, {}, {}, 0.0, std::nullopt, std::nullopt, false});
        return rows.back();
      };
      for (std::size_t s = 0; s < outcomes[i].size(); ++s) {
        const SeedOutcome& o = outcomes[i][s];
        if (!o.ok) {
          r.failures.push_back({o.seed, o.error});
          continue;
        }
        for (const auto& m : o.metrics) {
          MetricRow& row = row_for(m.dataset, m.metric, m.seen, m.higher_is_better);
          row.seeds.push_back(o.seed);
          row.values.push_back(m.value);
        }
        if (!norm[i][s].empty()) {
          MetricRow& all = row_for("functional", "normalized_failure_rate", false, false);
          double sum = 0.0;
          std::map<FunctionalCategory, std::pair<double, std::size_t>> per_cat;
          for (const auto& [cat, v] : norm[i][s]) {
            sum += v;
            per_cat[cat].first += v;
            ++per_cat[cat].second;
          }
          all.seeds.push_back(o.seed);
          all.values.push_back(sum / static_cast<double>(norm[i][s].size()));
          for (const auto& [cat, acc] : per_cat) {
            MetricRow& row = row_for("functional", "normalized_failure_rate/" + to_string(cat), false, false);
            row.seeds.push_back(o.seed);
            row.values.push_back(acc.first / static_cast<double>(acc.second));
          }
        }
        for (const auto& note : o.notes)
          if (std::find(r.notes.begin(), r.notes.end(), note) == r.notes.end()) r.notes.push_back(note);
      }
      for (auto& row : rows) summarize(row);
      // Seen metrics first, unseen after, stable otherwise.
      std::stable_sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) { return a.seen > b.seen; });
      r.rows = std::move(rows);
    }

    for (std::size_t i = 1; i < n_members; ++i) {
      if (members[i].is_no_er()) continue;
      for (auto& row : reports[i].rows)
        if (const MetricRow* b = reports[0].find(row.dataset, row.metric)) attach_significance(row, *b);
    }
    return reports;
  }

  void persist(const RunConfig& cfg, const PreparedData& p, const std::vector<SeedOutcome>& outcomes,
               const EvalReport& report) const {
    const std::string dir = member_dir(cfg);
    std::filesystem::create_directories(dir);
    {
      std::ofstream out(dir + "/report.json");
      out << report_to_json(report).dump(2) << "\n";
    }
    {
      std::ofstream out(dir + "/report.csv");
      write_report_csv(out, {report});
    }
    {
      std::ofstream out(dir + "/config.json");
      out << to_json(cfg).dump(2) << "\n";
    }
    {
      std::ofstream out(dir + "/vocab.txt");
      write_vocab(out, Vocab::build(p.train));
    }
    if (p.manifest) {
      std::ofstream out(dir + "/selection.json");
      out << manifest_to_json(*p.manifest).dump() << "\n";
    }
    for (const auto& o : outcomes) {
      if (!o.ok || o.predictions.empty()) continue;
      std::ofstream out(dir + "/predictions_seed_" + std::to_string(o.seed) + ".csv");
      write_prediction_table(out, o.predictions);
    }
  }

  RunnerOptions opts_;
  std::mutex mu_;
  std::mutex log_mu_;
  std::map<std::string, DataBundle> bundles_;
};

// Trains and evaluates `cfg` together with its No-ER baseline.
inline EvalReport run_experiment(const RunConfig& cfg, std::ostream* log = nullptr) {
  return Runner(options_from(cfg, log)).run(cfg);
}

// ---------------------------------------------------------------------------
// Research-question drivers. Each returns the configs of one comparison; the
// shared No-ER baseline is added by Runner::run_set.

inline std::string criterion_label(Criterion c) {
  switch (c) {
    case Criterion::mse: return "MSE";
    case Criterion::mae: return "MAE";
    case Criterion::huber: return "Huber";
    case Criterion::bce: return "BCE";
    case Criterion::kldiv: return "KLDiv";
    case Criterion::order: return "Order";
  }
  return "?";
}

inline std::string extractor_label(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::ixg: return "IxG";
    case ExtractorKind::attention: return "Attn";
    case ExtractorKind::learned: return "Learned";
  }
  return "?";
}

// RQ1: every criterion with the base extractor.
inline std::vector<RunConfig> rq1_configs(const RunConfig& base) {
  std::vector<RunConfig> out;
  for (Criterion c : kAllCriteria) {
    RunConfig r = base;
    r.criterion.kind = c;
    if (r.lambda_er == 0.0) r.lambda_er = 1.0;
    r.name = extractor_label(r.extractor) + "+" + criterion_label(c);
    out.push_back(r);
  }
  return out;
}

// RQ2: instance-level rationales against task-level lexicon rationales.
inline std::vector<RunConfig> rq2_configs(const RunConfig& base) {
  std::vector<RunConfig> out;
  for (RationaleSource s : {RationaleSource::instance, RationaleSource::lexicon}) {
    RunConfig r = base;
    if (r.lambda_er == 0.0) r.lambda_er = 1.0;
    r.rationale_source = s;
    r.name = s == RationaleSource::instance ? "instance-level" : "task-level";
    out.push_back(r);
  }
  return out;
}

inline constexpr std::array<double, 3> kRq3Budgets = {5.0, 15.0, 50.0};

// RQ3: selection strategies across budgets, plus the fully annotated model.
inline std::vector<RunConfig> rq3_configs(const RunConfig& base, std::vector<double> budgets = {5.0, 15.0, 50.0},
                                          std::vector<SelectionStrategy> strategies = {
                                              SelectionStrategy::random, SelectionStrategy::lc, SelectionStrategy::hc,
                                              SelectionStrategy::lis, SelectionStrategy::his},
                                          bool include_full = true) {
  std::vector<RunConfig> out;
  for (double k : budgets)
    for (SelectionStrategy s : strategies) {
      RunConfig r = base;
      if (r.lambda_er == 0.0) r.lambda_er = 1.0;
      r.budget_k = k;
      r.selection = s;
      char buf[64];
      std::snprintf(buf, sizeof buf, "k=%g %s", k, to_string(s).c_str());
      r.name = buf;
      out.push_back(r);
    }
  if (include_full) {
    RunConfig r = base;
    if (r.lambda_er == 0.0) r.lambda_er = 1.0;
    r.budget_k = 100.0;
    r.name = "k=100";
    out.push_back(r);
  }
  return out;
}

struct Rq4Preset {
  AnnotationType type;
  std::array<std::size_t, 5> counts;
};

// Instance counts per annotation type at equal annotation time.
inline constexpr std::array<const char*, 5> kRq4Budgets = {"10min", "30min", "5hr", "24hr", "48hr"};
inline constexpr std::array<Rq4Preset, 3> kRq4Presets = {{
    {AnnotationType::label_only, {4, 13, 128, 615, 1229}},
    {AnnotationType::expl_only, {5, 16, 163, 783, 1556}},
    {AnnotationType::label_expl, {2, 7, 68, 328, 657}},
}};

// RQ4: each annotation type at each time budget on top of an initial
// label-only set. Only instance counts vary between configs.
inline std::vector<RunConfig> rq4_configs(const RunConfig& base, std::size_t init_size = 1000,
                                          double count_scale = 1.0) {
  std::size_t max_new = 0;
  for (const auto& p : kRq4Presets)
    if (p.type != AnnotationType::expl_only)
      max_new = std::max(max_new, static_cast<std::size_t>(std::llround(p.counts.back() * count_scale)));
  std::vector<RunConfig> out;
  for (const auto& preset : kRq4Presets)
    for (std::size_t b = 0; b < kRq4Budgets.size(); ++b) {
      RunConfig r = base;
      if (!r.paths) r.generator.train_size = std::max(r.generator.train_size, init_size + max_new);
      r.budget_k = 100.0;
      const auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(preset.counts[b] * count_scale)));
      r.plan = AnnotationPlan{preset.type, count, init_size};
      r.lambda_er = preset.type == AnnotationType::label_only ? 0.0 : (base.lambda_er == 0.0 ? 1.0 : base.lambda_er);
      r.name = to_string(preset.type) + "@" + kRq4Budgets[b];
      out.push_back(r);
    }
  return out;
}

}  // namespace ertest
