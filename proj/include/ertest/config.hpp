#pragma once

// Run configuration, config hashing, and the data bundle a run evaluates on
// (generated from a task spec or loaded from JSONL files).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ertest/criteria.hpp"
#include "ertest/datagen.hpp"
#include "ertest/dataset.hpp"
#include "ertest/errors.hpp"
#include "ertest/evaluation.hpp"
#include "ertest/extractors.hpp"
#include "ertest/model.hpp"
#include "ertest/rationales.hpp"
#include "ertest/selection.hpp"
#include "ertest/training.hpp"

namespace ertest {

inline constexpr int kConfigSchemaVersion = 1;

enum class RationaleSource { instance, lexicon };

inline std::string to_string(RationaleSource s) { return s == RationaleSource::instance ? "instance" : "lexicon"; }

inline RationaleSource parse_rationale_source(const std::string& s) {
  if (s == "instance") return RationaleSource::instance;
  if (s == "lexicon") return RationaleSource::lexicon;
  throw ValueError("unknown rationale source: " + s);
}

// Annotation-type schedules compared at equal annotation time.
enum class AnnotationType { label_only, expl_only, label_expl };

inline std::string to_string(AnnotationType t) {
  switch (t) {
    case AnnotationType::label_only: return "label_only";
    case AnnotationType::expl_only: return "expl_only";
    case AnnotationType::label_expl: return "label_expl";
  }
  return "?";
}

inline AnnotationType parse_annotation_type(const std::string& s) {
  for (auto t : {AnnotationType::label_only, AnnotationType::expl_only, AnnotationType::label_expl})
    if (to_string(t) == s) return t;
  throw ValueError("unknown annotation type: " + s);
}

// Training set built from an initial pool of `init_size` label-only
// instances plus `count` units of the given annotation type.
struct AnnotationPlan {
  AnnotationType type = AnnotationType::label_only;
  std::size_t count = 0;
  std::size_t init_size = 1000;
};

struct GeneratorConfig {
  std::size_t signal_pairs = 12;
  std::size_t distractor_count = 40;
  std::size_t train_size = 2000;
  std::size_t dev_size = 300;
  std::size_t test_size = 1000;
  std::size_t ood_size = 1000;
  std::size_t contrast_size = 300;  // test instances used as contrast originals
  std::size_t functional_size = kDefaultSubtestSize;
  std::size_t min_len = 6;
  std::size_t max_len = 12;
  double negation_rate = 0.1;
  double entity_rate = 0.3;
  double number_rate = 0.3;
  double noise = 0.0;
  double spurious_presence = 0.9;
  double spurious_agreement = 0.9;
  std::size_t ood_new_distractors = 40;
  double ood_length_factor = 1.0;
  double ood_distractor_ratio = 1.0;
  std::optional<double> ood_spurious_presence;
  double ood_spurious_agreement = 0.5;
  std::uint64_t data_seed = 0;

  TaskSpec spec() const {
    TaskSpec s = TaskSpec::standard(signal_pairs, distractor_count);
    s.min_len = min_len;
    s.max_len = max_len;
    s.negation_rate = negation_rate;
    s.entity_rate = entity_rate;
    s.number_rate = number_rate;
    s.noise = noise;
    s.spurious_presence = spurious_presence;
    s.spurious_agreement = spurious_agreement;
    return s;
  }

  DistributionShift shift() const {
    DistributionShift sh;
    sh.new_distractors = fresh_distractors(spec(), ood_new_distractors);
    sh.length_factor = ood_length_factor;
    sh.distractor_ratio = ood_distractor_ratio;
    sh.spurious_presence = ood_spurious_presence;
    sh.spurious_agreement = ood_spurious_agreement;
    return sh;
  }
};

struct DataPaths {
  std::string train, dev, test;
  std::vector<std::string> unseen;
  std::string contrast;    // contrast instances whose contrast_of ids point into test
  std::string functional;  // perturbation field "category/subtest"
};

struct RunConfig {
  std::string name = "run";
  TaskMode mode = TaskMode::sequence;
  ExtractorKind extractor = ExtractorKind::ixg;
  CriterionConfig criterion;
  double lambda_er = 1.0;
  double gamma_er = kDefaultGamma;
  double budget_k = 100.0;
  SelectionStrategy selection = SelectionStrategy::random;
  double k_prime = kDefaultTopKPrime;
  RationaleSource rationale_source = RationaleSource::instance;
  std::string lexicon_path;  // empty: lexicon of the generator's polarity words
  std::vector<std::uint64_t> seeds = {0, 1, 2};

  std::size_t embed_dim = 16;
  bool tied_binary_head = true;
  double init_scale = 0.1;
  std::size_t max_len = 64;

  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-2;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 25;
  std::size_t patience = 10;

  // Exactly one data source: the generator unless `paths` is set.
  GeneratorConfig generator;
  std::optional<DataPaths> paths;
  std::optional<AnnotationPlan> plan;

  // Not part of the config hash.
  std::string output_dir;
  std::size_t workers = 1;
  bool use_cache = false;

  bool is_no_er() const { return lambda_er == 0.0; }

  void validate() const {
    if (!(lambda_er >= 0.0)) throw ConfigError("config: lambda_er must be >= 0");
    if (!(gamma_er > 0.0)) throw ConfigError("config: gamma_er must be > 0");
    if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw ConfigError("config: duplicate seeds");
    }
    if (!(budget_k > 0.0 && budget_k <= 100.0)) throw ConfigError("config: budget k must lie in (0, 100]");
    if (!(k_prime > 0.0 && k_prime < 100.0)) throw ConfigError("config: k' must lie in (0, 100)");
    if (!(criterion.huber_delta > 0.0)) throw ConfigError("config: huber delta must be > 0");
    if (embed_dim == 0 || batch_size == 0 || max_epochs == 0 || max_len == 0) {
      throw ConfigError("config: embed_dim, batch_size, max_epochs and max_len must be positive");
    }
    if (!(learning_rate > 0.0)) throw ConfigError("config: learning rate must be > 0");
    if (workers == 0) throw ConfigError("config: workers must be positive");
    if (mode == TaskMode::token && selection != SelectionStrategy::random && budget_k < 100.0) {
      throw ConfigError("config: ranked selection strategies need sequence mode");
    }
    if (paths && (paths->train.empty() || paths->dev.empty() || paths->test.empty())) {
      throw ConfigError("config: data paths need train, dev and test");
    }
    if (paths && rationale_source == RationaleSource::lexicon && lexicon_path.empty()) {
      throw ConfigError("config: lexicon rationales over file data need lexicon_path");
    }
    if (plan && plan->init_size == 0) throw ConfigError("config: annotation plan needs a nonempty initial set");
    if (!paths) {
      generator.spec().validate();
      if (generator.train_size == 0 || generator.dev_size == 0 || generator.test_size == 0) {
        throw ConfigError("config: generator split sizes must be positive");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const GeneratorConfig& g) {
  nlohmann::json j = {{"signal_pairs", g.signal_pairs},
                      {"distractor_count", g.distractor_count},
                      {"train_size", g.train_size},
                      {"dev_size", g.dev_size},
                      {"test_size", g.test_size},
                      {"ood_size", g.ood_size},
                      {"contrast_size", g.contrast_size},
                      {"functional_size", g.functional_size},
                      {"min_len", g.min_len},
                      {"max_len", g.max_len},
                      {"negation_rate", g.negation_rate},
                      {"entity_rate", g.entity_rate},
                      {"number_rate", g.number_rate},
                      {"noise", g.noise},
                      {"spurious_presence", g.spurious_presence},
                      {"spurious_agreement", g.spurious_agreement},
                      {"ood_new_distractors", g.ood_new_distractors},
                      {"ood_length_factor", g.ood_length_factor},
                      {"ood_distractor_ratio", g.ood_distractor_ratio},
                      {"ood_spurious_agreement", g.ood_spurious_agreement},
                      {"data_seed", g.data_seed}};
  j["ood_spurious_presence"] = g.ood_spurious_presence ? nlohmann::json(*g.ood_spurious_presence) : nlohmann::json();
  return j;
}

inline GeneratorConfig generator_from_json(const nlohmann::json& j) {
  GeneratorConfig g;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key) && !j.at(key).is_null()) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("signal_pairs", g.signal_pairs);
  get("distractor_count", g.distractor_count);
  get("train_size", g.train_size);
  get("dev_size", g.dev_size);
  get("test_size", g.test_size);
  get("ood_size", g.ood_size);
  get("contrast_size", g.contrast_size);
  get("functional_size", g.functional_size);
  get("min_len", g.min_len);
  get("max_len", g.max_len);
  get("negation_rate", g.negation_rate);
  get("entity_rate", g.entity_rate);
  get("number_rate", g.number_rate);
  get("noise", g.noise);
  get("spurious_presence", g.spurious_presence);
  get("spurious_agreement", g.spurious_agreement);
  get("ood_new_distractors", g.ood_new_distractors);
  get("ood_length_factor", g.ood_length_factor);
  get("ood_distractor_ratio", g.ood_distractor_ratio);
  get("ood_spurious_agreement", g.ood_spurious_agreement);
  get("data_seed", g.data_seed);
  if (j.contains("ood_spurious_presence") && !j.at("ood_spurious_presence").is_null()) {
    g.ood_spurious_presence = j.at("ood_spurious_presence").get<double>();
  }
  return g;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["name"] = c.name;
  j["mode"] = to_string(c.mode);
  j["extractor"] = to_string(c.extractor);
  j["criterion"] = to_string(c.criterion.kind);
  j["huber_delta"] = c.criterion.huber_delta;
  j["bce_two_term"] = c.criterion.bce_two_term;
  j["lambda_er"] = c.lambda_er;
  j["gamma_er"] = c.gamma_er;
  j["budget_k"] = c.budget_k;
  j["selection"] = to_string(c.selection);
  j["k_prime"] = c.k_prime;
  j["rationale_source"] = to_string(c.rationale_source);
  j["lexicon_path"] = c.lexicon_path;
  j["seeds"] = c.seeds;
  j["model"] = {{"embed_dim", c.embed_dim},
                {"tied_binary_head", c.tied_binary_head},
                {"init_scale", c.init_scale},
                {"max_len", c.max_len}};
  j["train"] = {{"optimizer", to_string(c.optimizer)},
                {"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"max_epochs", c.max_epochs},
                {"patience", c.patience}};
  if (c.paths) {
    j["data"] = {{"paths",
                  {{"train", c.paths->train},
                   {"dev", c.paths->dev},
                   {"test", c.paths->test},
                   {"unseen", c.paths->unseen},
                   {"contrast", c.paths->contrast},
                   {"functional", c.paths->functional}}}};
  } else {
    j["data"] = {{"generator", to_json(c.generator)}};
  }
  if (c.plan) {
    j["plan"] = {{"type", to_string(c.plan->type)}, {"count", c.plan->count}, {"init_size", c.plan->init_size}};
  }
  j["output_dir"] = c.output_dir;
  j["workers"] = c.workers;
  j["use_cache"] = c.use_cache;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  try {
    RunConfig c;
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kConfigSchemaVersion) {
      throw ConfigError("config: unsupported schema_version");
    }
    c.name = j.value("name", c.name);
    if (j.contains("mode")) c.mode = parse_task_mode(j.at("mode").get<std::string>());
    if (j.contains("extractor")) c.extractor = parse_extractor(j.at("extractor").get<std::string>());
    if (j.contains("criterion")) c.criterion.kind = parse_criterion(j.at("criterion").get<std::string>());
    c.criterion.huber_delta = j.value("huber_delta", c.criterion.huber_delta);
    c.criterion.bce_two_term = j.value("bce_two_term", c.criterion.bce_two_term);
    c.lambda_er = j.value("lambda_er", c.lambda_er);
    c.gamma_er = j.value("gamma_er", c.gamma_er);
    c.budget_k = j.value("budget_k", c.budget_k);
    if (j.contains("selection")) c.selection = parse_selection(j.at("selection").get<std::string>());
    c.k_prime = j.value("k_prime", c.k_prime);
    if (j.contains("rationale_source")) {
      c.rationale_source = parse_rationale_source(j.at("rationale_source").get<std::string>());
    }
    c.lexicon_path = j.value("lexicon_path", c.lexicon_path);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.embed_dim = m.value("embed_dim", c.embed_dim);
      c.tied_binary_head = m.value("tied_binary_head", c.tied_binary_head);
      c.init_scale = m.value("init_scale", c.init_scale);
      c.max_len = m.value("max_len", c.max_len);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("optimizer")) c.optimizer = parse_optimizer(t.at("optimizer").get<std::string>());
      c.learning_rate = t.value("learning_rate", c.learning_rate);
      c.batch_size = t.value("batch_size", c.batch_size);
      c.max_epochs = t.value("max_epochs", c.max_epochs);
      c.patience = t.value("patience", c.patience);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      if (d.contains("paths")) {
        const auto& p = d.at("paths");
        DataPaths paths;
        paths.train = p.value("train", "");
        paths.dev = p.value("dev", "");
        paths.test = p.value("test", "");
        if (p.contains("unseen")) paths.unseen = p.at("unseen").get<std::vector<std::string>>();
        paths.contrast = p.value("contrast", "");
        paths.functional = p.value("functional", "");
        c.paths = paths;
      }
      if (d.contains("generator")) c.generator = generator_from_json(d.at("generator"));
    }
    if (j.contains("plan") && !j.at("plan").is_null()) {
      const auto& p = j.at("plan");
      AnnotationPlan plan;
      plan.type = parse_annotation_type(p.at("type").get<std::string>());
      plan.count = p.value("count", plan.count);
      plan.init_size = p.value("init_size", plan.init_size);
      c.plan = plan;
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    c.workers = j.value("workers", c.workers);
    c.use_cache = j.value("use_cache", c.use_cache);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Hashing

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// The fields that change what a run computes. Labels and execution settings
// are left out so renaming a run or changing the worker count keeps its hash.
// Fields that cannot influence the result (the Huber delta under MAE, k' for
// random selection, every ER field of a No-ER run) are dropped as well.
inline nlohmann::json semantic_json(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  for (const char* key : {"name", "output_dir", "workers", "use_cache"}) j.erase(key);
  auto drop = [&](std::initializer_list<const char*> keys) {
    for (const char* k : keys) j.erase(k);
  };
  if (c.is_no_er()) {
    drop({"extractor", "criterion", "huber_delta", "bce_two_term", "gamma_er", "budget_k", "selection", "k_prime",
          "rationale_source", "lexicon_path"});
    return j;
  }
  if (c.criterion.kind != Criterion::huber) drop({"huber_delta"});
  if (c.criterion.kind != Criterion::bce) drop({"bce_two_term"});
  if (c.budget_k == 100.0) drop({"selection", "k_prime"});
  if (c.selection == SelectionStrategy::random || c.selection == SelectionStrategy::lc ||
      c.selection == SelectionStrategy::hc)
    drop({"k_prime"});
  if (c.rationale_source == RationaleSource::instance) drop({"lexicon_path"});
  return j;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(semantic_json(c).dump())); }

// The No-ER model an ER config is compared against. Fields that only affect
// the ER branch are reset so every ER variant of one setup shares a baseline.
inline RunConfig baseline_of(const RunConfig& c) {
  RunConfig b;
  b.name = "No-ER";
  b.mode = c.mode;
  b.lambda_er = 0.0;
  b.seeds = c.seeds;
  b.embed_dim = c.embed_dim;
  b.tied_binary_head = c.tied_binary_head;
  b.init_scale = c.init_scale;
  b.max_len = c.max_len;
  b.optimizer = c.optimizer;
  b.learning_rate = c.learning_rate;
  b.batch_size = c.batch_size;
  b.max_epochs = c.max_epochs;
  b.patience = c.patience;
  b.generator = c.generator;
  b.paths = c.paths;
  if (c.plan) b.plan = AnnotationPlan{AnnotationType::label_only, 0, c.plan->init_size};
  b.output_dir = c.output_dir;
  b.workers = c.workers;
  b.use_cache = c.use_cache;
  return b;
}

// ---------------------------------------------------------------------------
// Data bundle

struct DataBundle {
  Dataset train, dev, test;
  std::vector<Dataset> unseen;
  ContrastSet contrast;
  std::vector<FunctionalSuite> functional;
  std::optional<TaskSpec> spec;
};

inline Lexicon task_lexicon(const TaskSpec& spec) {
  std::map<std::string, std::string> entries;
  for (const auto& w : spec.positive) entries[w] = "+";
  for (const auto& w : spec.negative) entries[w] = "-";
  return Lexicon(std::move(entries), LexiconPolarity::important_if_matched, "task");
}

inline DataBundle generate_bundle(const GeneratorConfig& g, TaskMode mode) {
  const TaskSpec spec = g.spec();
  const std::uint64_t base = g.data_seed * 1000003ull;
  auto gen = [&](const TaskSpec& s, std::size_t n, std::uint64_t k, const std::string& name) {
    return mode == TaskMode::token ? generate_token_dataset(s, n, base + k, name)
                                   : generate_id_dataset(s, n, base + k, name);
  };
  DataBundle b;
  b.spec = spec;
  b.train = gen(spec, g.train_size, 1, "train");
  b.dev = gen(spec, g.dev_size, 2, "dev");
  b.test = gen(spec, g.test_size, 3, "test");
  if (g.ood_size > 0) b.unseen.push_back(gen(apply_shift(spec, g.shift()), g.ood_size, 4, "ood"));
  if (mode == TaskMode::sequence) {
    if (g.contrast_size > 0) {
      Dataset originals = b.test;
      originals.instances.resize(std::min(g.contrast_size, originals.size()));
      b.contrast = generate_contrast_set(originals, spec);
    }
    if (g.functional_size > 0) b.functional = generate_functional_suites(spec, base + 5, g.functional_size);
  }
  return b;
}

inline FunctionalCategory parse_functional_category(const std::string& s) {
  for (auto c : {FunctionalCategory::vocabulary, FunctionalCategory::robustness, FunctionalCategory::logic,
                 FunctionalCategory::entity})
    if (to_string(c) == s) return c;
  throw DataError("unknown functional category: " + s);
}

inline bool category_expects_invariance(FunctionalCategory c) {
  return c == FunctionalCategory::robustness || c == FunctionalCategory::entity;
}

namespace detail {
inline std::string file_stem(const std::string& path) { return std::filesystem::path(path).stem().string(); }
}  // namespace detail

inline DataBundle load_bundle(const DataPaths& p) {
  DataBundle b;
  b.train = ingest_jsonl(p.train);
  b.train.name = "train";
  b.dev = ingest_jsonl(p.dev);
  b.dev.name = "dev";
  b.test = ingest_jsonl(p.test);
  b.test.name = "test";
  for (const auto& u : p.unseen) {
    Dataset d = ingest_jsonl(u);
    d.name = detail::file_stem(u);
    b.unseen.push_back(std::move(d));
  }
  if (!p.contrast.empty()) {
    std::map<std::int64_t, int> test_labels;
    for (const auto& inst : b.test.instances) test_labels[inst.id] = inst.label;
    b.contrast.instances = ingest_jsonl(p.contrast);
    b.contrast.instances.name = "contrast";
    std::map<std::int64_t, std::size_t> group_of;
    for (const auto& c : b.contrast.instances.instances) {
      if (!c.contrast_of) throw DataError("contrast file: instance " + std::to_string(c.id) + " lacks contrast_of");
      if (test_labels.count(c.id)) throw DataError("contrast file: id " + std::to_string(c.id) + " collides with test");
      auto orig = test_labels.find(*c.contrast_of);
      if (orig == test_labels.end()) {
        throw DataError("contrast file: original " + std::to_string(*c.contrast_of) + " not in test set");
      }
      auto [it, fresh] = group_of.try_emplace(*c.contrast_of, b.contrast.groups.size());
      if (fresh) b.contrast.groups.push_back({*c.contrast_of, orig->second, {}});
      PerturbationKind kind;
      try {
        kind = parse_perturbation(c.perturbation);
      } catch (const ValueError& e) {
        throw DataError(std::string("contrast file: ") + e.what());
      }
      b.contrast.groups[it->second].contrasts.push_back({c.id, c.label, kind});
    }
  }
  if (!p.functional.empty()) {
    Dataset all = ingest_jsonl(p.functional);
    std::map<std::string, std::pair<std::size_t, std::size_t>> where;  // name -> (suite, subtest)
    for (auto& inst : all.instances) {
      const auto slash = inst.perturbation.find('/');
      if (slash == std::string::npos) {
        throw DataError("functional file: perturbation must be category/subtest, got '" + inst.perturbation + "'");
      }
      const auto cat = parse_functional_category(inst.perturbation.substr(0, slash));
      const std::string name = inst.perturbation.substr(slash + 1);
      auto it = where.find(inst.perturbation);
      if (it == where.end()) {
        auto suite = std::find_if(b.functional.begin(), b.functional.end(),
                                  [&](const FunctionalSuite& s) { return s.category == cat; });
        if (suite == b.functional.end()) {
          b.functional.push_back({cat, {}});
          suite = b.functional.end() - 1;
        }
        FunctionalSubtest sub;
        sub.name = name;
        sub.instances.name = name;
        sub.expect_invariance = category_expects_invariance(cat);
        suite->subtests.push_back(std::move(sub));
        it = where.emplace(inst.perturbation, std::make_pair(static_cast<std::size_t>(suite - b.functional.begin()),
                                                             suite->subtests.size() - 1)).first;
      }
      b.functional[it->second.first].subtests[it->second.second].instances.instances.push_back(std::move(inst));
    }
  }
  return b;
}

// Writes the bundle as JSONL files and returns their paths.
inline DataPaths write_bundle(const DataBundle& b, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto path = [&](const std::string& f) { return (std::filesystem::path(dir) / f).string(); };
  DataPaths p;
  p.train = path("train.jsonl");
  p.dev = path("dev.jsonl");
  p.test = path("test.jsonl");
  write_jsonl(p.train, b.train);
  write_jsonl(p.dev, b.dev);
  write_jsonl(p.test, b.test);
  for (const auto& u : b.unseen) {
    p.unseen.push_back(path(u.name + ".jsonl"));
    write_jsonl(p.unseen.back(), u);
  }
  if (!b.contrast.groups.empty()) {
    p.contrast = path("contrast.jsonl");
    write_jsonl(p.contrast, b.contrast.instances);
  }
  if (!b.functional.empty()) {
    Dataset all;
    for (const auto& suite : b.functional)
      for (const auto& sub : suite.subtests)
        for (Instance inst : sub.instances.instances) {
          inst.perturbation = to_string(suite.category) + "/" + sub.name;
          all.instances.push_back(std::move(inst));
        }
    p.functional = path("functional.jsonl");
    write_jsonl(p.functional, all);
  }
  if (b.spec) {
    std::ofstream lex(path("task_lexicon.tsv"));
    write_lexicon(lex, task_lexicon(*b.spec));
  }
  return p;
}

}  // namespace ertest
