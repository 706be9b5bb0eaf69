#pragma once

// Synthetic planted-rationale sentiment task. Labels follow a majority vote
// over polarity words (a negator flips the next one), so the tokens that
// decide the label are known exactly and become the gold rationale.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ertest/dataset.hpp"
#include "ertest/errors.hpp"
#include "ertest/evaluation.hpp"

namespace ertest {

struct TaskSpec {
  // positive[i] and negative[i] are antonyms; inversion swaps them.
  std::vector<std::string> positive;
  std::vector<std::string> negative;
  std::vector<std::string> distractors;
  std::vector<std::string> entities;  // names; also the identity groups for FPRD
  std::vector<std::string> numbers;
  std::vector<std::string> intensifiers;
  std::string negator = "not";
  // Two class-indicative tokens (index = label) that carry no causal signal.
  std::vector<std::string> spurious = {"spur_neg", "spur_pos"};

  std::size_t min_len = 6;
  std::size_t max_len = 12;
  std::size_t min_signal = 1;
  std::size_t max_signal = 3;
  double negation_rate = 0.1;
  double entity_rate = 0.3;
  double number_rate = 0.3;
  double noise = 0.0;  // label flip probability
  // Fraction of instances carrying a spurious token, and the probability that
  // it agrees with the label when present.
  double spurious_presence = 0.0;
  double spurious_agreement = 1.0;
  // Multiplier on the number of filler distractors.
  double distractor_ratio = 1.0;

  // Default vocabulary: `signal_pairs` antonym pairs and `distractor_count`
  // neutral words. Readable words come first; the rest are numbered.
  static TaskSpec standard(std::size_t signal_pairs = 12, std::size_t distractor_count = 40) {
    static const char* kPos[] = {"great", "good", "excellent", "wonderful", "superb", "lovely",
                                 "brilliant", "pleasant", "charming", "amazing", "delightful", "fine"};
    static const char* kNeg[] = {"terrible", "bad", "awful", "dreadful", "poor", "ugly",
                                 "dull", "unpleasant", "boring", "disappointing", "horrible", "lousy"};
    static const char* kFill[] = {"movie", "the", "a", "film", "plot", "actor", "was", "is", "and", "story",
                                  "scene", "with", "this", "of", "ending", "music", "cast", "it", "director", "show"};
    static const char* kNames[] = {"alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"};
    TaskSpec s;
    for (std::size_t i = 0; i < signal_pairs; ++i) {
      if (i < std::size(kPos)) {
        s.positive.emplace_back(kPos[i]);
        s.negative.emplace_back(kNeg[i]);
      } else {
        s.positive.push_back("pos" + std::to_string(i));
        s.negative.push_back("neg" + std::to_string(i));
      }
    }
    for (std::size_t i = 0; i < distractor_count; ++i)
      s.distractors.push_back(i < std::size(kFill) ? std::string(kFill[i]) : "w" + std::to_string(i));
    s.entities.assign(std::begin(kNames), std::end(kNames));
    for (int n = 1; n <= 12; ++n) s.numbers.push_back(std::to_string(n));
    s.intensifiers = {"very", "really", "extremely", "truly"};
    return s;
  }

  std::set<std::string> signal_vocab() const {
    std::set<std::string> v(positive.begin(), positive.end());
    v.insert(negative.begin(), negative.end());
    v.insert(negator);
    return v;
  }

  // +1 / -1 for polarity words, 0 otherwise.
  int polarity(const std::string& token) const {
    if (std::find(positive.begin(), positive.end(), token) != positive.end()) return 1;
    if (std::find(negative.begin(), negative.end(), token) != negative.end()) return -1;
    return 0;
  }

  void validate() const {
    if (positive.empty() || positive.size() != negative.size()) {
      throw ConfigError("task spec: positive and negative lists must be nonempty and paired");
    }
    if (distractors.empty()) throw ConfigError("task spec: no distractors");
    if (min_signal == 0 || min_signal > max_signal) throw ConfigError("task spec: bad signal count range");
    if (min_len == 0 || min_len > max_len) throw ConfigError("task spec: bad length range");
    if (spurious.size() != 2) throw ConfigError("task spec: need one spurious token per class");
    const auto sig = signal_vocab();
    if (sig.size() != 2 * positive.size() + 1) throw ConfigError("task spec: signal words overlap");
    auto check_disjoint = [&](const std::vector<std::string>& words, const char* what) {
      for (const auto& w : words)
        if (sig.count(w)) throw ConfigError(std::string("task spec: ") + what + " token '" + w + "' is a signal word");
    };
    check_disjoint(distractors, "distractor");
    check_disjoint(entities, "entity");
    check_disjoint(numbers, "number");
    check_disjoint(intensifiers, "intensifier");
    check_disjoint(spurious, "spurious");
    for (double p : {negation_rate, entity_rate, number_rate, noise, spurious_presence, spurious_agreement}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("task spec: probabilities must lie in [0,1]");
    }
    if (!(distractor_ratio >= 0.0)) throw ConfigError("task spec: distractor ratio must be nonnegative");
  }
};

// Net polarity under the task grammar: each polarity word counts +1/-1,
// negated when the previous token is the negator.
inline int net_polarity(const TaskSpec& spec, const std::vector<std::string>& tokens) {
  int net = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    int p = spec.polarity(tokens[i]);
    if (p != 0 && i > 0 && tokens[i - 1] == spec.negator) p = -p;
    net += p;
  }
  return net;
}

// Noise-free label: 1 for positive net polarity, 0 for negative, nullopt on a tie.
inline std::optional<int> rule_label(const TaskSpec& spec, const std::vector<std::string>& tokens) {
  const int net = net_polarity(spec, tokens);
  if (net == 0) return std::nullopt;
  return net > 0 ? 1 : 0;
}

// Tokens that decide the label: polarity words and the negators attached to them.
inline std::vector<int> signal_mask(const TaskSpec& spec, const std::vector<std::string>& tokens) {
  std::vector<int> mask(tokens.size(), 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (spec.polarity(tokens[i]) == 0) continue;
    mask[i] = 1;
    if (i > 0 && tokens[i - 1] == spec.negator) mask[i - 1] = 1;
  }
  return mask;
}

namespace detail {

using GenRng = std::mt19937_64;

inline bool coin(GenRng& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

template <class T>
const T& pick(GenRng& rng, const std::vector<T>& v) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

inline std::size_t uniform(GenRng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct Draft {
  std::vector<std::string> tokens;
  int label = 0;
  std::vector<std::string> groups;
};

// One sentence: label, signal chunks, optional entity/number/spurious tokens
// and filler, all in random order. Negated chunks stay contiguous.
inline Draft draft_instance(const TaskSpec& spec, GenRng& rng) {
  Draft d;
  d.label = coin(rng, 0.5) ? 1 : 0;
  const int sign = d.label == 1 ? 1 : -1;
  const std::size_t s = uniform(rng, spec.min_signal, spec.max_signal);
  const std::size_t minority = s >= 3 ? uniform(rng, 0, (s - 1) / 2) : 0;

  std::vector<std::vector<std::string>> units;
  std::size_t used = 0;
  for (std::size_t i = 0; i < s; ++i) {
    const int effective = i < minority ? -sign : sign;
    const bool negate = coin(rng, spec.negation_rate);
    const int word_pol = negate ? -effective : effective;
    const std::string& w = pick(rng, word_pol > 0 ? spec.positive : spec.negative);
    if (negate) units.push_back({spec.negator, w});
    else units.push_back({w});
    used += units.back().size();
  }
  if (!spec.entities.empty() && coin(rng, spec.entity_rate)) {
    units.push_back({pick(rng, spec.entities)});
    d.groups.push_back(units.back()[0]);
    ++used;
  }
  if (!spec.numbers.empty() && coin(rng, spec.number_rate)) {
    units.push_back({pick(rng, spec.numbers)});
    ++used;
  }
  if (coin(rng, spec.spurious_presence)) {
    const int cls = coin(rng, spec.spurious_agreement) ? d.label : 1 - d.label;
    units.push_back({spec.spurious[static_cast<std::size_t>(cls)]});
    ++used;
  }
  const std::size_t target = uniform(rng, spec.min_len, spec.max_len);
  const double fill = target > used ? static_cast<double>(target - used) * spec.distractor_ratio : 0.0;
  const auto n_fill = static_cast<std::size_t>(std::llround(fill));
  for (std::size_t i = 0; i < n_fill; ++i) units.push_back({pick(rng, spec.distractors)});

  std::shuffle(units.begin(), units.end(), rng);
  for (auto& u : units)
    for (auto& t : u) d.tokens.push_back(std::move(t));
  return d;
}

inline Instance to_instance(const TaskSpec& spec, Draft d, std::int64_t id, GenRng& rng) {
  Instance inst;
  inst.id = id;
  inst.rationale = signal_mask(spec, d.tokens);
  inst.label = d.label;
  if (spec.noise > 0.0 && coin(rng, spec.noise)) inst.label = 1 - inst.label;
  inst.tokens = std::move(d.tokens);
  std::sort(d.groups.begin(), d.groups.end());
  d.groups.erase(std::unique(d.groups.begin(), d.groups.end()), d.groups.end());
  inst.group_tags = std::move(d.groups);
  return inst;
}

}  // namespace detail

inline Dataset generate_id_dataset(const TaskSpec& spec, std::size_t size, std::uint64_t seed,
                                   std::string name = "id") {
  spec.validate();
  if (size == 0) throw ValueError("generate: size must be at least 1");
  detail::GenRng rng(seed);
  Dataset out;
  out.name = std::move(name);
  out.instances.reserve(size);
  for (std::size_t i = 0; i < size; ++i)
    out.instances.push_back(detail::to_instance(spec, detail::draft_instance(spec, rng), static_cast<std::int64_t>(i), rng));
  return out;
}

// Token-classification variant: each token is tagged 1 (positive word),
// 2 (negative word) or 0; the sequence label is kept for reference.
inline Dataset generate_token_dataset(const TaskSpec& spec, std::size_t size, std::uint64_t seed,
                                      std::string name = "token") {
  Dataset d = generate_id_dataset(spec, size, seed, std::move(name));
  for (auto& inst : d.instances) {
    inst.token_labels.resize(inst.tokens.size());
    for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
      const int p = spec.polarity(inst.tokens[t]);
      inst.token_labels[t] = p > 0 ? 1 : p < 0 ? 2 : 0;
    }
  }
  return d;
}

// Changes to non-signal properties of the task. Unset fields keep the ID value.
struct DistributionShift {
  std::vector<std::string> new_distractors;
  double length_factor = 1.0;
  double distractor_ratio = 1.0;
  std::optional<double> spurious_presence;
  std::optional<double> spurious_agreement;
};

inline TaskSpec apply_shift(const TaskSpec& spec, const DistributionShift& shift) {
  const auto sig = spec.signal_vocab();
  for (const auto& w : shift.new_distractors) {
    if (sig.count(w)) throw ValueError("ood shift: new distractor '" + w + "' is a signal word");
  }
  if (!(shift.length_factor > 0.0)) throw ValueError("ood shift: length factor must be positive");
  if (!(shift.distractor_ratio >= 0.0)) throw ValueError("ood shift: distractor ratio must be nonnegative");
  TaskSpec out = spec;
  if (!shift.new_distractors.empty()) out.distractors = shift.new_distractors;
  out.min_len = static_cast<std::size_t>(std::llround(static_cast<double>(spec.min_len) * shift.length_factor));
  out.max_len = static_cast<std::size_t>(std::llround(static_cast<double>(spec.max_len) * shift.length_factor));
  out.min_len = std::max<std::size_t>(out.min_len, 1);
  out.max_len = std::max(out.max_len, out.min_len);
  out.distractor_ratio = spec.distractor_ratio * shift.distractor_ratio;
  if (shift.spurious_presence) out.spurious_presence = *shift.spurious_presence;
  if (shift.spurious_agreement) out.spurious_agreement = *shift.spurious_agreement;
  return out;
}

inline Dataset generate_ood_variant(const TaskSpec& spec, const DistributionShift& shift, std::size_t size,
                                    std::uint64_t seed, std::string name = "ood") {
  return generate_id_dataset(apply_shift(spec, shift), size, seed, std::move(name));
}

// Fresh distractor words guaranteed disjoint from `spec`'s vocabulary.
inline std::vector<std::string> fresh_distractors(const TaskSpec& spec, std::size_t count,
                                                  const std::string& prefix = "ood") {
  std::set<std::string> taken = spec.signal_vocab();
  taken.insert(spec.distractors.begin(), spec.distractors.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; out.size() < count; ++i) {
    std::string w = prefix + std::to_string(i);
    if (!taken.count(w)) out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contrast sets

inline std::vector<std::string> invert_polarity(const TaskSpec& spec, std::vector<std::string> tokens) {
  for (auto& t : tokens) {
    auto p = std::find(spec.positive.begin(), spec.positive.end(), t);
    if (p != spec.positive.end()) {
      t = spec.negative[static_cast<std::size_t>(p - spec.positive.begin())];
      continue;
    }
    auto n = std::find(spec.negative.begin(), spec.negative.end(), t);
    if (n != spec.negative.end()) t = spec.positive[static_cast<std::size_t>(n - spec.negative.begin())];
  }
  return tokens;
}

namespace detail {
// Replaces every member of `pool` in `tokens` with the next pool entry.
inline bool rotate_members(std::vector<std::string>& tokens, const std::vector<std::string>& pool) {
  if (pool.size() < 2) return false;
  bool changed = false;
  for (auto& t : tokens) {
    auto it = std::find(pool.begin(), pool.end(), t);
    if (it == pool.end()) continue;
    t = pool[(static_cast<std::size_t>(it - pool.begin()) + 1) % pool.size()];
    changed = true;
  }
  return changed;
}
}  // namespace detail

struct ContrastSet {
  Dataset instances;  // contrast instances only; ids continue after the source
  std::vector<ContrastGroup> groups;
};

// Up to three contrasts per original: inversion (label flips), number
// modification and entity replacement (label kept). Originals admitting none
// are omitted.
inline ContrastSet generate_contrast_set(const Dataset& source, const TaskSpec& spec) {
  ContrastSet out;
  out.instances.name = source.name + "_contrast";
  std::int64_t next_id = 0;
  for (const auto& inst : source.instances) next_id = std::max(next_id, inst.id + 1);

  for (const auto& inst : source.instances) {
    ContrastGroup g;
    g.original_id = inst.id;
    g.original_label = inst.label;
    auto emit = [&](std::vector<std::string> tokens, int label, PerturbationKind kind) {
      Instance c;
      c.id = next_id++;
      c.label = label;
      c.rationale = signal_mask(spec, tokens);
      for (const auto& t : tokens)
        if (std::find(spec.entities.begin(), spec.entities.end(), t) != spec.entities.end()) c.group_tags.push_back(t);
      std::sort(c.group_tags.begin(), c.group_tags.end());
      c.group_tags.erase(std::unique(c.group_tags.begin(), c.group_tags.end()), c.group_tags.end());
      c.tokens = std::move(tokens);
      c.contrast_of = inst.id;
      c.perturbation = to_string(kind);
      g.contrasts.push_back({c.id, c.label, kind});
      out.instances.instances.push_back(std::move(c));
    };
    if (net_polarity(spec, inst.tokens) != 0) emit(invert_polarity(spec, inst.tokens), 1 - inst.label,
                                                   PerturbationKind::inversion);
    auto numbers = inst.tokens;
    if (detail::rotate_members(numbers, spec.numbers)) emit(std::move(numbers), inst.label, PerturbationKind::number_mod);
    auto names = inst.tokens;
    if (detail::rotate_members(names, spec.entities)) emit(std::move(names), inst.label, PerturbationKind::entity_replace);
    if (!g.contrasts.empty()) out.groups.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Functional suites

namespace detail {

inline bool is_member(const std::vector<std::string>& pool, const std::string& t) {
  return std::find(pool.begin(), pool.end(), t) != pool.end();
}

// A base sentence without spurious tokens, for probing capabilities.
inline Draft base_draft(const TaskSpec& spec, GenRng& rng) {
  TaskSpec clean = spec;
  clean.spurious_presence = 0.0;
  return draft_instance(clean, rng);
}

inline std::vector<std::size_t> positions_of(const std::vector<std::string>& tokens,
                                             const std::vector<std::string>& pool) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (is_member(pool, tokens[i])) out.push_back(i);
  return out;
}

inline std::string swap_adjacent(std::string w, GenRng& rng) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i + 1 < w.size(); ++i)
    if (w[i] != w[i + 1]) cand.push_back(i);
  if (cand.empty()) return w + w.back();
  const std::size_t i = pick(rng, cand);
  std::swap(w[i], w[i + 1]);
  return w;
}

}  // namespace detail

inline constexpr std::size_t kDefaultSubtestSize = 100;

inline std::vector<FunctionalSuite> generate_functional_suites(const TaskSpec& spec, std::uint64_t seed,
                                                               std::size_t per_subtest = kDefaultSubtestSize) {
  spec.validate();
  if (per_subtest == 0) throw ValueError("functional suites: subtest size must be positive");
  if (spec.intensifiers.empty() || spec.entities.size() < 2 || spec.numbers.size() < 2) {
    throw ValueError("functional suites: spec needs intensifiers and at least two entities and numbers");
  }
  detail::GenRng rng(seed);
  std::int64_t next_id = 0;
  TaskSpec quiet = spec;
  quiet.noise = 0.0;

  auto build = [&](const std::string& name, bool invariance, auto&& make) {
    FunctionalSubtest sub;
    sub.name = name;
    sub.expect_invariance = invariance;
    sub.instances.name = name;
    while (sub.instances.size() < per_subtest) {
      std::optional<detail::Draft> d = make();
      if (!d) continue;
      Instance inst = detail::to_instance(quiet, std::move(*d), next_id++, rng);
      inst.perturbation = name;
      sub.instances.instances.push_back(std::move(inst));
    }
    return sub;
  };
  auto relabel = [&](detail::Draft& d) -> bool {
    auto l = rule_label(spec, d.tokens);
    if (!l) return false;
    d.label = *l;
    return true;
  };
  auto insert_at = [&](std::vector<std::string>& tokens, std::string w) {
    tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(detail::uniform(rng, 0, tokens.size())), std::move(w));
  };

  std::vector<FunctionalSuite> suites;

  FunctionalSuite vocab{FunctionalCategory::vocabulary, {}};
  vocab.subtests.push_back(build("add_sentiment_words", false, [&]() -> std::optional<detail::Draft> {
    auto d = detail::base_draft(quiet, rng);
    insert_at(d.tokens, detail::pick(rng, d.label == 1 ? spec.positive : spec.negative));
    if (!relabel(d)) return std::nullopt;
    return d;
  }));
  vocab.subtests.push_back(build("add_intensifiers", false, [&]() -> std::optional<detail::Draft> {
    auto d = detail::base_draft(quiet, rng);
    std::vector<std::size_t> spots;
    for (std::size_t i = 0; i < d.tokens.size(); ++i)
      if (spec.polarity(d.tokens[i]) != 0 && (i == 0 || d.tokens[i - 1] != spec.negator)) spots.push_back(i);
    if (spots.empty()) return std::nullopt;
    const std::size_t at = detail::pick(rng, spots);
    d.tokens.insert(d.tokens.begin() + static_cast<std::ptrdiff_t>(at), detail::pick(rng, spec.intensifiers));
    if (!relabel(d)) return std::nullopt;
    return d;
  }));
  suites.push_back(std::move(vocab));

  FunctionalSuite robust{FunctionalCategory::robustness, {}};
  robust.subtests.push_back(build("add_typo", true, [&]() -> std::optional<detail::Draft> {
    auto d = detail::base_draft(quiet, rng);
    const auto spots = detail::positions_of(d.tokens, spec.distractors);
    if (spots.empty()) return std::nullopt;
    const std::size_t at = detail::pick(rng, spots);
    d.tokens[at] = detail::swap_adjacent(d.tokens[at], rng);
    if (!relabel(d)) return std::nullopt;
    return d;
  }));
  robust.subtests.push_back(build("add_punctuation", true, [&]() -> std::optional<detail::Draft> {
    static const std::vector<std::string> kMarks = {".", "!", ",", "?"};
    auto d = detail::base_draft(quiet, rng);
    d.tokens.push_back(detail::pick(rng, kMarks));
    if (!relabel(d)) return std::nullopt;
    return d;
  }));
  robust.subtests.push_back(build("add_contractions", true, [&]() -> std::optional<detail::Draft> {
    static const std::vector<std::string> kContracted = {"it's", "that's", "what's", "there's"};
    auto d = detail::base_draft(quiet, rng);
    insert_at(d.tokens, detail::pick(rng, kContracted));
    if (!relabel(d)) return std::nullopt;
    return d;
  }));
  suites.push_back(std::move(robust));

  FunctionalSuite logic{FunctionalCategory::logic, {}};
  auto negated = [&](int word_polarity) {
    return [&, word_polarity]() -> std::optional<detail::Draft> {
      TaskSpec one = quiet;
      one.min_signal = one.max_signal = 1;
      one.negation_rate = 0.0;
      auto d = detail::base_draft(one, rng);
      std::vector<std::size_t> spots;
      for (std::size_t i = 0; i < d.tokens.size(); ++i)
        if (spec.polarity(d.tokens[i]) != 0) spots.push_back(i);
      if (spots.size() != 1) return std::nullopt;
      d.tokens[spots[0]] = detail::pick(rng, word_polarity > 0 ? spec.positive : spec.negative);
      d.tokens.insert(d.tokens.begin() + static_cast<std::ptrdiff_t>(spots[0]), spec.negator);
      if (!relabel(d)) return std::nullopt;
      return d;
    };
  };
  logic.subtests.push_back(build("negate_positive", false, negated(1)));
  logic.subtests.push_back(build("negate_negative", false, negated(-1)));
  suites.push_back(std::move(logic));

  FunctionalSuite entity{FunctionalCategory::entity, {}};
  auto replace = [&](const std::vector<std::string>& pool) {
    return [&]() -> std::optional<detail::Draft> {
      auto d = detail::base_draft(quiet, rng);
      auto spots = detail::positions_of(d.tokens, pool);
      if (spots.empty()) {
        insert_at(d.tokens, detail::pick(rng, pool));
        spots = detail::positions_of(d.tokens, pool);
      }
      const std::size_t at = detail::pick(rng, spots);
      std::string w;
      do w = detail::pick(rng, pool);
      while (w == d.tokens[at]);
      d.tokens[at] = w;
      d.groups.clear();
      for (const auto& t : d.tokens)
        if (detail::is_member(spec.entities, t)) d.groups.push_back(t);
      if (!relabel(d)) return std::nullopt;
      return d;
    };
  };
  entity.subtests.push_back(build("replace_names", true, replace(spec.entities)));
  entity.subtests.push_back(build("replace_numbers", true, replace(spec.numbers)));
  suites.push_back(std::move(entity));
  return suites;
}

}  // namespace ertest
