#pragma once

// Budget-limited choice of which training instances receive rationale
// annotations, and the batch composition rule that keeps at least a third of
// every ER training batch annotated.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ertest/dataset.hpp"
#include "ertest/errors.hpp"
#include "ertest/extractors.hpp"
#include "ertest/model.hpp"

namespace ertest {

enum class SelectionStrategy { random, lc, hc, lis, his };

inline std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::random: return "random";
    case SelectionStrategy::lc: return "lc";
    case SelectionStrategy::hc: return "hc";
    case SelectionStrategy::lis: return "lis";
    case SelectionStrategy::his: return "his";
  }
  return "?";
}

inline SelectionStrategy parse_selection(const std::string& s) {
  for (auto v : {SelectionStrategy::random, SelectionStrategy::lc, SelectionStrategy::hc,
                 SelectionStrategy::lis, SelectionStrategy::his})
    if (to_string(v) == s) return v;
  throw ValueError("unknown selection strategy: " + s);
}

struct SelectionScore {
  std::int64_t instance_id = 0;
  double score = 0.0;
  SelectionStrategy strategy = SelectionStrategy::random;
  std::vector<double> seed_scores;
};

inline constexpr double kDefaultTopKPrime = 10.0;

// r_S: mean of the top-k'% values of a rationale.
inline double mean_top_k(std::span<const double> probs, double k_prime_percent) {
  if (probs.empty()) throw ValueError("mean_top_k: empty rationale");
  const std::size_t keep = topk_count(probs.size(), k_prime_percent);
  std::vector<double> sorted(probs.begin(), probs.end());
  std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep), sorted.end(),
                    std::greater<>{});
  return std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep), 0.0) /
         static_cast<double>(keep);
}

// Per-instance selection scores, averaged over the supplied No-ER models (one
// per seed). LC/HC score the gold-class probability; LIS/HIS score r_S of the
// IxG rationale for the predicted class. Random needs no scores.
inline std::vector<SelectionScore> score_instances(std::span<const ModelParams> no_er_models,
                                                   const Dataset& train, const Vocab& vocab,
                                                   SelectionStrategy strategy,
                                                   double k_prime_percent = kDefaultTopKPrime,
                                                   double gamma = kDefaultGamma) {
  if (strategy == SelectionStrategy::random) return {};
  if (no_er_models.empty()) throw ValueError("selection: at least one No-ER model is required");
  if (!(k_prime_percent > 0.0 && k_prime_percent < 100.0)) {
    throw ValueError("selection: k' must lie in (0, 100)");
  }
  for (const auto& m : no_er_models) {
    if (m.steps == 0) throw ValueError("selection: scoring model is untrained");
    if (m.config.mode != TaskMode::sequence) throw ValueError("selection: sequence mode only");
  }
  std::vector<SelectionScore> out;
  out.reserve(train.size());
  for (const auto& inst : train.instances) {
    SelectionScore s;
    s.instance_id = inst.id;
    s.strategy = strategy;
    const auto ids = vocab.encode(inst.tokens);
    for (const auto& model : no_er_models) {
      const ForwardTrace trace = forward(model, ids);
      if (strategy == SelectionStrategy::lc || strategy == SelectionStrategy::hc) {
        s.seed_scores.push_back(trace.class_probs().at(static_cast<std::size_t>(inst.label)));
      } else {
        const Rationale r = extract_ixg(trace, trace.predicted(), gamma);
        s.seed_scores.push_back(mean_top_k(r.probs, k_prime_percent));
      }
    }
    s.score = std::accumulate(s.seed_scores.begin(), s.seed_scores.end(), 0.0) /
              static_cast<double>(s.seed_scores.size());
    out.push_back(std::move(s));
  }
  return out;
}

// |S| = round(k/100 * n).
inline std::size_t budget_size(std::size_t n, double k_percent) {
  if (!(k_percent > 0.0) || k_percent > 100.0) {
    throw ValueError("selection: budget k must lie in (0, 100], got " + std::to_string(k_percent));
  }
  return static_cast<std::size_t>(std::llround(k_percent / 100.0 * static_cast<double>(n)));
}

// Instance ids chosen for annotation, in selection order.
inline std::vector<std::int64_t> select(const Dataset& train, std::span<const SelectionScore> scores,
                                        double k_percent, SelectionStrategy strategy,
                                        std::uint64_t seed) {
  const std::size_t size = budget_size(train.size(), k_percent);
  std::vector<std::int64_t> ids;
  if (strategy == SelectionStrategy::random) {
    for (const auto& inst : train.instances) ids.push_back(inst.id);
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(size);
    return ids;
  }
  if (scores.size() != train.size()) {
    throw ValueError("selection: expected one score per training instance");
  }
  std::vector<SelectionScore> ranked(scores.begin(), scores.end());
  const bool ascending = strategy == SelectionStrategy::lc || strategy == SelectionStrategy::lis;
  std::sort(ranked.begin(), ranked.end(), [ascending](const SelectionScore& a, const SelectionScore& b) {
    if (a.score != b.score) return ascending ? a.score < b.score : a.score > b.score;
    return a.instance_id < b.instance_id;
  });
  for (std::size_t i = 0; i < size; ++i) ids.push_back(ranked[i].instance_id);
  return ids;
}

struct SelectionManifest {
  SelectionStrategy strategy = SelectionStrategy::random;
  double k_percent = 100.0;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> selected_ids;
};

inline nlohmann::json manifest_to_json(const SelectionManifest& m) {
  return {{"schema_version", 1},
          {"strategy", to_string(m.strategy)},
          {"k", m.k_percent},
          {"seed", m.seed},
          {"selected_ids", m.selected_ids}};
}

inline SelectionManifest manifest_from_json(const nlohmann::json& j) {
  try {
    SelectionManifest m;
    m.strategy = parse_selection(j.at("strategy").get<std::string>());
    m.k_percent = j.at("k").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.selected_ids = j.at("selected_ids").get<std::vector<std::int64_t>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("selection manifest: ") + e.what());
  }
}

// Minimum annotated instances per batch: ceil(batch_size / 3).
inline std::size_t annotated_floor(std::size_t batch_size) { return (batch_size + 2) / 3; }

// One epoch of batches over positions [0, n). Annotated positions are
// recycled (reshuffled each pass) so that every batch holds at least
// ceil(batch_size / 3) of them; every position appears at least once. When
// every instance is annotated this is ordinary shuffled batching.
template <class Rng>
std::vector<std::vector<std::size_t>> compose_batches(std::size_t n,
                                                      std::span<const std::size_t> annotated,
                                                      std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ValueError("batches: batch size must be positive");
  if (annotated.empty()) throw ValueError("batches: no annotated instances for ER training");
  std::vector<char> is_annotated(n, 0);
  for (std::size_t a : annotated) {
    if (a >= n) throw ValueError("batches: annotated position out of range");
    is_annotated[a] = 1;
  }
  std::vector<std::size_t> plain, marked;
  for (std::size_t i = 0; i < n; ++i) (is_annotated[i] ? marked : plain).push_back(i);

  std::vector<std::vector<std::size_t>> batches;
  if (plain.empty()) {
    std::vector<std::size_t> order = marked;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
      const std::size_t end = std::min(order.size(), i + batch_size);
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
  }

  std::shuffle(plain.begin(), plain.end(), rng);
  const std::size_t floor = std::min(annotated_floor(batch_size), batch_size);
  const std::size_t plain_per_batch = batch_size - floor;
  std::size_t count = (n + batch_size - 1) / batch_size;
  if (plain_per_batch == 0) {
    throw ValueError("batches: batch size too small to mix unannotated instances");
  }
  count = std::max(count, (plain.size() + plain_per_batch - 1) / plain_per_batch);

  std::vector<std::size_t> pool;
  std::size_t pool_pos = 0;
  auto next_marked = [&]() {
    if (pool_pos == pool.size()) {
      pool = marked;
      std::shuffle(pool.begin(), pool.end(), rng);
      pool_pos = 0;
    }
    return pool[pool_pos++];
  };

  const std::size_t base = plain.size() / count, extra = plain.size() % count;
  std::size_t cursor = 0;
  for (std::size_t b = 0; b < count; ++b) {
    const std::size_t take = base + (b < extra ? 1 : 0);
    std::vector<std::size_t> batch(plain.begin() + static_cast<std::ptrdiff_t>(cursor),
                                   plain.begin() + static_cast<std::ptrdiff_t>(cursor + take));
    cursor += take;
    while (batch.size() < batch_size) batch.push_back(next_marked());
    std::shuffle(batch.begin(), batch.end(), rng);
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace ertest
