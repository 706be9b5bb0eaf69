#pragma once

// Independent reference implementations for the evaluation metrics. They
// trade speed for directness: every quantity is recounted from scratch.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "ertest/evaluation.hpp"

namespace ertest::support {

inline double oracle_macro_f1(const std::vector<int>& pred, const std::vector<int>& gold) {
  std::set<int> classes(gold.begin(), gold.end());
  classes.insert(pred.begin(), pred.end());
  double total = 0.0;
  for (int c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (pred[i] == c && gold[i] == c) ++tp;
      if (pred[i] == c && gold[i] != c) ++fp;
      if (pred[i] != c && gold[i] == c) ++fn;
    }
    total += (2 * tp + fp + fn) == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return total / static_cast<double>(classes.size());
}

inline double oracle_consistency(const std::vector<ContrastGroup>& groups,
                                 const std::unordered_map<std::int64_t, int>& pred) {
  double sum = 0.0;
  for (const auto& g : groups) {
    double product = pred.at(g.original_id) == g.original_label ? 1.0 : 0.0;
    for (const auto& c : g.contrasts) product *= pred.at(c.id) == c.label ? 1.0 : 0.0;
    sum += product;
  }
  return sum / static_cast<double>(groups.size());
}

inline std::vector<double> oracle_normalize(const std::vector<double>& rates) {
  std::vector<double> sorted = rates;
  std::sort(sorted.begin(), sorted.end());
  const double lo = sorted.front(), hi = sorted.back();
  std::vector<double> out;
  for (double r : rates) out.push_back(hi == lo ? 0.0 : (r - lo) / (hi - lo));
  return out;
}

inline double oracle_fpr(const std::vector<int>& pred, const std::vector<int>& gold,
                         const std::vector<std::size_t>& members) {
  std::vector<std::size_t> negatives;
  for (std::size_t i : members)
    if (gold[i] == 0) negatives.push_back(i);
  const auto fp = std::count_if(negatives.begin(), negatives.end(), [&](std::size_t i) { return pred[i] == 1; });
  return static_cast<double>(fp) / static_cast<double>(negatives.size());
}

// Groups with no negatives are skipped, matching the exclusion rule.
inline double oracle_fprd(const std::vector<int>& pred, const std::vector<int>& gold,
                          const std::vector<std::vector<std::string>>& groups) {
  std::vector<std::size_t> everyone(gold.size());
  for (std::size_t i = 0; i < everyone.size(); ++i) everyone[i] = i;
  const double overall = oracle_fpr(pred, gold, everyone);
  std::set<std::string> names;
  for (const auto& g : groups) names.insert(g.begin(), g.end());
  double total = 0.0;
  for (const auto& z : names) {
    std::vector<std::size_t> members;
    bool has_negative = false;
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (std::find(groups[i].begin(), groups[i].end(), z) != groups[i].end()) {
        members.push_back(i);
        has_negative = has_negative || gold[i] == 0;
      }
    if (has_negative) total += std::abs(oracle_fpr(pred, gold, members) - overall);
  }
  return total;
}

// Student-t upper tail by integrating the density with composite Simpson's
// rule after mapping [t, inf) onto [0, 1).
inline double oracle_t_tail(double t, double df, std::size_t intervals = 400000) {
  const double log_c = std::lgamma((df + 1) / 2) - std::lgamma(df / 2) - 0.5 * std::log(df * M_PI);
  auto density = [&](double x) { return std::exp(log_c - (df + 1) / 2 * std::log1p(x * x / df)); };
  auto integrand = [&](double u) {
    if (u >= 1.0) return 0.0;
    const double x = t + u / (1 - u);
    return density(x) / ((1 - u) * (1 - u));
  };
  const double h = 1.0 / static_cast<double>(intervals);
  double s = integrand(0.0) + integrand(1.0);
  for (std::size_t i = 1; i < intervals; ++i) s += integrand(i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double oracle_welch_p(const std::vector<double>& a, const std::vector<double>& b) {
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / v.size();
  };
  auto var = [&](const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / (v.size() - 1);
  };
  const double sa = var(a) / a.size(), sb = var(b) / b.size();
  const double t = (mean(a) - mean(b)) / std::sqrt(sa + sb);
  const double df = (sa + sb) * (sa + sb) / (sa * sa / (a.size() - 1) + sb * sb / (b.size() - 1));
  return t >= 0 ? oracle_t_tail(t, df) : 1.0 - oracle_t_tail(-t, df);
}

// Random small prediction table: gold/pred over `classes` labels plus group
// tags drawn from four names.
struct RandomTable {
  std::vector<int> gold, pred;
  std::vector<std::vector<std::string>> groups;
};

inline RandomTable random_table(std::mt19937_64& rng, int classes) {
  RandomTable t;
  const std::size_t n = 4 + rng() % 30;
  const std::vector<std::string> names = {"a", "b", "c", "d"};
  for (std::size_t i = 0; i < n; ++i) {
    t.gold.push_back(static_cast<int>(rng() % classes));
    t.pred.push_back(static_cast<int>(rng() % classes));
    std::vector<std::string> g;
    for (const auto& z : names)
      if (rng() % 3 == 0) g.push_back(z);
    t.groups.push_back(g);
  }
  t.gold[0] = 0;  // at least one negative
  return t;
}

inline std::vector<ContrastGroup> random_groups(std::mt19937_64& rng, std::unordered_map<std::int64_t, int>& pred) {
  std::vector<ContrastGroup> groups(1 + rng() % 8);
  std::int64_t id = 0;
  for (auto& g : groups) {
    g.original_id = id++;
    g.original_label = static_cast<int>(rng() % 2);
    pred[g.original_id] = static_cast<int>(rng() % 2);
    const std::size_t k = 1 + rng() % 3;
    for (std::size_t c = 0; c < k; ++c) {
      ContrastMember m{id++, static_cast<int>(rng() % 2), PerturbationKind::inversion};
      pred[m.id] = static_cast<int>(rng() % 2);
      g.contrasts.push_back(m);
    }
  }
  return groups;
}

}  // namespace ertest::support
