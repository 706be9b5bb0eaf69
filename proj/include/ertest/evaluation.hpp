#pragma once

// Task metrics, contrast-set consistency, functional-test failure rates,
// false positive rate difference (FPRD), and Welch's t-test.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ertest/dataset.hpp"
#include "ertest/errors.hpp"

namespace ertest {

enum class PerturbationKind { inversion, number_mod, entity_replace };

inline std::string to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::inversion: return "inversion";
    case PerturbationKind::number_mod: return "number_mod";
    case PerturbationKind::entity_replace: return "entity_replace";
  }
  return "?";
}

inline PerturbationKind parse_perturbation(const std::string& s) {
  if (s == "inversion") return PerturbationKind::inversion;
  if (s == "number_mod") return PerturbationKind::number_mod;
  if (s == "entity_replace") return PerturbationKind::entity_replace;
  throw ValueError("unknown perturbation kind: " + s);
}

struct ContrastMember {
  std::int64_t id = 0;
  int label = 0;
  PerturbationKind kind = PerturbationKind::inversion;
};

struct ContrastGroup {
  std::int64_t original_id = 0;
  int original_label = 0;
  std::vector<ContrastMember> contrasts;
};

enum class FunctionalCategory { vocabulary, robustness, logic, entity };

inline std::string to_string(FunctionalCategory c) {
  switch (c) {
    case FunctionalCategory::vocabulary: return "vocabulary";
    case FunctionalCategory::robustness: return "robustness";
    case FunctionalCategory::logic: return "logic";
    case FunctionalCategory::entity: return "entity";
  }
  return "?";
}

struct FunctionalSubtest {
  std::string name;
  Dataset instances;  // gold labels are the expected outputs
  // True when the perturbation must not change the label.
  bool expect_invariance = false;
};

struct FunctionalSuite {
  FunctionalCategory category = FunctionalCategory::vocabulary;
  std::vector<FunctionalSubtest> subtests;
};

struct SignificanceResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
  bool significant = false;
};

inline constexpr double kSignificanceLevel = 0.05;

namespace detail {
inline void check_lengths(const char* op, std::size_t a, std::size_t b) {
  if (a != b) {
    throw ValueError(std::string(op) + ": length mismatch (" + std::to_string(a) + " vs " +
                     std::to_string(b) + ")");
  }
  if (a == 0) throw ValueError(std::string(op) + ": empty input");
}
}  // namespace detail

inline double accuracy(std::span<const int> predictions, std::span<const int> gold) {
  detail::check_lengths("accuracy", predictions.size(), gold.size());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += predictions[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

// Unweighted mean of per-class F1 over classes present in gold or predictions.
inline double macro_f1(std::span<const int> predictions, std::span<const int> gold) {
  detail::check_lengths("macro_f1", predictions.size(), gold.size());
  std::map<int, std::size_t> tp, fp, fn;
  std::set<int> classes;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    classes.insert(gold[i]);
    classes.insert(predictions[i]);
    if (predictions[i] == gold[i]) {
      ++tp[gold[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[gold[i]];
    }
  }
  double total = 0.0;
  for (int c : classes) {
    const double denom = 2.0 * static_cast<double>(tp[c]) + static_cast<double>(fp[c] + fn[c]);
    total += denom > 0.0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
  }
  return total / static_cast<double>(classes.size());
}

struct ContrastResult {
  double original_accuracy = 0.0;
  double contrast_accuracy = 0.0;
  double consistency = 0.0;
};

// A group counts as consistent when its original and every contrast are
// predicted correctly.
inline ContrastResult contrast_consistency(std::span<const ContrastGroup> groups,
                                           const std::unordered_map<std::int64_t, int>& predictions) {
  if (groups.empty()) throw ValueError("contrast_consistency: no groups");
  auto lookup = [&](std::int64_t id) {
    auto it = predictions.find(id);
    if (it == predictions.end()) {
      throw ValueError("contrast_consistency: missing prediction for instance " + std::to_string(id));
    }
    return it->second;
  };
  std::size_t orig_ok = 0, contrast_ok = 0, contrast_total = 0, consistent = 0;
  for (const auto& g : groups) {
    if (g.contrasts.empty()) throw ValueError("contrast_consistency: group without contrasts");
    const bool o = lookup(g.original_id) == g.original_label;
    orig_ok += o;
    bool all = o;
    for (const auto& c : g.contrasts) {
      const bool ok = lookup(c.id) == c.label;
      contrast_ok += ok;
      ++contrast_total;
      all = all && ok;
    }
    consistent += all;
  }
  ContrastResult r;
  r.original_accuracy = static_cast<double>(orig_ok) / static_cast<double>(groups.size());
  r.contrast_accuracy = static_cast<double>(contrast_ok) / static_cast<double>(contrast_total);
  r.consistency = static_cast<double>(consistent) / static_cast<double>(groups.size());
  return r;
}

// Percentage of the subtest's instances predicted incorrectly.
inline double failure_rate(const FunctionalSubtest& subtest, std::span<const int> predictions) {
  const auto gold = subtest.instances.labels();
  detail::check_lengths("failure_rate", predictions.size(), gold.size());
  return 100.0 * (1.0 - accuracy(predictions, gold));
}

// Min-max scaling of one subtest's failure rates across compared models. All
// equal rates map to 0.
inline std::vector<double> normalize_failure_rates(std::span<const double> rates) {
  if (rates.size() < 2) throw ValueError("normalize_failure_rates: need at least two models");
  const auto [lo, hi] = std::minmax_element(rates.begin(), rates.end());
  std::vector<double> out(rates.size(), 0.0);
  const double range = *hi - *lo;
  if (range == 0.0) return out;
  for (std::size_t i = 0; i < rates.size(); ++i) out[i] = (rates[i] - *lo) / range;
  return out;
}

struct FprdResult {
  double value = 0.0;
  double overall_fpr = 0.0;
  std::map<std::string, double> group_fpr;
  // Groups without negative instances; their term is undefined.
  std::vector<std::string> excluded_groups;
};

// Sum over groups z of |FPR_z - FPR_overall|, FPR = FP / (FP + TN) with
// `positive_class` as the positive label. groups[i] lists the identifier
// groups instance i mentions; when `group_set` is empty every group seen in
// `groups` is scored.
inline FprdResult fprd(std::span<const int> predictions, std::span<const int> gold,
                       std::span<const std::vector<std::string>> groups,
                       std::span<const std::string> group_set = {}, int positive_class = 1) {
  detail::check_lengths("fprd", predictions.size(), gold.size());
  if (groups.size() != gold.size()) throw ValueError("fprd: one group list per instance required");
  struct Counts {
    std::size_t fp = 0, negatives = 0;
  };
  Counts overall;
  std::map<std::string, Counts> per_group;
  for (const auto& z : group_set) per_group[z];
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] == positive_class) continue;
    const bool false_positive = predictions[i] == positive_class;
    ++overall.negatives;
    overall.fp += false_positive;
    std::set<std::string> seen(groups[i].begin(), groups[i].end());
    for (const auto& z : seen) {
      if (!group_set.empty() && !per_group.count(z)) continue;
      auto& c = per_group[z];
      ++c.negatives;
      c.fp += false_positive;
    }
  }
  if (group_set.empty()) {
    for (const auto& tags : groups)
      for (const auto& z : tags) per_group[z];
  }
  if (overall.negatives == 0) throw ValueError("fprd: no negative instances");
  FprdResult r;
  r.overall_fpr = static_cast<double>(overall.fp) / static_cast<double>(overall.negatives);
  for (const auto& [z, c] : per_group) {
    if (c.negatives == 0) {
      r.excluded_groups.push_back(z);
      continue;
    }
    const double f = static_cast<double>(c.fp) / static_cast<double>(c.negatives);
    r.group_fpr[z] = f;
    r.value += std::abs(f - r.overall_fpr);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Student-t tail via the regularized incomplete beta function.

namespace detail {

// Continued fraction for I_x(a, b), modified Lentz evaluation.
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ValueError("incomplete_beta: a and b must be positive");
  if (x < 0.0 || x > 1.0) throw ValueError("incomplete_beta: x outside [0,1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

// P(T > t) for Student's t with df degrees of freedom.
inline double student_t_sf(double t, double df) {
  if (!(df > 0.0)) throw ValueError("student_t_sf: df must be positive");
  if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t >= 0.0 ? tail : 1.0 - tail;
}

inline double sample_mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Unbiased sample variance (n - 1 denominator).
inline double sample_variance(std::span<const double> v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// Unpaired Welch's t-test, one-sided with alternative mean(a) > mean(b).
inline SignificanceResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ValueError("welch_t_test: each sample needs at least 2 values");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = sample_variance(a) / na, vb = sample_variance(b) / nb;
  if (va == 0.0 && vb == 0.0) throw ValueError("welch_t_test: both samples have zero variance");
  SignificanceResult r;
  r.t = (sample_mean(a) - sample_mean(b)) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p_value = std::clamp(student_t_sf(r.t, r.df), 0.0, 1.0);
  r.significant = r.p_value < kSignificanceLevel;
  return r;
}

}  // namespace ertest
