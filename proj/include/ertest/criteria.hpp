#pragma once

// Rationale alignment criteria: divergences between machine rationale
// probabilities r_hat (each in (0,1)) and a binary human rationale r_dot.
// Every criterion is built from graph ops so it can be differentiated with
// respect to r_hat; the double-valued overloads evaluate on a scratch graph.

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ertest/autodiff.hpp"
#include "ertest/errors.hpp"

namespace ertest {

enum class Criterion { mse, mae, huber, bce, kldiv, order };

inline constexpr Criterion kAllCriteria[] = {Criterion::mse, Criterion::mae,   Criterion::huber,
                                             Criterion::bce, Criterion::kldiv, Criterion::order};

inline std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::mse: return "mse";
    case Criterion::mae: return "mae";
    case Criterion::huber: return "huber";
    case Criterion::bce: return "bce";
    case Criterion::kldiv: return "kldiv";
    case Criterion::order: return "order";
  }
  return "?";
}

inline Criterion parse_criterion(const std::string& name) {
  for (Criterion c : kAllCriteria)
    if (to_string(c) == name) return c;
  throw ValueError("unknown criterion: " + name);
}

struct CriterionConfig {
  Criterion kind = Criterion::mae;
  double huber_delta = 1.0;
  // Adds the (1 - r_dot) log(1 - r_hat) term to BCE. Off by default.
  bool bce_two_term = false;
};

namespace criteria {

namespace detail {

inline void check_pair(const char* op, const ad::Var& r_hat, std::span<const int> r_dot) {
  if (r_hat.shape().size() != 1) {
    throw ShapeError(std::string(op) + ": machine rationale must be a vector, got " +
                     ad::shape_str(r_hat.shape()));
  }
  if (r_hat.size() != r_dot.size()) {
    throw ShapeError(std::string(op) + ": length mismatch, machine " +
                     std::to_string(r_hat.size()) + " vs human " + std::to_string(r_dot.size()));
  }
  if (r_dot.empty()) throw ValueError(std::string(op) + ": empty rationale");
}

inline void check_positive(const char* op, const ad::Var& r_hat) {
  for (double v : r_hat.value().data) {
    if (!(v > 0.0)) throw ValueError(std::string(op) + ": machine rationale must be positive");
  }
}

inline ad::Var as_constant(ad::Graph& g, std::span<const int> r_dot) {
  std::vector<double> v(r_dot.begin(), r_dot.end());
  return g.constant(ad::Tensor::vector(std::move(v)));
}

inline std::vector<std::size_t> positions(std::span<const int> r_dot, int bit) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < r_dot.size(); ++t)
    if (r_dot[t] == bit) out.push_back(t);
  return out;
}

}  // namespace detail

// (1/n) ||r_hat - r_dot||_2^2
inline ad::Var mse(const ad::Var& r_hat, std::span<const int> r_dot) {
  detail::check_pair("mse", r_hat, r_dot);
  ad::Var diff = ad::sub(r_hat, detail::as_constant(r_hat.graph(), r_dot));
  return ad::mean(ad::mul(diff, diff));
}

// (1/n) ||r_hat - r_dot||_1
inline ad::Var mae(const ad::Var& r_hat, std::span<const int> r_dot) {
  detail::check_pair("mae", r_hat, r_dot);
  return ad::mean(ad::abs(ad::sub(r_hat, detail::as_constant(r_hat.graph(), r_dot))));
}

// Aggregate-level Huber: the branch is chosen on the whole-vector MAE, not
// per element.
inline ad::Var huber(const ad::Var& r_hat, std::span<const int> r_dot, double delta = 1.0) {
  if (!(delta > 0.0)) throw ValueError("huber: delta must be positive");
  ad::Var m = mae(r_hat, r_dot);
  if (m.item() < delta) return ad::scale(mse(r_hat, r_dot), 0.5);
  return ad::scale(ad::add_scalar(m, -0.5 * delta), delta);
}

// -(1/n) sum_t r_dot_t log r_hat_t. Only the important-token term, unless
// two_term adds (1 - r_dot_t) log(1 - r_hat_t).
inline ad::Var bce(const ad::Var& r_hat, std::span<const int> r_dot, bool two_term = false) {
  detail::check_pair("bce", r_hat, r_dot);
  detail::check_positive("bce", r_hat);
  ad::Graph& g = r_hat.graph();
  const double n = static_cast<double>(r_dot.size());
  ad::Var target = detail::as_constant(g, r_dot);
  ad::Var total = ad::sum(ad::mul(target, ad::log(r_hat)));
  if (two_term) {
    std::vector<double> inv(r_dot.size());
    for (std::size_t t = 0; t < r_dot.size(); ++t) inv[t] = 1.0 - r_dot[t];
    ad::Var rest = ad::log(ad::add_scalar(ad::neg(r_hat), 1.0));
    total = ad::add(total, ad::sum(ad::mul(g.constant(ad::Tensor::vector(std::move(inv))), rest)));
  }
  return ad::scale(total, -1.0 / n);
}

// (1/n) sum_t r_dot_t log(r_dot_t / r_hat_t) with 0 log 0 = 0.
inline ad::Var kldiv(const ad::Var& r_hat, std::span<const int> r_dot) {
  detail::check_pair("kldiv", r_hat, r_dot);
  detail::check_positive("kldiv", r_hat);
  ad::Graph& g = r_hat.graph();
  const double n = static_cast<double>(r_dot.size());
  const auto important = detail::positions(r_dot, 1);
  if (important.empty()) return g.constant(ad::Tensor::scalar(0.0));
  // log(1 / r_hat) on the important tokens; log r_dot_t = 0 there.
  ad::Var log_ratio = ad::neg(ad::log(ad::gather_flat(r_hat, important)));
  return ad::scale(ad::sum(log_ratio), 1.0 / n);
}

// sum over important t of min(r_hat_t / max_{unimportant j} r_hat_j - 1, 0)^2.
// Zero when either group is empty.
inline ad::Var order(const ad::Var& r_hat, std::span<const int> r_dot) {
  detail::check_pair("order", r_hat, r_dot);
  ad::Graph& g = r_hat.graph();
  const auto important = detail::positions(r_dot, 1);
  const auto unimportant = detail::positions(r_dot, 0);
  if (important.empty() || unimportant.empty()) return g.constant(ad::Tensor::scalar(0.0));
  detail::check_positive("order", r_hat);
  const auto& v = r_hat.value().data;
  std::size_t top = unimportant.front();
  for (std::size_t j : unimportant)
    if (v[j] > v[top]) top = j;
  const std::size_t top_index[] = {top};
  ad::Var denom = ad::reshape(ad::gather_flat(r_hat, top_index), {});
  ad::Var ratio = ad::mul(ad::gather_flat(r_hat, important), ad::reciprocal(denom));
  ad::Var shortfall = ad::neg(ad::relu(ad::neg(ad::add_scalar(ratio, -1.0))));
  return ad::sum(ad::mul(shortfall, shortfall));
}

inline ad::Var apply(const CriterionConfig& cfg, const ad::Var& r_hat, std::span<const int> r_dot) {
  switch (cfg.kind) {
    case Criterion::mse: return mse(r_hat, r_dot);
    case Criterion::mae: return mae(r_hat, r_dot);
    case Criterion::huber: return huber(r_hat, r_dot, cfg.huber_delta);
    case Criterion::bce: return bce(r_hat, r_dot, cfg.bce_two_term);
    case Criterion::kldiv: return kldiv(r_hat, r_dot);
    case Criterion::order: return order(r_hat, r_dot);
  }
  throw ValueError("criterion: unknown kind");
}

inline double evaluate(const CriterionConfig& cfg, std::span<const double> r_hat,
                       std::span<const int> r_dot) {
  ad::Graph g;
  ad::Var r = g.constant(ad::Tensor::vector(std::vector<double>(r_hat.begin(), r_hat.end())));
  return apply(cfg, r, r_dot).item();
}

inline double mse(std::span<const double> r_hat, std::span<const int> r_dot) {
  return evaluate({Criterion::mse}, r_hat, r_dot);
}
inline double mae(std::span<const double> r_hat, std::span<const int> r_dot) {
  return evaluate({Criterion::mae}, r_hat, r_dot);
}
inline double huber(std::span<const double> r_hat, std::span<const int> r_dot, double delta = 1.0) {
  return evaluate({Criterion::huber, delta}, r_hat, r_dot);
}
inline double bce(std::span<const double> r_hat, std::span<const int> r_dot, bool two_term = false) {
  return evaluate({Criterion::bce, 1.0, two_term}, r_hat, r_dot);
}
inline double kldiv(std::span<const double> r_hat, std::span<const int> r_dot) {
  return evaluate({Criterion::kldiv}, r_hat, r_dot);
}
inline double order(std::span<const double> r_hat, std::span<const int> r_dot) {
  return evaluate({Criterion::order}, r_hat, r_dot);
}

}  // namespace criteria

// One annotated instance inside an ER batch.
struct RationalePair {
  ad::Var probs;
  std::span<const int> human;
};

struct ErLoss {
  ad::Var mean;          // L_ER: mean criterion value over annotated instances
  ad::Var contribution;  // lambda_ER * L_ER
  std::size_t annotated = 0;
  // Set when the batch had no annotated instance; mean and contribution are 0.
  bool flagged = false;
};

inline ErLoss er_loss(ad::Graph& g, std::span<const RationalePair> pairs, const CriterionConfig& cfg,
                      double lambda_er) {
  if (lambda_er < 0.0) throw ValueError("er_loss: lambda_ER must be non-negative");
  ErLoss out;
  out.annotated = pairs.size();
  if (pairs.empty()) {
    out.mean = g.constant(ad::Tensor::scalar(0.0));
    out.contribution = out.mean;
    out.flagged = true;
    return out;
  }
  ad::Var total = criteria::apply(cfg, pairs[0].probs, pairs[0].human);
  for (std::size_t i = 1; i < pairs.size(); ++i) {
    total = ad::add(total, criteria::apply(cfg, pairs[i].probs, pairs[i].human));
  }
  out.mean = ad::scale(total, 1.0 / static_cast<double>(pairs.size()));
  out.contribution = ad::scale(out.mean, lambda_er);
  return out;
}

}  // namespace ertest
