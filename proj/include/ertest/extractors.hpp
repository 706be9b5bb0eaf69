#pragma once

// Machine rationale extractors and the shared score normalization
// probs = sigmoid(gamma * raw_scores).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ertest/autodiff.hpp"
#include "ertest/errors.hpp"
#include "ertest/model.hpp"

namespace ertest {

enum class ExtractorKind { ixg, attention, learned };

inline std::string to_string(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::ixg: return "ixg";
    case ExtractorKind::attention: return "attention";
    case ExtractorKind::learned: return "learned";
  }
  return "?";
}

inline ExtractorKind parse_extractor(const std::string& s) {
  if (s == "ixg") return ExtractorKind::ixg;
  if (s == "attention") return ExtractorKind::attention;
  if (s == "learned") return ExtractorKind::learned;
  throw ValueError("unknown extractor: " + s);
}

inline constexpr double kDefaultGamma = 100.0;

// Probabilities are kept inside the open interval so that log-based criteria
// stay finite once sigmoid saturates in double precision.
inline constexpr double kProbFloor = std::numeric_limits<double>::min();
inline const double kProbCeil = std::nextafter(1.0, 0.0);

struct Rationale {
  std::vector<double> raw_scores;
  std::vector<double> probs;
  std::size_t target_class = 0;
  // Token mode: per-token target classes (target_class is unused).
  std::vector<std::size_t> token_targets;
  ExtractorKind extractor = ExtractorKind::ixg;
};

struct BinaryRationale {
  std::vector<int> mask;
  double k_percent = 0.0;
};

inline std::vector<double> normalize_scores(std::span<const double> raw, double gamma = kDefaultGamma) {
  if (!(gamma > 0.0)) throw ValueError("normalize: gamma must be positive");
  std::vector<double> probs(raw.size());
  for (std::size_t t = 0; t < raw.size(); ++t)
    probs[t] = std::clamp(ad::sigmoid_value(gamma * raw[t]), kProbFloor, kProbCeil);
  return probs;
}

inline ad::Var normalize_scores(const ad::Var& raw, double gamma = kDefaultGamma) {
  if (!(gamma > 0.0)) throw ValueError("normalize: gamma must be positive");
  return ad::clamp(ad::sigmoid(ad::scale(raw, gamma)), kProbFloor, kProbCeil);
}

// ---------------------------------------------------------------------------
// Graph-level scores. These are what training differentiates through.

// Scalar objective whose input gradient IxG attributes: the target logit in
// sequence mode, or the sum over tokens of each token's target logit.
inline ad::Var target_logit(const ad::Var& logits, std::span<const std::size_t> targets) {
  const auto& shape = logits.shape();
  const std::size_t m = shape.back();
  const std::size_t rows = shape.size() == 1 ? 1 : shape[0];
  if (targets.size() != rows) {
    throw ShapeError("ixg: " + std::to_string(targets.size()) + " targets for logits " +
                     ad::shape_str(shape));
  }
  std::vector<std::size_t> flat(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] >= m) throw ValueError("ixg: target class out of range");
    flat[i] = i * m + targets[i];
  }
  return ad::sum(ad::gather_flat(logits, flat));
}

// Input x gradient: score_t = sum_d (d objective / d e_{t,d}) * e_{t,d}.
// With create_graph the scores are differentiable with respect to the
// parameters that produced `inputs` and `objective`.
inline ad::Var ixg_scores(const ad::Var& inputs, const ad::Var& objective, bool create_graph) {
  if (inputs.shape().size() != 2) throw ShapeError("ixg: inputs must be [n,d]");
  ad::Graph& g = inputs.graph();
  const ad::Var wrt[] = {inputs};
  if (!inputs.requires_grad()) throw Error("ixg: gradient unavailable, inputs do not require grad");
  ad::Var grad = g.grad(objective, wrt, create_graph)[0];
  ad::Var x = create_graph ? inputs : g.constant(ad::Tensor(inputs.shape(), inputs.value().data));
  return ad::sum_last(ad::mul(grad, x));
}

inline ad::Var ixg_scores(const GraphTrace& trace, std::span<const std::size_t> targets,
                          bool create_graph) {
  return ixg_scores(trace.inputs, target_logit(trace.logits, targets), create_graph);
}

// Mean over query rows of each key column of the attention matrix.
inline ad::Var attention_scores(const GraphTrace& trace) {
  const std::size_t n = trace.attention.shape().at(0);
  return ad::scale(ad::sum_leading(trace.attention), 1.0 / static_cast<double>(n));
}

inline ad::Var learned_scores(const ad::Var& head_weight, const ad::Var& head_bias,
                              const ad::Var& hidden) {
  if (head_weight.shape() != ad::Shape{hidden.shape().at(1), 1}) {
    throw ShapeError("learned extractor: head weight " + ad::shape_str(head_weight.shape()) +
                     " does not match hidden size " + std::to_string(hidden.shape().at(1)));
  }
  if (head_bias.size() != 1) throw ShapeError("learned extractor: head bias must have one value");
  ad::Var scores = ad::sum_last(ad::matmul(hidden, head_weight));
  return ad::add(scores, ad::reshape(head_bias, {}));
}

// ---------------------------------------------------------------------------
// Post-hoc extraction from a forward trace.

namespace detail {
inline Rationale make_rationale(std::vector<double> raw, ExtractorKind kind, double gamma) {
  Rationale r;
  r.probs = normalize_scores(raw, gamma);
  r.raw_scores = std::move(raw);
  r.extractor = kind;
  return r;
}
}  // namespace detail

inline Rationale extract_ixg(const ForwardTrace& trace, std::span<const std::size_t> targets,
                             double gamma = kDefaultGamma) {
  if (!trace.graph || !trace.vars.inputs.valid()) {
    throw Error("ixg: gradient unavailable, trace has no retained graph");
  }
  ad::Var scores = ixg_scores(trace.vars, targets, false);
  Rationale r = detail::make_rationale(scores.value().data, ExtractorKind::ixg, gamma);
  if (trace.mode == TaskMode::sequence) {
    r.target_class = targets[0];
  } else {
    r.token_targets.assign(targets.begin(), targets.end());
  }
  return r;
}

inline Rationale extract_ixg(const ForwardTrace& trace, std::size_t target_class,
                             double gamma = kDefaultGamma) {
  if (trace.mode != TaskMode::sequence) {
    std::vector<std::size_t> targets(trace.tokens.size(), target_class);
    return extract_ixg(trace, std::span<const std::size_t>(targets), gamma);
  }
  const std::size_t targets[] = {target_class};
  return extract_ixg(trace, std::span<const std::size_t>(targets), gamma);
}

inline Rationale extract_attention(const ForwardTrace& trace, double gamma = kDefaultGamma) {
  const auto& a = trace.attention;
  if (a.rank() != 2 || a.rows() != a.cols() || a.rows() == 0) {
    throw ShapeError("attention extractor: malformed attention " + ad::shape_str(a.shape));
  }
  const std::size_t n = a.rows();
  std::vector<double> raw(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) raw[j] += a(i, j);
  for (double& v : raw) v /= static_cast<double>(n);
  Rationale r = detail::make_rationale(std::move(raw), ExtractorKind::attention, gamma);
  if (trace.mode == TaskMode::sequence) r.target_class = trace.predicted();
  return r;
}

inline Rationale extract_learned(const RationaleHead& head, const ForwardTrace& trace,
                                 double gamma = kDefaultGamma) {
  const auto& h = trace.hidden;
  if (h.rank() != 2) throw ShapeError("learned extractor: malformed hidden states");
  const std::size_t n = h.rows(), d = h.cols();
  if (head.weight.shape != ad::Shape{d, 1} || head.bias.size() != 1) {
    throw ShapeError("learned extractor: head weight " + ad::shape_str(head.weight.shape) +
                     " does not match hidden size " + std::to_string(d));
  }
  std::vector<double> raw(n, head.bias.data[0]);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t k = 0; k < d; ++k) raw[t] += h(t, k) * head.weight.data[k];
  Rationale r = detail::make_rationale(std::move(raw), ExtractorKind::learned, gamma);
  if (trace.mode == TaskMode::sequence) r.target_class = trace.predicted();
  return r;
}

// Number of tokens kept by top-k% selection: round(k/100 * n), at least one.
inline std::size_t topk_count(std::size_t n, double k_percent) {
  if (!(k_percent > 0.0) || k_percent > 100.0) {
    throw ValueError("top-k: k must lie in (0, 100], got " + std::to_string(k_percent));
  }
  const auto k = static_cast<std::size_t>(std::llround(k_percent / 100.0 * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, n == 0 ? 0 : 1, n);
}

// Indices of the values in descending order; ties keep the lower index first.
inline std::vector<std::size_t> rank_descending(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return order;
}

inline BinaryRationale binarize_topk(const Rationale& r, double k_percent) {
  const std::size_t keep = topk_count(r.probs.size(), k_percent);
  BinaryRationale out;
  out.k_percent = k_percent;
  out.mask.assign(r.probs.size(), 0);
  const auto order = rank_descending(r.probs);
  for (std::size_t i = 0; i < keep; ++i) out.mask[order[i]] = 1;
  return out;
}

}  // namespace ertest
