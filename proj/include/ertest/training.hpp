#pragma once

// Objective L = L_task + lambda_ER * L_ER, optimizer steps, and the
// early-stopped training loop.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ertest/autodiff.hpp"
#include "ertest/criteria.hpp"
#include "ertest/dataset.hpp"
#include "ertest/errors.hpp"
#include "ertest/extractors.hpp"
#include "ertest/model.hpp"
#include "ertest/selection.hpp"

namespace ertest {

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ValueError("unknown optimizer: " + s);
}

struct TrainConfig {
  ExtractorKind extractor = ExtractorKind::ixg;
  CriterionConfig criterion;
  double lambda_er = 1.0;
  double gamma_er = kDefaultGamma;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double learning_rate = 1e-2;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 25;
  std::size_t patience = 10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t shuffle_seed = 0;
};

// A training instance after tokenization.
struct Example {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> targets;  // one entry (sequence) or one per token
  std::optional<std::vector<int>> rationale;
};

inline std::vector<Example> encode(const Dataset& data, const Vocab& vocab, TaskMode mode) {
  std::vector<Example> out;
  out.reserve(data.size());
  for (const auto& inst : data.instances) {
    Example ex;
    ex.ids = vocab.encode(inst.tokens);
    if (mode == TaskMode::sequence) {
      if (inst.label < 0) throw DataError("encode: negative label");
      ex.targets = {static_cast<std::size_t>(inst.label)};
    } else {
      if (inst.token_labels.size() != inst.tokens.size()) {
        throw DataError("encode: token mode needs one label per token");
      }
      for (int l : inst.token_labels) {
        if (l < 0) throw DataError("encode: negative label");
        ex.targets.push_back(static_cast<std::size_t>(l));
      }
    }
    ex.rationale = inst.rationale;
    out.push_back(std::move(ex));
  }
  return out;
}

struct LossBreakdown {
  double task = 0.0;
  double er = 0.0;  // L_ER before the lambda weight
  double total = 0.0;
  std::size_t annotated = 0;
  bool er_flagged = false;  // ER branch active but no annotated instance
};

// Graph-level loss for a batch. The ER branch is skipped entirely when
// lambda_ER is zero.
struct BatchLoss {
  ad::Var task;
  std::optional<ErLoss> er;
  ad::Var total;
};

inline BatchLoss batch_loss(ad::Graph& g, const BoundParams& bound, const ModelConfig& model_cfg,
                            std::span<const Example* const> batch, const TrainConfig& cfg,
                            bool differentiable) {
  if (batch.empty()) throw ValueError("train: empty batch");
  const bool with_er = cfg.lambda_er != 0.0;
  ad::Var task_sum;
  std::vector<RationalePair> pairs;
  for (const Example* ex : batch) {
    const GraphTrace tr = forward_graph(model_cfg, bound, ex->ids);
    ad::Var ce = ad::cross_entropy(tr.logits, ex->targets);
    task_sum = task_sum.valid() ? ad::add(task_sum, ce) : ce;
    if (!with_er || !ex->rationale) continue;
    if (ex->rationale->size() != ex->ids.size()) {
      throw DataError("train: rationale length differs from token count");
    }
    ad::Var raw;
    switch (cfg.extractor) {
      case ExtractorKind::ixg: raw = ixg_scores(tr, ex->targets, differentiable); break;
      case ExtractorKind::attention: raw = attention_scores(tr); break;
      case ExtractorKind::learned:
        raw = learned_scores(bound.head_weight, bound.head_bias, tr.hidden);
        break;
    }
    pairs.push_back({normalize_scores(raw, cfg.gamma_er), *ex->rationale});
  }
  BatchLoss out;
  out.task = ad::scale(task_sum, 1.0 / static_cast<double>(batch.size()));
  out.total = out.task;
  if (with_er) {
    out.er = er_loss(g, pairs, cfg.criterion, cfg.lambda_er);
    out.total = ad::add(out.task, out.er->contribution);
  }
  return out;
}

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(ModelParams& params, std::span<const std::vector<double>> grads) {
    auto tensors = params.named_tensors();
    if (grads.size() != tensors.size()) throw Error("optimizer: gradient count mismatch");
    ++t_;
    if (cfg_.optimizer == OptimizerKind::adam && m_.empty()) {
      for (const auto& [name, t] : tensors) {
        m_.emplace_back(t->size(), 0.0);
        v_.emplace_back(t->size(), 0.0);
      }
    }
    const double lr = cfg_.learning_rate;
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      auto& w = tensors[k].second->data;
      const auto& g = grads[k];
      if (cfg_.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      } else {
        const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < w.size(); ++i) {
          m_[k][i] = b1 * m_[k][i] + (1.0 - b1) * g[i];
          v_[k][i] = b2 * v_[k][i] + (1.0 - b2) * g[i] * g[i];
          w[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.adam_eps);
        }
      }
    }
    ++params.steps;
  }

 private:
  TrainConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// One gradient step on L = L_task + lambda_ER * L_ER over the batch.
inline LossBreakdown train_step(ModelParams& params, Optimizer& opt,
                                std::span<const Example* const> batch, const TrainConfig& cfg) {
  ad::Graph g;
  const BoundParams bound = bind(g, params, true);
  const BatchLoss loss = batch_loss(g, bound, params.config, batch, cfg, true);
  LossBreakdown out;
  out.task = loss.task.item();
  out.total = loss.total.item();
  if (loss.er) {
    out.er = loss.er->mean.item();
    out.annotated = loss.er->annotated;
    out.er_flagged = loss.er->flagged;
  }
  if (!std::isfinite(out.total)) {
    throw NumericError("train: non-finite loss (task=" + std::to_string(out.task) +
                       ", er=" + std::to_string(out.er) + ") after " +
                       std::to_string(params.steps) + " steps");
  }
  g.backward(loss.total);
  std::vector<std::vector<double>> grads;
  for (const ad::Var& v : bound.all()) {
    const auto& gr = v.grad();
    grads.push_back(gr ? *gr : std::vector<double>(v.size(), 0.0));
  }
  opt.step(params, grads);
  if (!params.all_finite()) {
    throw NumericError("train: parameters became non-finite after step " +
                       std::to_string(params.steps));
  }
  return out;
}

inline LossBreakdown train_step(ModelParams& params, Optimizer& opt, std::span<const Example> batch,
                                const TrainConfig& cfg) {
  std::vector<const Example*> ptrs;
  for (const auto& ex : batch) ptrs.push_back(&ex);
  return train_step(params, opt, std::span<const Example* const>(ptrs), cfg);
}

// Dataset-level loss without updates. Task loss is the mean over instances,
// ER loss the mean over annotated instances.
inline LossBreakdown evaluate_loss(const ModelParams& params, std::span<const Example> data,
                                   const TrainConfig& cfg, std::size_t chunk = 64) {
  if (data.empty()) throw ValueError("evaluate_loss: empty dataset");
  double task_sum = 0.0, er_sum = 0.0;
  std::size_t annotated = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    std::vector<const Example*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&data[i]);
    ad::Graph g;
    // IxG needs input gradients, so parameters stay differentiable here even
    // though nothing is updated.
    const BoundParams bound = bind(g, params, cfg.extractor == ExtractorKind::ixg);
    const BatchLoss loss = batch_loss(g, bound, params.config, ptrs, cfg, false);
    task_sum += loss.task.item() * static_cast<double>(ptrs.size());
    if (loss.er && !loss.er->flagged) {
      er_sum += loss.er->mean.item() * static_cast<double>(loss.er->annotated);
      annotated += loss.er->annotated;
    }
  }
  LossBreakdown out;
  out.task = task_sum / static_cast<double>(data.size());
  out.annotated = annotated;
  out.er = annotated ? er_sum / static_cast<double>(annotated) : 0.0;
  out.er_flagged = cfg.lambda_er != 0.0 && annotated == 0;
  out.total = out.task + cfg.lambda_er * out.er;
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_task = 0.0;
  double train_er = 0.0;
  double dev_task = 0.0;
  double dev_er = 0.0;
  double dev_total = 0.0;
};

struct FitResult {
  ModelParams params;  // checkpoint with the lowest total dev loss
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

// Batches for one epoch: ordinary shuffled batching without ER, otherwise the
// one-third annotated composition rule.
template <class Rng>
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const Example> train,
                                                    const TrainConfig& cfg, Rng& rng) {
  if (cfg.lambda_er != 0.0) {
    std::vector<std::size_t> annotated;
    for (std::size_t i = 0; i < train.size(); ++i)
      if (train[i].rationale) annotated.push_back(i);
    return compose_batches(train.size(), annotated, cfg.batch_size, rng);
  }
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), i + cfg.batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// Trains for at most max_epochs, stopping once `patience` consecutive epochs
// fail to improve the total dev loss.
inline FitResult fit(ModelParams params, std::span<const Example> train, std::span<const Example> dev,
                     const TrainConfig& cfg) {
  if (train.empty()) throw ValueError("fit: empty training set");
  if (dev.empty()) throw ValueError("fit: empty development set");
  if (cfg.batch_size == 0) throw ValueError("fit: batch size must be positive");
  std::mt19937_64 rng(cfg.shuffle_seed);
  Optimizer opt(cfg);
  FitResult result;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto batches = epoch_batches(train, cfg, rng);
    double task_sum = 0.0, er_sum = 0.0;
    for (const auto& idx : batches) {
      std::vector<const Example*> batch;
      batch.reserve(idx.size());
      for (std::size_t i : idx) batch.push_back(&train[i]);
      const LossBreakdown lb = train_step(params, opt, batch, cfg);
      task_sum += lb.task;
      er_sum += lb.er;
    }
    const LossBreakdown dev_loss = evaluate_loss(params, dev, cfg);
    if (!std::isfinite(dev_loss.total)) throw NumericError("fit: non-finite dev loss");
    EpochLog log;
    log.epoch = epoch;
    log.train_task = task_sum / static_cast<double>(batches.size());
    log.train_er = er_sum / static_cast<double>(batches.size());
    log.dev_task = dev_loss.task;
    log.dev_er = dev_loss.er;
    log.dev_total = dev_loss.total;
    result.log.push_back(log);
    if (dev_loss.total < best) {
      best = dev_loss.total;
      result.params = params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace ertest
