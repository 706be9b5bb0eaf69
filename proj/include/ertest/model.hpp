#pragma once

// Toy text classifier: embedding -> single-head self-attention with a
// residual connection -> mean pooling -> linear classifier (sequence mode),
// or a per-token linear classifier (token mode).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ertest/autodiff.hpp"
#include "ertest/errors.hpp"

namespace ertest {

enum class TaskMode { sequence, token };

inline std::string to_string(TaskMode m) { return m == TaskMode::sequence ? "sequence" : "token"; }

inline TaskMode parse_task_mode(const std::string& s) {
  if (s == "sequence") return TaskMode::sequence;
  if (s == "token") return TaskMode::token;
  throw ValueError("unknown task mode: " + s);
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t n_classes = 2;
  std::size_t max_len = 64;
  TaskMode mode = TaskMode::sequence;
  double init_scale = 0.1;
  std::uint64_t seed = 0;
  // Binary tasks only: a single score z per position with logits [-z, z].
  // The two logits cannot then move together, so attributions to the target
  // logit track the decision margin.
  bool tied_binary_head = false;

  std::size_t head_width() const { return tied_binary_head ? 1 : n_classes; }
};

// Linear map from per-token hidden states to one rationale score.
struct RationaleHead {
  ad::Tensor weight;  // [d,1]
  ad::Tensor bias;    // [1]
};

struct ModelParams {
  ModelConfig config;
  ad::Tensor embedding;  // [V,d]
  ad::Tensor w_query;    // [d,d]
  ad::Tensor w_key;      // [d,d]
  ad::Tensor w_value;    // [d,d]
  ad::Tensor w_out;      // [d,M], or [d,1] with a tied binary head
  ad::Tensor b_out;      // [M] or [1]
  RationaleHead head;
  // Number of optimizer updates applied so far.
  std::uint64_t steps = 0;

  static ModelParams zeros(const ModelConfig& cfg) {
    if (cfg.vocab_size == 0 || cfg.embed_dim == 0 || cfg.n_classes == 0) {
      throw ValueError("model: vocab_size, embed_dim and n_classes must be positive");
    }
    if (cfg.tied_binary_head && cfg.n_classes != 2) {
      throw ValueError("model: tied binary head needs exactly two classes");
    }
    const std::size_t v = cfg.vocab_size, d = cfg.embed_dim, m = cfg.head_width();
    ModelParams p;
    p.config = cfg;
    p.embedding = ad::Tensor::zeros({v, d});
    p.w_query = ad::Tensor::zeros({d, d});
    p.w_key = ad::Tensor::zeros({d, d});
    p.w_value = ad::Tensor::zeros({d, d});
    p.w_out = ad::Tensor::zeros({d, m});
    p.b_out = ad::Tensor::zeros({m});
    p.head.weight = ad::Tensor::zeros({d, 1});
    p.head.bias = ad::Tensor::zeros({1});
    return p;
  }

  // Gaussian initialization; embeddings at unit scale over sqrt(d), the rest
  // at init_scale. Biases start at zero.
  static ModelParams init(const ModelConfig& cfg) {
    ModelParams p = zeros(cfg);
    std::mt19937_64 rng(cfg.seed);
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    auto fill = [&rng](ad::Tensor& t, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (double& x : t.data) x = dist(rng);
    };
    fill(p.embedding, emb_std);
    fill(p.w_query, cfg.init_scale);
    fill(p.w_key, cfg.init_scale);
    fill(p.w_value, cfg.init_scale);
    fill(p.w_out, cfg.init_scale);
    fill(p.head.weight, cfg.init_scale);
    return p;
  }

  std::vector<std::pair<std::string, ad::Tensor*>> named_tensors() {
    return {{"embedding", &embedding}, {"w_query", &w_query},         {"w_key", &w_key},
            {"w_value", &w_value},     {"w_out", &w_out},             {"b_out", &b_out},
            {"head_weight", &head.weight}, {"head_bias", &head.bias}};
  }

  std::vector<std::pair<std::string, const ad::Tensor*>> named_tensors() const {
    auto named = const_cast<ModelParams*>(this)->named_tensors();
    std::vector<std::pair<std::string, const ad::Tensor*>> out;
    for (auto& [name, t] : named) out.emplace_back(name, t);
    return out;
  }

  bool all_finite() const {
    for (const auto& [name, t] : named_tensors())
      if (!t->all_finite()) return false;
    return true;
  }

  void validate() const {
    const std::size_t v = config.vocab_size, d = config.embed_dim, m = config.head_width();
    auto expect = [](const ad::Tensor& t, const ad::Shape& s, const std::string& name) {
      if (t.shape != s) {
        throw ShapeError("model: " + name + " has shape " + ad::shape_str(t.shape) +
                         ", expected " + ad::shape_str(s));
      }
    };
    expect(embedding, {v, d}, "embedding");
    expect(w_query, {d, d}, "w_query");
    expect(w_key, {d, d}, "w_key");
    expect(w_value, {d, d}, "w_value");
    expect(w_out, {d, m}, "w_out");
    expect(b_out, {m}, "b_out");
    expect(head.weight, {d, 1}, "head_weight");
    expect(head.bias, {1}, "head_bias");
  }
};

// Parameters placed on a graph.
struct BoundParams {
  ad::Var embedding, w_query, w_key, w_value, w_out, b_out, head_weight, head_bias;

  std::vector<ad::Var> all() const {
    return {embedding, w_query, w_key, w_value, w_out, b_out, head_weight, head_bias};
  }
};

inline BoundParams bind(ad::Graph& g, const ModelParams& p, bool trainable) {
  auto put = [&](const ad::Tensor& t) { return g.leaf(ad::Tensor(t.shape, t.data), trainable); };
  return {put(p.embedding), put(p.w_query), put(p.w_key),       put(p.w_value),
          put(p.w_out),     put(p.b_out),   put(p.head.weight), put(p.head.bias)};
}

struct GraphTrace {
  ad::Var inputs;     // [n,d] token embeddings
  ad::Var attention;  // [n,n] row-stochastic
  ad::Var hidden;     // [n,d]
  ad::Var logits;     // [M] or [n,M]
};

inline void check_tokens(const ModelConfig& cfg, std::span<const std::size_t> ids) {
  if (ids.empty()) throw ValueError("model: empty token sequence");
  if (ids.size() > cfg.max_len) {
    throw ValueError("model: sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                     std::to_string(cfg.max_len));
  }
  for (std::size_t id : ids) {
    if (id >= cfg.vocab_size) {
      throw ValueError("model: token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

// Runs the encoder and classifier on already-embedded inputs [n,d].
inline GraphTrace forward_graph(const ModelConfig& cfg, const BoundParams& p, ad::Var inputs) {
  const std::size_t n = inputs.shape().at(0);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  ad::Var q = ad::matmul(inputs, p.w_query);
  ad::Var k = ad::matmul(inputs, p.w_key);
  ad::Var v = ad::matmul(inputs, p.w_value);
  ad::Var attn = ad::softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
  ad::Var hidden = ad::add(inputs, ad::matmul(attn, v));
  auto classify = [&](const ad::Var& rows) {
    ad::Var scores = ad::add(ad::matmul(rows, p.w_out), p.b_out);
    if (!cfg.tied_binary_head) return scores;
    ad::Var expand = inputs.graph().constant(ad::Tensor::matrix(1, 2, {-1.0, 1.0}));
    return ad::matmul(scores, expand);
  };
  ad::Var logits;
  if (cfg.mode == TaskMode::sequence) {
    ad::Var pooled = ad::scale(ad::sum_leading(hidden), 1.0 / static_cast<double>(n));
    logits = ad::reshape(classify(ad::reshape(pooled, {1, cfg.embed_dim})), {cfg.n_classes});
  } else {
    logits = classify(hidden);
  }
  return {inputs, attn, hidden, logits};
}

inline GraphTrace forward_graph(const ModelConfig& cfg, const BoundParams& p,
                                std::span<const std::size_t> ids) {
  check_tokens(cfg, ids);
  return forward_graph(cfg, p, ad::embedding_lookup(p.embedding, ids));
}

// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::vector<double> softmax_values(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& x : p) z += (x = std::exp(x - mx));
  for (double& x : p) x /= z;
  return p;
}

struct ForwardTrace {
  TaskMode mode = TaskMode::sequence;
  std::vector<std::size_t> tokens;
  ad::Tensor logits;            // [M] or [n,M]
  ad::Tensor attention;         // [n,n]
  ad::Tensor input_embeddings;  // [n,d]
  ad::Tensor hidden;            // [n,d]
  // Graph with the input embeddings as a leaf, kept for gradient attribution.
  std::shared_ptr<ad::Graph> graph;
  GraphTrace vars;

  std::size_t predicted() const {
    if (mode != TaskMode::sequence) throw Error("trace: predicted() needs sequence mode");
    return argmax(logits.data);
  }

  std::vector<std::size_t> predicted_tokens() const {
    const std::size_t m = logits.shape.back();
    const std::size_t n = logits.size() / m;
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = argmax(std::span<const double>(logits.data).subspan(i * m, m));
    return out;
  }

  // Softmax probabilities of the (sequence-mode) logits.
  std::vector<double> class_probs() const { return softmax_values(logits.data); }
};

inline ForwardTrace forward(const ModelParams& params, std::span<const std::size_t> ids) {
  check_tokens(params.config, ids);
  ForwardTrace trace;
  trace.mode = params.config.mode;
  trace.tokens.assign(ids.begin(), ids.end());
  trace.graph = std::make_shared<ad::Graph>();
  ad::Graph& g = *trace.graph;
  const BoundParams bound = bind(g, params, false);
  const std::size_t d = params.config.embed_dim;
  ad::Tensor emb = ad::Tensor::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(params.embedding.data.begin() + ids[i] * d, d, emb.data.begin() + i * d);
  ad::Var inputs = g.leaf(std::move(emb), true);
  trace.vars = forward_graph(params.config, bound, inputs);
  trace.logits = ad::Tensor(trace.vars.logits.shape(), trace.vars.logits.value().data);
  trace.attention = ad::Tensor(trace.vars.attention.shape(), trace.vars.attention.value().data);
  trace.input_embeddings = ad::Tensor(inputs.shape(), inputs.value().data);
  trace.hidden = ad::Tensor(trace.vars.hidden.shape(), trace.vars.hidden.value().data);
  return trace;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointSchemaVersion = 1;

inline nlohmann::json checkpoint_to_json(const ModelParams& p, const std::string& config_hash) {
  nlohmann::json j;
  j["schema_version"] = kCheckpointSchemaVersion;
  j["seed"] = p.config.seed;
  j["config_hash"] = config_hash;
  j["steps"] = p.steps;
  j["model"] = {{"vocab_size", p.config.vocab_size}, {"embed_dim", p.config.embed_dim},
                {"n_classes", p.config.n_classes},   {"max_len", p.config.max_len},
                {"mode", to_string(p.config.mode)},  {"init_scale", p.config.init_scale},
                {"tied_binary_head", p.config.tied_binary_head}};
  for (const auto& [name, t] : p.named_tensors()) {
    j["shapes"][name] = t->shape;
    j["weights"][name] = t->data;
  }
  return j;
}

inline ModelParams checkpoint_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    const auto& m = j.at("model");
    cfg.vocab_size = m.at("vocab_size").get<std::size_t>();
    cfg.embed_dim = m.at("embed_dim").get<std::size_t>();
    cfg.n_classes = m.at("n_classes").get<std::size_t>();
    cfg.max_len = m.at("max_len").get<std::size_t>();
    cfg.mode = parse_task_mode(m.at("mode").get<std::string>());
    cfg.init_scale = m.at("init_scale").get<double>();
    cfg.tied_binary_head = m.value("tied_binary_head", false);
    cfg.seed = j.at("seed").get<std::uint64_t>();
    ModelParams p = ModelParams::zeros(cfg);
    p.steps = j.value("steps", std::uint64_t{0});
    for (auto& [name, t] : p.named_tensors()) {
      auto shape = j.at("shapes").at(name).get<ad::Shape>();
      auto data = j.at("weights").at(name).get<std::vector<double>>();
      *t = ad::Tensor(std::move(shape), std::move(data));
    }
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const ModelParams& p,
                            const std::string& config_hash) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out << checkpoint_to_json(p, config_hash).dump() << '\n';
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace ertest
