#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ertest/errors.hpp"

namespace ertest {

inline constexpr int kDatasetSchemaVersion = 1;

struct Instance {
  std::int64_t id = 0;
  std::vector<std::string> tokens;
  int label = 0;
  // Token-classification mode: one label per token. Empty in sequence mode.
  std::vector<int> token_labels;
  // Absent means "not annotated"; an all-zero mask is a legal annotation.
  std::optional<std::vector<int>> rationale;
  std::vector<std::string> group_tags;
  std::optional<std::int64_t> contrast_of;
  std::string perturbation;

  bool annotated() const { return rationale.has_value(); }
};

struct Dataset {
  std::string name;
  std::vector<Instance> instances;

  std::size_t size() const { return instances.size(); }
  bool empty() const { return instances.empty(); }
  const Instance& operator[](std::size_t i) const { return instances[i]; }
  Instance& operator[](std::size_t i) { return instances[i]; }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(instances.size());
    for (const auto& inst : instances) out.push_back(inst.label);
    return out;
  }
};

// Token -> id map. Id 0 is reserved for unknown tokens.
class Vocab {
 public:
  static constexpr std::size_t kUnk = 0;

  Vocab() { add("<unk>"); }

  std::size_t add(const std::string& token) {
    auto [it, inserted] = index_.try_emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    for (const auto& t : tokens) v.add(t);
    return v;
  }

  static Vocab build(const Dataset& data) {
    Vocab v;
    for (const auto& inst : data.instances)
      for (const auto& t : inst.tokens) v.add(t);
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline nlohmann::json instance_to_json(const Instance& inst) {
  nlohmann::json j;
  j["schema_version"] = kDatasetSchemaVersion;
  j["id"] = inst.id;
  j["tokens"] = inst.tokens;
  if (inst.token_labels.empty()) {
    j["label"] = inst.label;
  } else {
    j["label"] = inst.token_labels;
  }
  if (inst.rationale) j["rationale"] = *inst.rationale;
  if (!inst.group_tags.empty()) j["group_tags"] = inst.group_tags;
  if (inst.contrast_of) j["contrast_of"] = *inst.contrast_of;
  if (!inst.perturbation.empty()) j["perturbation"] = inst.perturbation;
  return j;
}

// Parses one JSONL record. Problems are appended to `problems`; returns
// nullopt when the record is unusable.
inline std::optional<Instance> instance_from_json(const nlohmann::json& j, std::int64_t default_id,
                                                  std::vector<std::string>& problems) {
  if (!j.is_object()) {
    problems.push_back("not a JSON object");
    return std::nullopt;
  }
  Instance inst;
  inst.id = default_id;
  const std::size_t before = problems.size();
  try {
    if (j.contains("id")) inst.id = j.at("id").get<std::int64_t>();
    if (!j.contains("tokens") || !j["tokens"].is_array()) {
      problems.push_back("missing field 'tokens'");
    } else {
      inst.tokens = j["tokens"].get<std::vector<std::string>>();
      if (inst.tokens.empty()) problems.push_back("'tokens' is empty");
    }
    if (!j.contains("label")) {
      problems.push_back("missing field 'label'");
    } else if (j["label"].is_array()) {
      inst.token_labels = j["label"].get<std::vector<int>>();
      if (inst.token_labels.size() != inst.tokens.size()) {
        problems.push_back("label length " + std::to_string(inst.token_labels.size()) +
                           " != token count " + std::to_string(inst.tokens.size()));
      }
    } else {
      inst.label = j["label"].get<int>();
    }
    if (j.contains("rationale") && !j["rationale"].is_null()) {
      auto mask = j["rationale"].get<std::vector<int>>();
      if (mask.size() != inst.tokens.size()) {
        problems.push_back("rationale length " + std::to_string(mask.size()) +
                           " != token count " + std::to_string(inst.tokens.size()));
      }
      for (int b : mask) {
        if (b != 0 && b != 1) {
          problems.push_back("rationale values must be 0 or 1");
          break;
        }
      }
      inst.rationale = std::move(mask);
    }
    if (j.contains("group_tags")) inst.group_tags = j["group_tags"].get<std::vector<std::string>>();
    if (j.contains("contrast_of") && !j["contrast_of"].is_null())
      inst.contrast_of = j["contrast_of"].get<std::int64_t>();
    if (j.contains("perturbation")) inst.perturbation = j["perturbation"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    problems.push_back(std::string("type error: ") + e.what());
  }
  if (problems.size() != before) return std::nullopt;
  return inst;
}

inline Dataset read_jsonl(std::istream& in, std::string name = {}) {
  Dataset data;
  data.name = std::move(name);
  std::vector<std::string> errors;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<std::string> problems;
    std::optional<Instance> inst;
    try {
      inst = instance_from_json(nlohmann::json::parse(line), static_cast<std::int64_t>(data.size()),
                                problems);
    } catch (const nlohmann::json::parse_error& e) {
      problems.push_back(std::string("invalid JSON: ") + e.what());
    }
    if (inst) {
      data.instances.push_back(std::move(*inst));
    } else {
      for (const auto& p : problems) errors.push_back("line " + std::to_string(lineno) + ": " + p);
    }
  }
  if (!errors.empty()) {
    std::string msg = "dataset '" + data.name + "' has " + std::to_string(errors.size()) +
                      " malformed record(s):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw DataError(msg);
  }
  return data;
}

inline Dataset ingest_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file: " + path);
  return read_jsonl(in, path);
}

inline void write_jsonl(std::ostream& out, const Dataset& data) {
  for (const auto& inst : data.instances) out << instance_to_json(inst).dump() << '\n';
}

inline void write_jsonl(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset file: " + path);
  write_jsonl(out, data);
}

}  // namespace ertest
