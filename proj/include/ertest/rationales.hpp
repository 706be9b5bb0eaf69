#pragma once

// Human rationale sources: per-instance masks stored with the data, and
// task-level lexicons matched against tokens.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ertest/dataset.hpp"
#include "ertest/errors.hpp"

namespace ertest {

// Which side of the mask a lexicon match lands on. Sentiment lexicons list
// important tokens; identity-term lexicons for hate speech list tokens the
// model should ignore.
enum class LexiconPolarity { important_if_matched, unimportant_if_matched };

inline std::string to_string(LexiconPolarity p) {
  return p == LexiconPolarity::important_if_matched ? "important_if_matched" : "unimportant_if_matched";
}

inline LexiconPolarity parse_lexicon_polarity(const std::string& s) {
  if (s == "important_if_matched") return LexiconPolarity::important_if_matched;
  if (s == "unimportant_if_matched") return LexiconPolarity::unimportant_if_matched;
  throw ValueError("unknown lexicon polarity: " + s);
}

inline std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

inline constexpr std::size_t kMaxNgram = 3;

class Lexicon {
 public:
  // entries: n-gram (space separated) -> sentiment tag. Tags only matter when
  // merging; they may be empty.
  Lexicon(std::map<std::string, std::string> entries, LexiconPolarity polarity, std::string name = {})
      : polarity_(polarity), name_(std::move(name)) {
    if (entries.empty()) throw ValueError("lexicon: no entries");
    for (auto& [gram, tag] : entries) {
      const auto words = split(gram);
      if (words.empty() || words.size() > kMaxNgram) {
        throw ValueError("lexicon: entry '" + gram + "' must have 1 to 3 tokens");
      }
      std::string key = join(words);
      if (!entries_.emplace(key, tag).second) throw ValueError("lexicon: duplicate entry '" + key + "'");
    }
  }

  const std::map<std::string, std::string>& entries() const { return entries_; }
  LexiconPolarity polarity() const { return polarity_; }
  const std::string& name() const { return name_; }
  bool contains(const std::string& gram) const { return entries_.count(join(split(gram))) > 0; }

  bool operator==(const Lexicon& o) const { return entries_ == o.entries_ && polarity_ == o.polarity_; }

  static std::vector<std::string> split(const std::string& gram) {
    std::istringstream in(lowercase(gram));
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    return words;
  }

  static std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
    return out;
  }

 private:
  std::map<std::string, std::string> entries_;
  LexiconPolarity polarity_;
  std::string name_;
};

struct HumanRationale {
  std::vector<int> mask;
  std::string source;  // "instance" or "lexicon:<name>"
};

// Positions covered by any matching n-gram (union of overlapping matches).
inline std::vector<int> lexicon_hits(const Lexicon& lex, const std::vector<std::string>& tokens) {
  std::vector<std::string> low;
  low.reserve(tokens.size());
  for (const auto& t : tokens) low.push_back(lowercase(t));
  std::vector<int> hit(tokens.size(), 0);
  for (std::size_t i = 0; i < low.size(); ++i) {
    std::string gram;
    for (std::size_t n = 1; n <= kMaxNgram && i + n <= low.size(); ++n) {
      gram += (n == 1 ? "" : " ") + low[i + n - 1];
      if (lex.entries().count(gram)) std::fill(hit.begin() + static_cast<std::ptrdiff_t>(i),
                                               hit.begin() + static_cast<std::ptrdiff_t>(i + n), 1);
    }
  }
  return hit;
}

// Returns nullopt when nothing matches under important_if_matched; that
// instance then trains with the task loss only.
inline std::optional<HumanRationale> match_lexicon(const Lexicon& lex, const std::vector<std::string>& tokens) {
  if (tokens.empty()) throw ValueError("match_lexicon: empty token sequence");
  auto hit = lexicon_hits(lex, tokens);
  const bool any = std::find(hit.begin(), hit.end(), 1) != hit.end();
  HumanRationale r;
  r.source = "lexicon:" + lex.name();
  if (lex.polarity() == LexiconPolarity::important_if_matched) {
    if (!any) return std::nullopt;
    r.mask = std::move(hit);
  } else {
    r.mask.resize(hit.size());
    for (std::size_t i = 0; i < hit.size(); ++i) r.mask[i] = 1 - hit[i];
  }
  return r;
}

// Union of both lexicons; an n-gram carrying different tags in the sources is
// dropped.
inline Lexicon merge_lexicons(const Lexicon& a, const Lexicon& b) {
  if (a.polarity() != b.polarity()) {
    throw ValueError("merge_lexicons: polarity conventions differ (" + to_string(a.polarity()) + " vs " +
                     to_string(b.polarity()) + ")");
  }
  std::map<std::string, std::string> merged = a.entries();
  std::vector<std::string> conflicts;
  for (const auto& [gram, tag] : b.entries()) {
    auto [it, inserted] = merged.emplace(gram, tag);
    if (!inserted && it->second != tag) conflicts.push_back(gram);
  }
  for (const auto& g : conflicts) merged.erase(g);
  if (merged.empty()) throw ValueError("merge_lexicons: every entry conflicts");
  std::string name = a.name() == b.name() ? a.name() : a.name() + "+" + b.name();
  return Lexicon(std::move(merged), a.polarity(), std::move(name));
}

inline double coverage(const Lexicon& lex, const Dataset& data) {
  if (data.empty()) throw ValueError("coverage: empty dataset");
  std::size_t matched = 0;
  for (const auto& inst : data.instances) {
    const auto hit = lexicon_hits(lex, inst.tokens);
    matched += std::find(hit.begin(), hit.end(), 1) != hit.end();
  }
  return static_cast<double>(matched) / static_cast<double>(data.size());
}

// Attaches lexicon rationales to every instance that has no instance-level
// mask. Returns the number of instances that received one.
inline std::size_t annotate_with_lexicon(Dataset& data, const Lexicon& lex) {
  std::size_t added = 0;
  for (auto& inst : data.instances) {
    if (inst.rationale) continue;
    if (auto r = match_lexicon(lex, inst.tokens)) {
      inst.rationale = std::move(r->mask);
      ++added;
    }
  }
  return added;
}

// Lexicon text format: one `ngram<TAB>tag` per line. An optional first line
// `# polarity: unimportant_if_matched` selects the convention; other lines
// starting with '#' are comments.
inline Lexicon read_lexicon(std::istream& in, std::string name = {}) {
  std::map<std::string, std::string> entries;
  LexiconPolarity polarity = LexiconPolarity::important_if_matched;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (line[0] == '#') {
      const std::string key = "# polarity:";
      if (line.rfind(key, 0) == 0) {
        std::istringstream rest(line.substr(key.size()));
        std::string value;
        rest >> value;
        polarity = parse_lexicon_polarity(value);
      }
      continue;
    }
    const auto tab = line.find('\t');
    std::string gram = tab == std::string::npos ? line : line.substr(0, tab);
    std::string tag = tab == std::string::npos ? "" : line.substr(tab + 1);
    std::string key = Lexicon::join(Lexicon::split(gram));
    if (key.empty()) throw DataError("lexicon line " + std::to_string(line_no) + ": empty n-gram");
    auto [it, inserted] = entries.emplace(key, tag);
    if (!inserted && it->second != tag) {
      throw DataError("lexicon line " + std::to_string(line_no) + ": '" + key + "' listed with conflicting tags");
    }
  }
  return Lexicon(std::move(entries), polarity, std::move(name));
}

inline Lexicon load_lexicon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open lexicon " + path);
  auto slash = path.find_last_of('/');
  std::string stem = slash == std::string::npos ? path : path.substr(slash + 1);
  return read_lexicon(in, stem.substr(0, stem.find('.')));
}

inline void write_lexicon(std::ostream& out, const Lexicon& lex) {
  out << "# polarity: " << to_string(lex.polarity()) << "\n";
  for (const auto& [gram, tag] : lex.entries()) out << gram << "\t" << tag << "\n";
}

// Annotation budget in percent of the training set. 0 means No-ER and 100
// means every instance is annotated.
struct AnnotationBudget {
  double k_percent = 100.0;

  explicit AnnotationBudget(double k = 100.0) : k_percent(k) {
    if (!(k >= 0.0 && k <= 100.0)) throw ValueError("budget: k must lie in [0, 100]");
  }
  bool no_er() const { return k_percent == 0.0; }
  bool full() const { return k_percent == 100.0; }
};

// Keeps instance-level masks only for the selected ids.
inline Dataset restrict_annotations(Dataset data, const std::vector<std::int64_t>& keep) {
  std::vector<std::int64_t> sorted = keep;
  std::sort(sorted.begin(), sorted.end());
  for (auto& inst : data.instances)
    if (!std::binary_search(sorted.begin(), sorted.end(), inst.id)) inst.rationale.reset();
  return data;
}

}  // namespace ertest
