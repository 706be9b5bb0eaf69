#pragma once

// Evaluation reports: per-seed metric values with mean, std and significance
// against the No-ER baseline, plus JSON/CSV persistence and a text table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ertest/errors.hpp"
#include "ertest/evaluation.hpp"

namespace ertest {

inline constexpr int kReportSchemaVersion = 1;

struct MetricRow {
  std::string dataset;
  std::string metric;
  bool seen = true;
  bool higher_is_better = true;
  std::vector<std::uint64_t> seeds;
  std::vector<double> values;  // one per seed, same order as `seeds`
  double mean = 0.0;
  std::optional<double> stddev;   // absent with fewer than two seeds
  std::optional<double> p_value;  // absent for the baseline or an undefined test
  bool significant = false;
};

struct SeedFailure {
  std::uint64_t seed = 0;
  std::string message;
};

struct EvalReport {
  std::string name;
  std::string config_hash;
  nlohmann::json config;
  bool is_baseline = false;
  std::string baseline_hash;
  // Models sharing the min-max normalization of functional failure rates.
  std::vector<std::string> model_set;
  std::vector<MetricRow> rows;
  std::vector<SeedFailure> failures;
  std::vector<std::string> notes;
  std::string started_at;
  std::string finished_at;

  bool ok() const { return failures.empty(); }

  const MetricRow* find(const std::string& dataset, const std::string& metric) const {
    for (const auto& r : rows)
      if (r.dataset == dataset && r.metric == metric) return &r;
    return nullptr;
  }

  const MetricRow& at(const std::string& dataset, const std::string& metric) const {
    if (const MetricRow* r = find(dataset, metric)) return *r;
    throw ValueError("report " + name + ": no metric " + dataset + "/" + metric);
  }
};

// Fills mean and sample standard deviation from `values`.
inline void summarize(MetricRow& row) {
  if (row.values.empty()) throw ValueError("report: metric " + row.metric + " has no values");
  row.mean = sample_mean(row.values);
  row.stddev.reset();
  if (row.values.size() >= 2) row.stddev = std::sqrt(sample_variance(row.values));
}

// One-sided Welch test in the direction of improvement over the baseline.
// Leaves p absent when the statistic is undefined.
inline void attach_significance(MetricRow& row, const MetricRow& baseline) {
  row.p_value.reset();
  row.significant = false;
  if (row.values.size() < 2 || baseline.values.size() < 2) return;
  try {
    const SignificanceResult r = row.higher_is_better ? welch_t_test(row.values, baseline.values)
                                                      : welch_t_test(baseline.values, row.values);
    row.p_value = r.p_value;
    row.significant = r.significant;
  } catch (const ValueError&) {
  }
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json();
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& m : r.rows) {
    rows.push_back({{"dataset", m.dataset},
                    {"metric", m.metric},
                    {"split", m.seen ? "seen" : "unseen"},
                    {"higher_is_better", m.higher_is_better},
                    {"seeds", m.seeds},
                    {"values", m.values},
                    {"mean", m.mean},
                    {"std", optional_json(m.stddev)},
                    {"p_value", optional_json(m.p_value)},
                    {"significant", m.significant}});
  }
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : r.failures) failures.push_back({{"seed", f.seed}, {"message", f.message}});
  return {{"schema_version", kReportSchemaVersion},
          {"name", r.name},
          {"config_hash", r.config_hash},
          {"config", r.config},
          {"is_baseline", r.is_baseline},
          {"baseline_hash", r.baseline_hash},
          {"model_set", r.model_set},
          {"rows", rows},
          {"failures", failures},
          {"notes", r.notes},
          {"started_at", r.started_at},
          {"finished_at", r.finished_at}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) throw DataError("report: unsupported schema_version");
    EvalReport r;
    r.name = j.at("name").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config = j.value("config", nlohmann::json::object());
    r.is_baseline = j.value("is_baseline", false);
    r.baseline_hash = j.value("baseline_hash", "");
    r.model_set = j.value("model_set", std::vector<std::string>{});
    for (const auto& m : j.at("rows")) {
      MetricRow row;
      row.dataset = m.at("dataset").get<std::string>();
      row.metric = m.at("metric").get<std::string>();
      row.seen = m.at("split").get<std::string>() == "seen";
      row.higher_is_better = m.at("higher_is_better").get<bool>();
      row.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
      row.values = m.at("values").get<std::vector<double>>();
      row.mean = m.at("mean").get<double>();
      if (!m.at("std").is_null()) row.stddev = m.at("std").get<double>();
      if (!m.at("p_value").is_null()) row.p_value = m.at("p_value").get<double>();
      row.significant = m.at("significant").get<bool>();
      r.rows.push_back(std::move(row));
    }
    for (const auto& f : j.value("failures", nlohmann::json::array()))
      r.failures.push_back({f.at("seed").get<std::uint64_t>(), f.at("message").get<std::string>()});
    r.notes = j.value("notes", std::vector<std::string>{});
    r.started_at = j.value("started_at", "");
    r.finished_at = j.value("finished_at", "");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw DataError("csv: unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

inline constexpr const char* kReportCsvHeader =
    "config,config_hash,dataset,split,metric,mean,std,p_value,significant,n_seeds";

struct ReportCsvRecord {
  std::string config;
  std::string config_hash;
  std::string dataset;
  std::string split;
  std::string metric;
  double mean = 0.0;
  std::optional<double> stddev;
  std::optional<double> p_value;
  bool significant = false;
  std::size_t n_seeds = 0;

  bool operator==(const ReportCsvRecord&) const = default;
};

inline std::vector<ReportCsvRecord> report_records(const std::vector<EvalReport>& reports) {
  std::vector<ReportCsvRecord> out;
  for (const auto& r : reports)
    for (const auto& m : r.rows)
      out.push_back({r.name, r.config_hash, m.dataset, m.seen ? "seen" : "unseen", m.metric, m.mean, m.stddev,
                     m.p_value, m.significant, m.values.size()});
  return out;
}

inline void write_report_csv(std::ostream& out, const std::vector<EvalReport>& reports) {
  out << kReportCsvHeader << "\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& rec : report_records(reports)) {
    out << csv_field(rec.config) << ',' << rec.config_hash << ',' << csv_field(rec.dataset) << ',' << rec.split
        << ',' << csv_field(rec.metric) << ',' << format_double(rec.mean) << ',' << opt(rec.stddev) << ','
        << opt(rec.p_value) << ',' << (rec.significant ? 1 : 0) << ',' << rec.n_seeds << "\n";
  }
}

inline std::vector<ReportCsvRecord> read_report_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader) throw DataError("report csv: missing or unexpected header");
  std::vector<ReportCsvRecord> out;
  std::size_t line_no = 1;
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) {
      throw DataError("report csv line " + std::to_string(line_no) + ": bad number '" + s + "'");
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 10) throw DataError("report csv line " + std::to_string(line_no) + ": expected 10 fields");
    ReportCsvRecord r;
    r.config = f[0];
    r.config_hash = f[1];
    r.dataset = f[2];
    r.split = f[3];
    r.metric = f[4];
    r.mean = number(f[5]);
    if (!f[6].empty()) r.stddev = number(f[6]);
    if (!f[7].empty()) r.p_value = number(f[7]);
    r.significant = f[8] == "1";
    r.n_seeds = static_cast<std::size_t>(number(f[9]));
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text table

// Headline columns: everything except raw per-subtest failure rates. Seen
// columns come first, then unseen, each in order of first appearance.
inline std::vector<std::pair<std::string, std::string>> headline_columns(const std::vector<EvalReport>& reports) {
  std::vector<std::pair<std::string, std::string>> seen, unseen;
  auto add = [](auto& list, const MetricRow& m) {
    std::pair<std::string, std::string> key{m.dataset, m.metric};
    if (std::find(list.begin(), list.end(), key) == list.end()) list.push_back(key);
  };
  for (const auto& r : reports)
    for (const auto& m : r.rows) {
      if (m.metric.rfind("failure_rate/", 0) == 0) continue;
      add(m.seen ? seen : unseen, m);
    }
  seen.insert(seen.end(), unseen.begin(), unseen.end());
  return seen;
}

// Aligned table, one row per report. Cells are "mean ± std"; a trailing "*"
// marks p < 0.05 against the baseline.
inline std::string render_report(const std::vector<EvalReport>& reports) {
  const auto columns = headline_columns(reports);
  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header = {"config"};
  std::vector<std::string> split_row = {""};
  for (const auto& [ds, metric] : columns) header.push_back(ds + "/" + metric);
  for (const auto& [ds, metric] : columns) {
    bool seen = true;
    for (const auto& r : reports)
      if (const MetricRow* m = r.find(ds, metric)) seen = m->seen;
    split_row.push_back(seen ? "seen" : "unseen");
  }
  grid.push_back(split_row);
  grid.push_back(header);
  for (const auto& r : reports) {
    std::vector<std::string> row = {r.name + (r.ok() ? "" : " (partial)")};
    for (const auto& [ds, metric] : columns) {
      const MetricRow* m = r.find(ds, metric);
      if (!m) {
        row.push_back("-");
        continue;
      }
      char buf[64];
      if (m->stddev) std::snprintf(buf, sizeof buf, "%.4f ± %.4f", m->mean, *m->stddev);
      else std::snprintf(buf, sizeof buf, "%.4f", m->mean);
      std::string cell = buf;
      if (m->p_value && *m->p_value < kSignificanceLevel) cell += "*";
      row.push_back(cell);
    }
    grid.push_back(std::move(row));
  }
  // "±" is two bytes but one column wide.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : grid)
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  std::ostringstream out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (std::size_t c = 0; c < grid[i].size(); ++c) {
      out << grid[i][c] << std::string(widths[c] - width(grid[i][c]), ' ');
      if (c + 1 < grid[i].size()) out << "  ";
    }
    out << "\n";
    if (i == 1) {
      for (std::size_t c = 0; c < widths.size(); ++c) out << std::string(widths[c], '-') << (c + 1 < widths.size() ? "  " : "");
      out << "\n";
    }
  }
  return out.str();
}

}  // namespace ertest
