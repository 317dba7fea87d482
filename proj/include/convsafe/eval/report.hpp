#pragma once

// Tabular metric reports: one keyed row per slice/model, fixed column order,
// rendered as Markdown or RFC 4180 CSV. Absent metrics stay absent.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "convsafe/error.hpp"
#include "convsafe/eval/metrics.hpp"

namespace convsafe::eval {

struct EvalReport {
  struct Row {
    std::string key;
    std::vector<std::optional<double>> values;
    bool operator==(const Row&) const = default;
  };

  std::string key_name = "slice";
  std::vector<std::string> columns;
  std::vector<Row> rows;

  void add(std::string key, std::vector<std::optional<double>> values) {
    if (values.size() != columns.size()) throw DimensionMismatch(columns.size(), values.size());
    rows.push_back({std::move(key), std::move(values)});
  }

  const Row* find(const std::string& key) const {
    for (const auto& r : rows)
      if (r.key == key) return &r;
    return nullptr;
  }

  std::optional<double> get(const std::string& key, const std::string& column) const {
    const Row* r = find(key);
    if (!r) return std::nullopt;
    for (std::size_t c = 0; c < columns.size(); ++c)
      if (columns[c] == column) return r->values[c];
    return std::nullopt;
  }

  bool operator==(const EvalReport&) const = default;
};

// Shortest representation that parses back to the same double.
inline std::string format_exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_cell(double v) {
  if (std::isfinite(v) && v == std::floor(v) && std::abs(v) < 1e15) return format_exact(v);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::optional<double> percent(std::optional<double> v) {
  if (v) return *v * 100.0;
  return std::nullopt;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void write_markdown(std::ostream& out, const EvalReport& r) {
  out << "| " << r.key_name;
  for (const auto& c : r.columns) out << " | " << c;
  out << " |\n|---";
  for (std::size_t i = 0; i < r.columns.size(); ++i) out << "|---:";
  out << "|\n";
  for (const auto& row : r.rows) {
    out << "| " << row.key;
    for (const auto& v : row.values) out << " | " << (v ? format_cell(*v) : "-");
    out << " |\n";
  }
}

inline void write_csv(std::ostream& out, const EvalReport& r) {
  out << csv_quote(r.key_name);
  for (const auto& c : r.columns) out << ',' << csv_quote(c);
  out << "\r\n";
  for (const auto& row : r.rows) {
    out << csv_quote(row.key);
    for (const auto& v : row.values) {
      out << ',';
      if (v) out << format_exact(*v);
    }
    out << "\r\n";
  }
}

enum class ReportFormat { Markdown, CSV };

inline std::string emit_report(const EvalReport& r, ReportFormat f) {
  std::ostringstream out;
  if (f == ReportFormat::Markdown)
    write_markdown(out, r);
  else
    write_csv(out, r);
  return out.str();
}

inline EvalReport read_csv_report(std::istream& in) {
  EvalReport r;
  std::string line;
  bool header = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = parse_csv_record(line);
    if (header) {
      if (f.empty()) throw SchemaError("report CSV has an empty header");
      r.key_name = f[0];
      r.columns.assign(f.begin() + 1, f.end());
      header = false;
      continue;
    }
    if (f.size() != r.columns.size() + 1)
      throw SchemaError("report CSV line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
    EvalReport::Row row{f[0], {}};
    for (std::size_t c = 1; c < f.size(); ++c) {
      if (f[c].empty()) {
        row.values.push_back(std::nullopt);
        continue;
      }
      double v = 0.0;
      auto [p, ec] = std::from_chars(f[c].data(), f[c].data() + f[c].size(), v);
      if (ec != std::errc() || p != f[c].data() + f[c].size())
        throw SchemaError("report CSV line " + std::to_string(lineno) + ": bad number \"" + f[c] + "\"");
      row.values.push_back(v);
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Classifier slices
// ---------------------------------------------------------------------------

// Per-utterance labels of one thread, index = utterance idx - 1 (1 = offensive).
struct ThreadPredictions {
  std::vector<std::size_t> pred;
  std::vector<std::size_t> gold;
};

// Offensive-class F1 on all utterances, u_1 only, and replies u_i (i >= 2).
// Empty slices are omitted.
inline EvalReport offensive_slices(const std::vector<ThreadPredictions>& threads) {
  std::vector<std::size_t> all_p, all_g, first_p, first_g, reply_p, reply_g;
  for (const auto& t : threads) {
    if (t.pred.size() != t.gold.size()) throw LengthMismatch(t.pred.size(), t.gold.size());
    for (std::size_t i = 0; i < t.pred.size(); ++i) {
      all_p.push_back(t.pred[i]);
      all_g.push_back(t.gold[i]);
      (i == 0 ? first_p : reply_p).push_back(t.pred[i]);
      (i == 0 ? first_g : reply_g).push_back(t.gold[i]);
    }
  }
  EvalReport r;
  r.columns = {"n", "precision", "recall", "f1"};
  auto slice = [&](const char* name, const std::vector<std::size_t>& p, const std::vector<std::size_t>& g) {
    if (p.empty()) return;
    const auto m = f1(p, g, std::size_t{1});
    r.add(name, {static_cast<double>(p.size()), m.precision, m.recall, m.f1});
  };
  slice("all", all_p, all_g);
  slice("first", first_p, first_g);
  slice("reply", reply_p, reply_g);
  return r;
}

// Stance of u_i toward u_j (j < i); labels 0 neutral, 1 agree, 2 disagree.
struct PairPrediction {
  std::size_t i = 2, j = 1;
  std::size_t pred = 0, gold = 0;
};

inline EvalReport stance_slices(const std::vector<PairPrediction>& pairs) {
  std::vector<std::size_t> all_p, all_g, adj_p, adj_g;
  for (const auto& p : pairs) {
    if (p.j == 0 || p.j >= p.i) throw UsageError("stance pair must satisfy 0 < j < i");
    all_p.push_back(p.pred);
    all_g.push_back(p.gold);
    if (p.i == p.j + 1) {
      adj_p.push_back(p.pred);
      adj_g.push_back(p.gold);
    }
  }
  EvalReport r;
  r.columns = {"n", "f1_neutral", "f1_agree", "f1_disagree", "macro_f1"};
  auto slice = [&](const char* name, const std::vector<std::size_t>& p, const std::vector<std::size_t>& g) {
    if (p.empty()) return;
    const auto per = per_class_f1(p, g, std::vector<std::size_t>{0, 1, 2});
    r.add(name, {static_cast<double>(p.size()), per[0], per[1], per[2], macro_f1(per)});
  };
  slice("all_pairs", all_p, all_g);
  slice("adjacent_pairs", adj_p, adj_g);
  return r;
}

}  // namespace convsafe::eval
