#include "vaedg/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "vaedg/errors.hpp"

namespace vaedg {

namespace {

int criterion_rank(const std::string& c) {
  const auto it = std::find(kDefaultReportCriteria.begin(), kDefaultReportCriteria.end(), c);
  if (it != kDefaultReportCriteria.end()) return static_cast<int>(it - kDefaultReportCriteria.begin());
  return static_cast<int>(kDefaultReportCriteria.size());
}

bool key_less(const RowKey& a, const RowKey& b) {
  if (a.algorithm != b.algorithm) return a.algorithm < b.algorithm;
  if (a.variant != b.variant) return a.variant < b.variant;
  const int ra = criterion_rank(a.criterion), rb = criterion_rank(b.criterion);
  if (ra != rb) return ra < rb;
  return a.criterion < b.criterion;
}

bool row_less(const ResultRow& a, const ResultRow& b) {
  const RowKey ka{a.algorithm, a.variant, a.criterion}, kb{b.algorithm, b.variant, b.criterion};
  if (key_less(ka, kb)) return true;
  if (key_less(kb, ka)) return false;
  if (a.target_domain != b.target_domain) return a.target_domain < b.target_domain;
  return a.seed < b.seed;
}

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string fixed(double v, int decimals) {
  // Avoid printing "-0.00".
  const double scale = std::pow(10.0, decimals);
  if (std::round(std::abs(v) * scale) == 0.0) v = 0.0;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& what) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw InvalidInput("bad " + what + " '" + s + "'");
  return v;
}

const std::string kCsvHeader = "algorithm,variant,target_domain,seed,criterion,accuracy";

}  // namespace

std::string RowKey::label() const { return algorithm + "/" + variant + "/" + criterion; }

std::vector<ResultRow> records_to_rows(const std::vector<RunRecord>& records, const std::vector<std::string>& criteria) {
  std::vector<ResultRow> rows;
  for (const auto& r : records) {
    if (r.status != "ok") continue;
    for (const auto& c : criteria) {
      const auto it = r.results.find(c);
      if (it == r.results.end()) continue;
      rows.push_back({r.algorithm, r.variant, r.target_domain, r.seed, c, it->second.target_accuracy});
    }
  }
  return rows;
}

std::map<int, std::string> target_names(const std::vector<RunRecord>& records) {
  std::map<int, std::string> names;
  for (const auto& r : records) names[r.target_domain] = r.target_name;
  return names;
}

std::string write_results_csv(std::vector<ResultRow> rows) {
  std::sort(rows.begin(), rows.end(), row_less);
  std::string out = kCsvHeader + "\n";
  for (const auto& r : rows) {
    for (const auto* s : {&r.algorithm, &r.variant, &r.criterion})
      require(s->find_first_of(",\n\"") == std::string::npos, "field contains a separator: " + *s);
    out += r.algorithm + "," + r.variant + "," + std::to_string(r.target_domain) + "," + std::to_string(r.seed) + "," +
           r.criterion + "," + shortest(r.accuracy) + "\n";
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("results CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader) throw InvalidInput("results CSV header must be '" + kCsvHeader + "'");
  std::vector<ResultRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_fields(line);
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (f.size() != 6) throw InvalidInput(where + "expected 6 fields, got " + std::to_string(f.size()));
    try {
      ResultRow r{f[0], f[1], parse_number<int>(f[2], "target_domain"), parse_number<std::uint64_t>(f[3], "seed"),
                  f[4], parse_number<double>(f[5], "accuracy")};
      require(r.accuracy >= 0.0 && r.accuracy <= 1.0, "accuracy outside [0, 1]");
      rows.push_back(std::move(r));
    } catch (const InvalidInput& e) {
      throw InvalidInput(where + e.what());
    }
  }
  return rows;
}

std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_results_csv(ss.str());
}

const TableRow* ResultTable::find(const RowKey& key) const {
  for (const auto& r : rows)
    if (r.key == key) return &r;
  return nullptr;
}

Cell average_cell(const std::vector<Cell>& cells) {
  require(!cells.empty(), "no cells to average");
  Cell avg;
  for (const auto& c : cells) {
    avg.mean += c.mean;
    avg.std += c.std;
    avg.seeds = std::max(avg.seeds, c.seeds);
  }
  avg.mean /= static_cast<double>(cells.size());
  avg.std /= static_cast<double>(cells.size());
  return avg;
}

ResultTable aggregate(const std::vector<ResultRow>& rows, const std::map<int, std::string>& names,
                      MissingCellPolicy policy) {
  require(!rows.empty(), "cannot aggregate an empty grid");
  std::set<int> targets;
  std::set<std::uint64_t> seeds;
  std::map<RowKey, std::map<int, std::map<std::uint64_t, double>>, decltype(&key_less)> grid(&key_less);
  for (const auto& r : rows) {
    targets.insert(r.target_domain);
    seeds.insert(r.seed);
    auto& slot = grid[{r.algorithm, r.variant, r.criterion}][r.target_domain];
    if (!slot.emplace(r.seed, r.accuracy).second)
      throw InvalidInput("duplicate result for " + RowKey{r.algorithm, r.variant, r.criterion}.label() + " target " +
                         std::to_string(r.target_domain) + " seed " + std::to_string(r.seed));
  }

  std::vector<std::string> missing;
  for (const auto& [key, by_target] : grid) {
    for (int t : targets) {
      const auto it = by_target.find(t);
      if (policy == MissingCellPolicy::strict) {
        for (auto s : seeds)
          if (it == by_target.end() || !it->second.count(s))
            missing.push_back(key.label() + " target " + std::to_string(t) + " seed " + std::to_string(s));
      } else if (it == by_target.end()) {
        missing.push_back(key.label() + " target " + std::to_string(t));
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "ragged result grid; missing cells:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw InvalidInput(msg);
  }

  ResultTable table;
  table.targets.assign(targets.begin(), targets.end());
  for (int t : table.targets) {
    const auto it = names.find(t);
    table.target_names.push_back(it != names.end() && !it->second.empty() ? it->second : "domain" + std::to_string(t));
  }
  for (const auto& [key, by_target] : grid) {
    TableRow row;
    row.key = key;
    for (int t : table.targets) {
      const auto& accs = by_target.at(t);
      Cell c;
      c.seeds = static_cast<int>(accs.size());
      for (const auto& [s, a] : accs) c.mean += 100.0 * a;
      c.mean /= c.seeds;
      double ss = 0.0;
      for (const auto& [s, a] : accs) ss += (100.0 * a - c.mean) * (100.0 * a - c.mean);
      c.std = std::sqrt(ss / c.seeds);
      row.cells.push_back(c);
    }
    row.average = average_cell(row.cells);
    table.rows.push_back(std::move(row));
  }
  table.source = rows;
  std::sort(table.source.begin(), table.source.end(), row_less);
  return table;
}

ResultTable diff_column(ResultTable table, const RowKey& reference) {
  const auto* ref = table.find(reference);
  require(ref != nullptr, "reference row " + reference.label() + " not in table");
  const double base = ref->average.mean;
  for (auto& r : table.rows) r.diff = r.average.mean - base;
  table.reference = reference;
  return table;
}

std::string format_diff(double diff) {
  const std::string mag = fixed(std::abs(diff), 2);
  if (mag == "0.00") return mag;
  return mag + (diff > 0 ? " (up)" : " (down)");
}

std::string format_cell(const Cell& cell) { return fixed(cell.mean, 2) + " ± " + fixed(cell.std, 1); }

ReportFormat parse_report_format(const std::string& s) {
  if (s == "markdown" || s == "md") return ReportFormat::markdown;
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw InvalidInput("unknown report format '" + s + "' (markdown, csv, json)");
}

nlohmann::json table_to_json(const ResultTable& table) {
  nlohmann::json targets = nlohmann::json::array();
  for (std::size_t i = 0; i < table.targets.size(); ++i)
    targets.push_back({{"id", table.targets[i]}, {"name", table.target_names[i]}});
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : table.rows) {
    nlohmann::json cells = nlohmann::json::array();
    for (std::size_t i = 0; i < r.cells.size(); ++i)
      cells.push_back({{"target", table.targets[i]},
                       {"mean", r.cells[i].mean},
                       {"std", r.cells[i].std},
                       {"seeds", r.cells[i].seeds}});
    rows.push_back({{"algorithm", r.key.algorithm},
                    {"variant", r.key.variant},
                    {"criterion", r.key.criterion},
                    {"cells", cells},
                    {"average", {{"mean", r.average.mean}, {"std", r.average.std}}},
                    {"diff", r.diff ? nlohmann::json(*r.diff) : nlohmann::json(nullptr)}});
  }
  nlohmann::json ref = nullptr;
  if (table.reference)
    ref = {{"algorithm", table.reference->algorithm},
           {"variant", table.reference->variant},
           {"criterion", table.reference->criterion}};
  return {{"schema", "vaedg.result_table.v1"},
          {"units", "percent"},
          {"std", "population std over seeds; average std is the mean of per-target stds"},
          {"targets", targets},
          {"reference", ref},
          {"rows", rows}};
}

std::string render(const ResultTable& table, ReportFormat format) {
  switch (format) {
    case ReportFormat::csv:
      return write_results_csv(table.source);
    case ReportFormat::json:
      return table_to_json(table).dump(2) + "\n";
    case ReportFormat::markdown:
      break;
  }
  const bool diff = table.reference.has_value();
  std::string out = "| Algorithm | Variant | Selection |";
  for (const auto& n : table.target_names) out += " " + n + " |";
  out += " Avg. |";
  if (diff) out += " Diff. |";
  out += "\n|---|---|---|";
  for (std::size_t i = 0; i < table.target_names.size(); ++i) out += "---|";
  out += "---|";
  if (diff) out += "---|";
  out += "\n";
  for (const auto& r : table.rows) {
    out += "| " + r.key.algorithm + " | " + r.key.variant + " | " + r.key.criterion + " |";
    for (const auto& c : r.cells) out += " " + format_cell(c) + " |";
    out += " " + format_cell(r.average) + " |";
    if (diff) out += " " + (r.diff ? format_diff(*r.diff) : std::string("-")) + " |";
    out += "\n";
  }
  out += "\nAccuracy in percent; mean ± population std over seeds. Avg. std is the mean of the per-target stds.\n";
  return out;
}

}  // namespace vaedg
