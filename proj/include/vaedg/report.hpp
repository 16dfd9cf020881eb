#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vaedg/harness.hpp"

namespace vaedg {

/// One line of the results CSV: algorithm,variant,target_domain,seed,criterion,accuracy.
/// accuracy is a fraction in [0, 1].
struct ResultRow {
  std::string algorithm;
  std::string variant;
  int target_domain = 0;
  std::uint64_t seed = 0;
  std::string criterion;
  double accuracy = 0.0;

  bool operator==(const ResultRow&) const = default;
};

inline const std::vector<std::string> kDefaultReportCriteria{"training_domain_validation", "oracle", "swad"};

/// Target accuracies of the given criteria; criteria missing from a record are skipped.
std::vector<ResultRow> records_to_rows(const std::vector<RunRecord>& records,
                                       const std::vector<std::string>& criteria = kDefaultReportCriteria);
/// Domain id -> name as recorded in the run records.
std::map<int, std::string> target_names(const std::vector<RunRecord>& records);

std::string write_results_csv(std::vector<ResultRow> rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);
std::vector<ResultRow> read_results_csv(const std::filesystem::path& path);

/// Mean and std in percent.
struct Cell {
  double mean = 0.0;
  double std = 0.0;
  int seeds = 0;
};

struct RowKey {
  std::string algorithm;
  std::string variant;
  std::string criterion;

  auto operator<=>(const RowKey&) const = default;
  std::string label() const;
};

struct TableRow {
  RowKey key;
  std::vector<Cell> cells;  // one per ResultTable::targets entry
  Cell average;
  std::optional<double> diff;
};

struct ResultTable {
  std::vector<int> targets;
  std::vector<std::string> target_names;
  std::vector<TableRow> rows;
  std::optional<RowKey> reference;
  /// Rows the table was aggregated from, in canonical order.
  std::vector<ResultRow> source;

  const TableRow* find(const RowKey& key) const;
};

enum class MissingCellPolicy {
  /// Every row needs every (target, seed) pair present anywhere in the input.
  strict,
  /// Seeds may be missing; each (row, target) cell still needs one record.
  allow_missing_seeds,
};

/// Population mean/std over seeds per cell; the average cell is the mean of
/// the per-target means with the mean of the per-target stds.
ResultTable aggregate(const std::vector<ResultRow>& rows, const std::map<int, std::string>& names = {},
                      MissingCellPolicy policy = MissingCellPolicy::strict);

/// Mean of the cell means and of the cell stds.
Cell average_cell(const std::vector<Cell>& cells);

/// Sets every row's diff to its average minus the reference row's average.
ResultTable diff_column(ResultTable table, const RowKey& reference);
/// "1.45 (down)", "0.18 (up)", "0.00".
std::string format_diff(double diff);
/// "66.14 ± 5.5"
std::string format_cell(const Cell& cell);

enum class ReportFormat { markdown, csv, json };
ReportFormat parse_report_format(const std::string& s);

/// markdown: one column per target plus Avg. (and Diff. when set);
/// csv: the results CSV the table was built from;
/// json: the documented result-table object.
std::string render(const ResultTable& table, ReportFormat format);
nlohmann::json table_to_json(const ResultTable& table);

}  // namespace vaedg
