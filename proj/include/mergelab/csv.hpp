// CSV emission and parsing. Numbers serialize with 9 significant digits so
// 32-bit values round-trip exactly; the CSV files are the durable contract
// between sweep runs and reporting.
#pragma once

#include <string>
#include <vector>

namespace mergelab {

std::string format_g9(double value);

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> columns);
  void add_row(const std::vector<std::string>& cells);
  std::string str() const;
  std::size_t rows() const { return rows_; }

 private:
  std::vector<std::string> columns_;
  std::string body_;
  std::size_t rows_ = 0;
};

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
  double number(std::size_t row, int col) const;
  const std::string& cell(std::size_t row, int col) const;
};

CsvTable parse_csv(const std::string& text, const std::string& origin = "<csv>");
CsvTable read_csv_file(const std::string& path);

}  // namespace mergelab
