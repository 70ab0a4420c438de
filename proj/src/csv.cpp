#include "mergelab/csv.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mergelab {

std::string format_g9(double value) {
  if (std::isnan(value)) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return buf;
}

CsvWriter::CsvWriter(std::vector<std::string> columns) : columns_(std::move(columns)) {}

void CsvWriter::add_row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_.size())
    throw std::invalid_argument("csv: row with " + std::to_string(cells.size()) +
                                " cells under " + std::to_string(columns_.size()) + " columns");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) body_ += ',';
    body_ += cells[i];
  }
  body_ += '\n';
  ++rows_;
}

std::string CsvWriter::str() const {
  std::string out;
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (i) out += ',';
    out += columns_[i];
  }
  out += '\n';
  out += body_;
  return out;
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return static_cast<int>(i);
  return -1;
}

const std::string& CsvTable::cell(std::size_t row, int col) const {
  if (col < 0 || row >= rows.size() || static_cast<std::size_t>(col) >= rows[row].size())
    throw std::out_of_range("csv: cell out of range");
  return rows[row][static_cast<std::size_t>(col)];
}

double CsvTable::number(std::size_t row, int col) const {
  const std::string& s = cell(row, col);
  if (s == "nan") return std::nan("");
  return std::stod(s);
}

CsvTable parse_csv(const std::string& text, const std::string& origin) {
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (header) {
      table.columns = std::move(cells);
      header = false;
    } else {
      if (cells.size() != table.columns.size())
        throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": expected " +
                                 std::to_string(table.columns.size()) + " cells, got " +
                                 std::to_string(cells.size()));
      table.rows.push_back(std::move(cells));
    }
  }
  if (header) throw std::runtime_error(origin + ": missing header row");
  return table;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), path);
}

}  // namespace mergelab
