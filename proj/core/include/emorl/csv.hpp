#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace emorl {

/// Quotes a field when it contains a comma, quote or line break.
std::string csv_field(std::string_view value);

/// Shortest representation that parses back to the same double.
std::string format_number(double value);

/// Comma-separated text with a header row.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  void add_row(std::vector<std::string> row);
  std::size_t rows() const noexcept { return rows_.size(); }
  std::size_t columns() const noexcept { return header_.size(); }
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Header plus rows; handles quoted fields.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

}  // namespace emorl
