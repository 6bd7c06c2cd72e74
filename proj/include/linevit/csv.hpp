#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace linevit::csv {

// Minimal CSV table. Fields are kept as strings; callers parse on access.
// The dialect is deliberately strict: comma separator, no quoting, "."
// decimal point, UTF-8, one header row. Nothing this project writes ever
// needs escaping, and write_csv rejects fields that would.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Column index by name; throws std::out_of_range listing the name.
    std::size_t col(const std::string& name) const;
    bool has_col(const std::string& name) const;

    const std::string& cell(std::size_t row, const std::string& name) const {
        return rows.at(row)[col(name)];
    }
    double num(std::size_t row, const std::string& name) const;

    // Throws std::runtime_error naming every column in `required` that is
    // absent from the header.
    void require_columns(const std::vector<std::string>& required) const;
};

Table read_csv(const std::string& path);
Table parse_csv(const std::string& text);
void write_csv(const std::string& path, const Table& table);
std::string to_string(const Table& table);

// Fixed-format float for reproducible output files.
std::string fmt(double v, int precision = 6);
// Shortest round-trip representation (used where exact values matter).
std::string fmt_exact(double v);

} // namespace linevit::csv
