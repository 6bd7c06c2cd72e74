#include "linevit/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace linevit::csv {

std::size_t Table::col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    throw std::out_of_range("csv: no column named '" + name + "'");
}

bool Table::has_col(const std::string& name) const {
    for (const auto& h : header) {
        if (h == name) return true;
    }
    return false;
}

double Table::num(std::size_t row, const std::string& name) const {
    const std::string& s = cell(row, name);
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("csv: cell '" + s + "' in column '" + name +
                                 "' is not numeric");
    }
}

void Table::require_columns(const std::vector<std::string>& required) const {
    std::string missing;
    for (const auto& name : required) {
        if (!has_col(name)) {
            if (!missing.empty()) missing += ", ";
            missing += name;
        }
    }
    if (!missing.empty()) {
        throw std::runtime_error("csv: missing required columns: " + missing);
    }
}

static std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

Table parse_csv(const std::string& text) {
    Table t;
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        auto fields = split_line(line);
        if (first) {
            t.header = std::move(fields);
            first = false;
        } else {
            if (fields.size() != t.header.size()) {
                throw std::runtime_error("csv: row has " + std::to_string(fields.size()) +
                                         " fields, header has " +
                                         std::to_string(t.header.size()));
            }
            t.rows.push_back(std::move(fields));
        }
    }
    if (first) throw std::runtime_error("csv: empty input");
    return t;
}

Table read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("csv: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_csv(buf.str());
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string(e.what()) + " (" + path + ")");
    }
}

static void check_field(const std::string& f) {
    if (f.find(',') != std::string::npos || f.find('"') != std::string::npos ||
        f.find('\n') != std::string::npos) {
        throw std::runtime_error("csv: field would need quoting: " + f);
    }
}

std::string to_string(const Table& table) {
    std::string out;
    auto append_row = [&out](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            check_field(row[i]);
            if (i) out += ',';
            out += row[i];
        }
        out += '\n';
    };
    append_row(table.header);
    for (const auto& row : table.rows) append_row(row);
    return out;
}

void write_csv(const std::string& path, const Table& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("csv: cannot write " + path);
    out << to_string(table);
    if (!out) throw std::runtime_error("csv: write failed for " + path);
}

std::string fmt(double v, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
    return buf;
}

std::string fmt_exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace linevit::csv
