#include "elat/csv.hpp"

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace elat::csv {

std::string format(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string format(std::optional<double> v) { return v ? format(*v) : std::string(); }

Writer::Writer(const std::filesystem::path& path, const std::vector<std::string>& header)
    : out_(path), columns_(header.size()), path_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
}

Writer& Writer::cell(std::string_view text) {
    if (filled_ == columns_) throw std::logic_error("csv: too many cells in a row of " + path_.string());
    out_ << (filled_ ? "," : "") << text;
    ++filled_;
    return *this;
}

void Writer::end_row() {
    if (filled_ != columns_) throw std::logic_error("csv: short row in " + path_.string());
    out_ << '\n';
    filled_ = 0;
    if (!out_) throw std::runtime_error("write failed: " + path_.string());
}

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

std::size_t Table::column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    throw std::runtime_error("csv: missing column '" + std::string(name) + "'");
}

std::optional<double> Table::maybe_number(std::size_t row, std::string_view name) const {
    const std::string& s = rows.at(row).at(column(name));
    if (s.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) throw std::runtime_error("csv: bad number '" + s + "'");
    return v;
}

double Table::number(std::size_t row, std::string_view name) const {
    auto v = maybe_number(row, name);
    if (!v) throw std::runtime_error("csv: empty cell in column '" + std::string(name) + "'");
    return *v;
}

std::size_t Table::count(std::size_t row, std::string_view name) const {
    return static_cast<std::size_t>(std::stoull(rows.at(row).at(column(name))));
}

Table read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty csv " + path.string());
    t.header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto row = split(line);
        if (row.size() != t.header.size()) throw std::runtime_error("csv: ragged row in " + path.string());
        t.rows.push_back(std::move(row));
    }
    return t;
}

}  // namespace elat::csv
