#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace elat::csv {

/// Shortest text that parses back to the same double (%.17g).
std::string format(double v);
std::string format(std::optional<double> v);  // empty when absent

class Writer {
public:
    Writer(const std::filesystem::path& path, const std::vector<std::string>& header);
    Writer& cell(std::string_view text);
    Writer& cell(double v) { return cell(format(v)); }
    Writer& cell(std::optional<double> v) { return cell(format(v)); }
    Writer& cell(std::size_t v) { return cell(std::to_string(v)); }
    Writer& cell(bool v) { return cell(v ? std::string_view("1") : std::string_view("0")); }
    /// Ends the current row; throws if the cell count differs from the header.
    void end_row();

private:
    std::ofstream out_;
    std::size_t columns_;
    std::size_t filled_ = 0;
    std::filesystem::path path_;
};

/// Plain comma-separated table (no quoting); the first line is the header.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const;  // throws if missing
    double number(std::size_t row, std::string_view name) const;
    std::optional<double> maybe_number(std::size_t row, std::string_view name) const;
    std::size_t count(std::size_t row, std::string_view name) const;
};

Table read(const std::filesystem::path& path);

}  // namespace elat::csv
