#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ntkadv {

/// Round-trippable, locale-independent formatting ("nan" for undefined values).
[[nodiscard]] std::string format_real(double v);
[[nodiscard]] std::string format_real(const std::optional<double>& v);

/// Minimal CSV writer; every numeric field goes through format_real so reruns are byte-identical.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);

    CsvWriter& field(std::string_view text);
    CsvWriter& field(double v) { return field(format_real(v)); }
    CsvWriter& field(const std::optional<double>& v) { return field(format_real(v)); }
    CsvWriter& field(int v) { return field(std::to_string(v)); }
    CsvWriter& field(long v) { return field(std::to_string(v)); }
    CsvWriter& field(long long v) { return field(std::to_string(v)); }
    CsvWriter& field(bool v) { return field(v ? std::string_view("1") : std::string_view("0")); }
    void end_row();

private:
    std::ofstream out_;
    bool row_started_ = false;
};

void write_matrix_csv(const Eigen::MatrixXd& m, const std::filesystem::path& path);

/// Parsed CSV: header names plus string cells. Used by tests and fixture tooling.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    [[nodiscard]] std::size_t column(std::string_view name) const;
};

[[nodiscard]] CsvTable read_csv(const std::filesystem::path& path);

}  // namespace ntkadv
