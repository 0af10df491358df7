#pragma once

#include <string>
#include <vector>

namespace fvae {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    int64_t column(const std::string& name) const;
    std::vector<double> column_values(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);

// Appends one row, writing the header first if the file is new/empty.
// Comma-separated, LF line endings.
void append_csv_row(const std::string& path, const std::vector<std::string>& header,
                    const std::vector<double>& values);

}  // namespace fvae
