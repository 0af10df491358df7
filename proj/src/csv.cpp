#include "fvae/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fvae {

int64_t CsvTable::column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int64_t>(i);
    throw std::runtime_error("csv: no column named '" + name + "'");
}

std::vector<double> CsvTable::column_values(const std::string& name) const {
    const int64_t c = column(name);
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[static_cast<size_t>(c)]);
    return out;
}

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw std::runtime_error("csv: cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("csv: '" + path + "' is empty");
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) t.header.push_back(cell);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream rs(line);
        std::vector<double> row;
        while (std::getline(rs, cell, ',')) row.push_back(std::stod(cell));
        if (row.size() != t.header.size())
            throw std::runtime_error("csv: ragged row in '" + path + "'");
        t.rows.push_back(std::move(row));
    }
    return t;
}

void append_csv_row(const std::string& path, const std::vector<std::string>& header,
                    const std::vector<double>& values) {
    bool need_header = true;
    {
        std::ifstream probe(path);
        if (probe.good() && probe.peek() != std::ifstream::traits_type::eof()) need_header = false;
    }
    std::ofstream out(path, std::ios::app);
    if (!out.good()) throw std::runtime_error("csv: cannot open '" + path + "' for append");
    auto write_row = [&out](auto begin, auto end, auto fmt) {
        bool first = true;
        for (auto it = begin; it != end; ++it) {
            if (!first) out << ',';
            first = false;
            fmt(*it);
        }
        out << '\n';
    };
    if (need_header)
        write_row(header.begin(), header.end(), [&out](const std::string& s) { out << s; });
    char buf[64];
    write_row(values.begin(), values.end(), [&out, &buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << buf;
    });
}

}  // namespace fvae
