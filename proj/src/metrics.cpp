#include "vitkd/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "vitkd/error.hpp"

namespace vitkd {

std::string format_metric(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

MetricsWriter::MetricsWriter(const std::string& path, std::vector<std::string> columns)
    : columns_(std::move(columns)), path_(path) {
    if (columns_.empty() || columns_[0] != "step")
        throw ContractError("metrics columns must start with 'step'");
    out_.open(path, std::ios::trunc);
    if (!out_) throw ConfigError("cannot write metrics file: " + path);
    for (size_t i = 0; i < columns_.size(); ++i) {
        if (i) out_ << ",";
        out_ << columns_[i];
    }
    out_ << "\n";
    out_.flush();
}

void MetricsWriter::append(const std::vector<double>& row) {
    if (row.size() != columns_.size())
        throw ContractError("metrics row has " + std::to_string(row.size()) + " values, expected " +
                            std::to_string(columns_.size()));
    if (row[0] <= last_step_)
        throw ContractError("metrics steps must be strictly increasing (got " +
                            format_metric(row[0]) + " after " + format_metric(last_step_) + ")");
    last_step_ = row[0];
    for (size_t i = 0; i < row.size(); ++i) {
        if (i) out_ << ",";
        out_ << format_metric(row[i]);
    }
    out_ << "\n";
    out_.flush();
    if (!out_) throw ConfigError("write failed on metrics file: " + path_);
}

int64_t MetricsTable::column(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i)
        if (columns[i] == name) return static_cast<int64_t>(i);
    return -1;
}

MetricsTable read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open metrics file: " + path);
    MetricsTable t;
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("metrics file is empty: " + path);
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',')) t.columns.push_back(cell);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw ConfigError("metrics file " + path + ": bad number '" + cell + "'");
            }
        }
        if (row.size() != t.columns.size())
            throw ConfigError("metrics file " + path + ": ragged row");
        t.rows.push_back(std::move(row));
    }
    return t;
}

std::string format_table(const std::vector<std::string>& columns,
                         const std::vector<std::vector<std::string>>& rows) {
    std::vector<size_t> width(columns.size());
    for (size_t c = 0; c < columns.size(); ++c) width[c] = columns[c].size();
    for (const auto& row : rows)
        for (size_t c = 0; c < row.size() && c < width.size(); ++c)
            width[c] = std::max(width[c], row[c].size());
    std::ostringstream out;
    auto emit = [&](const std::vector<std::string>& row) {
        for (size_t c = 0; c < width.size(); ++c) {
            const std::string& v = c < row.size() ? row[c] : "";
            out << v << std::string(width[c] - v.size(), ' ');
            out << (c + 1 < width.size() ? "  " : "");
        }
        out << "\n";
    };
    emit(columns);
    std::vector<std::string> rule;
    for (size_t c = 0; c < width.size(); ++c) rule.push_back(std::string(width[c], '-'));
    emit(rule);
    for (const auto& row : rows) emit(row);
    return out.str();
}

}  // namespace vitkd
