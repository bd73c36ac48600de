#pragma once

#include <fstream>
#include <string>
#include <vector>

namespace vitkd {

// Append-only training log. One CSV per run; first column is always "step"
// and appended steps must be strictly increasing.
class MetricsWriter {
public:
    MetricsWriter(const std::string& path, std::vector<std::string> columns);

    void append(const std::vector<double>& row);
    const std::vector<std::string>& columns() const { return columns_; }

private:
    std::vector<std::string> columns_;
    std::ofstream out_;
    std::string path_;
    double last_step_ = -1.0;
};

struct MetricsTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    // Column index by name; -1 if absent.
    int64_t column(const std::string& name) const;
};

MetricsTable read_metrics_csv(const std::string& path);

// Fixed-width text rendering for terminal reports.
std::string format_table(const std::vector<std::string>& columns,
                         const std::vector<std::vector<std::string>>& rows);
std::string format_metric(double v);

}  // namespace vitkd
