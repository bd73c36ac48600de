#include <doctest.h>

#include <filesystem>

#include "vitkd/error.hpp"
#include "vitkd/metrics.hpp"

using namespace vitkd;
namespace fs = std::filesystem;

namespace {

std::string temp_csv(const char* tag) {
    const fs::path p = fs::temp_directory_path() / (std::string("vitkd_metrics_") + tag + ".csv");
    fs::remove(p);
    return p.string();
}

}  // namespace

TEST_CASE("metrics writer round trips through the reader") {
    const std::string path = temp_csv("roundtrip");
    {
        MetricsWriter w(path, {"step", "lr", "loss_total", "wall_ms"});
        w.append({0, 0.1, 2.5, 12.0});
        w.append({1, 0.2, 2.25, 11.5});
    }
    const MetricsTable t = read_metrics_csv(path);
    CHECK(t.columns == std::vector<std::string>{"step", "lr", "loss_total", "wall_ms"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[1][2] == doctest::Approx(2.25));
    CHECK(t.column("loss_total") == 2);
    CHECK(t.column("nope") == -1);
}

TEST_CASE("metrics steps must be strictly increasing") {
    const std::string path = temp_csv("steps");
    MetricsWriter w(path, {"step", "lr"});
    w.append({0, 0.1});
    CHECK_THROWS_AS(w.append({0, 0.1}), ContractError);
    CHECK_THROWS_AS(w.append({-1, 0.1}), ContractError);
    w.append({5, 0.1});
}

TEST_CASE("metrics writer rejects bad shapes") {
    const std::string path = temp_csv("shape");
    CHECK_THROWS_AS(MetricsWriter(path, {"lr", "step"}), ContractError);
    MetricsWriter w(path, {"step", "lr"});
    CHECK_THROWS_AS(w.append({0.0}), ContractError);
}

TEST_CASE("metrics survive full double precision") {
    const std::string path = temp_csv("precision");
    {
        MetricsWriter w(path, {"step", "lr"});
        w.append({0, 1.2345678901234e-7});
    }
    const MetricsTable t = read_metrics_csv(path);
    CHECK(t.rows[0][1] == doctest::Approx(1.2345678901234e-7).epsilon(1e-9));
}

TEST_CASE("format_table aligns columns") {
    const std::string s =
        format_table({"a", "long_column"}, {{"1", "2"}, {"333", "4"}});
    // every line has the same width
    size_t width = 0;
    size_t line_start = 0;
    for (size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == '\n') {
            if (i > line_start) {
                if (width == 0) width = i - line_start;
                CHECK(i - line_start == width);
            }
            line_start = i + 1;
        }
    }
}
