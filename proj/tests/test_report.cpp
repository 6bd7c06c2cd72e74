#include "linevit/report.hpp"

#include "testutil.hpp"

#include <doctest.h>

using namespace linevit;
using namespace linevit::report;

namespace {

csv::Table bins_table() {
    csv::Table t;
    t.header = {"label", "lo", "hi", "center", "n", "mean", "median", "q1", "q3", "p75"};
    for (int b = 0; b < 36; ++b) {
        double center = b * 10.0;
        double median = 10.0 + std::abs(center - 180.0) / 9.0;
        t.rows.push_back({std::to_string(b * 10), csv::fmt(center - 5),
                          csv::fmt(center + 5), csv::fmt(center), "12",
                          csv::fmt(median + 1), csv::fmt(median), csv::fmt(median - 2),
                          csv::fmt(median + 2), csv::fmt(median + 2)});
    }
    return t;
}

csv::Table groups_table() {
    csv::Table t;
    t.header = {"group", "n", "mean", "median", "p75"};
    t.rows = {{"0.0", "10", "12.5", "10.0", "20.0"},
              {"0.1", "10", "15.5", "13.0", "25.0"},
              {"0.2", "10", "19.5", "16.0", "30.0"}};
    return t;
}

csv::Table pie_table() {
    csv::Table t;
    t.header = {"color_name", "p75", "cluster"};
    t.rows = {{"blue", "40.1", "0"},   {"purple", "39.0", "0"}, {"green", "33.2", "1"},
              {"teal", "32.8", "1"},   {"magenta", "28.0", "2"}, {"red", "27.5", "2"},
              {"cyan", "22.0", "3"},   {"yellow", "21.5", "3"},  {"white", "21.0", "3"},
              {"pink", "20.5", "3"},   {"orange", "20.0", "3"}};
    return t;
}

csv::Table metrics_table() {
    csv::Table t;
    t.header = {"epoch", "train_loss", "val_loss", "lr", "rho_angle", "inference_ms"};
    for (int e = 1; e <= 30; ++e) {
        double loss = 2.0 * std::exp(-e / 10.0);
        t.rows.push_back({std::to_string(e), csv::fmt(loss, 6), csv::fmt(loss * 1.1, 6),
                          "0.0001", "0.5", "3.2"});
    }
    return t;
}

} // namespace

TEST_CASE("every figure kind renders deterministic well-formed SVG with embedded data") {
    struct Case {
        FigureKind kind;
        csv::Table table;
    };
    csv::Table hex;
    hex.header = {"ix", "iy", "cx", "cy", "count"};
    hex.rows = {{"0", "0", "25.0", "10.0", "4"},
                {"1", "0", "33.0", "10.0", "9"},
                {"0", "1", "29.0", "16.9", "2"}};
    std::vector<Case> cases = {{FigureKind::polar_profile, bins_table()},
                               {FigureKind::binned_box, bins_table()},
                               {FigureKind::hexbin, hex},
                               {FigureKind::group_bars, groups_table()},
                               {FigureKind::cluster_pie, pie_table()},
                               {FigureKind::loss_curves, metrics_table()}};
    for (const auto& c : cases) {
        FigureSpec spec;
        spec.kind = c.kind;
        spec.title = "t";
        std::string svg1 = render(spec, c.table);
        std::string svg2 = render(spec, c.table);
        CHECK(svg1 == svg2);
        CHECK(svg1.rfind("<?xml", 0) == 0);
        CHECK(svg1.find("</svg>") != std::string::npos);
        CHECK(svg1.find("<metadata id=\"source-data\">") != std::string::npos);
        // the numeric table rides along inside the file
        CHECK(svg1.find(c.table.header[0]) != std::string::npos);
        CHECK(svg1.find(c.table.rows[0][0]) != std::string::npos);
    }
}

TEST_CASE("polar profile annotates the minimum bin") {
    FigureSpec spec;
    spec.kind = FigureKind::polar_profile;
    std::string svg = render(spec, bins_table());
    CHECK(svg.find("min ") != std::string::npos);
    CHECK(svg.find("@ 180") != std::string::npos); // bin centered on 180
}

TEST_CASE("cluster pie draws 11 wedges in 4 delimited cluster arcs") {
    FigureSpec spec;
    spec.kind = FigureKind::cluster_pie;
    std::string svg = render(spec, pie_table());
    for (const char* name : {"blue", "purple", "green", "teal", "magenta", "red", "cyan",
                             "yellow", "white", "pink", "orange"}) {
        CHECK(svg.find(std::string("fill=\"") + name + "\"") != std::string::npos);
    }
    int arcs = 0;
    for (std::size_t pos = 0; (pos = svg.find("cluster ", pos)) != std::string::npos; ++pos) {
        ++arcs;
    }
    CHECK(arcs == 4);
}

TEST_CASE("loss curves overlay phase events") {
    FigureSpec spec;
    spec.kind = FigureKind::loss_curves;
    csv::Table events;
    events.header = {"epoch", "prominence"};
    events.rows = {{"9", "0.2"}, {"21", "0.1"}};
    std::string svg = render(spec, metrics_table(), &events);
    int marks = 0;
    for (std::size_t pos = 0; (pos = svg.find("bump @", pos)) != std::string::npos; ++pos) {
        ++marks;
    }
    CHECK(marks == 2);
}

TEST_CASE("schema violations are reported with the missing columns") {
    FigureSpec spec;
    spec.kind = FigureKind::hexbin;
    csv::Table bad;
    bad.header = {"cx"};
    bad.rows = {{"1"}};
    try {
        render(spec, bad);
        FAIL("expected error");
    } catch (const std::exception& e) {
        std::string msg = e.what();
        CHECK(msg.find("cy") != std::string::npos);
        CHECK(msg.find("count") != std::string::npos);
    }
}

TEST_CASE("empty stats never produce a file") {
    FigureSpec spec;
    spec.kind = FigureKind::group_bars;
    csv::Table empty;
    empty.header = {"group", "n", "mean", "median", "p75"};
    CHECK_THROWS_AS(render(spec, empty), SchemaError);
    testutil::TempDir tmp("report");
    CHECK_THROWS(render_to_file(tmp.file("x.svg"), spec, empty));
    CHECK(!std::filesystem::exists(tmp.file("x.svg")));
}

TEST_CASE("kind names round trip") {
    for (auto kind : {FigureKind::polar_profile, FigureKind::binned_box, FigureKind::hexbin,
                      FigureKind::group_bars, FigureKind::cluster_pie,
                      FigureKind::loss_curves}) {
        CHECK(parse_kind(kind_name(kind)) == kind);
    }
    CHECK_THROWS_AS(parse_kind("nope"), SchemaError);
}
