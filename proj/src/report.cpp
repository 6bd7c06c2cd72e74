#include "linevit/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace linevit::report {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string num(double v) { return csv::fmt(v, 2); }

std::string xml_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

class Svg {
public:
    Svg(int w, int h) : w_(w), h_(h) {}

    void metadata(const csv::Table& t) {
        body_ << "<metadata id=\"source-data\">" << xml_escape(csv::to_string(t))
              << "</metadata>\n";
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke,
              double sw = 1.0, const std::string& extra = "") {
        body_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\""
              << num(x2) << "\" y2=\"" << num(y2) << "\" stroke=\"" << stroke
              << "\" stroke-width=\"" << num(sw) << "\" " << extra << "/>\n";
    }
    void rect(double x, double y, double w, double h, const std::string& fill,
              const std::string& extra = "") {
        body_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\""
              << num(w) << "\" height=\"" << num(h) << "\" fill=\"" << fill << "\" "
              << extra << "/>\n";
    }
    void circle(double cx, double cy, double r, const std::string& fill,
                const std::string& extra = "") {
        body_ << "<circle cx=\"" << num(cx) << "\" cy=\"" << num(cy) << "\" r=\""
              << num(r) << "\" fill=\"" << fill << "\" " << extra << "/>\n";
    }
    void text(double x, double y, const std::string& s, int size = 11,
              const std::string& extra = "") {
        body_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\""
              << size << "\" font-family=\"sans-serif\" " << extra << ">"
              << xml_escape(s) << "</text>\n";
    }
    void poly(const std::vector<std::pair<double, double>>& pts,
              const std::string& stroke, double sw = 1.5, bool close = false,
              const std::string& fill = "none", const std::string& extra = "") {
        body_ << (close ? "<polygon points=\"" : "<polyline points=\"");
        for (const auto& [x, y] : pts) body_ << num(x) << "," << num(y) << " ";
        body_ << "\" fill=\"" << fill << "\" stroke=\"" << stroke
              << "\" stroke-width=\"" << num(sw) << "\" " << extra << "/>\n";
    }
    void path(const std::string& d, const std::string& fill, const std::string& stroke,
              double sw = 1.0, const std::string& extra = "") {
        body_ << "<path d=\"" << d << "\" fill=\"" << fill << "\" stroke=\"" << stroke
              << "\" stroke-width=\"" << num(sw) << "\" " << extra << "/>\n";
    }

    std::string str(const std::string& title) const {
        std::ostringstream out;
        out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
            << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\""
            << w_ << "\" height=\"" << h_ << "\" viewBox=\"0 0 " << w_ << " " << h_
            << "\">\n<rect width=\"" << w_ << "\" height=\"" << h_
            << "\" fill=\"white\"/>\n<text x=\"" << w_ / 2
            << "\" y=\"20\" font-size=\"14\" font-family=\"sans-serif\" "
               "text-anchor=\"middle\" font-weight=\"bold\">"
            << xml_escape(title) << "</text>\n"
            << body_.str() << "</svg>\n";
        return out.str();
    }

private:
    int w_, h_;
    std::ostringstream body_;
};

struct Frame {
    double x0, y0, x1, y1; // plot area in svg coordinates (y grows down)
    double xmin, xmax, ymin, ymax;
    double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * (x1 - x0); }
    double py(double y) const { return y1 - (y - ymin) / (ymax - ymin) * (y1 - y0); }
};

void draw_axes(Svg& svg, const Frame& f, const std::string& xlabel,
               const std::string& ylabel) {
    svg.line(f.x0, f.y1, f.x1, f.y1, "black");
    svg.line(f.x0, f.y0, f.x0, f.y1, "black");
    for (int i = 0; i <= 4; ++i) {
        double t = i / 4.0;
        double gx = f.x0 + t * (f.x1 - f.x0);
        double gy = f.y1 - t * (f.y1 - f.y0);
        svg.line(gx, f.y1, gx, f.y1 + 4, "black");
        svg.line(f.x0 - 4, gy, f.x0, gy, "black");
        svg.text(gx, f.y1 + 16, csv::fmt(f.xmin + t * (f.xmax - f.xmin), 1), 10,
                 "text-anchor=\"middle\"");
        svg.text(f.x0 - 6, gy + 3, csv::fmt(f.ymin + t * (f.ymax - f.ymin), 1), 10,
                 "text-anchor=\"end\"");
    }
    svg.text((f.x0 + f.x1) / 2, f.y1 + 32, xlabel, 11, "text-anchor=\"middle\"");
    svg.text(14, (f.y0 + f.y1) / 2, ylabel, 11,
             "text-anchor=\"middle\" transform=\"rotate(-90 14 " +
                 num((f.y0 + f.y1) / 2) + ")\"");
}

void require_rows(const csv::Table& stats) {
    if (stats.rows.empty()) throw SchemaError("render: empty stats table");
}

std::string render_polar(const FigureSpec& spec, const csv::Table& stats) {
    stats.require_columns({"center", "median", "n"});
    require_rows(stats);
    Svg svg(spec.width, spec.height);
    svg.metadata(stats);

    const double cx = spec.width / 2.0, cy = spec.height / 2.0 + 10;
    const double radius = std::min(spec.width, spec.height) / 2.0 - 60;
    double rmax = 0;
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        if (stats.num(i, "n") > 0) rmax = std::max(rmax, stats.num(i, "median"));
    }
    if (rmax <= 0) rmax = 1;

    for (int g = 1; g <= 3; ++g) {
        double rr = radius * g / 3.0;
        svg.circle(cx, cy, rr, "none", "stroke=\"#cccccc\"");
        svg.text(cx + 4, cy - rr - 2, csv::fmt(rmax * g / 3.0, 1), 9);
    }
    for (int a = 0; a < 360; a += 45) {
        double rad = a * kPi / 180.0;
        svg.line(cx, cy, cx + radius * std::cos(rad), cy - radius * std::sin(rad),
                 "#dddddd");
        svg.text(cx + (radius + 14) * std::cos(rad) - 8,
                 cy - (radius + 14) * std::sin(rad) + 4, std::to_string(a) + "\xc2\xb0",
                 9);
    }

    std::vector<std::pair<double, double>> pts;
    std::size_t min_row = 0;
    double min_val = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        if (stats.num(i, "n") <= 0) continue;
        double ang = stats.num(i, "center") * kPi / 180.0;
        double val = stats.num(i, "median");
        double rr = radius * val / rmax;
        pts.emplace_back(cx + rr * std::cos(ang), cy - rr * std::sin(ang));
        if (val < min_val) {
            min_val = val;
            min_row = i;
        }
    }
    if (pts.empty()) throw SchemaError("render: polar profile has no populated bins");
    svg.poly(pts, "steelblue", 1.5, true, "none", "fill-opacity=\"0.0\"");
    for (const auto& [x, y] : pts) svg.circle(x, y, 2.0, "steelblue");

    double ang = stats.num(min_row, "center") * kPi / 180.0;
    double rr = radius * min_val / rmax;
    double mx = cx + rr * std::cos(ang), my = cy - rr * std::sin(ang);
    svg.circle(mx, my, 4.0, "crimson");
    svg.text(mx + 6, my - 6,
             "min " + csv::fmt(min_val, 2) + "\xc2\xb0 @ " +
                 csv::fmt(stats.num(min_row, "center"), 0) + "\xc2\xb0",
             10, "fill=\"crimson\"");
    return svg.str(spec.title);
}

std::string render_binned_box(const FigureSpec& spec, const csv::Table& stats) {
    stats.require_columns({"label", "n", "q1", "median", "q3"});
    require_rows(stats);
    Svg svg(spec.width, spec.height);
    svg.metadata(stats);

    double ymax = 0;
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        if (stats.num(i, "n") > 0) ymax = std::max(ymax, stats.num(i, "q3"));
    }
    if (ymax <= 0) ymax = 1;
    Frame f{60, 40, spec.width - 20.0, spec.height - 60.0, 0,
            static_cast<double>(stats.rows.size()), 0, ymax * 1.1};
    draw_axes(svg, f, "", "angle error (deg)");

    const double slot = (f.x1 - f.x0) / static_cast<double>(stats.rows.size());
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        double x = f.x0 + (static_cast<double>(i) + 0.5) * slot;
        svg.text(x, f.y1 + 16, stats.cell(i, "label"), 8,
                 "text-anchor=\"middle\" transform=\"rotate(35 " + num(x) + " " +
                     num(f.y1 + 16) + ")\"");
        if (stats.num(i, "n") <= 0) {
            svg.text(x, (f.y0 + f.y1) / 2, "n=0", 8, "text-anchor=\"middle\" fill=\"#999999\"");
            continue;
        }
        double q1 = f.py(stats.num(i, "q1"));
        double q3 = f.py(stats.num(i, "q3"));
        double med = f.py(stats.num(i, "median"));
        double bw = slot * 0.6;
        svg.rect(x - bw / 2, q3, bw, q1 - q3, "#9ecae1", "stroke=\"steelblue\"");
        svg.line(x - bw / 2, med, x + bw / 2, med, "crimson", 1.5);
        if (stats.has_col("mean")) {
            svg.circle(x, f.py(stats.num(i, "mean")), 2.0, "black");
        }
    }
    return svg.str(spec.title);
}

std::string render_hexbin(const FigureSpec& spec, const csv::Table& stats) {
    stats.require_columns({"cx", "cy", "count"});
    require_rows(stats);
    Svg svg(spec.width, spec.height);
    svg.metadata(stats);

    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    double cmax = 0, hex_dx = std::numeric_limits<double>::infinity();
    std::vector<double> xs;
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        double x = stats.num(i, "cx"), y = stats.num(i, "cy");
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        cmax = std::max(cmax, stats.num(i, "count"));
        xs.push_back(x);
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t i = 1; i < xs.size(); ++i) {
        double d = xs[i] - xs[i - 1];
        if (d > 1e-9) hex_dx = std::min(hex_dx, d);
    }
    if (!std::isfinite(hex_dx)) hex_dx = std::max(1.0, (xmax - xmin) / 10);
    double pad_x = hex_dx, pad_y = hex_dx;

    Frame f{60, 40, spec.width - 20.0, spec.height - 60.0, xmin - pad_x, xmax + pad_x,
            ymin - pad_y, ymax + pad_y};
    draw_axes(svg, f, "line length (px)", "angle error (deg)");

    // Circumradius in plot x units; pointy-top vertices start at 90 degrees.
    double r_data = hex_dx / std::sqrt(3.0);
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        double cx = stats.num(i, "cx"), cy = stats.num(i, "cy");
        double c = stats.num(i, "count");
        std::vector<std::pair<double, double>> pts;
        for (int k = 0; k < 6; ++k) {
            double a = kPi / 2 + k * kPi / 3;
            pts.emplace_back(f.px(cx + r_data * std::cos(a)),
                             f.py(cy + r_data * std::sin(a) * 1.0));
        }
        double opacity = 0.15 + 0.85 * (cmax > 0 ? c / cmax : 0);
        std::ostringstream d;
        d << "M";
        for (const auto& [x, y] : pts) d << num(x) << "," << num(y) << " ";
        d << "Z";
        svg.path(d.str(), "steelblue", "#3a6ea5", 0.5,
                 "fill-opacity=\"" + csv::fmt(opacity, 3) + "\"");
    }
    svg.text(spec.width - 150.0, 34, "max count: " + csv::fmt(cmax, 0), 10);
    return svg.str(spec.title);
}

std::string render_group_bars(const FigureSpec& spec, const csv::Table& stats) {
    stats.require_columns({"group", "n", "mean", "median", "p75"});
    require_rows(stats);
    Svg svg(spec.width, spec.height);
    svg.metadata(stats);

    double ymax = 0;
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        ymax = std::max({ymax, stats.num(i, "mean"), stats.num(i, "p75")});
    }
    if (ymax <= 0) ymax = 1;
    Frame f{60, 40, spec.width - 20.0, spec.height - 60.0, 0,
            static_cast<double>(stats.rows.size()), 0, ymax * 1.1};
    draw_axes(svg, f, "", "angle error (deg)");

    const double slot = (f.x1 - f.x0) / static_cast<double>(stats.rows.size());
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        double x = f.x0 + (static_cast<double>(i) + 0.5) * slot;
        double bw = slot * 0.3;
        svg.rect(x - bw, f.py(stats.num(i, "mean")), bw,
                 f.y1 - f.py(stats.num(i, "mean")), "#9ecae1", "stroke=\"steelblue\"");
        svg.rect(x, f.py(stats.num(i, "median")), bw,
                 f.y1 - f.py(stats.num(i, "median")), "#fdae6b", "stroke=\"#e6550d\"");
        double p75y = f.py(stats.num(i, "p75"));
        svg.line(x - bw, p75y, x + bw, p75y, "black", 1.0,
                 "stroke-dasharray=\"3,2\"");
        svg.text(x, f.y1 + 16, stats.cell(i, "group"), 9, "text-anchor=\"middle\"");
    }
    svg.rect(f.x0 + 8, f.y0 + 4, 10, 10, "#9ecae1", "stroke=\"steelblue\"");
    svg.text(f.x0 + 22, f.y0 + 13, "mean", 9);
    svg.rect(f.x0 + 68, f.y0 + 4, 10, 10, "#fdae6b", "stroke=\"#e6550d\"");
    svg.text(f.x0 + 82, f.y0 + 13, "median", 9);
    svg.line(f.x0 + 138, f.y0 + 9, f.x0 + 150, f.y0 + 9, "black", 1.0,
             "stroke-dasharray=\"3,2\"");
    svg.text(f.x0 + 154, f.y0 + 13, "p75", 9);
    return svg.str(spec.title);
}

std::string render_cluster_pie(const FigureSpec& spec, const csv::Table& stats) {
    stats.require_columns({"color_name", "p75", "cluster"});
    require_rows(stats);
    Svg svg(spec.width, spec.height);
    svg.metadata(stats);

    struct Wedge {
        std::string name;
        double p75;
        int cluster;
    };
    std::vector<Wedge> wedges;
    double total = 0;
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        Wedge w{stats.cell(i, "color_name"), stats.num(i, "p75"),
                static_cast<int>(stats.num(i, "cluster"))};
        if (w.p75 <= 0) throw SchemaError("render: cluster_pie needs positive p75 values");
        total += w.p75;
        wedges.push_back(std::move(w));
    }
    // Contiguous cluster arcs, ordered by cluster id then value.
    std::stable_sort(wedges.begin(), wedges.end(), [](const Wedge& a, const Wedge& b) {
        return a.cluster != b.cluster ? a.cluster < b.cluster : a.p75 < b.p75;
    });

    const double cx = spec.width / 2.0, cy = spec.height / 2.0 + 10;
    const double radius = std::min(spec.width, spec.height) / 2.0 - 70;
    double angle = -kPi / 2; // start at 12 o'clock, clockwise
    int prev_cluster = -1;
    double cluster_start = angle;
    auto arc_point = [&](double a, double r) {
        return std::pair<double, double>{cx + r * std::cos(a), cy + r * std::sin(a)};
    };
    for (std::size_t i = 0; i < wedges.size(); ++i) {
        const Wedge& w = wedges[i];
        double sweep = 2 * kPi * w.p75 / total;
        auto [x1, y1] = arc_point(angle, radius);
        auto [x2, y2] = arc_point(angle + sweep, radius);
        std::ostringstream d;
        d << "M" << num(cx) << "," << num(cy) << " L" << num(x1) << "," << num(y1)
          << " A" << num(radius) << "," << num(radius) << " 0 "
          << (sweep > kPi ? 1 : 0) << " 1 " << num(x2) << "," << num(y2) << " Z";
        svg.path(d.str(), w.name, "#444444", 0.5);
        double mid = angle + sweep / 2;
        auto [lx, ly] = arc_point(mid, radius + 16);
        svg.text(lx - 14, ly + 3, w.name + " " + csv::fmt(w.p75, 1), 9);

        bool cluster_ends =
            i + 1 == wedges.size() || wedges[i + 1].cluster != w.cluster;
        if (w.cluster != prev_cluster) {
            cluster_start = angle;
            prev_cluster = w.cluster;
        }
        if (cluster_ends) {
            // Outer arc delimiting the cluster group.
            double a0 = cluster_start, a1 = angle + sweep;
            auto [gx1, gy1] = arc_point(a0, radius + 7);
            auto [gx2, gy2] = arc_point(a1, radius + 7);
            std::ostringstream g;
            g << "M" << num(gx1) << "," << num(gy1) << " A" << num(radius + 7) << ","
              << num(radius + 7) << " 0 " << (a1 - a0 > kPi ? 1 : 0) << " 1 "
              << num(gx2) << "," << num(gy2);
            svg.path(g.str(), "none", "black", 2.0);
            auto [tx, ty] = arc_point((a0 + a1) / 2, radius + 34);
            svg.text(tx - 20, ty, "cluster " + std::to_string(w.cluster), 10,
                     "font-weight=\"bold\"");
        }
        angle += sweep;
    }
    return svg.str(spec.title);
}

std::string render_loss_curves(const FigureSpec& spec, const csv::Table& stats,
                               const csv::Table* overlay) {
    stats.require_columns({"epoch", "train_loss", "val_loss"});
    require_rows(stats);
    Svg svg(spec.width, spec.height);
    svg.metadata(stats);

    double ymax = 0, xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        ymax = std::max({ymax, stats.num(i, "train_loss"), stats.num(i, "val_loss")});
        xmin = std::min(xmin, stats.num(i, "epoch"));
        xmax = std::max(xmax, stats.num(i, "epoch"));
    }
    if (ymax <= 0) ymax = 1;
    if (!(xmax > xmin)) xmax = xmin + 1;
    Frame f{60, 40, spec.width - 20.0, spec.height - 60.0, xmin, xmax, 0, ymax * 1.05};
    draw_axes(svg, f, "epoch", "loss");

    std::vector<std::pair<double, double>> train_pts, val_pts;
    for (std::size_t i = 0; i < stats.rows.size(); ++i) {
        double e = stats.num(i, "epoch");
        train_pts.emplace_back(f.px(e), f.py(stats.num(i, "train_loss")));
        val_pts.emplace_back(f.px(e), f.py(stats.num(i, "val_loss")));
    }
    svg.poly(train_pts, "steelblue", 1.5);
    svg.poly(val_pts, "#e6550d", 1.5);
    svg.text(f.x1 - 130, f.y0 + 14, "train loss", 10, "fill=\"steelblue\"");
    svg.text(f.x1 - 130, f.y0 + 28, "val loss", 10, "fill=\"#e6550d\"");

    if (overlay && !overlay->rows.empty()) {
        overlay->require_columns({"epoch", "prominence"});
        for (std::size_t i = 0; i < overlay->rows.size(); ++i) {
            // Event epochs are 0-based indices into the series.
            std::size_t idx = static_cast<std::size_t>(overlay->num(i, "epoch"));
            if (idx >= stats.rows.size()) continue;
            double e = stats.num(idx, "epoch");
            double x = f.px(e);
            svg.line(x, f.y0, x, f.y1, "crimson", 1.0, "stroke-dasharray=\"4,3\"");
            svg.circle(x, f.py(stats.num(idx, "train_loss")), 4.0, "crimson");
            svg.text(x + 4, f.y0 + 12, "bump @" + csv::fmt(e, 0), 9, "fill=\"crimson\"");
        }
    }
    return svg.str(spec.title);
}

} // namespace

FigureKind parse_kind(const std::string& name) {
    if (name == "polar_profile") return FigureKind::polar_profile;
    if (name == "binned_box") return FigureKind::binned_box;
    if (name == "hexbin") return FigureKind::hexbin;
    if (name == "group_bars") return FigureKind::group_bars;
    if (name == "cluster_pie") return FigureKind::cluster_pie;
    if (name == "loss_curves") return FigureKind::loss_curves;
    throw SchemaError("render: unknown figure kind '" + name + "'");
}

std::string kind_name(FigureKind kind) {
    switch (kind) {
        case FigureKind::polar_profile: return "polar_profile";
        case FigureKind::binned_box: return "binned_box";
        case FigureKind::hexbin: return "hexbin";
        case FigureKind::group_bars: return "group_bars";
        case FigureKind::cluster_pie: return "cluster_pie";
        case FigureKind::loss_curves: return "loss_curves";
    }
    return "?";
}

std::string render(const FigureSpec& spec, const csv::Table& stats,
                   const csv::Table* overlay) {
    switch (spec.kind) {
        case FigureKind::polar_profile: return render_polar(spec, stats);
        case FigureKind::binned_box: return render_binned_box(spec, stats);
        case FigureKind::hexbin: return render_hexbin(spec, stats);
        case FigureKind::group_bars: return render_group_bars(spec, stats);
        case FigureKind::cluster_pie: return render_cluster_pie(spec, stats);
        case FigureKind::loss_curves: return render_loss_curves(spec, stats, overlay);
    }
    throw SchemaError("render: unknown figure kind");
}

void render_to_file(const std::string& path, const FigureSpec& spec,
                    const csv::Table& stats, const csv::Table* overlay) {
    std::string svg = render(spec, stats, overlay);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("render: cannot write " + path);
    out << svg;
    if (!out) throw std::runtime_error("render: write failed for " + path);
}

} // namespace linevit::report
