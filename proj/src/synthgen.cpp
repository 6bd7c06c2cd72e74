#include "linevit/synthgen.hpp"

#include "linevit/config.hpp"
#include "linevit/csv.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

namespace fs = std::filesystem;

namespace linevit::gen {

namespace {
constexpr double kTwoPi = 2.0 * 3.14159265358979323846;

int round_half_away(double v) {
    return static_cast<int>(std::lround(v));
}
} // namespace

VariantFeatures features(DatasetVariant v) {
    VariantFeatures f;
    f.vary_length = v >= DatasetVariant::II;
    f.vary_width = v >= DatasetVariant::III;
    f.vary_color = v >= DatasetVariant::IV;
    return f;
}

std::optional<DatasetVariant> parse_variant(const std::string& s) {
    if (s == "I" || s == "1") return DatasetVariant::I;
    if (s == "II" || s == "2") return DatasetVariant::II;
    if (s == "III" || s == "3") return DatasetVariant::III;
    if (s == "IV" || s == "4") return DatasetVariant::IV;
    return std::nullopt;
}

std::string variant_name(DatasetVariant v) {
    switch (v) {
        case DatasetVariant::I: return "I";
        case DatasetVariant::II: return "II";
        case DatasetVariant::III: return "III";
        case DatasetVariant::IV: return "IV";
    }
    return "?";
}

const std::vector<PaletteEntry>& default_palette() {
    static const std::vector<PaletteEntry> palette = {
        {"red", {255, 0, 0}},       {"green", {0, 255, 0}},
        {"blue", {0, 0, 255}},      {"yellow", {255, 255, 0}},
        {"cyan", {0, 255, 255}},    {"magenta", {255, 0, 255}},
        {"orange", {255, 165, 0}},  {"purple", {128, 0, 128}},
        {"pink", {255, 192, 203}},  {"white", {255, 255, 255}},
        {"teal", {0, 128, 128}},
    };
    return palette;
}

void GenConfig::validate() const {
    if (n_images < 1) throw ConfigError("gen: n_images must be >= 1");
    if (image_size < 8) throw ConfigError("gen: image_size must be >= 8");
    auto f = features(variant);
    double worst_margin = f.vary_length ? length_max : fixed_length;
    if (f.vary_width) worst_margin += width_max;
    double lo = worst_margin;
    double hi = image_size - worst_margin - 1;
    if (!(hi > lo)) {
        throw ConfigError("gen: no feasible start points: margin " +
                          std::to_string(worst_margin) + " leaves empty range on a " +
                          std::to_string(image_size) + "px canvas");
    }
    if (f.vary_length && !(length_min > 0 && length_min < length_max)) {
        throw ConfigError("gen: need 0 < length_min < length_max");
    }
    if (!f.vary_length && fixed_length <= 0) throw ConfigError("gen: fixed_length must be > 0");
    if (f.vary_width && !(width_min >= 1 && width_min <= width_max)) {
        throw ConfigError("gen: need 1 <= width_min <= width_max");
    }
    if (!f.vary_width && fixed_width < 1) throw ConfigError("gen: fixed_width must be >= 1");
    if (noise_levels.empty()) throw ConfigError("gen: noise_levels must be non-empty");
    for (double l : noise_levels) {
        if (l < 0 || l > 1) throw ConfigError("gen: noise level out of [0,1]");
    }
    if (f.vary_color && palette.empty()) throw ConfigError("gen: palette must be non-empty");
}

std::pair<double, double> compute_endpoint(double x1, double y1, double length,
                                           double angle_rad) {
    return {x1 + length * std::cos(angle_rad), y1 + length * std::sin(angle_rad)};
}

LineSpec sample_line(const GenConfig& cfg, SplitMix64& rng) {
    auto f = features(cfg.variant);
    LineSpec spec;
    spec.angle_rad = rng.uniform(0.0, kTwoPi);
    spec.length = f.vary_length ? rng.uniform(cfg.length_min, cfg.length_max)
                                : cfg.fixed_length;
    spec.width = f.vary_width ? rng.uniform_int(cfg.width_min, cfg.width_max)
                              : cfg.fixed_width;

    double margin = f.vary_width ? spec.length + spec.width : spec.length;
    double lo = margin;
    double hi = cfg.image_size - margin - 1;
    if (!(hi > lo)) {
        throw std::runtime_error("gen: infeasible margin for sampled line (L=" +
                                 std::to_string(spec.length) + ")");
    }
    spec.x1 = rng.uniform(lo, hi);
    spec.y1 = rng.uniform(lo, hi);
    std::tie(spec.x2, spec.y2) = compute_endpoint(spec.x1, spec.y1, spec.length,
                                                  spec.angle_rad);

    if (f.vary_color) {
        const auto& entry = cfg.palette[rng.next_below(cfg.palette.size())];
        spec.color = entry.rgb;
        spec.color_name = entry.name;
    } else {
        spec.color = cfg.fixed_color;
        spec.color_name = "white";
    }

    spec.px1 = round_half_away(spec.x1);
    spec.py1 = round_half_away(spec.y1);
    spec.px2 = round_half_away(spec.x2);
    spec.py2 = round_half_away(spec.y2);
    return spec;
}

double sample_noise_level(const GenConfig& cfg, SplitMix64& rng) {
    return cfg.noise_levels[rng.next_below(cfg.noise_levels.size())];
}

void rasterize_line(ImageCanvas& canvas, const LineSpec& spec) {
    const double ax = spec.px1, ay = spec.py1;
    const double bx = spec.px2, by = spec.py2;
    const double radius = spec.width / 2.0;
    const double r2 = radius * radius;

    // Capsule bounding box, clipped to the canvas.
    int x_lo = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - radius - 1)));
    int x_hi = std::min(canvas.width - 1,
                        static_cast<int>(std::ceil(std::max(ax, bx) + radius + 1)));
    int y_lo = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - radius - 1)));
    int y_hi = std::min(canvas.height - 1,
                        static_cast<int>(std::ceil(std::max(ay, by) + radius + 1)));

    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    for (int y = y_lo; y <= y_hi; ++y) {
        for (int x = x_lo; x <= x_hi; ++x) {
            double px = x + 0.5, py = y + 0.5;
            double t = 0.0;
            if (len2 > 0.0) {
                t = ((px - ax) * dx + (py - ay) * dy) / len2;
                t = std::clamp(t, 0.0, 1.0);
            }
            double cx = ax + t * dx, cy = ay + t * dy;
            double d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            if (d2 <= r2) {
                canvas.at(x, y, 0) = spec.color[0];
                canvas.at(x, y, 1) = spec.color[1];
                canvas.at(x, y, 2) = spec.color[2];
            }
        }
    }
}

void apply_noise(ImageCanvas& canvas, const NoiseSpec& noise, SplitMix64& rng) {
    const double sigma = noise.sigma();
    if (sigma == 0.0) return;
    for (auto& p : canvas.pixels) {
        double v = p + rng.gaussian(0.0, sigma);
        long r = std::lround(v); // half away from zero
        p = static_cast<uint8_t>(std::clamp(r, 0L, 255L));
    }
}

SampleRecord make_record(int index, const LineSpec& spec, const NoiseSpec& noise) {
    SampleRecord rec;
    rec.image_id = "Image" + std::to_string(index);
    rec.angle_deg = spec.angle_rad * 180.0 / 3.14159265358979323846;
    rec.x1 = spec.x1;
    rec.y1 = spec.y1;
    rec.x2 = spec.x2;
    rec.y2 = spec.y2;
    rec.noise_level = noise.level;
    rec.length = spec.length;
    rec.width = spec.width;
    rec.color_rgb = {spec.color[0], spec.color[1], spec.color[2]};
    rec.color_name = spec.color_name;
    return rec;
}

const std::vector<std::string> kManifestHeader = {
    "image_id", "angle_deg", "x1", "y1", "x2", "y2", "noise_level",
    "length", "width", "color_r", "color_g", "color_b", "color_name"};

std::string manifest_path(const std::string& output_dir) {
    return (fs::path(output_dir) / "manifest.csv").string();
}

std::string image_filename(int index) {
    return "Image" + std::to_string(index) + ".png";
}

std::string generate_dataset(const GenConfig& cfg) {
    cfg.validate();
    if (cfg.output_dir.empty()) throw ConfigError("gen: output_dir not set");
    fs::create_directories(cfg.output_dir);

    csv::Table manifest;
    manifest.header = kManifestHeader;
    manifest.rows.reserve(cfg.n_images);

    int written = 0;
    try {
        for (int i = 0; i < cfg.n_images; ++i) {
            SplitMix64 rng(mix_seed(cfg.base_seed, static_cast<uint64_t>(i)));
            LineSpec spec = sample_line(cfg, rng);
            NoiseSpec noise{sample_noise_level(cfg, rng)};

            ImageCanvas canvas(cfg.image_size, cfg.image_size);
            rasterize_line(canvas, spec);
            apply_noise(canvas, noise, rng);
            write_png((fs::path(cfg.output_dir) / image_filename(i)).string(), canvas);
            ++written;

            SampleRecord rec = make_record(i, spec, noise);
            manifest.rows.push_back({rec.image_id,
                                     csv::fmt(rec.angle_deg),
                                     csv::fmt(rec.x1), csv::fmt(rec.y1),
                                     csv::fmt(rec.x2), csv::fmt(rec.y2),
                                     csv::fmt(rec.noise_level, 2),
                                     csv::fmt(rec.length),
                                     std::to_string(rec.width),
                                     std::to_string(rec.color_rgb[0]),
                                     std::to_string(rec.color_rgb[1]),
                                     std::to_string(rec.color_rgb[2]),
                                     rec.color_name});
        }
        std::string path = manifest_path(cfg.output_dir);
        csv::write_csv(path, manifest);
        return path;
    } catch (const std::exception& e) {
        throw std::runtime_error("gen: aborted after writing " + std::to_string(written) +
                                 "/" + std::to_string(cfg.n_images) +
                                 " images: " + e.what());
    }
}

std::vector<SampleRecord> read_manifest(const std::string& path) {
    csv::Table t = csv::read_csv(path);
    t.require_columns(kManifestHeader);
    std::vector<SampleRecord> out;
    out.reserve(t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        SampleRecord rec;
        rec.image_id = t.cell(i, "image_id");
        rec.angle_deg = t.num(i, "angle_deg");
        rec.x1 = t.num(i, "x1");
        rec.y1 = t.num(i, "y1");
        rec.x2 = t.num(i, "x2");
        rec.y2 = t.num(i, "y2");
        rec.noise_level = t.num(i, "noise_level");
        rec.length = t.num(i, "length");
        rec.width = static_cast<int>(t.num(i, "width"));
        rec.color_rgb = {static_cast<int>(t.num(i, "color_r")),
                         static_cast<int>(t.num(i, "color_g")),
                         static_cast<int>(t.num(i, "color_b"))};
        rec.color_name = t.cell(i, "color_name");
        out.push_back(std::move(rec));
    }
    return out;
}

} // namespace linevit::gen
