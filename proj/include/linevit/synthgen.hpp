#pragma once

#include "linevit/image.hpp"
#include "linevit/rng.hpp"

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace linevit::gen {

// Datasets I-IV vary progressively more line properties; every later variant
// keeps everything the earlier ones vary.
enum class DatasetVariant { I = 1, II = 2, III = 3, IV = 4 };

struct VariantFeatures {
    bool vary_length = false;
    bool vary_width = false;
    bool vary_color = false;
};

VariantFeatures features(DatasetVariant v);
std::optional<DatasetVariant> parse_variant(const std::string& s);
std::string variant_name(DatasetVariant v);

struct NoiseSpec {
    double level = 0.0; // in {0, 0.1, 0.2, 0.3}
    double sigma() const { return level * 255.0; }
};

// One line segment: exact geometry plus the integer endpoints actually
// rasterized. The exact floats feed the manifest and error analysis; the
// rounded pair feeds the renderer.
struct LineSpec {
    double angle_rad = 0.0; // [0, 2*pi)
    double length = 0.0;    // px
    int width = 1;          // px
    double x1 = 0, y1 = 0;  // exact start
    double x2 = 0, y2 = 0;  // exact end
    int px1 = 0, py1 = 0;   // rounded for rendering (half away from zero)
    int px2 = 0, py2 = 0;
    std::array<uint8_t, 3> color{255, 255, 255};
    std::string color_name = "white";
};

struct PaletteEntry {
    std::string name;
    std::array<uint8_t, 3> rgb;
};

// The 11 named colors. Only red's triplet is pinned by convention upstream;
// the rest are the standard CSS values and can be overridden in GenConfig.
const std::vector<PaletteEntry>& default_palette();

// One manifest row. Coordinates are the exact (pre-rounding) endpoints.
struct SampleRecord {
    std::string image_id; // "Image{i}", 0-based
    double angle_deg = 0; // [0, 360)
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double noise_level = 0;
    double length = 0;
    int width = 0;
    std::array<int, 3> color_rgb{255, 255, 255};
    std::string color_name = "white";
};

struct GenConfig {
    DatasetVariant variant = DatasetVariant::I;
    int n_images = 2000;
    uint64_t base_seed = 0;
    std::string output_dir;
    int image_size = 224;

    double fixed_length = 50.0;          // Dataset I
    double length_min = 20.0;            // Datasets II-IV
    double length_max = 100.0;
    int fixed_width = 2;                 // Datasets I-II
    int width_min = 1;                   // Datasets III-IV
    int width_max = 5;
    std::vector<double> noise_levels{0.0, 0.1, 0.2, 0.3};
    std::array<uint8_t, 3> fixed_color{255, 255, 255}; // Datasets I-III
    std::vector<PaletteEntry> palette = default_palette();

    // Throws ConfigError if the margin rule leaves no feasible start points.
    void validate() const;
};

// Exact closed-form endpoint, before any rounding.
std::pair<double, double> compute_endpoint(double x1, double y1, double length,
                                           double angle_rad);

// Draws theta, length, width, start point, color and rounds the endpoints.
// Start points honor the margin rule: [L, W-L-1] for I/II, [L+w, W-(L+w)-1]
// for III/IV, so the whole segment stays on-canvas.
LineSpec sample_line(const GenConfig& cfg, SplitMix64& rng);

double sample_noise_level(const GenConfig& cfg, SplitMix64& rng);

// Capsule rasterization: paints exactly the pixels whose centers lie within
// width/2 of the segment between the rounded endpoints. Hard threshold, no
// anti-aliasing.
void rasterize_line(ImageCanvas& canvas, const LineSpec& spec);

// Adds an independent N(0, sigma^2) draw per pixel per channel, rounds half
// away from zero, clips to [0, 255]. level 0 is a byte-identity.
void apply_noise(ImageCanvas& canvas, const NoiseSpec& noise, SplitMix64& rng);

SampleRecord make_record(int index, const LineSpec& spec, const NoiseSpec& noise);

extern const std::vector<std::string> kManifestHeader;
std::string manifest_path(const std::string& output_dir);
std::string image_filename(int index);

// Writes n_images PNGs plus manifest.csv into cfg.output_dir. Deterministic:
// image i only uses the stream seeded with mix_seed(base_seed, i), so reruns
// (and any future parallel split) are byte-identical. Returns the manifest
// path. I/O failure aborts with a report of how many images were written.
std::string generate_dataset(const GenConfig& cfg);

std::vector<SampleRecord> read_manifest(const std::string& path);

} // namespace linevit::gen
