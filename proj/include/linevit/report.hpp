#pragma once

#include "linevit/csv.hpp"

#include <stdexcept>
#include <string>

namespace linevit::report {

enum class FigureKind {
    polar_profile, // angle-error vs orientation, polar axes, min annotated
    binned_box,    // per-bin quartile boxes
    hexbin,        // hexagonal density cells
    group_bars,    // per-group mean/median bars
    cluster_pie,   // wedges grouped into cluster arcs
    loss_curves,   // train/val loss with phase-event markers
};

FigureKind parse_kind(const std::string& name);
std::string kind_name(FigureKind kind);

struct FigureSpec {
    FigureKind kind = FigureKind::loss_curves;
    std::string title;
    int width = 720;
    int height = 540;
};

struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Renders one figure. Positions derive only from `stats`; the table itself
// is embedded in an SVG <metadata> block so every figure carries its own
// numbers. `overlay` supplies phase events for loss_curves; other kinds
// ignore it. Empty stats or a missing column is an error, never an empty
// file.
std::string render(const FigureSpec& spec, const csv::Table& stats,
                   const csv::Table* overlay = nullptr);

void render_to_file(const std::string& path, const FigureSpec& spec,
                    const csv::Table& stats, const csv::Table* overlay = nullptr);

} // namespace linevit::report
