#pragma once

#include <string>
#include <vector>

#include "nfkit/dataset.hpp"

// Deterministic SVG scatter panels: one panel per time index, points colored
// by type label or sample id, optional KDE density overlay. Byte output is a
// pure function of the inputs.

namespace nfkit::svg {

struct PlotOptions {
    double point_radius = 2.0;
    double panel_size = 320.0;     // square panels, data fitted with margin
    std::string color_by = "type"; // "type" | "sample"
    bool kde_overlay = false;
    double kde_sigma = 0.25;
    int kde_grid = 24;             // overlay cells per axis
};

struct PlotCell {
    double x = 0, y = 0;
    int time_index = 0;
    int color_key = 0;  // type label or sample id
};

std::string render(const std::vector<PlotCell>& cells, const PlotOptions& options);

// Convenience: flattens slides, coloring by type or sample id.
std::string render_slides(const std::vector<data::Slide>& slides, const std::vector<int>& sample_ids,
                          const PlotOptions& options);

}  // namespace nfkit::svg
