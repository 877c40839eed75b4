#include "nfkit/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "nfkit/metrics.hpp"

namespace nfkit::svg {

namespace {

const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3",
                          "#937860", "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd"};

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

std::string render(const std::vector<PlotCell>& cells, const PlotOptions& options) {
    if (cells.empty()) throw param_error("svg: no cells to plot");

    std::map<int, std::vector<const PlotCell*>> panels;
    for (const auto& c : cells) panels[c.time_index].push_back(&c);

    double minx = HUGE_VAL, maxx = -HUGE_VAL, miny = HUGE_VAL, maxy = -HUGE_VAL;
    for (const auto& c : cells) {
        minx = std::min(minx, c.x);
        maxx = std::max(maxx, c.x);
        miny = std::min(miny, c.y);
        maxy = std::max(maxy, c.y);
    }
    double span = std::max({maxx - minx, maxy - miny, 1e-9});
    double margin = 0.06 * span;
    minx -= margin;
    miny -= margin;
    span += 2 * margin;
    double scale = options.panel_size / span;

    std::ostringstream os;
    double width = options.panel_size * static_cast<double>(panels.size());
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\""
       << num(options.panel_size) << "\" viewBox=\"0 0 " << num(width) << ' ' << num(options.panel_size)
       << "\">\n";

    int panel_idx = 0;
    for (const auto& [time_index, pts] : panels) {
        double x0 = options.panel_size * panel_idx;
        os << "<g data-time=\"" << time_index << "\">\n";
        os << "<rect x=\"" << num(x0) << "\" y=\"0\" width=\"" << num(options.panel_size) << "\" height=\""
           << num(options.panel_size) << "\" fill=\"#ffffff\" stroke=\"#444444\"/>\n";

        auto px = [&](double x) { return x0 + (x - minx) * scale; };
        // SVG y axis points down.
        auto py = [&](double y) { return options.panel_size - (y - miny) * scale; };

        if (options.kde_overlay) {
            std::vector<std::array<double, 2>> samples;
            samples.reserve(pts.size());
            for (const auto* c : pts) samples.push_back({c->x, c->y});
            double cell_w = span / options.kde_grid;
            double peak = 0;
            std::vector<double> values(static_cast<std::size_t>(options.kde_grid * options.kde_grid));
            for (int gy = 0; gy < options.kde_grid; ++gy)
                for (int gx = 0; gx < options.kde_grid; ++gx) {
                    std::array<double, 2> node{minx + (gx + 0.5) * cell_w, miny + (gy + 0.5) * cell_w};
                    double v = metrics::kde_likelihood(samples, node, options.kde_sigma);
                    values[static_cast<std::size_t>(gy * options.kde_grid + gx)] = v;
                    peak = std::max(peak, v);
                }
            for (int gy = 0; gy < options.kde_grid; ++gy)
                for (int gx = 0; gx < options.kde_grid; ++gx) {
                    double v = values[static_cast<std::size_t>(gy * options.kde_grid + gx)];
                    double node_x = minx + (gx + 0.5) * cell_w;
                    double node_y = miny + (gy + 0.5) * cell_w;
                    os << "<rect x=\"" << num(px(node_x - cell_w / 2)) << "\" y=\"" << num(py(node_y + cell_w / 2))
                       << "\" width=\"" << num(cell_w * scale) << "\" height=\"" << num(cell_w * scale)
                       << "\" fill=\"#2060c0\" fill-opacity=\"" << num(peak > 0 ? 0.6 * v / peak : 0.0)
                       << "\" data-kde-x=\"" << num(node_x) << "\" data-kde-y=\"" << num(node_y)
                       << "\" data-kde=\"" << num(v) << "\"/>\n";
                }
        }

        for (const auto* c : pts) {
            const char* color = kPalette[static_cast<std::size_t>(std::max(0, c->color_key)) % 10];
            os << "<circle cx=\"" << num(px(c->x)) << "\" cy=\"" << num(py(c->y)) << "\" r=\""
               << num(options.point_radius) << "\" fill=\"" << color << "\" fill-opacity=\"0.8\"/>\n";
        }
        os << "</g>\n";
        ++panel_idx;
    }
    os << "</svg>\n";
    return os.str();
}

std::string render_slides(const std::vector<data::Slide>& slides, const std::vector<int>& sample_ids,
                          const PlotOptions& options) {
    std::vector<PlotCell> cells;
    std::size_t idx = 0;
    for (const auto& s : slides) {
        for (const auto& c : s.cells) {
            PlotCell pc;
            pc.x = c.coords[0];
            pc.y = c.coords[1];
            pc.time_index = s.time_index;
            if (options.color_by == "sample" && idx < sample_ids.size()) pc.color_key = sample_ids[idx];
            else pc.color_key = std::max(0, c.type_label);
            cells.push_back(pc);
            ++idx;
        }
    }
    return render(cells, options);
}

}  // namespace nfkit::svg
