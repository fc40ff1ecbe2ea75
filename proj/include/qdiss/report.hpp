#pragma once

#include <string>
#include <vector>

#include "qdiss/pipeline.hpp"

namespace qdiss {

struct PlotSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;
    bool dashed = false;
    bool markers = true;
    bool line = true;
};

struct Plot {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<PlotSeries> series;
    // Axis ranges; when lo == hi the range is taken from the data.
    double x_lo = 0.0, x_hi = 0.0;
    double y_lo = 0.0, y_hi = 0.0;
    int width = 640;
    int height = 420;
};

/// Self-contained SVG with axes, ticks, one polyline/markers per series and a legend.
std::string render_svg(const Plot& plot);

/// Max effect per category against normalized depth.
Plot depth_plot(const std::vector<DepthPoint>& pts);

struct AurocPoint {
    int layer = 0;
    Category category = Category::None;
    double auroc = 0.0;
};

/// Per-layer held-out AUROC per category with the entropy baseline as a dashed line.
Plot auroc_plot(const std::vector<AurocPoint>& pts, double entropy_auroc);

/// Prefixes CSV text with a "# config_hash=<h>" line.
std::string stamp_csv(const std::string& hash, const std::string& csv);
/// Reads the hash back; empty when the first line carries none.
std::string csv_hash(const std::string& text);

} // namespace qdiss
