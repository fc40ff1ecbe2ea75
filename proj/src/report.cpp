#include "qdiss/report.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace qdiss {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

void data_range(const Plot& p, bool x_axis, double& lo, double& hi) {
    lo = x_axis ? p.x_lo : p.y_lo;
    hi = x_axis ? p.x_hi : p.y_hi;
    if (lo != hi) return;
    lo = std::numeric_limits<double>::infinity();
    hi = -lo;
    for (const auto& s : p.series) {
        for (const auto& [x, y] : s.points) {
            const double v = x_axis ? x : y;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (!std::isfinite(lo)) {
        lo = 0.0;
        hi = 1.0;
    }
    if (lo == hi) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
}

} // namespace

std::string render_svg(const Plot& p) {
    const double left = 70, right = 160, top = 40, bottom = 55;
    const double pw = p.width - left - right, ph = p.height - top - bottom;
    double x0, x1, y0, y1;
    data_range(p, true, x0, x1);
    data_range(p, false, y0, y1);
    auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

    std::string out = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
        "font-family=\"sans-serif\" font-size=\"12\">\n",
        p.width, p.height, p.width, p.height);
    out += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", p.width, p.height);
    out += fmt::format("<text x=\"{:.1f}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                       left + pw / 2, escape(p.title));
    out += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"none\" stroke=\"black\"/>\n",
                       left, top, pw, ph);
    for (int i = 0; i <= 5; ++i) {
        const double xv = x0 + (x1 - x0) * i / 5.0, yv = y0 + (y1 - y0) * i / 5.0;
        out += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", sx(xv),
                           top + ph, top + ph + 5);
        out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{:.2f}</text>\n", sx(xv), top + ph + 18, xv);
        out += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n", left - 5,
                           sy(yv), left);
        out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.2f}</text>\n", left - 8, sy(yv) + 4, yv);
    }
    out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", left + pw / 2,
                       static_cast<double>(p.height) - 12, escape(p.x_label));
    out += fmt::format("<text x=\"16\" y=\"{0:.1f}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0:.1f})\">{1}</text>\n",
                       top + ph / 2, escape(p.y_label));

    for (std::size_t i = 0; i < p.series.size(); ++i) {
        const auto& s = p.series[i];
        const char* color = kPalette[i % std::size(kPalette)];
        const std::string dash = s.dashed ? " stroke-dasharray=\"6 4\"" : "";
        if (s.line && s.points.size() > 1) {
            std::string pts;
            for (const auto& [x, y] : s.points) pts += fmt::format("{:.1f},{:.1f} ", sx(x), sy(y));
            pts.pop_back();
            out += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{}/>\n", pts, color, dash);
        }
        if (s.markers) {
            for (const auto& [x, y] : s.points) {
                out += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"4\" fill=\"{}\"/>\n", sx(x), sy(y), color);
            }
        }
        const double ly = top + 10 + 18.0 * static_cast<double>(i);
        out += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"{3}\" stroke-width=\"2\"{4}/>\n",
                           left + pw + 10, ly, left + pw + 30, color, dash);
        out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", left + pw + 36, ly + 4, escape(s.name));
    }
    out += "</svg>\n";
    return out;
}

Plot depth_plot(const std::vector<DepthPoint>& pts) {
    Plot p;
    p.title = "Max effect size by normalized depth";
    p.x_label = "layer / n_layers";
    p.y_label = "max Cohen's d";
    p.x_lo = 0.0;
    p.x_hi = 1.0;
    for (Category c : kFeatureCategories) {
        PlotSeries s;
        s.name = std::string(category_name(c));
        for (const auto& pt : pts) {
            if (pt.category == c) s.points.emplace_back(pt.depth, pt.max_effect);
        }
        if (!s.points.empty()) p.series.push_back(std::move(s));
    }
    return p;
}

Plot auroc_plot(const std::vector<AurocPoint>& pts, double entropy_auroc) {
    Plot p;
    p.title = "Per-layer correctness probe AUROC";
    p.x_label = "layer";
    p.y_label = "held-out AUROC";
    p.y_lo = 0.4;
    p.y_hi = 1.0;
    int lo = 0, hi = 0;
    bool any = false;
    for (Category c : kFeatureCategories) {
        PlotSeries s;
        s.name = std::string(category_name(c));
        for (const auto& pt : pts) {
            if (pt.category != c) continue;
            s.points.emplace_back(pt.layer, pt.auroc);
            lo = any ? std::min(lo, pt.layer) : pt.layer;
            hi = any ? std::max(hi, pt.layer) : pt.layer;
            any = true;
        }
        if (!s.points.empty()) p.series.push_back(std::move(s));
    }
    PlotSeries base;
    base.name = fmt::format("output entropy ({:.3f})", entropy_auroc);
    base.dashed = true;
    base.markers = false;
    base.points = {{static_cast<double>(lo), entropy_auroc}, {static_cast<double>(hi == lo ? lo + 1 : hi), entropy_auroc}};
    p.series.push_back(std::move(base));
    p.x_lo = lo - 0.25;
    p.x_hi = (hi == lo ? lo + 1 : hi) + 0.25;
    return p;
}

std::string stamp_csv(const std::string& hash, const std::string& csv) { return "# config_hash=" + hash + "\n" + csv; }

std::string csv_hash(const std::string& text) {
    static const std::string prefix = "# config_hash=";
    if (text.rfind(prefix, 0) != 0) return {};
    const auto end = text.find('\n');
    return text.substr(prefix.size(), end == std::string::npos ? std::string::npos : end - prefix.size());
}

} // namespace qdiss
