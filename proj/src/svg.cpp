#include "gradtrace/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace gradtrace {

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                          "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78"};
constexpr size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string fmt_tick(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

} // namespace

std::string render_line_chart(const std::vector<ChartSeries>& series, const std::string& title) {
    if (series.empty()) fail(Errc::size, "no series to plot");

    const double width = 860, height = 520;
    const double left = 70, right = 240, top = 48, bottom = 56;
    const double plot_w = width - left - right;
    const double plot_h = height - top - bottom;

    double x_min = 1e300, x_max = -1e300, y_min = 1e300, y_max = -1e300;
    for (const ChartSeries& s : series) {
        if (s.points.empty()) fail(Errc::size, "series '" + s.label + "' has no points");
        for (auto [x, y] : s.points) {
            x_min = std::min(x_min, x);
            x_max = std::max(x_max, x);
            y_min = std::min(y_min, y);
            y_max = std::max(y_max, y);
        }
    }
    if (x_max == x_min) x_max = x_min + 1.0;
    if (y_max == y_min) {
        double pad = std::max(1e-6, std::fabs(y_min) * 0.1);
        y_min -= pad;
        y_max += pad;
    } else {
        double pad = (y_max - y_min) * 0.06;
        y_min -= pad;
        y_max += pad;
    }

    auto sx = [&](double x) { return left + (x - x_min) / (x_max - x_min) * plot_w; };
    auto sy = [&](double y) { return top + plot_h - (y - y_min) / (y_max - y_min) * plot_h; };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) + "\" height=\"" +
           fmt(height) + "\" viewBox=\"0 0 " + fmt(width) + " " + fmt(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + fmt(left) + "\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\" "
           "font-weight=\"bold\">" + escape_xml(title) + "</text>\n";

    // axes
    svg += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top) + "\" x2=\"" + fmt(left) +
           "\" y2=\"" + fmt(top + plot_h) + "\" stroke=\"#333\"/>\n";
    svg += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top + plot_h) + "\" x2=\"" +
           fmt(left + plot_w) + "\" y2=\"" + fmt(top + plot_h) + "\" stroke=\"#333\"/>\n";

    const int ticks = 5;
    for (int i = 0; i <= ticks; ++i) {
        double fx = x_min + (x_max - x_min) * i / ticks;
        double px = sx(fx);
        svg += "<line x1=\"" + fmt(px) + "\" y1=\"" + fmt(top + plot_h) + "\" x2=\"" + fmt(px) +
               "\" y2=\"" + fmt(top + plot_h + 5) + "\" stroke=\"#333\"/>\n";
        svg += "<text x=\"" + fmt(px) + "\" y=\"" + fmt(top + plot_h + 20) +
               "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" +
               fmt_tick(fx) + "</text>\n";

        double fy = y_min + (y_max - y_min) * i / ticks;
        double py = sy(fy);
        svg += "<line x1=\"" + fmt(left - 5) + "\" y1=\"" + fmt(py) + "\" x2=\"" + fmt(left) +
               "\" y2=\"" + fmt(py) + "\" stroke=\"#333\"/>\n";
        svg += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(py) + "\" x2=\"" + fmt(left + plot_w) +
               "\" y2=\"" + fmt(py) + "\" stroke=\"#eee\"/>\n";
        svg += "<text x=\"" + fmt(left - 9) + "\" y=\"" + fmt(py + 4) +
               "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" +
               fmt_tick(fy) + "</text>\n";
    }
    svg += "<text x=\"" + fmt(left + plot_w / 2) + "\" y=\"" + fmt(height - 14) +
           "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">step</text>\n";

    for (size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % kPaletteSize];
        std::string pts;
        for (auto [x, y] : series[s].points) {
            pts += fmt(sx(x));
            pts += ',';
            pts += fmt(sy(y));
            pts += ' ';
        }
        if (!pts.empty()) pts.pop_back();
        svg += std::string("<polyline fill=\"none\" stroke=\"") + color +
               "\" stroke-width=\"1.8\" points=\"" + pts + "\"/>\n";
        double ly = top + 16 + 18 * static_cast<double>(s);
        svg += std::string("<rect x=\"") + fmt(left + plot_w + 14) + "\" y=\"" + fmt(ly - 9) +
               "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
        svg += "<text x=\"" + fmt(left + plot_w + 31) + "\" y=\"" + fmt(ly + 1) +
               "\" font-family=\"sans-serif\" font-size=\"11\">" + escape_xml(series[s].label) +
               "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

std::string render_trace_chart(const std::vector<TraceRow>& rows, const std::string& title) {
    std::vector<ChartSeries> series;
    for (const TraceRow& r : rows) {
        ChartSeries* target = nullptr;
        for (ChartSeries& s : series)
            if (s.label == r.metric) {
                target = &s;
                break;
            }
        if (!target) {
            series.push_back({r.metric, {}});
            target = &series.back();
        }
        target->points.emplace_back(static_cast<double>(r.step), r.value);
    }
    return render_line_chart(series, title);
}

} // namespace gradtrace
