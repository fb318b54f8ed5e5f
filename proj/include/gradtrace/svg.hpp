#pragma once

#include <string>
#include <vector>

#include "gradtrace/io.hpp"

namespace gradtrace {

struct ChartSeries {
    std::string label;
    std::vector<std::pair<double, double>> points; // (step, value)
};

// Minimal self-contained SVG line chart: axes with ticks, one polyline per
// series, color-swatched legend. Deterministic output.
std::string render_line_chart(const std::vector<ChartSeries>& series, const std::string& title);

// Groups trace rows by metric (first-appearance order) and renders them.
std::string render_trace_chart(const std::vector<TraceRow>& rows, const std::string& title);

} // namespace gradtrace
