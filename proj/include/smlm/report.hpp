#pragma once

// Rendering of run artifacts: loss-curve SVGs with checkpoint markers,
// error-bar charts (SVG + CSV), and Markdown tables.

#include <cstdint>
#include <string>
#include <vector>

#include "smlm/trainer.hpp"

namespace smlm::report {

// Polyline of loss vs iteration with a dashed vertical marker per checkpoint
// iteration. Every marker carries a data-iter attribute with the iteration.
std::string loss_curve_svg(const std::vector<trainer::MetricRecord>& metrics,
                           const std::vector<std::int64_t>& checkpoint_iters,
                           const std::string& title);

struct ErrorBar {
    std::string label;
    double mean = 0.0;
    double sd = 0.0;
};

// Bar chart with mean +- SD whiskers.
std::string error_bar_svg(const std::vector<ErrorBar>& bars, const std::string& title);

// Header "label,mean,sd"; full precision so values round-trip.
std::string error_bar_csv(const std::vector<ErrorBar>& bars);

std::string markdown_table(const std::vector<std::string>& headers,
                           const std::vector<std::vector<std::string>>& rows);

// Fraction 0.8765 -> "87.65" (percent, two decimals, table rendering).
std::string format_percent(double fraction);

}  // namespace smlm::report
