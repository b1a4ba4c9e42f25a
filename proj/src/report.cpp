#include "smlm/report.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace smlm::report {

namespace {

constexpr int kWidth = 720;
constexpr int kHeight = 420;
constexpr int kMarginLeft = 60;
constexpr int kMarginRight = 20;
constexpr int kMarginTop = 40;
constexpr int kMarginBottom = 50;

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

std::string escape_xml(const std::string& s) {
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

}  // namespace

std::string loss_curve_svg(const std::vector<trainer::MetricRecord>& metrics,
                           const std::vector<std::int64_t>& checkpoint_iters,
                           const std::string& title) {
    if (metrics.empty()) throw DataError("loss_curve_svg: no metric records");
    double x_min = static_cast<double>(metrics.front().iter);
    double x_max = static_cast<double>(metrics.back().iter);
    if (x_max <= x_min) x_max = x_min + 1.0;
    double y_min = metrics.front().loss, y_max = metrics.front().loss;
    for (const auto& m : metrics) {
        y_min = std::min(y_min, m.loss);
        y_max = std::max(y_max, m.loss);
    }
    if (y_max <= y_min) y_max = y_min + 1.0;
    const double plot_w = kWidth - kMarginLeft - kMarginRight;
    const double plot_h = kHeight - kMarginTop - kMarginBottom;
    auto sx = [&](double it) {
        return kMarginLeft + (it - x_min) / (x_max - x_min) * plot_w;
    };
    auto sy = [&](double loss) {
        return kMarginTop + (y_max - loss) / (y_max - y_min) * plot_h;
    };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
        << "\" height=\"" << kHeight << "\">\n";
    svg << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\">"
        << escape_xml(title) << "</text>\n";
    // axes
    svg << "<line x1=\"" << kMarginLeft << "\" y1=\"" << kMarginTop << "\" x2=\""
        << kMarginLeft << "\" y2=\"" << kHeight - kMarginBottom
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << kMarginLeft << "\" y1=\"" << kHeight - kMarginBottom
        << "\" x2=\"" << kWidth - kMarginRight << "\" y2=\"" << kHeight - kMarginBottom
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << kMarginLeft << "\" y=\"" << kHeight - kMarginBottom + 35
        << "\">iteration</text>\n";
    svg << "<text x=\"10\" y=\"" << kMarginTop << "\">loss</text>\n";
    // dashed checkpoint markers
    for (auto it : checkpoint_iters) {
        const double x = sx(static_cast<double>(it));
        svg << "<line class=\"checkpoint-marker\" data-iter=\"" << it << "\" x1=\""
            << fmt(x) << "\" y1=\"" << kMarginTop << "\" x2=\"" << fmt(x) << "\" y2=\""
            << kHeight - kMarginBottom
            << "\" stroke=\"gray\" stroke-dasharray=\"5,5\"/>\n";
    }
    // the loss polyline
    svg << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
    for (const auto& m : metrics) {
        svg << fmt(sx(static_cast<double>(m.iter))) << ',' << fmt(sy(m.loss)) << ' ';
    }
    svg << "\"/>\n</svg>\n";
    return svg.str();
}

std::string error_bar_svg(const std::vector<ErrorBar>& bars, const std::string& title) {
    if (bars.empty()) throw DataError("error_bar_svg: no bars");
    double y_max = 0.0;
    for (const auto& b : bars) y_max = std::max(y_max, b.mean + b.sd);
    if (y_max <= 0.0) y_max = 1.0;
    const double plot_w = kWidth - kMarginLeft - kMarginRight;
    const double plot_h = kHeight - kMarginTop - kMarginBottom;
    const double slot = plot_w / static_cast<double>(bars.size());
    const double bar_w = slot * 0.6;
    auto sy = [&](double v) { return kMarginTop + (y_max - v) / y_max * plot_h; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
        << "\" height=\"" << kHeight << "\">\n";
    svg << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\">"
        << escape_xml(title) << "</text>\n";
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const auto& b = bars[i];
        const double x0 = kMarginLeft + slot * static_cast<double>(i) + (slot - bar_w) / 2;
        const double xc = x0 + bar_w / 2;
        svg << "<rect data-label=\"" << escape_xml(b.label) << "\" x=\"" << fmt(x0)
            << "\" y=\"" << fmt(sy(b.mean)) << "\" width=\"" << fmt(bar_w)
            << "\" height=\"" << fmt(sy(0.0) - sy(b.mean))
            << "\" fill=\"steelblue\"/>\n";
        // mean +- SD whisker
        svg << "<line x1=\"" << fmt(xc) << "\" y1=\"" << fmt(sy(b.mean - b.sd))
            << "\" x2=\"" << fmt(xc) << "\" y2=\"" << fmt(sy(b.mean + b.sd))
            << "\" stroke=\"black\"/>\n";
        svg << "<text x=\"" << fmt(xc) << "\" y=\"" << kHeight - kMarginBottom + 20
            << "\" text-anchor=\"middle\">" << escape_xml(b.label) << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

std::string error_bar_csv(const std::vector<ErrorBar>& bars) {
    std::ostringstream os;
    os.precision(17);
    os << "label,mean,sd\n";
    for (const auto& b : bars) os << b.label << ',' << b.mean << ',' << b.sd << '\n';
    return os.str();
}

std::string markdown_table(const std::vector<std::string>& headers,
                           const std::vector<std::vector<std::string>>& rows) {
    if (headers.empty()) throw DataError("markdown_table: no headers");
    std::ostringstream os;
    os << '|';
    for (const auto& h : headers) os << ' ' << h << " |";
    os << "\n|";
    for (std::size_t i = 0; i < headers.size(); ++i) os << " --- |";
    os << '\n';
    for (const auto& row : rows) {
        if (row.size() != headers.size()) {
            throw DataError("markdown_table: row width differs from header");
        }
        os << '|';
        for (const auto& cell : row) os << ' ' << cell << " |";
        os << '\n';
    }
    return os.str();
}

std::string format_percent(double fraction) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << fraction * 100.0;
    return os.str();
}

}  // namespace smlm::report
