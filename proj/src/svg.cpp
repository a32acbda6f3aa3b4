#include "reflex/svg.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace reflex {
namespace {

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

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

/// Uniform scale + offset mapping a world box into a view box (y up).
struct ViewMap {
    double scale = 1.0, ox = 0.0, oy = 0.0;

    ViewMap(double xmin, double xmax, double ymin, double ymax, double vx0, double vy0, double vw, double vh) {
        const double w = std::max(xmax - xmin, 1e-6), h = std::max(ymax - ymin, 1e-6);
        scale = std::min(vw / w, vh / h);
        ox = vx0 + 0.5 * (vw - scale * w) - scale * xmin;
        oy = vy0 + vh - 0.5 * (vh - scale * h) + scale * ymin;
    }
    double x(double wx) const { return ox + scale * wx; }
    double y(double wy) const { return oy - scale * wy; }
};

std::string polyline(const std::vector<Vec2>& pts, const ViewMap& m, const char* stroke, double width,
                     const char* extra = "") {
    std::ostringstream os;
    os << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\" " << extra << " points=\"";
    for (const auto& p : pts) os << fmt(m.x(p.x())) << ',' << fmt(m.y(p.y())) << ' ';
    os << "\"/>\n";
    return os.str();
}

}  // namespace

std::string scenario_svg(const Scenario& sc, const RolloutResult& result, const std::string& title) {
    const Trajectory& ex = result.executed;
    const Road road(sc.scene.road);
    const double hw = sc.scene.road.lane_half_width;

    std::vector<Vec2> path;
    for (int k = 0; k < ex.steps(); ++k) path.push_back(ex.position(0, k));
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& p : path) {
        xmin = std::min(xmin, p.x());
        xmax = std::max(xmax, p.x());
        ymin = std::min(ymin, p.y());
        ymax = std::max(ymax, p.y());
    }
    const double pad = 10.0;
    xmin -= pad, xmax += pad, ymin -= pad, ymax += pad;

    const double s0 = road.project(path.front()).s - 20.0, s1 = road.project(path.back()).s + 20.0;
    std::vector<Vec2> center, left, right;
    for (double s = s0; s <= s1; s += 1.0) {
        const CenterlinePoint c = road.at(s);
        const Vec2 n(-std::sin(c.theta), std::cos(c.theta));
        center.push_back(c.position);
        left.push_back(c.position + hw * n);
        right.push_back(c.position - hw * n);
    }

    const ViewMap map(xmin, xmax, ymin, ymax, 20, 40, kSvgWidth - 40, 440);
    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgWidth << "\" height=\"" << kSvgHeight
       << "\" viewBox=\"0 0 " << kSvgWidth << ' ' << kSvgHeight << "\" data-world-to-view=\"x' = " << fmt(map.ox)
       << " + " << map.scale << " x; y' = " << fmt(map.oy) << " - " << map.scale << " y\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"20\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">" << escape(title) << "</text>\n";
    os << polyline(left, map, "#888", 1.5) << polyline(right, map, "#888", 1.5)
       << polyline(center, map, "#bbb", 1.0, "stroke-dasharray=\"6,4\"");

    for (const auto& ob : sc.scene.static_obstacles)
        os << "<circle cx=\"" << fmt(map.x(ob.x)) << "\" cy=\"" << fmt(map.y(ob.y)) << "\" r=\""
           << fmt(std::max(1.5, ob.radius * map.scale)) << "\" fill=\"#c77\"/>\n";
    for (const auto& nb : sc.scene.neighbors) {
        const AgentState st = nb.history.back();
        os << "<circle cx=\"" << fmt(map.x(st.x)) << "\" cy=\"" << fmt(map.y(st.y)) << "\" r=\""
           << fmt(std::max(2.0, nb.radius() * map.scale)) << "\" fill=\"#79c\"/>\n";
    }
    os << polyline(path, map, "#1a5fb4", 2.0);

    if (ex.steps() >= 5) {
        const CouplingReport rep = coupling_violations(ex, 0);
        for (int k = 0; k < ex.steps(); ++k) {
            if (!rep.mask[static_cast<std::size_t>(k)]) continue;
            const Vec2 p = ex.position(0, k);
            os << "<circle cx=\"" << fmt(map.x(p.x())) << "\" cy=\"" << fmt(map.y(p.y()))
               << "\" r=\"4\" fill=\"none\" stroke=\"#e01b24\" stroke-width=\"1.5\"/>\n";
        }
    }

    // confidence panel: every trace row in execution order
    const double px = 60, py = 510, pw = kSvgWidth - 100, ph = 160;
    os << "<rect x=\"" << px << "\" y=\"" << py << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << px << "\" y=\"" << py - 8 << "\" font-family=\"sans-serif\" font-size=\"12\">confidence per denoising step (blue normal, red reflect, green reflect-denoise)</text>\n";
    std::vector<const TraceRow*> rows;
    for (const auto& tr : result.traces)
        for (const auto& row : tr) rows.push_back(&row);
    if (!rows.empty()) {
        const double dx = pw / std::max<std::size_t>(1, rows.size() - 1 + 1);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const char* color = rows[i]->phase == TracePhase::normal ? "#1a5fb4"
                                : rows[i]->phase == TracePhase::reflect ? "#e01b24"
                                                                        : "#26a269";
            os << "<circle cx=\"" << fmt(px + (static_cast<double>(i) + 0.5) * dx) << "\" cy=\""
               << fmt(py + ph * (1.0 - std::clamp(rows[i]->report.c, 0.0, 1.0))) << "\" r=\"1.6\" fill=\"" << color
               << "\"/>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

std::string curve_svg(const std::vector<double>& x, const std::vector<CurveSeries>& series, const std::string& x_label,
                      const std::string& y_label, const std::string& title) {
    if (x.empty()) throw InvalidArgument("curve_svg: no points");
    double ymin = 1e300, ymax = -1e300;
    for (const auto& s : series) {
        if (s.y.size() != x.size()) throw InvalidArgument("curve_svg: series length differs from x");
        for (double v : s.y) {
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    }
    if (ymin > ymax) ymin = 0.0, ymax = 1.0;
    if (ymax - ymin < 1e-9) ymin -= 0.5, ymax += 0.5;
    const double xmin = *std::min_element(x.begin(), x.end()), xmax = std::max(*std::max_element(x.begin(), x.end()), xmin + 1e-9);
    const double px = 80, py = 60, pw = kSvgWidth - 140, ph = kSvgHeight - 140;
    const auto vx = [&](double v) { return px + pw * (v - xmin) / (xmax - xmin); };
    const auto vy = [&](double v) { return py + ph * (1.0 - (v - ymin) / (ymax - ymin)); };
    static const char* colors[] = {"#1a5fb4", "#e01b24", "#26a269", "#c64600", "#613583"};

    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgWidth << "\" height=\"" << kSvgHeight
       << "\" viewBox=\"0 0 " << kSvgWidth << ' ' << kSvgHeight << "\" data-world-to-view=\"x' = " << fmt(px) << " + "
       << fmt(pw) << " (x - " << xmin << ")/" << (xmax - xmin) << "; y' = " << fmt(py) << " + " << fmt(ph)
       << " (1 - (y - " << ymin << ")/" << (ymax - ymin) << ")\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << px << "\" y=\"30\" font-family=\"sans-serif\" font-size=\"16\">" << escape(title) << "</text>\n";
    os << "<rect x=\"" << px << "\" y=\"" << py << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << px + pw / 2 << "\" y=\"" << py + ph + 40 << "\" font-family=\"sans-serif\" font-size=\"13\">"
       << escape(x_label) << "</text>\n";
    os << "<text x=\"20\" y=\"" << py + ph / 2 << "\" font-family=\"sans-serif\" font-size=\"13\">" << escape(y_label)
       << "</text>\n";
    for (double v : x)
        os << "<text x=\"" << fmt(vx(v) - 10) << "\" y=\"" << py + ph + 18 << "\" font-family=\"sans-serif\" font-size=\"11\">"
           << fmt(v) << "</text>\n";
    os << "<text x=\"" << px - 50 << "\" y=\"" << fmt(vy(ymax) + 4) << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << fmt(ymax) << "</text>\n";
    os << "<text x=\"" << px - 50 << "\" y=\"" << fmt(vy(ymin)) << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << fmt(ymin) << "</text>\n";
    for (std::size_t si = 0; si < series.size(); ++si) {
        const char* color = colors[si % 5];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < x.size(); ++i) os << fmt(vx(x[i])) << ',' << fmt(vy(series[si].y[i])) << ' ';
        os << "\"/>\n";
        os << "<text x=\"" << px + pw - 150 << "\" y=\"" << py + 20 + 16 * si << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
           << color << "\">" << escape(series[si].name) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace reflex
