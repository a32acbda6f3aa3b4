#pragma once

#include "reflex/evaluator.hpp"

#include <string>
#include <vector>

namespace reflex {

inline constexpr int kSvgWidth = 1000;
inline constexpr int kSvgHeight = 700;

/// Road corridor, executed trajectory with coupling-violation markers, and a
/// confidence-trace panel. The world-to-view transform is recorded on the
/// root element.
std::string scenario_svg(const Scenario& scenario, const RolloutResult& result, const std::string& title);

struct CurveSeries {
    std::string name;
    std::vector<double> y;
};

/// Line plot of several series against shared x values.
std::string curve_svg(const std::vector<double>& x, const std::vector<CurveSeries>& series, const std::string& x_label,
                      const std::string& y_label, const std::string& title);

}  // namespace reflex
