#pragma once

#include <string>
#include <vector>

#include "dcis/search.hpp"

namespace dcis {

struct SweepRow {
    std::string label;
    double final_objective = 0.0;
    std::int64_t evaluations = 0;
    ScalingFactors factors;
};

/// One full search per symmetric initial range [-k, k].
std::vector<SweepRow> sweep_ranges(const Objective& objective, const SearchConfig& base,
                                   const std::vector<double>& half_widths);

/// One full search per increments-per-segment value.
std::vector<SweepRow> sweep_increments(const Objective& objective, const SearchConfig& base,
                                       const std::vector<int>& c_values);

} // namespace dcis
