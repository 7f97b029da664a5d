#include "dcis/sweep.hpp"

#include <cmath>
#include <cstdio>

#include "dcis/errors.hpp"

namespace dcis {

namespace {

SweepRow run_one(const Objective& objective, const SearchConfig& config, std::string label) {
    const SearchResult result = dcis_search(objective, config);
    SweepRow row;
    row.label = std::move(label);
    row.evaluations = result.trace.total_evaluations;
    row.factors = result.factors;
    // the last recorded best equals the objective of the maintained factors;
    // fall back to a direct evaluation if every step discarded
    row.final_objective = std::nan("");
    for (auto it = result.trace.steps.rbegin(); it != result.trace.steps.rend(); ++it) {
        if (it->has_best_objective) {
            row.final_objective = it->best_objective;
            break;
        }
    }
    if (std::isnan(row.final_objective)) {
        row.final_objective = objective(result.factors);
    }
    return row;
}

} // namespace

std::vector<SweepRow> sweep_ranges(const Objective& objective, const SearchConfig& base,
                                   const std::vector<double>& half_widths) {
    if (half_widths.empty()) {
        throw ConfigError("sweep: empty value list");
    }
    std::vector<SweepRow> rows;
    for (const double k : half_widths) {
        if (!(k > 0.0)) {
            throw ConfigError("sweep: range half-width must be positive");
        }
        SearchConfig cfg = base;
        cfg.range_low = -k;
        cfg.range_high = k;
        char label[64];
        std::snprintf(label, sizeof(label), "[%g,%g]", -k, k);
        rows.push_back(run_one(objective, cfg, label));
    }
    return rows;
}

std::vector<SweepRow> sweep_increments(const Objective& objective, const SearchConfig& base,
                                       const std::vector<int>& c_values) {
    if (c_values.empty()) {
        throw ConfigError("sweep: empty value list");
    }
    std::vector<SweepRow> rows;
    for (const int c : c_values) {
        SearchConfig cfg = base;
        cfg.increments_per_segment = c;
        rows.push_back(run_one(objective, cfg, "C=" + std::to_string(c)));
    }
    return rows;
}

} // namespace dcis
