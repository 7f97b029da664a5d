#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcis/errors.hpp"
#include "dcis/rope.hpp"

namespace dcis {

/// Evaluation contract the search minimizes: factors -> nonnegative score,
/// lower is better. Implementations must be deterministic for fixed inputs
/// and safe to call concurrently (the search fans the per-segment increment
/// evaluations out across threads).
struct Objective {
    std::string name;
    int target_length = 0;
    std::function<double(const ScalingFactors&)> eval;

    double operator()(const ScalingFactors& f) const { return eval(f); }
};

struct SearchConfig {
    double range_low = -5.0;
    double range_high = 5.0;
    int increments_per_segment = 10; // C
    double discard_threshold = 100.0;
    ScalingFactors initial_factors;
    int target_length = 0;
    std::string objective_id;
    std::uint64_t random_seed = 0;
    int threads = 0; // 0 = DCIS_THREADS env or hardware concurrency

    void validate() const; // throws ConfigError
};

struct Segment {
    int start = 0;
    int width = 0;

    friend bool operator==(const Segment&, const Segment&) = default;
};

/// Layered divide-and-conquer plan over a factor vector of length F: widths
/// halve per layer (F/2, F/4, ..., 1) and within a layer segments run from
/// the highest start index down, so low-frequency pairs are updated first.
/// Total segment count is 2F - 2.
struct SegmentSchedule {
    int factor_count = 0;
    std::vector<std::vector<Segment>> layers;

    int total_segments() const;
};

/// Throws ConfigError unless factor_count is a power of two >= 2 (the
/// halving schedule is undefined otherwise).
SegmentSchedule segment_schedule(int factor_count);

struct Range {
    double low = 0.0;
    double high = 0.0;

    friend bool operator==(const Range&, const Range&) = default;
};

/// count values uniformly spanning [low, high] inclusive:
/// v_k = low + k * (high-low)/(count-1). Throws ConfigError for count < 2.
std::vector<double> incremental_values(double low, double high, int count);

/// One audited search step: the segment processed, the increments sampled,
/// their scores, which were discarded, what was applied, and the range handed
/// to the segment's two children.
struct SearchStep {
    int layer = 0; // 1-based
    Segment segment;
    Range sampled_range;
    std::vector<double> values;
    std::vector<double> scores;
    std::vector<bool> discarded;
    bool has_chosen = false;
    double chosen = 0.0;
    Range child_range_raw; // [min, max] over the kept top increments, before expansion
    bool has_child_range_raw = false;
    Range child_range; // after one-step outward expansion; inherited by both children
    double best_objective = 0.0; // objective of the maintained factors after this step
    bool has_best_objective = false;
    std::int64_t cumulative_evals = 0;
};

struct SearchTrace {
    std::vector<SearchStep> steps;
    std::int64_t total_evaluations = 0;

    std::string to_jsonl() const; // one record per step
};

SearchTrace trace_from_jsonl(const std::string& text);
void save_trace(const std::string& path, const SearchTrace& trace);
SearchTrace load_trace(const std::string& path);

/// Objective evaluation failed mid-search; carries the trace accumulated so
/// far plus the step context in the message.
struct SearchError : Error {
    SearchError(const std::string& msg, SearchTrace trace_so_far)
        : Error(msg), partial_trace(std::move(trace_so_far)) {}
    SearchTrace partial_trace;
};

/// Scores objective(factors + v applied to every lambda in the segment) for
/// each candidate v. Factors outside the segment are untouched; the input is
/// never mutated. Evaluations run on up to `threads` threads; results are
/// always ordered by increment index.
std::vector<double> evaluate_segment(const Objective& objective, const ScalingFactors& factors,
                                     Segment segment, const std::vector<double>& values,
                                     int threads = 1);

struct UpdateResult {
    ScalingFactors factors;
    Range child_range;
    Range child_range_raw;
    bool has_child_range_raw = false;
    std::vector<bool> discarded;
    bool has_chosen = false;
    double chosen = 0.0;
    int chosen_index = -1;
};

/// Selection rule for one segment: increments scoring above the threshold are
/// discarded; the best survivor (ties: smallest |v|, then the more negative)
/// is added to the segment; the next range spans the ceil(C/3) lowest-scoring
/// survivors expanded outward by one sampling step on each side. If nothing
/// survives the factors stay put and the parent range passes through.
UpdateResult update_step(const ScalingFactors& factors, Segment segment,
                         const std::vector<double>& values, const std::vector<double>& scores,
                         double discard_threshold, Range parent_range);

struct SearchResult {
    ScalingFactors factors;
    SearchTrace trace;
};

/// Runs the full divide-and-conquer incremental search: the schedule's
/// segments in order, each sampling C increments from its inherited range,
/// scoring them with the objective, applying the best and refining the range
/// for its children. Total objective calls = (2F - 2) * C.
SearchResult dcis_search(const Objective& objective, const SearchConfig& config);

/// (d - 2) * C: segments times increments for head dimension d.
std::int64_t search_budget(int head_dim, int increments);
/// T * P: iterations times population, the evolutionary-search equivalent.
std::int64_t evo_budget(int iterations, int population);

/// objective = sum_i (lambda_i - target_i)^2; minimum 0 at the target.
Objective make_separable_quadratic(std::vector<double> target);

Objective make_custom_objective(std::string name, int target_length,
                                std::function<double(const ScalingFactors&)> fn);

} // namespace dcis
