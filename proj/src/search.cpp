#include "dcis/search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dcis/util.hpp"

namespace dcis {

void SearchConfig::validate() const {
    if (increments_per_segment < 3) {
        throw ConfigError("increments per segment must be >= 3, got " +
                          std::to_string(increments_per_segment));
    }
    if (!(range_low <= range_high)) {
        throw ConfigError("initial range invalid: low > high");
    }
    if (initial_factors.empty()) {
        throw ConfigError("initial factors are empty");
    }
    const int f = initial_factors.size();
    if ((f & (f - 1)) != 0 || f < 2) {
        throw ConfigError("factor count must be a power of two >= 2, got " + std::to_string(f));
    }
    if (target_length < 0) {
        throw ConfigError("target_length must be nonnegative");
    }
}

int SegmentSchedule::total_segments() const {
    int n = 0;
    for (const auto& layer : layers) {
        n += static_cast<int>(layer.size());
    }
    return n;
}

SegmentSchedule segment_schedule(int factor_count) {
    if (factor_count < 2 || (factor_count & (factor_count - 1)) != 0) {
        throw ConfigError("segment schedule requires a power-of-two factor count >= 2, got " +
                          std::to_string(factor_count));
    }
    SegmentSchedule schedule;
    schedule.factor_count = factor_count;
    for (int width = factor_count / 2; width >= 1; width /= 2) {
        std::vector<Segment> layer;
        layer.reserve(static_cast<std::size_t>(factor_count / width));
        // descending start order: the low-frequency (high-index) half first
        for (int start = factor_count - width; start >= 0; start -= width) {
            layer.push_back(Segment{start, width});
        }
        schedule.layers.push_back(std::move(layer));
    }
    return schedule;
}

std::vector<double> incremental_values(double low, double high, int count) {
    if (count < 2) {
        throw ConfigError("need at least 2 incremental values, got " + std::to_string(count));
    }
    if (!(low <= high)) {
        throw ConfigError("incremental range invalid: low > high");
    }
    std::vector<double> values(static_cast<std::size_t>(count));
    const double step = (high - low) / (count - 1);
    for (int k = 0; k < count; ++k) {
        values[static_cast<std::size_t>(k)] = low + step * k;
    }
    values.front() = low;
    values.back() = high;
    return values;
}

std::vector<double> evaluate_segment(const Objective& objective, const ScalingFactors& factors,
                                     Segment segment, const std::vector<double>& values,
                                     int threads) {
    if (segment.start < 0 || segment.width <= 0 || segment.start + segment.width > factors.size()) {
        throw ConfigError("segment out of bounds");
    }
    const int n = static_cast<int>(values.size());
    std::vector<double> scores(values.size());
    const int n_threads = std::min(std::max(threads, 1), n);

    auto eval_one = [&](int k) {
        ScalingFactors candidate = factors;
        candidate.add_to_segment(segment.start, segment.width, values[static_cast<std::size_t>(k)]);
        scores[static_cast<std::size_t>(k)] = objective(candidate);
    };

    if (n_threads <= 1) {
        for (int k = 0; k < n; ++k) {
            eval_one(k);
        }
        return scores;
    }

    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (int k = t; k < n; k += n_threads) {
                    eval_one(k);
                }
            } catch (...) {
                errors[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    for (const auto& err : errors) {
        if (err) {
            std::rethrow_exception(err);
        }
    }
    return scores;
}

UpdateResult update_step(const ScalingFactors& factors, Segment segment,
                         const std::vector<double>& values, const std::vector<double>& scores,
                         double discard_threshold, Range parent_range) {
    if (values.size() != scores.size() || values.size() < 2) {
        throw ConfigError("update_step: values/scores size mismatch");
    }
    const int c = static_cast<int>(values.size());
    const double step = (parent_range.high - parent_range.low) / (c - 1);

    UpdateResult result;
    result.factors = factors;
    result.discarded.resize(values.size());

    // indices of increments that keep a usable score
    std::vector<int> kept;
    kept.reserve(values.size());
    for (int k = 0; k < c; ++k) {
        const double s = scores[static_cast<std::size_t>(k)];
        const bool drop = !(s <= discard_threshold) || !std::isfinite(s);
        result.discarded[static_cast<std::size_t>(k)] = drop;
        if (!drop) {
            kept.push_back(k);
        }
    }

    if (kept.empty()) {
        // nothing informative this step: keep the factors, pass the range through
        result.child_range = parent_range;
        return result;
    }

    // order survivors by score; ties prefer the smallest perturbation, then
    // the more negative increment
    std::sort(kept.begin(), kept.end(), [&](int a, int b) {
        const double sa = scores[static_cast<std::size_t>(a)];
        const double sb = scores[static_cast<std::size_t>(b)];
        if (sa != sb) {
            return sa < sb;
        }
        const double va = values[static_cast<std::size_t>(a)];
        const double vb = values[static_cast<std::size_t>(b)];
        if (std::abs(va) != std::abs(vb)) {
            return std::abs(va) < std::abs(vb);
        }
        return va < vb;
    });

    const int best = kept.front();
    result.has_chosen = true;
    result.chosen = values[static_cast<std::size_t>(best)];
    result.chosen_index = best;
    result.factors.add_to_segment(segment.start, segment.width, result.chosen);

    const int top_n = std::min<int>((c + 2) / 3, static_cast<int>(kept.size()));
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < top_n; ++i) {
        const double v = values[static_cast<std::size_t>(kept[static_cast<std::size_t>(i)])];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    result.child_range_raw = Range{lo, hi};
    result.has_child_range_raw = true;
    result.child_range = Range{lo - step, hi + step};
    return result;
}

SearchResult dcis_search(const Objective& objective, const SearchConfig& config) {
    config.validate();
    if (!objective.eval) {
        throw ConfigError("objective has no evaluation function");
    }
    const int factor_count = config.initial_factors.size();
    const SegmentSchedule schedule = segment_schedule(factor_count);
    const int c = config.increments_per_segment;
    const int threads = resolve_thread_count(config.threads);

    SearchResult result;
    result.factors = config.initial_factors;

    // per-segment range tree; both first-layer segments start from the
    // initial range, and each segment hands its refined range to its two
    // children in the next layer
    std::vector<Range> layer_ranges(2, Range{config.range_low, config.range_high});

    double best_objective = 0.0;
    bool has_best = false;

    for (std::size_t layer_idx = 0; layer_idx < schedule.layers.size(); ++layer_idx) {
        const auto& layer = schedule.layers[layer_idx];
        std::vector<Range> child_ranges(layer.size() * 2);
        for (std::size_t j = 0; j < layer.size(); ++j) {
            const Segment segment = layer[j];
            const Range range = layer_ranges[j];
            const std::vector<double> values = incremental_values(range.low, range.high, c);

            std::vector<double> scores;
            try {
                scores = evaluate_segment(objective, result.factors, segment, values, threads);
            } catch (const std::exception& e) {
                std::ostringstream msg;
                msg << "objective '" << objective.name << "' failed at layer " << (layer_idx + 1)
                    << ", segment start " << segment.start << " width " << segment.width << ": "
                    << e.what();
                throw SearchError(msg.str(), result.trace);
            }

            UpdateResult update = update_step(result.factors, segment, values, scores,
                                              config.discard_threshold, range);
            result.factors = update.factors;
            if (update.has_chosen) {
                best_objective = scores[static_cast<std::size_t>(update.chosen_index)];
                has_best = true;
            }

            SearchStep step;
            step.layer = static_cast<int>(layer_idx) + 1;
            step.segment = segment;
            step.sampled_range = range;
            step.values = values;
            step.scores = scores;
            step.discarded = update.discarded;
            step.has_chosen = update.has_chosen;
            step.chosen = update.chosen;
            step.child_range_raw = update.child_range_raw;
            step.has_child_range_raw = update.has_child_range_raw;
            step.child_range = update.child_range;
            step.best_objective = best_objective;
            step.has_best_objective = has_best;
            result.trace.total_evaluations += static_cast<std::int64_t>(values.size());
            step.cumulative_evals = result.trace.total_evaluations;
            result.trace.steps.push_back(std::move(step));

            child_ranges[2 * j] = update.child_range;
            child_ranges[2 * j + 1] = update.child_range;
        }
        layer_ranges = std::move(child_ranges);
    }
    return result;
}

std::int64_t search_budget(int head_dim, int increments) {
    return static_cast<std::int64_t>(head_dim - 2) * increments;
}

std::int64_t evo_budget(int iterations, int population) {
    return static_cast<std::int64_t>(iterations) * population;
}

Objective make_separable_quadratic(std::vector<double> target) {
    Objective obj;
    obj.name = "separable_quadratic";
    obj.eval = [target = std::move(target)](const ScalingFactors& f) {
        if (f.size() != static_cast<int>(target.size())) {
            throw ConfigError("quadratic objective: factor count mismatch");
        }
        double sum = 0.0;
        for (int i = 0; i < f.size(); ++i) {
            const double d = f[i] - target[static_cast<std::size_t>(i)];
            sum += d * d;
        }
        return sum;
    };
    return obj;
}

Objective make_custom_objective(std::string name, int target_length,
                                std::function<double(const ScalingFactors&)> fn) {
    Objective obj;
    obj.name = std::move(name);
    obj.target_length = target_length;
    obj.eval = std::move(fn);
    return obj;
}

// --- trace serialization ----------------------------------------------------

namespace {

nlohmann::json range_to_json(const Range& r) {
    return nlohmann::json::array({r.low, r.high});
}

Range range_from_json(const nlohmann::json& j) {
    return Range{j.at(0).get<double>(), j.at(1).get<double>()};
}

} // namespace

std::string SearchTrace::to_jsonl() const {
    std::ostringstream out;
    for (const auto& step : steps) {
        nlohmann::json rec;
        rec["layer"] = step.layer;
        rec["segment_start"] = step.segment.start;
        rec["width"] = step.segment.width;
        rec["range"] = range_to_json(step.sampled_range);
        rec["values"] = step.values;
        rec["scores"] = step.scores;
        rec["discarded"] = step.discarded;
        rec["chosen"] = step.has_chosen ? nlohmann::json(step.chosen) : nlohmann::json(nullptr);
        rec["child_range_raw"] =
            step.has_child_range_raw ? range_to_json(step.child_range_raw) : nlohmann::json(nullptr);
        rec["child_range"] = range_to_json(step.child_range);
        rec["best_objective"] =
            step.has_best_objective ? nlohmann::json(step.best_objective) : nlohmann::json(nullptr);
        rec["cumulative_evals"] = step.cumulative_evals;
        out << rec.dump() << "\n";
    }
    return out.str();
}

SearchTrace trace_from_jsonl(const std::string& text) {
    SearchTrace trace;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("invalid trace line: ") + e.what());
        }
        SearchStep step;
        step.layer = rec.at("layer").get<int>();
        step.segment.start = rec.at("segment_start").get<int>();
        step.segment.width = rec.at("width").get<int>();
        step.sampled_range = range_from_json(rec.at("range"));
        step.values = rec.at("values").get<std::vector<double>>();
        step.scores = rec.at("scores").get<std::vector<double>>();
        step.discarded = rec.at("discarded").get<std::vector<bool>>();
        if (!rec.at("chosen").is_null()) {
            step.has_chosen = true;
            step.chosen = rec.at("chosen").get<double>();
        }
        if (!rec.at("child_range_raw").is_null()) {
            step.has_child_range_raw = true;
            step.child_range_raw = range_from_json(rec.at("child_range_raw"));
        }
        step.child_range = range_from_json(rec.at("child_range"));
        if (!rec.at("best_objective").is_null()) {
            step.has_best_objective = true;
            step.best_objective = rec.at("best_objective").get<double>();
        }
        step.cumulative_evals = rec.at("cumulative_evals").get<std::int64_t>();
        trace.total_evaluations = step.cumulative_evals;
        trace.steps.push_back(std::move(step));
    }
    return trace;
}

void save_trace(const std::string& path, const SearchTrace& trace) {
    atomic_write_file(path, trace.to_jsonl());
}

SearchTrace load_trace(const std::string& path) {
    return trace_from_jsonl(read_file(path));
}

} // namespace dcis
