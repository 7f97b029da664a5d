#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcis/corpus.hpp"
#include "dcis/model.hpp"
#include "dcis/rope.hpp"
#include "dcis/search.hpp"

namespace dcis {

struct EvalEntry {
    int length = 0;
    std::string metric; // "ppl" | "passkey_recall"
    double value = 0.0;
    int n_trials = 0; // 0 = not applicable

    friend bool operator==(const EvalEntry&, const EvalEntry&) = default;
};

struct EvalReport {
    std::vector<EvalEntry> entries;
    std::string factors_provenance;
    std::string model_fingerprint;
    std::uint64_t seed = 0;
    nlohmann::json config_echo; // null when absent

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

/// exp(mean NLL) over every scored token of every sample, each sample
/// truncated to eval_length and scored with full-context causal attention.
/// Throws EvalError (naming the sample) if any sample is shorter than
/// eval_length, or if there are no samples.
double perplexity(const Model& model, const ScalingFactors& factors,
                  const std::vector<std::vector<int>>& samples, int eval_length);

struct PasskeyOptions {
    int n_trials = 50;
    int key_length = 4;
    std::uint64_t seed = 0;
    double depth_min = 0.05; // key position as a fraction of the context
    double depth_max = 0.80;
    int threads = 0; // 0 = DCIS_THREADS env or hardware concurrency
};

/// Greedy continuation function: prompt -> the next n tokens.
using Decoder = std::function<std::vector<int>(const std::vector<int>& prompt, int n_tokens)>;

/// Runs n_trials retrieval probes: grammar filler with [KEY k1..kK] hidden at
/// a seeded depth and QUERY as the final prompt token, then asks the decoder
/// for key_length tokens. A trial succeeds only on an exact full-key match.
/// Returns successes / n_trials.
double passkey_recall_with_decoder(const Decoder& decoder, const CorpusSpec& filler,
                                   int context_length, const PasskeyOptions& opts);

/// Same probe with the model's greedy decoding under the given factors.
double passkey_recall(const Model& model, const ScalingFactors& factors,
                      const CorpusSpec& filler, int context_length, const PasskeyOptions& opts);

/// Perplexity at each length (ascending) over a fixed sample set.
EvalReport ppl_curve(const Model& model, const ScalingFactors& factors,
                     const std::vector<std::vector<int>>& samples, const std::vector<int>& lengths,
                     const std::string& factors_provenance = "");

/// format "json" or "csv". CSV columns:
/// length,metric_name,value,n_trials,factors_provenance (n_trials blank when
/// not applicable).
void emit_report(const EvalReport& report, const std::string& format, const std::string& path);
EvalReport load_report_json(const std::string& path);
std::string report_to_csv(const EvalReport& report);

/// Perplexity of the model on a fixed held-out sample set at target_length;
/// what the search minimizes. The samples are shared by every evaluation in
/// a search so score comparisons are noise-free.
Objective make_toy_ppl_objective(const Model& model, std::vector<std::vector<int>> samples,
                                 int target_length);

} // namespace dcis
