#include "dcis/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <sstream>
#include <thread>

#include "dcis/errors.hpp"
#include "dcis/util.hpp"

namespace dcis {

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries) {
        nlohmann::json entry;
        entry["length"] = e.length;
        entry["metric"] = e.metric;
        entry["value"] = e.value;
        entry["n_trials"] = e.n_trials;
        j["entries"].push_back(entry);
    }
    j["factors_provenance"] = factors_provenance;
    j["model_fingerprint"] = model_fingerprint;
    j["seed"] = seed;
    if (!config_echo.is_null()) {
        j["config"] = config_echo;
    }
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport report;
    for (const auto& entry : j.value("entries", nlohmann::json::array())) {
        EvalEntry e;
        e.length = entry.at("length").get<int>();
        e.metric = entry.at("metric").get<std::string>();
        e.value = entry.at("value").get<double>();
        e.n_trials = entry.value("n_trials", 0);
        report.entries.push_back(std::move(e));
    }
    report.factors_provenance = j.value("factors_provenance", "");
    report.model_fingerprint = j.value("model_fingerprint", "");
    report.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("config")) {
        report.config_echo = j["config"];
    }
    return report;
}

double perplexity(const Model& model, const ScalingFactors& factors,
                  const std::vector<std::vector<int>>& samples, int eval_length) {
    if (samples.empty()) {
        throw EvalError("perplexity needs at least one sample");
    }
    if (eval_length < 2) {
        throw EvalError("eval_length must be >= 2");
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (static_cast<int>(samples[i].size()) < eval_length) {
            throw EvalError("sample " + std::to_string(i) + " has " +
                            std::to_string(samples[i].size()) + " tokens, shorter than eval_length " +
                            std::to_string(eval_length));
        }
    }
    const RopeTable table = make_rope_table(model.config.rope_config(), factors, eval_length);
    double total = 0.0;
    std::int64_t count = 0;
    for (const auto& sample : samples) {
        const std::vector<int> window(sample.begin(), sample.begin() + eval_length);
        const std::vector<double> nll = forward_nll_with_table(model, table, window);
        for (const double v : nll) {
            total += v;
        }
        count += static_cast<std::int64_t>(nll.size());
    }
    return std::exp(total / static_cast<double>(count));
}

namespace {

struct PasskeyTrial {
    std::vector<int> prompt;
    std::vector<int> key;
};

PasskeyTrial build_trial(const CorpusSpec& filler, int context_length, const PasskeyOptions& opts,
                         std::uint64_t trial_seed) {
    Rng rng(trial_seed);
    const int alphabet = alphabet_size(filler.vocab_size);

    PasskeyTrial trial;
    trial.key.resize(static_cast<std::size_t>(opts.key_length));
    for (int& k : trial.key) {
        k = rng.uniform_int(0, alphabet);
    }

    const int filler_total = context_length - opts.key_length - 2; // KEY + QUERY markers
    const double depth = opts.depth_min + (opts.depth_max - opts.depth_min) * rng.uniform();
    const int before = static_cast<int>(depth * filler_total);
    const int after = filler_total - before;

    CorpusSpec stream = filler;
    stream.kind = "synthetic";
    stream.length = filler_total + 2;
    stream.stream_seed = rng.next_u64();
    // plain grammar text only: the probe plants the one key itself
    stream.episode_spacing_min = static_cast<int>(stream.length) + 1;
    stream.episode_spacing_max = stream.episode_spacing_min;
    const Corpus text = make_corpus(stream);

    trial.prompt.reserve(static_cast<std::size_t>(context_length));
    trial.prompt.insert(trial.prompt.end(), text.tokens.begin(), text.tokens.begin() + before);
    trial.prompt.push_back(key_marker(filler.vocab_size));
    trial.prompt.insert(trial.prompt.end(), trial.key.begin(), trial.key.end());
    trial.prompt.insert(trial.prompt.end(), text.tokens.begin() + before,
                        text.tokens.begin() + before + after);
    trial.prompt.push_back(query_marker(filler.vocab_size));
    return trial;
}

} // namespace

double passkey_recall_with_decoder(const Decoder& decoder, const CorpusSpec& filler,
                                   int context_length, const PasskeyOptions& opts) {
    if (filler.vocab_size < 8) {
        throw EvalError("vocabulary lacks reserved marker tokens (vocab_size < 8)");
    }
    if (opts.key_length < 1 || context_length < opts.key_length + 8) {
        throw EvalError("context_length " + std::to_string(context_length) +
                        " too small for key_length " + std::to_string(opts.key_length));
    }
    if (opts.n_trials < 1) {
        throw EvalError("n_trials must be >= 1");
    }

    std::vector<char> success(static_cast<std::size_t>(opts.n_trials), 0);
    const int n_threads = std::min(resolve_thread_count(opts.threads), opts.n_trials);

    auto run_trial = [&](int i) {
        const std::uint64_t trial_seed =
            opts.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(i + 1));
        const PasskeyTrial trial = build_trial(filler, context_length, opts, trial_seed);
        const std::vector<int> decoded = decoder(trial.prompt, opts.key_length);
        success[static_cast<std::size_t>(i)] = (decoded == trial.key) ? 1 : 0;
    };

    if (n_threads <= 1) {
        for (int i = 0; i < opts.n_trials; ++i) {
            run_trial(i);
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
        for (int t = 0; t < n_threads; ++t) {
            pool.emplace_back([&, t]() {
                try {
                    for (int i = t; i < opts.n_trials; i += n_threads) {
                        run_trial(i);
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
    }

    int hits = 0;
    for (const char s : success) {
        hits += s;
    }
    return static_cast<double>(hits) / static_cast<double>(opts.n_trials);
}

double passkey_recall(const Model& model, const ScalingFactors& factors,
                      const CorpusSpec& filler, int context_length, const PasskeyOptions& opts) {
    if (model.config.vocab_size != filler.vocab_size) {
        throw EvalError("model vocab and filler vocab differ");
    }
    const RopeTable table = make_rope_table(model.config.rope_config(), factors,
                                            context_length + opts.key_length);
    Decoder greedy = [&model, &table](const std::vector<int>& prompt, int n) {
        std::vector<int> tokens = prompt;
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            const std::vector<double> logits = next_token_logits(model, table, tokens);
            int best = 0;
            for (int t = 1; t < static_cast<int>(logits.size()); ++t) {
                if (logits[static_cast<std::size_t>(t)] > logits[static_cast<std::size_t>(best)]) {
                    best = t;
                }
            }
            out.push_back(best);
            tokens.push_back(best);
        }
        return out;
    };
    return passkey_recall_with_decoder(greedy, filler, context_length, opts);
}

EvalReport ppl_curve(const Model& model, const ScalingFactors& factors,
                     const std::vector<std::vector<int>>& samples, const std::vector<int>& lengths,
                     const std::string& factors_provenance) {
    if (!std::is_sorted(lengths.begin(), lengths.end())) {
        throw EvalError("lengths must be sorted ascending");
    }
    EvalReport report;
    report.factors_provenance = factors_provenance;
    report.model_fingerprint = to_hex(model.fingerprint());
    for (const int len : lengths) {
        EvalEntry e;
        e.length = len;
        e.metric = "ppl";
        e.value = perplexity(model, factors, samples, len);
        report.entries.push_back(e);
    }
    return report;
}

std::string report_to_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "length,metric_name,value,n_trials,factors_provenance\n";
    char buf[64];
    for (const auto& e : report.entries) {
        std::snprintf(buf, sizeof(buf), "%.17g", e.value);
        out << e.length << "," << e.metric << "," << buf << ",";
        if (e.n_trials > 0) {
            out << e.n_trials;
        }
        out << "," << report.factors_provenance << "\n";
    }
    return out.str();
}

void emit_report(const EvalReport& report, const std::string& format, const std::string& path) {
    if (format == "json") {
        atomic_write_file(path, report.to_json().dump(2) + "\n");
    } else if (format == "csv") {
        atomic_write_file(path, report_to_csv(report));
    } else {
        throw ConfigError("unknown report format: " + format);
    }
}

EvalReport load_report_json(const std::string& path) {
    try {
        return EvalReport::from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("invalid report JSON " + path + ": " + e.what());
    }
}

Objective make_toy_ppl_objective(const Model& model, std::vector<std::vector<int>> samples,
                                 int target_length) {
    if (samples.empty()) {
        throw ConfigError("toy_ppl objective needs evaluation samples");
    }
    auto shared_model = std::make_shared<const Model>(model);
    auto shared_samples = std::make_shared<const std::vector<std::vector<int>>>(std::move(samples));
    Objective obj;
    obj.name = "toy_ppl";
    obj.target_length = target_length;
    obj.eval = [shared_model, shared_samples, target_length](const ScalingFactors& f) {
        return perplexity(*shared_model, f, *shared_samples, target_length);
    };
    return obj;
}

} // namespace dcis
