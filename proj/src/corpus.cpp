#include "dcis/corpus.hpp"

#include <array>
#include <charconv>
#include <sstream>

#include "dcis/errors.hpp"
#include "dcis/util.hpp"

namespace dcis {

int key_marker(int vocab_size) {
    return vocab_size - 4;
}

int query_marker(int vocab_size) {
    return vocab_size - 3;
}

int alphabet_size(int vocab_size) {
    return vocab_size - 4;
}

void CorpusSpec::validate() const {
    if (kind != "synthetic" && kind != "cyclic" && kind != "file") {
        throw ConfigError("unknown corpus kind: " + kind);
    }
    if (vocab_size < 8) {
        throw ConfigError("vocab_size must be >= 8 to fit the reserved marker tokens");
    }
    if (length < 2) {
        throw ConfigError("corpus length must be >= 2");
    }
    if (kind == "synthetic") {
        if (key_length < 1 || episode_gap_min < 0 || episode_gap_max < episode_gap_min ||
            episode_spacing_min < 1 || episode_spacing_max < episode_spacing_min) {
            throw ConfigError("invalid episode parameters");
        }
    }
    if (kind == "cyclic" && (cyclic_period < 1 || cyclic_period > vocab_size)) {
        throw ConfigError("cyclic_period must be in [1, vocab_size]");
    }
    if (kind == "file" && path.empty()) {
        throw ConfigError("file corpus needs a path");
    }
}

nlohmann::json CorpusSpec::to_json() const {
    nlohmann::json j;
    j["kind"] = kind;
    j["vocab_size"] = vocab_size;
    j["length"] = length;
    j["grammar_seed"] = grammar_seed;
    j["stream_seed"] = stream_seed;
    j["key_length"] = key_length;
    j["episode_gap_min"] = episode_gap_min;
    j["episode_gap_max"] = episode_gap_max;
    j["episode_spacing_min"] = episode_spacing_min;
    j["episode_spacing_max"] = episode_spacing_max;
    j["cyclic_period"] = cyclic_period;
    j["path"] = path;
    return j;
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
    CorpusSpec spec;
    spec.kind = j.value("kind", spec.kind);
    spec.vocab_size = j.value("vocab_size", spec.vocab_size);
    spec.length = j.value("length", spec.length);
    spec.grammar_seed = j.value("grammar_seed", spec.grammar_seed);
    spec.stream_seed = j.value("stream_seed", spec.stream_seed);
    spec.key_length = j.value("key_length", spec.key_length);
    spec.episode_gap_min = j.value("episode_gap_min", spec.episode_gap_min);
    spec.episode_gap_max = j.value("episode_gap_max", spec.episode_gap_max);
    spec.episode_spacing_min = j.value("episode_spacing_min", spec.episode_spacing_min);
    spec.episode_spacing_max = j.value("episode_spacing_max", spec.episode_spacing_max);
    spec.cyclic_period = j.value("cyclic_period", spec.cyclic_period);
    spec.path = j.value("path", spec.path);
    return spec;
}

std::uint64_t Corpus::fingerprint() const {
    return fnv1a64(tokens.data(), tokens.size() * sizeof(int));
}

namespace {

// Order-2 Markov grammar: each (a, b) state has four preferred successors
// drawn once from the grammar seed; emission picks among them with fixed
// weights, giving roughly 1.1 nats of entropy per token.
class MarkovGrammar {
public:
    MarkovGrammar(int alphabet, std::uint64_t grammar_seed) : alphabet_(alphabet) {
        Rng rng(grammar_seed);
        successors_.resize(static_cast<std::size_t>(alphabet) * alphabet);
        for (auto& entry : successors_) {
            for (int& s : entry) {
                s = rng.uniform_int(0, alphabet);
            }
        }
    }

    int next(int a, int b, Rng& stream) const {
        static constexpr std::array<double, 4> kCumulative = {0.55, 0.80, 0.92, 1.0};
        const double u = stream.uniform();
        int pick = 3;
        for (int i = 0; i < 4; ++i) {
            if (u < kCumulative[static_cast<std::size_t>(i)]) {
                pick = i;
                break;
            }
        }
        const auto& entry = successors_[static_cast<std::size_t>(a) * alphabet_ + b];
        return entry[static_cast<std::size_t>(pick)];
    }

private:
    int alphabet_;
    std::vector<std::array<int, 4>> successors_;
};

std::vector<int> synthetic_stream(const CorpusSpec& spec, std::int64_t length,
                                  std::uint64_t stream_seed) {
    const int alphabet = alphabet_size(spec.vocab_size);
    const MarkovGrammar grammar(alphabet, spec.grammar_seed);
    Rng rng(stream_seed);

    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(length));

    int a = rng.uniform_int(0, alphabet);
    int b = rng.uniform_int(0, alphabet);
    out.push_back(a);
    if (length > 1) {
        out.push_back(b);
    }

    auto emit_grammar = [&]() {
        const int t = grammar.next(a, b, rng);
        a = b;
        b = t;
        out.push_back(t);
    };

    int until_episode = rng.uniform_int(spec.episode_spacing_min, spec.episode_spacing_max + 1);
    while (static_cast<std::int64_t>(out.size()) < length) {
        if (until_episode > 0) {
            emit_grammar();
            --until_episode;
            continue;
        }
        // episode: KEY k1..kK <gap> QUERY k1..kK
        std::vector<int> key(static_cast<std::size_t>(spec.key_length));
        for (int& k : key) {
            k = rng.uniform_int(0, alphabet);
        }
        const int gap = rng.uniform_int(spec.episode_gap_min, spec.episode_gap_max + 1);
        out.push_back(key_marker(spec.vocab_size));
        out.insert(out.end(), key.begin(), key.end());
        for (int g = 0; g < gap && static_cast<std::int64_t>(out.size()) < length; ++g) {
            emit_grammar();
        }
        out.push_back(query_marker(spec.vocab_size));
        out.insert(out.end(), key.begin(), key.end());
        until_episode = rng.uniform_int(spec.episode_spacing_min, spec.episode_spacing_max + 1);
    }
    out.resize(static_cast<std::size_t>(length));
    return out;
}

} // namespace

Corpus make_corpus(const CorpusSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.vocab_size = spec.vocab_size;
    if (spec.kind == "synthetic") {
        corpus.tokens = synthetic_stream(spec, spec.length, spec.stream_seed);
        corpus.provenance = "synthetic(grammar_seed=" + std::to_string(spec.grammar_seed) +
                            ",stream_seed=" + std::to_string(spec.stream_seed) +
                            ",length=" + std::to_string(spec.length) + ")";
    } else if (spec.kind == "cyclic") {
        corpus.tokens.resize(static_cast<std::size_t>(spec.length));
        for (std::int64_t i = 0; i < spec.length; ++i) {
            corpus.tokens[static_cast<std::size_t>(i)] = static_cast<int>(i % spec.cyclic_period);
        }
        corpus.provenance = "cyclic(period=" + std::to_string(spec.cyclic_period) + ")";
    } else {
        return load_corpus(spec.path, spec.vocab_size);
    }
    return corpus;
}

std::vector<std::vector<int>> make_eval_samples(const CorpusSpec& spec, int n_samples,
                                                int sample_length, std::uint64_t sample_seed) {
    spec.validate();
    if (spec.kind == "cyclic") {
        // cyclic corpora are position-independent; one phase-shifted window each
        std::vector<std::vector<int>> samples;
        for (int i = 0; i < n_samples; ++i) {
            std::vector<int> s(static_cast<std::size_t>(sample_length));
            for (int t = 0; t < sample_length; ++t) {
                s[static_cast<std::size_t>(t)] = (t + i) % spec.cyclic_period;
            }
            samples.push_back(std::move(s));
        }
        return samples;
    }
    std::vector<std::vector<int>> samples;
    samples.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
        const std::uint64_t seed =
            sample_seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(i + 1));
        samples.push_back(synthetic_stream(spec, sample_length, seed));
    }
    return samples;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
    std::ostringstream out;
    for (const int t : corpus.tokens) {
        out << t << "\n";
    }
    atomic_write_file(path, out.str());
}

Corpus load_corpus(const std::string& path, int vocab_size) {
    const std::string text = read_file(path);
    Corpus corpus;
    corpus.vocab_size = vocab_size;
    corpus.provenance = "file(" + path + ")";
    std::istringstream in(text);
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        int value = 0;
        const auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), value);
        if (ec != std::errc{} || ptr != line.data() + line.size()) {
            throw IoError("corpus " + path + ": bad token at line " + std::to_string(line_no));
        }
        if (value < 0 || value >= vocab_size) {
            throw IoError("corpus " + path + ": token " + std::to_string(value) +
                          " out of range for vocab " + std::to_string(vocab_size) + " at line " +
                          std::to_string(line_no));
        }
        corpus.tokens.push_back(value);
    }
    if (corpus.tokens.size() < 2) {
        throw IoError("corpus " + path + " has fewer than 2 tokens");
    }
    return corpus;
}

} // namespace dcis
