#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace dcis {

// Reserved token ids at the top of the vocabulary. The grammar and all keys
// draw from [0, vocab-4); the two ids above the markers stay unused.
int key_marker(int vocab_size);   // vocab - 4
int query_marker(int vocab_size); // vocab - 3
int alphabet_size(int vocab_size);

struct CorpusSpec {
    std::string kind = "synthetic"; // synthetic | cyclic | file
    int vocab_size = 64;
    std::int64_t length = 131072;
    std::uint64_t grammar_seed = 1; // fixes the transition table
    std::uint64_t stream_seed = 2;  // fixes the emitted token stream

    // key-recall episodes spliced into the synthetic stream:
    // KEY k1..kK <gap grammar tokens> QUERY k1..kK
    int key_length = 4;
    int episode_gap_min = 2;
    int episode_gap_max = 48;
    int episode_spacing_min = 12; // grammar tokens between episodes
    int episode_spacing_max = 48;

    int cyclic_period = 16;  // kind == cyclic
    std::string path;        // kind == file

    void validate() const;
    nlohmann::json to_json() const;
    static CorpusSpec from_json(const nlohmann::json& j);
};

struct Corpus {
    std::vector<int> tokens;
    int vocab_size = 0;
    std::string provenance;

    std::uint64_t fingerprint() const;
};

Corpus make_corpus(const CorpusSpec& spec);

/// Independent sample sequences from the same grammar as `spec` but a
/// different stream seed; used for held-out perplexity and as the search
/// objective's fixed evaluation set. Sample i uses a seed derived from
/// (sample_seed, i).
std::vector<std::vector<int>> make_eval_samples(const CorpusSpec& spec, int n_samples,
                                                int sample_length, std::uint64_t sample_seed);

void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path, int vocab_size);

} // namespace dcis
