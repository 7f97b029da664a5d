#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcis/corpus.hpp"
#include "dcis/rope.hpp"

namespace dcis {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int vocab_size = 64;
    int trained_context = 64;
    double rope_base = 10000.0;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    int d_ff() const { return 4 * d_model; }
    RopeConfig rope_config() const { return RopeConfig{head_dim(), rope_base}; }

    void validate() const; // throws ConfigError
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Named weight tensor. Weights are stored as 32-bit floats (and serialized
/// that way); all forward/backward arithmetic runs in 64-bit.
struct Tensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

struct TrainingMeta {
    std::int64_t steps = 0;
    double final_loss = 0.0;
    double holdout_nll_before = 0.0;
    double holdout_nll_after = 0.0;
    std::string corpus_fingerprint;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static TrainingMeta from_json(const nlohmann::json& j);
};

/// Decoder-only causal transformer: pre-norm blocks, multi-head attention
/// with rotary embeddings on q/k, GELU MLP, untied output head. Small enough
/// to train on a laptop core yet shows the usual extrapolation failure past
/// its trained context.
struct Model {
    ModelConfig config;
    std::vector<Tensor> params; // fixed order, see init_model
    TrainingMeta meta;

    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    std::int64_t parameter_count() const;
    std::uint64_t fingerprint() const; // FNV over all weight bytes
};

/// Seeded deterministic initialization. The output head starts at zero, so an
/// untrained model emits exactly uniform logits.
Model init_model(const ModelConfig& config);

/// Per-token negative log-likelihood of tokens[1..L-1] under causal
/// next-token prediction (returns L-1 values). Attention angles come from the
/// supplied scaling factors.
std::vector<double> forward_nll(const Model& model, const ScalingFactors& factors,
                                const std::vector<int>& tokens);

/// Same, against a prebuilt rope table (table.n_positions >= tokens.size()).
std::vector<double> forward_nll_with_table(const Model& model, const RopeTable& table,
                                           const std::vector<int>& tokens);

/// Logits for the next token after the sequence; used for greedy decoding.
std::vector<double> next_token_logits(const Model& model, const RopeTable& table,
                                      const std::vector<int>& tokens);

/// Mean NLL per scored token across windows; when grads is non-null it is
/// resized/zeroed to match model.params and filled with d(mean NLL)/d(param).
double batch_nll(const Model& model, const RopeTable& table,
                 const std::vector<std::vector<int>>& windows,
                 std::vector<std::vector<double>>* grads = nullptr);

struct TrainOptions {
    std::int64_t steps = 300;
    double learning_rate = 3e-4;
    int batch_size = 32;
    int context_len = 64;
    std::uint64_t seed = 0;
    double holdout_fraction = 0.05;
    std::function<void(std::int64_t step, double loss)> on_step;
    std::int64_t snapshot_every = 0; // 0 = no snapshots
    std::function<void(std::int64_t step, const Model&)> on_snapshot;
};

/// Adam on randomly sampled corpus windows, identity scaling factors.
/// Deterministic for fixed seeds; throws DivergenceError on non-finite loss.
Model train(const Model& model, const Corpus& corpus, const TrainOptions& opts);

/// Same loop with the given factors installed in every attention layer; the
/// context length may exceed the trained context.
Model finetune_with_factors(const Model& model, const ScalingFactors& factors,
                            const Corpus& corpus, const TrainOptions& opts);

/// Mean NLL over the held-out tail of the corpus (the same computation the
/// training loop reports).
double holdout_nll(const Model& model, const ScalingFactors& factors, const Corpus& corpus,
                   int context_len, double holdout_fraction = 0.05);

// --- checkpoint file ---------------------------------------------------------
// Single file: 8-byte magic, uint32 header length, JSON header (config, meta,
// tensor table with offsets, data checksum, optional config echo), then raw
// little-endian float32 tensor data.

void save_checkpoint(const Model& model, const std::string& path,
                     const nlohmann::json& config_echo = nullptr);
Model load_checkpoint(const std::string& path);
nlohmann::json checkpoint_config_echo(const std::string& path);

} // namespace dcis
