#include "dcis/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "dcis/errors.hpp"
#include "dcis/util.hpp"

namespace dcis {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr char kCheckpointMagic[9] = "DCISCKPT";
constexpr int kCheckpointVersion = 1;

bool is_power_of_two(int v) {
    return v >= 1 && (v & (v - 1)) == 0;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
}

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
    return cdf + x * pdf;
}

// y[L,out] = x[L,in] * w[in,out]
void matmul_forward(const double* x, const double* w, int rows, int in, int out, double* y) {
    std::fill(y, y + static_cast<std::size_t>(rows) * out, 0.0);
    for (int t = 0; t < rows; ++t) {
        const double* xr = x + static_cast<std::size_t>(t) * in;
        double* yr = y + static_cast<std::size_t>(t) * out;
        for (int i = 0; i < in; ++i) {
            const double xv = xr[i];
            if (xv == 0.0) {
                continue;
            }
            const double* wr = w + static_cast<std::size_t>(i) * out;
            for (int j = 0; j < out; ++j) {
                yr[j] += xv * wr[j];
            }
        }
    }
}

// dx[L,in] += dy[L,out] * w^T ; dw[in,out] += x^T * dy
void matmul_backward(const double* x, const double* w, const double* dy, int rows, int in, int out,
                     double* dx, double* dw) {
    for (int t = 0; t < rows; ++t) {
        const double* xr = x + static_cast<std::size_t>(t) * in;
        const double* dyr = dy + static_cast<std::size_t>(t) * out;
        double* dxr = dx + static_cast<std::size_t>(t) * in;
        for (int i = 0; i < in; ++i) {
            const double* wr = w + static_cast<std::size_t>(i) * out;
            double* dwr = dw + static_cast<std::size_t>(i) * out;
            double acc = 0.0;
            const double xv = xr[i];
            for (int j = 0; j < out; ++j) {
                acc += dyr[j] * wr[j];
                dwr[j] += xv * dyr[j];
            }
            dxr[i] += acc;
        }
    }
}

void layernorm_forward(const double* x, const double* g, const double* b, int n, double* y,
                       double* xhat, double* inv_std) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) {
        mean += x[i];
    }
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + kLnEps);
    *inv_std = is;
    for (int i = 0; i < n; ++i) {
        xhat[i] = (x[i] - mean) * is;
        y[i] = xhat[i] * g[i] + b[i];
    }
}

void layernorm_backward(const double* dy, const double* g, const double* xhat, double inv_std,
                        int n, double* dx, double* dg, double* db) {
    double m1 = 0.0;
    double m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double dxh = dy[i] * g[i];
        m1 += dxh;
        m2 += dxh * xhat[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    m1 /= n;
    m2 /= n;
    for (int i = 0; i < n; ++i) {
        const double dxh = dy[i] * g[i];
        dx[i] += inv_std * (dxh - m1 - xhat[i] * m2);
    }
}

// rotates each head's pairs in place; sign=-1 applies the inverse rotation
// (the transpose), which is what the backward pass needs
void rope_rotate(double* qk, const RopeTable& table, int rows, int d_model, int n_heads,
                 int head_dim, double sign) {
    const int pairs = head_dim / 2;
    for (int t = 0; t < rows; ++t) {
        double* row = qk + static_cast<std::size_t>(t) * d_model;
        for (int h = 0; h < n_heads; ++h) {
            double* hr = row + static_cast<std::size_t>(h) * head_dim;
            for (int i = 0; i < pairs; ++i) {
                const double c = table.cos_at(t, i);
                const double s = sign * table.sin_at(t, i);
                const double a = hr[2 * i];
                const double b = hr[2 * i + 1];
                hr[2 * i] = a * c - b * s;
                hr[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

struct LayerCache {
    std::vector<double> xhat1, h1;
    std::vector<double> inv_std1;
    std::vector<double> q, k, v; // q, k post-rotation
    std::vector<double> probs;   // [head][t][s]
    std::vector<double> att;
    std::vector<double> x_attn;
    std::vector<double> xhat2, h2;
    std::vector<double> inv_std2;
    std::vector<double> u, act;
    std::vector<double> x_mlp;
};

struct ForwardCache {
    std::vector<double> x0;
    std::vector<LayerCache> layers;
    std::vector<double> xhatf;
    std::vector<double> inv_stdf;
};

struct ParamView {
    const double* embed;
    struct Layer {
        const double* ln1g;
        const double* ln1b;
        const double* wq;
        const double* wk;
        const double* wv;
        const double* wo;
        const double* ln2g;
        const double* ln2b;
        const double* w1;
        const double* w2;
    };
    std::vector<Layer> layers;
    const double* flng;
    const double* flnb;
    const double* head;
};

constexpr int kTensorsPerLayer = 10;

int embed_index() {
    return 0;
}
int layer_base_index(int layer) {
    return 1 + layer * kTensorsPerLayer;
}
int final_ln_g_index(int n_layers) {
    return 1 + n_layers * kTensorsPerLayer;
}
int final_ln_b_index(int n_layers) {
    return final_ln_g_index(n_layers) + 1;
}
int head_index(int n_layers) {
    return final_ln_b_index(n_layers) + 1;
}

// 64-bit working copy of the weights; built once per forward/backward entry
// point so the inner loops run on homogeneous doubles
struct DenseParams {
    std::vector<std::vector<double>> store;
    ParamView view;
};

DenseParams make_dense(const Model& model) {
    DenseParams dense;
    dense.store.reserve(model.params.size());
    for (const auto& t : model.params) {
        std::vector<double> d(t.data.size());
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            d[i] = static_cast<double>(t.data[i]);
        }
        dense.store.push_back(std::move(d));
    }
    auto at = [&](int idx) { return dense.store[static_cast<std::size_t>(idx)].data(); };
    dense.view.embed = at(embed_index());
    for (int l = 0; l < model.config.n_layers; ++l) {
        const int base = layer_base_index(l);
        dense.view.layers.push_back(ParamView::Layer{at(base + 0), at(base + 1), at(base + 2),
                                                     at(base + 3), at(base + 4), at(base + 5),
                                                     at(base + 6), at(base + 7), at(base + 8),
                                                     at(base + 9)});
    }
    dense.view.flng = at(final_ln_g_index(model.config.n_layers));
    dense.view.flnb = at(final_ln_b_index(model.config.n_layers));
    dense.view.head = at(head_index(model.config.n_layers));
    return dense;
}

void check_tokens(const Model& model, const std::vector<int>& tokens, int min_len) {
    if (static_cast<int>(tokens.size()) < min_len) {
        throw ConfigError("sequence too short: " + std::to_string(tokens.size()) +
                          " tokens, need >= " + std::to_string(min_len));
    }
    for (const int t : tokens) {
        if (t < 0 || t >= model.config.vocab_size) {
            throw ConfigError("token " + std::to_string(t) + " out of vocab " +
                              std::to_string(model.config.vocab_size));
        }
    }
}

void check_table(const Model& model, const RopeTable& table, int rows) {
    if (table.pair_count != model.config.head_dim() / 2) {
        throw ConfigError("rope table pair count mismatch");
    }
    if (table.n_positions < rows) {
        throw ConfigError("rope table covers " + std::to_string(table.n_positions) +
                          " positions, need " + std::to_string(rows));
    }
}

// runs embedding + all decoder blocks + final layernorm; returns the final
// hidden states f [L*D]
std::vector<double> run_trunk(const Model& model, const ParamView& view, const RopeTable& table,
                              const int* tokens, int rows, ForwardCache* cache) {
    const ModelConfig& cfg = model.config;
    const int d = cfg.d_model;
    const int heads = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int ff = cfg.d_ff();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t ld = static_cast<std::size_t>(rows) * d;

    std::vector<double> x(ld);
    for (int t = 0; t < rows; ++t) {
        const double* row = view.embed + static_cast<std::size_t>(tokens[t]) * d;
        for (int i = 0; i < d; ++i) {
            x[static_cast<std::size_t>(t) * d + i] = row[i];
        }
    }
    if (cache) {
        cache->x0 = x;
        cache->layers.resize(static_cast<std::size_t>(cfg.n_layers));
    }

    std::vector<double> h1(ld), xhat1(ld), q(ld), k(ld), v(ld), att(ld);
    std::vector<double> h2(ld), xhat2(ld);
    std::vector<double> u(static_cast<std::size_t>(rows) * ff), act(static_cast<std::size_t>(rows) * ff);
    std::vector<double> mlp_out(ld), inv_std(static_cast<std::size_t>(rows));
    std::vector<double> probs(static_cast<std::size_t>(heads) * rows * rows);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = view.layers[static_cast<std::size_t>(l)];

        for (int t = 0; t < rows; ++t) {
            layernorm_forward(&x[static_cast<std::size_t>(t) * d], lw.ln1g, lw.ln1b, d,
                              &h1[static_cast<std::size_t>(t) * d],
                              &xhat1[static_cast<std::size_t>(t) * d], &inv_std[static_cast<std::size_t>(t)]);
        }
        if (cache) {
            auto& lc = cache->layers[static_cast<std::size_t>(l)];
            lc.h1 = h1;
            lc.xhat1 = xhat1;
            lc.inv_std1 = inv_std;
        }

        matmul_forward(h1.data(), lw.wq, rows, d, d, q.data());
        matmul_forward(h1.data(), lw.wk, rows, d, d, k.data());
        matmul_forward(h1.data(), lw.wv, rows, d, d, v.data());
        rope_rotate(q.data(), table, rows, d, heads, hd, 1.0);
        rope_rotate(k.data(), table, rows, d, heads, hd, 1.0);

        std::fill(probs.begin(), probs.end(), 0.0);
        std::fill(att.begin(), att.end(), 0.0);
        for (int h = 0; h < heads; ++h) {
            double* ph = probs.data() + static_cast<std::size_t>(h) * rows * rows;
            for (int t = 0; t < rows; ++t) {
                const double* qt = q.data() + static_cast<std::size_t>(t) * d + h * hd;
                double* pt = ph + static_cast<std::size_t>(t) * rows;
                double max_score = -1e300;
                for (int s = 0; s <= t; ++s) {
                    const double* ks = k.data() + static_cast<std::size_t>(s) * d + h * hd;
                    double dot = 0.0;
                    for (int i = 0; i < hd; ++i) {
                        dot += qt[i] * ks[i];
                    }
                    pt[s] = dot * scale;
                    max_score = std::max(max_score, pt[s]);
                }
                double denom = 0.0;
                for (int s = 0; s <= t; ++s) {
                    pt[s] = std::exp(pt[s] - max_score);
                    denom += pt[s];
                }
                double* ot = att.data() + static_cast<std::size_t>(t) * d + h * hd;
                for (int s = 0; s <= t; ++s) {
                    pt[s] /= denom;
                    const double* vs = v.data() + static_cast<std::size_t>(s) * d + h * hd;
                    const double p = pt[s];
                    for (int i = 0; i < hd; ++i) {
                        ot[i] += p * vs[i];
                    }
                }
            }
        }

        // attention output projection + residual
        std::vector<double>& proj = mlp_out; // reuse buffer
        matmul_forward(att.data(), lw.wo, rows, d, d, proj.data());
        for (std::size_t i = 0; i < ld; ++i) {
            x[i] += proj[i];
        }

        if (cache) {
            auto& lc = cache->layers[static_cast<std::size_t>(l)];
            lc.q = q;
            lc.k = k;
            lc.v = v;
            lc.probs = probs;
            lc.att = att;
            lc.x_attn = x;
        }

        for (int t = 0; t < rows; ++t) {
            layernorm_forward(&x[static_cast<std::size_t>(t) * d], lw.ln2g, lw.ln2b, d,
                              &h2[static_cast<std::size_t>(t) * d],
                              &xhat2[static_cast<std::size_t>(t) * d], &inv_std[static_cast<std::size_t>(t)]);
        }
        matmul_forward(h2.data(), lw.w1, rows, d, ff, u.data());
        for (std::size_t i = 0; i < u.size(); ++i) {
            act[i] = gelu(u[i]);
        }
        matmul_forward(act.data(), lw.w2, rows, ff, d, mlp_out.data());
        for (std::size_t i = 0; i < ld; ++i) {
            x[i] += mlp_out[i];
        }

        if (cache) {
            auto& lc = cache->layers[static_cast<std::size_t>(l)];
            lc.h2 = h2;
            lc.xhat2 = xhat2;
            lc.inv_std2 = inv_std;
            lc.u = u;
            lc.act = act;
            lc.x_mlp = x;
        }
    }

    std::vector<double> f(ld), xhatf(ld);
    for (int t = 0; t < rows; ++t) {
        layernorm_forward(&x[static_cast<std::size_t>(t) * d], view.flng, view.flnb, d,
                          &f[static_cast<std::size_t>(t) * d], &xhatf[static_cast<std::size_t>(t) * d],
                          &inv_std[static_cast<std::size_t>(t)]);
    }
    if (cache) {
        cache->xhatf = xhatf;
        cache->inv_stdf = inv_std;
    }
    return f;
}

} // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) {
        throw ConfigError("n_layers must be >= 1");
    }
    if (n_heads < 1 || d_model < 4 || d_model % n_heads != 0) {
        throw ConfigError("d_model must be a positive multiple of n_heads");
    }
    const int hd = head_dim();
    if (hd < 4 || hd % 2 != 0) {
        throw ConfigError("head_dim must be even and >= 4, got " + std::to_string(hd));
    }
    if (!is_power_of_two(hd / 2)) {
        throw ConfigError("head_dim/2 must be a power of two, got " + std::to_string(hd / 2));
    }
    if (vocab_size < 2) {
        throw ConfigError("vocab_size must be >= 2");
    }
    if (trained_context < 2) {
        throw ConfigError("trained_context must be >= 2");
    }
    if (!(rope_base > 1.0)) {
        throw ConfigError("rope_base must be > 1");
    }
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j;
    j["n_layers"] = n_layers;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["vocab_size"] = vocab_size;
    j["trained_context"] = trained_context;
    j["rope_base"] = rope_base;
    j["seed"] = seed;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.n_layers = j.value("n_layers", cfg.n_layers);
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.n_heads = j.value("n_heads", cfg.n_heads);
    cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
    cfg.trained_context = j.value("trained_context", cfg.trained_context);
    cfg.rope_base = j.value("rope_base", cfg.rope_base);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

nlohmann::json TrainingMeta::to_json() const {
    nlohmann::json j;
    j["steps"] = steps;
    j["final_loss"] = final_loss;
    j["holdout_nll_before"] = holdout_nll_before;
    j["holdout_nll_after"] = holdout_nll_after;
    j["corpus_fingerprint"] = corpus_fingerprint;
    j["seed"] = seed;
    return j;
}

TrainingMeta TrainingMeta::from_json(const nlohmann::json& j) {
    TrainingMeta m;
    m.steps = j.value("steps", m.steps);
    m.final_loss = j.value("final_loss", m.final_loss);
    m.holdout_nll_before = j.value("holdout_nll_before", m.holdout_nll_before);
    m.holdout_nll_after = j.value("holdout_nll_after", m.holdout_nll_after);
    m.corpus_fingerprint = j.value("corpus_fingerprint", m.corpus_fingerprint);
    m.seed = j.value("seed", m.seed);
    return m;
}

Tensor& Model::param(const std::string& name) {
    for (auto& t : params) {
        if (t.name == name) {
            return t;
        }
    }
    throw ConfigError("no parameter named " + name);
}

const Tensor& Model::param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
}

std::int64_t Model::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& t : params) {
        n += t.numel();
    }
    return n;
}

std::uint64_t Model::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : params) {
        h = fnv1a64(t.data.data(), t.data.size() * sizeof(float), h);
    }
    return h;
}

Model init_model(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config = config;
    Rng rng(config.seed);

    const int d = config.d_model;
    const int v = config.vocab_size;
    const int ff = config.d_ff();
    const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);

    auto add = [&](const std::string& name, std::vector<int> shape, double std_dev) {
        Tensor t;
        t.name = name;
        t.shape = std::move(shape);
        std::int64_t n = 1;
        for (const int s : t.shape) {
            n *= s;
        }
        t.data.resize(static_cast<std::size_t>(n));
        if (std_dev > 0.0) {
            for (auto& w : t.data) {
                w = static_cast<float>(rng.normal() * std_dev);
            }
        }
        model.params.push_back(std::move(t));
    };
    auto add_const = [&](const std::string& name, int n, float value) {
        Tensor t;
        t.name = name;
        t.shape = {n};
        t.data.assign(static_cast<std::size_t>(n), value);
        model.params.push_back(std::move(t));
    };

    const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double ff_std = 1.0 / std::sqrt(static_cast<double>(ff));

    add("embed", {v, d}, 0.08);
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        add_const(p + "ln1.g", d, 1.0f);
        add_const(p + "ln1.b", d, 0.0f);
        add(p + "wq", {d, d}, w_std);
        add(p + "wk", {d, d}, w_std);
        add(p + "wv", {d, d}, w_std);
        add(p + "wo", {d, d}, w_std * residual_scale);
        add_const(p + "ln2.g", d, 1.0f);
        add_const(p + "ln2.b", d, 0.0f);
        add(p + "w1", {d, ff}, w_std);
        add(p + "w2", {ff, d}, ff_std * residual_scale);
    }
    add_const("final_ln.g", d, 1.0f);
    add_const("final_ln.b", d, 0.0f);
    add("head", {d, v}, 0.0); // zero head: uniform logits before training
    return model;
}

std::vector<double> forward_nll_with_table(const Model& model, const RopeTable& table,
                                           const std::vector<int>& tokens) {
    check_tokens(model, tokens, 2);
    const int rows = static_cast<int>(tokens.size());
    check_table(model, table, rows);
    const int d = model.config.d_model;
    const int v = model.config.vocab_size;
    const DenseParams dense = make_dense(model);
    const ParamView& view = dense.view;

    const std::vector<double> f = run_trunk(model, view, table, tokens.data(), rows, nullptr);
    std::vector<double> nll(static_cast<std::size_t>(rows - 1));
    std::vector<double> logits(static_cast<std::size_t>(v));
    for (int t = 0; t + 1 < rows; ++t) {
        std::fill(logits.begin(), logits.end(), 0.0);
        const double* ft = f.data() + static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            const double* hr = view.head + static_cast<std::size_t>(i) * v;
            const double fv = ft[i];
            for (int j = 0; j < v; ++j) {
                logits[static_cast<std::size_t>(j)] += fv * hr[j];
            }
        }
        double max_logit = -1e300;
        for (const double l : logits) {
            max_logit = std::max(max_logit, l);
        }
        double denom = 0.0;
        for (const double l : logits) {
            denom += std::exp(l - max_logit);
        }
        const double lse = max_logit + std::log(denom);
        nll[static_cast<std::size_t>(t)] = lse - logits[static_cast<std::size_t>(tokens[static_cast<std::size_t>(t) + 1])];
    }
    return nll;
}

std::vector<double> forward_nll(const Model& model, const ScalingFactors& factors,
                                const std::vector<int>& tokens) {
    const RopeTable table =
        make_rope_table(model.config.rope_config(), factors, static_cast<int>(tokens.size()));
    return forward_nll_with_table(model, table, tokens);
}

std::vector<double> next_token_logits(const Model& model, const RopeTable& table,
                                      const std::vector<int>& tokens) {
    check_tokens(model, tokens, 1);
    const int rows = static_cast<int>(tokens.size());
    check_table(model, table, rows);
    const int d = model.config.d_model;
    const int v = model.config.vocab_size;
    const DenseParams dense = make_dense(model);
    const ParamView& view = dense.view;

    const std::vector<double> f = run_trunk(model, view, table, tokens.data(), rows, nullptr);
    std::vector<double> logits(static_cast<std::size_t>(v), 0.0);
    const double* ft = f.data() + static_cast<std::size_t>(rows - 1) * d;
    for (int i = 0; i < d; ++i) {
        const double* hr = view.head + static_cast<std::size_t>(i) * v;
        for (int j = 0; j < v; ++j) {
            logits[static_cast<std::size_t>(j)] += ft[i] * hr[j];
        }
    }
    return logits;
}

namespace {

// loss and gradients for a single window, written into `g` (per-window
// buffers let the batch fan out across threads and still reduce in a fixed
// window order)
double window_loss(const Model& model, const ParamView& view, const RopeTable& table,
                   const std::vector<int>& window, double inv_total,
                   std::vector<std::vector<double>>* g) {
    const ModelConfig& cfg = model.config;
    const int d = cfg.d_model;
    const int v = cfg.vocab_size;
    const int heads = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int ff = cfg.d_ff();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const int rows = static_cast<int>(window.size());
    const std::size_t ld = static_cast<std::size_t>(rows) * d;

    ForwardCache cache;
    const std::vector<double> f = run_trunk(model, view, table, window.data(), rows, g ? &cache : nullptr);

    double loss = 0.0;
    std::vector<double> df;
    if (g) {
        df.assign(ld, 0.0);
    }
    std::vector<double> logits(static_cast<std::size_t>(v));
    double* dhead = g ? (*g)[static_cast<std::size_t>(head_index(cfg.n_layers))].data() : nullptr;
    for (int t = 0; t + 1 < rows; ++t) {
        const double* ft = f.data() + static_cast<std::size_t>(t) * d;
        std::fill(logits.begin(), logits.end(), 0.0);
        for (int i = 0; i < d; ++i) {
            const double* hr = view.head + static_cast<std::size_t>(i) * v;
            const double fv = ft[i];
            for (int j = 0; j < v; ++j) {
                logits[static_cast<std::size_t>(j)] += fv * hr[j];
            }
        }
        double max_logit = -1e300;
        for (const double l : logits) {
            max_logit = std::max(max_logit, l);
        }
        double denom = 0.0;
        for (const double l : logits) {
            denom += std::exp(l - max_logit);
        }
        const int target = window[static_cast<std::size_t>(t) + 1];
        const double lse = max_logit + std::log(denom);
        loss += (lse - logits[static_cast<std::size_t>(target)]) * inv_total;

        if (g) {
            std::vector<double> dlogits(static_cast<std::size_t>(v));
            for (int j = 0; j < v; ++j) {
                double dl = std::exp(logits[static_cast<std::size_t>(j)] - lse);
                if (j == target) {
                    dl -= 1.0;
                }
                dlogits[static_cast<std::size_t>(j)] = dl * inv_total;
            }
            double* dft = df.data() + static_cast<std::size_t>(t) * d;
            for (int i = 0; i < d; ++i) {
                const double* hr = view.head + static_cast<std::size_t>(i) * v;
                double* dhr = dhead + static_cast<std::size_t>(i) * v;
                double acc = 0.0;
                const double fv = ft[i];
                for (int j = 0; j < v; ++j) {
                    acc += dlogits[static_cast<std::size_t>(j)] * hr[j];
                    dhr[j] += dlogits[static_cast<std::size_t>(j)] * fv;
                }
                dft[i] += acc;
            }
        }
    }

    if (!g) {
        return loss;
    }

    const int nl = cfg.n_layers;

    // final layernorm
    std::vector<double> dx(ld, 0.0);
    {
        double* dgf = (*g)[static_cast<std::size_t>(final_ln_g_index(nl))].data();
        double* dbf = (*g)[static_cast<std::size_t>(final_ln_b_index(nl))].data();
        for (int t = 0; t < rows; ++t) {
            layernorm_backward(df.data() + static_cast<std::size_t>(t) * d, view.flng,
                               cache.xhatf.data() + static_cast<std::size_t>(t) * d,
                               cache.inv_stdf[static_cast<std::size_t>(t)], d,
                               dx.data() + static_cast<std::size_t>(t) * d, dgf, dbf);
        }
    }

    std::vector<double> dbranch(ld), dh(ld), du(static_cast<std::size_t>(rows) * ff),
        dact(static_cast<std::size_t>(rows) * ff), datt(ld), dq(ld), dk(ld), dv(ld);

    for (int l = nl - 1; l >= 0; --l) {
        const auto& lw = view.layers[static_cast<std::size_t>(l)];
        const auto& lc = cache.layers[static_cast<std::size_t>(l)];
        const int base = layer_base_index(l);
        double* dln1g = (*g)[static_cast<std::size_t>(base + 0)].data();
        double* dln1b = (*g)[static_cast<std::size_t>(base + 1)].data();
        double* dwq = (*g)[static_cast<std::size_t>(base + 2)].data();
        double* dwk = (*g)[static_cast<std::size_t>(base + 3)].data();
        double* dwv = (*g)[static_cast<std::size_t>(base + 4)].data();
        double* dwo = (*g)[static_cast<std::size_t>(base + 5)].data();
        double* dln2g = (*g)[static_cast<std::size_t>(base + 6)].data();
        double* dln2b = (*g)[static_cast<std::size_t>(base + 7)].data();
        double* dw1 = (*g)[static_cast<std::size_t>(base + 8)].data();
        double* dw2 = (*g)[static_cast<std::size_t>(base + 9)].data();

        // mlp sublayer: x_mlp = x_attn + gelu(ln2(x_attn) W1) W2
        std::fill(dact.begin(), dact.end(), 0.0);
        matmul_backward(lc.act.data(), lw.w2, dx.data(), rows, ff, d, dact.data(), dw2);
        for (std::size_t i = 0; i < du.size(); ++i) {
            du[i] = dact[i] * gelu_grad(lc.u[i]);
        }
        std::fill(dh.begin(), dh.end(), 0.0);
        matmul_backward(lc.h2.data(), lw.w1, du.data(), rows, d, ff, dh.data(), dw1);
        std::fill(dbranch.begin(), dbranch.end(), 0.0);
        for (int t = 0; t < rows; ++t) {
            layernorm_backward(dh.data() + static_cast<std::size_t>(t) * d, lw.ln2g,
                               lc.xhat2.data() + static_cast<std::size_t>(t) * d,
                               lc.inv_std2[static_cast<std::size_t>(t)], d,
                               dbranch.data() + static_cast<std::size_t>(t) * d, dln2g, dln2b);
        }
        for (std::size_t i = 0; i < ld; ++i) {
            dx[i] += dbranch[i];
        }

        // attention sublayer: x_attn = x_in + att Wo
        std::fill(datt.begin(), datt.end(), 0.0);
        matmul_backward(lc.att.data(), lw.wo, dx.data(), rows, d, d, datt.data(), dwo);

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> dscore(static_cast<std::size_t>(rows));
        for (int h = 0; h < heads; ++h) {
            const double* ph = lc.probs.data() + static_cast<std::size_t>(h) * rows * rows;
            for (int t = 0; t < rows; ++t) {
                const double* pt = ph + static_cast<std::size_t>(t) * rows;
                const double* dat = datt.data() + static_cast<std::size_t>(t) * d + h * hd;
                double pd_sum = 0.0;
                for (int s = 0; s <= t; ++s) {
                    const double* vs = lc.v.data() + static_cast<std::size_t>(s) * d + h * hd;
                    double dp = 0.0;
                    for (int i = 0; i < hd; ++i) {
                        dp += dat[i] * vs[i];
                    }
                    double* dvs = dv.data() + static_cast<std::size_t>(s) * d + h * hd;
                    const double p = pt[s];
                    for (int i = 0; i < hd; ++i) {
                        dvs[i] += p * dat[i];
                    }
                    dscore[static_cast<std::size_t>(s)] = dp;
                    pd_sum += p * dp;
                }
                double* dqt = dq.data() + static_cast<std::size_t>(t) * d + h * hd;
                const double* qt = lc.q.data() + static_cast<std::size_t>(t) * d + h * hd;
                for (int s = 0; s <= t; ++s) {
                    const double ds = pt[s] * (dscore[static_cast<std::size_t>(s)] - pd_sum) * scale;
                    if (ds == 0.0) {
                        continue;
                    }
                    const double* ks = lc.k.data() + static_cast<std::size_t>(s) * d + h * hd;
                    double* dks = dk.data() + static_cast<std::size_t>(s) * d + h * hd;
                    for (int i = 0; i < hd; ++i) {
                        dqt[i] += ds * ks[i];
                        dks[i] += ds * qt[i];
                    }
                }
            }
        }

        // undo the rotations on the gradients
        rope_rotate(dq.data(), table, rows, d, heads, hd, -1.0);
        rope_rotate(dk.data(), table, rows, d, heads, hd, -1.0);

        std::fill(dh.begin(), dh.end(), 0.0);
        matmul_backward(lc.h1.data(), lw.wq, dq.data(), rows, d, d, dh.data(), dwq);
        matmul_backward(lc.h1.data(), lw.wk, dk.data(), rows, d, d, dh.data(), dwk);
        matmul_backward(lc.h1.data(), lw.wv, dv.data(), rows, d, d, dh.data(), dwv);

        std::fill(dbranch.begin(), dbranch.end(), 0.0);
        for (int t = 0; t < rows; ++t) {
            layernorm_backward(dh.data() + static_cast<std::size_t>(t) * d, lw.ln1g,
                               lc.xhat1.data() + static_cast<std::size_t>(t) * d,
                               lc.inv_std1[static_cast<std::size_t>(t)], d,
                               dbranch.data() + static_cast<std::size_t>(t) * d, dln1g, dln1b);
        }
        for (std::size_t i = 0; i < ld; ++i) {
            dx[i] += dbranch[i];
        }
    }

    // embedding scatter
    double* dembed = (*g)[static_cast<std::size_t>(embed_index())].data();
    for (int t = 0; t < rows; ++t) {
        double* row = dembed + static_cast<std::size_t>(window[static_cast<std::size_t>(t)]) * d;
        const double* dxt = dx.data() + static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            row[i] += dxt[i];
        }
    }
    return loss;
}

} // namespace

double batch_nll(const Model& model, const RopeTable& table,
                 const std::vector<std::vector<int>>& windows,
                 std::vector<std::vector<double>>* grads, int threads) {
    if (windows.empty()) {
        throw ConfigError("batch_nll: no windows");
    }
    std::int64_t total_tokens = 0;
    for (const auto& w : windows) {
        check_tokens(model, w, 2);
        check_table(model, table, static_cast<int>(w.size()));
        total_tokens += static_cast<std::int64_t>(w.size()) - 1;
    }
    const double inv_total = 1.0 / static_cast<double>(total_tokens);
    const DenseParams dense = make_dense(model);

    const int n = static_cast<int>(windows.size());
    const int n_threads = std::min(std::max(threads, 1), n);

    auto make_buffers = [&]() {
        std::vector<std::vector<double>> g(model.params.size());
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            g[i].assign(model.params[i].data.size(), 0.0);
        }
        return g;
    };

    // per-window losses and gradient buffers, reduced in window order below,
    // so the result does not depend on the thread count
    std::vector<double> losses(windows.size(), 0.0);
    std::vector<std::vector<std::vector<double>>> window_grads;
    if (grads) {
        window_grads.resize(windows.size());
    }

    auto run_window = [&](int w) {
        std::vector<std::vector<double>>* g = nullptr;
        if (grads) {
            window_grads[static_cast<std::size_t>(w)] = make_buffers();
            g = &window_grads[static_cast<std::size_t>(w)];
        }
        losses[static_cast<std::size_t>(w)] =
            window_loss(model, dense.view, table, windows[static_cast<std::size_t>(w)], inv_total, g);
    };

    if (n_threads <= 1) {
        for (int w = 0; w < n; ++w) {
            run_window(w);
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
        for (int t = 0; t < n_threads; ++t) {
            pool.emplace_back([&, t]() {
                try {
                    for (int w = t; w < n; w += n_threads) {
                        run_window(w);
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

    double loss = 0.0;
    for (const double l : losses) {
        loss += l;
    }
    if (grads) {
        *grads = make_buffers();
        for (int w = 0; w < n; ++w) {
            const auto& gw = window_grads[static_cast<std::size_t>(w)];
            for (std::size_t p = 0; p < grads->size(); ++p) {
                auto& dst = (*grads)[p];
                const auto& src = gw[p];
                for (std::size_t i = 0; i < dst.size(); ++i) {
                    dst[i] += src[i];
                }
            }
        }
    }
    return loss;
}

namespace {

std::vector<std::vector<int>> holdout_windows(const Corpus& corpus, int context_len,
                                              double holdout_fraction) {
    const std::int64_t n = static_cast<std::int64_t>(corpus.tokens.size());
    const std::int64_t holdout_len =
        std::max<std::int64_t>(static_cast<std::int64_t>(holdout_fraction * static_cast<double>(n)), 0);
    std::int64_t start = n - holdout_len;
    std::vector<std::vector<int>> windows;
    for (std::int64_t s = start; s + context_len <= n && windows.size() < 8; s += context_len) {
        windows.emplace_back(corpus.tokens.begin() + s, corpus.tokens.begin() + s + context_len);
    }
    if (windows.empty()) {
        // corpus too small for a dedicated tail; fall back to its last window
        const std::int64_t s = std::max<std::int64_t>(n - context_len, 0);
        windows.emplace_back(corpus.tokens.begin() + s, corpus.tokens.end());
    }
    return windows;
}

Model train_impl(const Model& model, const ScalingFactors& factors, const Corpus& corpus,
                 const TrainOptions& opts, bool is_pretrain) {
    model.config.validate();
    if (opts.context_len < 2) {
        throw ConfigError("context_len must be >= 2");
    }
    if (is_pretrain && opts.context_len > model.config.trained_context) {
        throw ConfigError("pre-training context_len " + std::to_string(opts.context_len) +
                          " exceeds trained_context " +
                          std::to_string(model.config.trained_context));
    }
    if (opts.batch_size < 1 || opts.steps < 0) {
        throw ConfigError("invalid batch_size/steps");
    }
    if (static_cast<std::int64_t>(corpus.tokens.size()) < opts.context_len + 1) {
        throw ConfigError("corpus shorter than one context window");
    }
    for (const int t : corpus.tokens) {
        if (t < 0 || t >= model.config.vocab_size) {
            throw ConfigError("corpus token out of model vocab");
        }
    }

    Model out = model;
    if (opts.steps == 0) {
        return out;
    }
    const RopeTable table =
        make_rope_table(model.config.rope_config(), factors, opts.context_len);

    const auto holdout = holdout_windows(corpus, opts.context_len, opts.holdout_fraction);
    out.meta.holdout_nll_before = batch_nll(out, table, holdout, nullptr);
    out.meta.corpus_fingerprint = to_hex(corpus.fingerprint());
    out.meta.seed = opts.seed;

    const std::int64_t train_end =
        static_cast<std::int64_t>(corpus.tokens.size()) -
        std::max<std::int64_t>(
            static_cast<std::int64_t>(opts.holdout_fraction * static_cast<double>(corpus.tokens.size())), 0);
    const std::int64_t max_start = train_end - opts.context_len;
    if (max_start < 0) {
        throw ConfigError("corpus too small for the requested context length");
    }

    Rng rng(opts.seed);
    std::vector<std::vector<double>> grads;
    std::vector<std::vector<double>> adam_m(out.params.size()), adam_v(out.params.size());
    for (std::size_t i = 0; i < out.params.size(); ++i) {
        adam_m[i].assign(out.params[i].data.size(), 0.0);
        adam_v[i].assign(out.params[i].data.size(), 0.0);
    }

    std::vector<std::vector<int>> batch(static_cast<std::size_t>(opts.batch_size));
    double loss = 0.0;
    for (std::int64_t step = 1; step <= opts.steps; ++step) {
        for (auto& window : batch) {
            const std::int64_t s = rng.uniform_int(0, static_cast<int>(max_start + 1));
            window.assign(corpus.tokens.begin() + s, corpus.tokens.begin() + s + opts.context_len);
        }
        loss = batch_nll(out, table, batch, &grads);
        if (!std::isfinite(loss)) {
            throw DivergenceError("training loss became non-finite at step " +
                                      std::to_string(step),
                                  step);
        }

        const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
        for (std::size_t p = 0; p < out.params.size(); ++p) {
            auto& w = out.params[p].data;
            auto& m = adam_m[p];
            auto& v = adam_v[p];
            const auto& gr = grads[p];
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * gr[i];
                v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * gr[i] * gr[i];
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                w[i] = static_cast<float>(static_cast<double>(w[i]) -
                                          opts.learning_rate * mh / (std::sqrt(vh) + kAdamEps));
            }
        }

        if (opts.on_step) {
            opts.on_step(step, loss);
        }
        if (opts.snapshot_every > 0 && opts.on_snapshot &&
            (step % opts.snapshot_every == 0 || step == opts.steps)) {
            opts.on_snapshot(step, out);
        }
    }

    out.meta.steps = model.meta.steps + opts.steps;
    out.meta.final_loss = loss;
    out.meta.holdout_nll_after = batch_nll(out, table, holdout, nullptr);
    return out;
}

} // namespace

Model train(const Model& model, const Corpus& corpus, const TrainOptions& opts) {
    const ScalingFactors ones = ScalingFactors::ones(model.config.head_dim() / 2);
    return train_impl(model, ones, corpus, opts, true);
}

Model finetune_with_factors(const Model& model, const ScalingFactors& factors,
                            const Corpus& corpus, const TrainOptions& opts) {
    if (factors.size() != model.config.head_dim() / 2) {
        throw ConfigError("factor count does not match model head_dim/2");
    }
    return train_impl(model, factors, corpus, opts, false);
}

double holdout_nll(const Model& model, const ScalingFactors& factors, const Corpus& corpus,
                   int context_len, double holdout_fraction) {
    const RopeTable table = make_rope_table(model.config.rope_config(), factors, context_len);
    return batch_nll(model, table, holdout_windows(corpus, context_len, holdout_fraction), nullptr);
}

// --- checkpoint io -----------------------------------------------------------

void save_checkpoint(const Model& model, const std::string& path,
                     const nlohmann::json& config_echo) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["config"] = model.config.to_json();
    header["training_meta"] = model.meta.to_json();
    if (!config_echo.is_null()) {
        header["config_echo"] = config_echo;
    }

    std::string data;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : model.params) {
        nlohmann::json entry;
        entry["name"] = t.name;
        entry["shape"] = t.shape;
        entry["offset"] = data.size();
        entry["numel"] = t.numel();
        tensors.push_back(entry);
        const std::size_t old = data.size();
        data.resize(old + t.data.size() * sizeof(float));
        std::memcpy(data.data() + old, t.data.data(), t.data.size() * sizeof(float));
    }
    header["tensors"] = tensors;
    header["data_checksum"] = to_hex(fnv1a64(data.data(), data.size()));

    const std::string header_text = header.dump();
    std::string blob;
    blob.reserve(12 + header_text.size() + data.size());
    blob.append(kCheckpointMagic, 8);
    const std::uint32_t header_size = static_cast<std::uint32_t>(header_text.size());
    blob.append(reinterpret_cast<const char*>(&header_size), 4);
    blob.append(header_text);
    blob.append(data);
    atomic_write_file(path, blob);
}

namespace {

nlohmann::json read_checkpoint_header(const std::string& path, std::string* data_out) {
    const std::string blob = read_file(path);
    if (blob.size() < 12 || std::memcmp(blob.data(), kCheckpointMagic, 8) != 0) {
        throw IoError("not a checkpoint file: " + path);
    }
    std::uint32_t header_size = 0;
    std::memcpy(&header_size, blob.data() + 8, 4);
    if (blob.size() < 12 + static_cast<std::size_t>(header_size)) {
        throw IoError("truncated checkpoint header: " + path);
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(12, header_size));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header: " + path + ": " + e.what());
    }
    const int version = header.value("format_version", -1);
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint format version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + "): " + path);
    }
    if (data_out) {
        *data_out = blob.substr(12 + header_size);
    }
    return header;
}

} // namespace

Model load_checkpoint(const std::string& path) {
    std::string data;
    const nlohmann::json header = read_checkpoint_header(path, &data);

    const std::string checksum = header.value("data_checksum", "");
    if (checksum != to_hex(fnv1a64(data.data(), data.size()))) {
        throw IoError("checkpoint data checksum mismatch (corrupt or truncated): " + path);
    }

    Model model;
    model.config = ModelConfig::from_json(header.at("config"));
    model.config.validate();
    model.meta = TrainingMeta::from_json(header.value("training_meta", nlohmann::json::object()));

    for (const auto& entry : header.at("tensors")) {
        Tensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<std::vector<int>>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t numel = entry.at("numel").get<std::size_t>();
        if (offset + numel * sizeof(float) > data.size()) {
            throw IoError("checkpoint tensor " + t.name + " outside data section: " + path);
        }
        t.data.resize(numel);
        std::memcpy(t.data.data(), data.data() + offset, numel * sizeof(float));
        model.params.push_back(std::move(t));
    }

    // shape cross-check against a freshly derived layout
    const Model reference = init_model(model.config);
    if (reference.params.size() != model.params.size()) {
        throw IoError("checkpoint tensor count does not match config: " + path);
    }
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        if (reference.params[i].name != model.params[i].name ||
            reference.params[i].shape != model.params[i].shape) {
            throw IoError("checkpoint tensor layout mismatch at " + model.params[i].name + ": " +
                          path);
        }
    }
    return model;
}

nlohmann::json checkpoint_config_echo(const std::string& path) {
    const nlohmann::json header = read_checkpoint_header(path, nullptr);
    return header.value("config_echo", nlohmann::json());
}

} // namespace dcis
