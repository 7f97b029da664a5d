#include "dcis/rope.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcis/errors.hpp"

namespace dcis {

void RopeConfig::validate() const {
    if (head_dim < 4 || head_dim % 2 != 0) {
        throw ConfigError("head_dim must be even and >= 4, got " + std::to_string(head_dim));
    }
    if (!(base > 1.0)) {
        throw ConfigError("rope base must be > 1, got " + std::to_string(base));
    }
}

ScalingFactors::ScalingFactors(std::vector<double> lambdas) : lambdas_(std::move(lambdas)) {
    for (double& v : lambdas_) {
        v = std::max(v, kMinLambda);
    }
}

ScalingFactors ScalingFactors::ones(int count) {
    return ScalingFactors(std::vector<double>(static_cast<std::size_t>(count), 1.0));
}

void ScalingFactors::add_to_segment(int start, int width, double delta) {
    if (start < 0 || width < 0 || start + width > size()) {
        throw ConfigError("segment [" + std::to_string(start) + ", " +
                          std::to_string(start + width) + ") out of bounds for " +
                          std::to_string(size()) + " factors");
    }
    for (int i = start; i < start + width; ++i) {
        auto& v = lambdas_[static_cast<std::size_t>(i)];
        v = std::max(v + delta, kMinLambda);
    }
}

std::vector<double> base_frequencies(const RopeConfig& cfg) {
    cfg.validate();
    const int pairs = cfg.pair_count();
    std::vector<double> beta(static_cast<std::size_t>(pairs));
    for (int i = 0; i < pairs; ++i) {
        beta[static_cast<std::size_t>(i)] = std::pow(cfg.base, 2.0 * i / cfg.head_dim);
    }
    return beta;
}

std::vector<double> rotation_angles(const RopeConfig& cfg, const ScalingFactors& factors,
                                    std::int64_t position) {
    cfg.validate();
    if (factors.size() != cfg.pair_count()) {
        throw ConfigError("factor count " + std::to_string(factors.size()) +
                          " does not match head_dim/2 = " + std::to_string(cfg.pair_count()));
    }
    const std::vector<double> beta = base_frequencies(cfg);
    std::vector<double> angles(beta.size());
    for (std::size_t i = 0; i < beta.size(); ++i) {
        angles[i] = static_cast<double>(position) / (factors[static_cast<int>(i)] * beta[i]);
    }
    return angles;
}

std::vector<double> apply_rope(const std::vector<double>& x, std::int64_t position,
                               const RopeConfig& cfg, const ScalingFactors& factors) {
    if (static_cast<int>(x.size()) != cfg.head_dim) {
        throw ConfigError("input has " + std::to_string(x.size()) + " dims, expected " +
                          std::to_string(cfg.head_dim));
    }
    const std::vector<double> angles = rotation_angles(cfg, factors, position);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < angles.size(); ++i) {
        const double c = std::cos(angles[i]);
        const double s = std::sin(angles[i]);
        const double a = x[2 * i];
        const double b = x[2 * i + 1];
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    return out;
}

double attention_score(const std::vector<double>& q, const std::vector<double>& k,
                       std::int64_t m, std::int64_t n, const RopeConfig& cfg,
                       const ScalingFactors& factors) {
    const std::vector<double> qr = apply_rope(q, m, cfg, factors);
    const std::vector<double> kr = apply_rope(k, n, cfg, factors);
    double dot = 0.0;
    for (std::size_t i = 0; i < qr.size(); ++i) {
        dot += qr[i] * kr[i];
    }
    return dot;
}

RopeTable make_rope_table(const RopeConfig& cfg, const ScalingFactors& factors, int n_positions) {
    cfg.validate();
    if (factors.size() != cfg.pair_count()) {
        throw ConfigError("factor count " + std::to_string(factors.size()) +
                          " does not match head_dim/2 = " + std::to_string(cfg.pair_count()));
    }
    const std::vector<double> beta = base_frequencies(cfg);
    RopeTable table;
    table.pair_count = cfg.pair_count();
    table.n_positions = n_positions;
    table.cos_values.resize(static_cast<std::size_t>(n_positions) * table.pair_count);
    table.sin_values.resize(static_cast<std::size_t>(n_positions) * table.pair_count);
    for (int m = 0; m < n_positions; ++m) {
        for (int i = 0; i < table.pair_count; ++i) {
            const double angle = static_cast<double>(m) / (factors[i] * beta[static_cast<std::size_t>(i)]);
            const std::size_t idx = static_cast<std::size_t>(m) * table.pair_count + i;
            table.cos_values[idx] = std::cos(angle);
            table.sin_values[idx] = std::sin(angle);
        }
    }
    return table;
}

} // namespace dcis
