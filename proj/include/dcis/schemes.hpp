#pragma once

#include <string>

#include <json.hpp>

#include "dcis/rope.hpp"

namespace dcis {

/// Uniform interpolation: lambda_i = s for every pair. Throws ConfigError if
/// s < 1.
ScalingFactors pi_factors(int head_dim, double s);

/// Per-pair factors implied by enlarging the frequency base to
/// base * s^(d/(d-2)): lambda_i = s^(2i/(d-2)). lambda_0 = 1 and the last
/// pair reaches exactly s, so high-frequency pairs are left nearly unscaled.
ScalingFactors ntk_factors(const RopeConfig& cfg, double s);

/// Ramped blend between no interpolation and full interpolation s, driven by
/// how many full rotations each pair completes inside the trained context:
/// r_i = trained_context / (2*pi*beta_i). Pairs with r_i >= ramp_high keep
/// lambda = 1, pairs with r_i <= ramp_low get lambda = s, linear in between.
ScalingFactors yarn_factors(const RopeConfig& cfg, double s, int trained_context,
                            double ramp_low = 1.0, double ramp_high = 32.0);

/// Running-maximum projection: out_i = max(in_0..in_i). Reintroduces the
/// monotone-factors constraint for ablation runs; idempotent and dominating.
ScalingFactors asf_project(const ScalingFactors& factors);

/// true iff the factors are non-decreasing
bool is_monotone(const ScalingFactors& factors);

// --- factors JSON document -------------------------------------------------
// { "head_dim": int, "lambdas": [real...], "provenance": string }
// plus an optional "config" object echoing the run configuration.

struct FactorsFile {
    ScalingFactors factors;
    int head_dim = 0;
    std::string provenance;
    nlohmann::json config_echo; // null when absent
};

std::string factors_to_json(const ScalingFactors& factors, int head_dim,
                            const std::string& provenance,
                            const nlohmann::json& config_echo = nullptr);
FactorsFile factors_from_json(const std::string& text);

void save_factors(const std::string& path, const ScalingFactors& factors, int head_dim,
                  const std::string& provenance, const nlohmann::json& config_echo = nullptr);
FactorsFile load_factors(const std::string& path);

} // namespace dcis
