#include "dcis/schemes.hpp"

#include <algorithm>
#include <cmath>

#include "dcis/errors.hpp"
#include "dcis/util.hpp"

namespace dcis {

namespace {

void check_scale(double s) {
    if (!(s >= 1.0)) {
        throw ConfigError("scale must be >= 1, got " + std::to_string(s));
    }
}

} // namespace

ScalingFactors pi_factors(int head_dim, double s) {
    check_scale(s);
    RopeConfig cfg{head_dim, 10000.0};
    cfg.validate();
    return ScalingFactors(std::vector<double>(static_cast<std::size_t>(head_dim / 2), s));
}

ScalingFactors ntk_factors(const RopeConfig& cfg, double s) {
    check_scale(s);
    cfg.validate();
    const int d = cfg.head_dim;
    std::vector<double> lambdas(static_cast<std::size_t>(d / 2));
    for (int i = 0; i < d / 2; ++i) {
        lambdas[static_cast<std::size_t>(i)] = std::pow(s, 2.0 * i / (d - 2));
    }
    return ScalingFactors(std::move(lambdas));
}

ScalingFactors yarn_factors(const RopeConfig& cfg, double s, int trained_context,
                            double ramp_low, double ramp_high) {
    check_scale(s);
    cfg.validate();
    if (trained_context <= 0) {
        throw ConfigError("trained_context must be positive");
    }
    if (!(ramp_low < ramp_high)) {
        throw ConfigError("ramp_low must be < ramp_high");
    }
    const std::vector<double> beta = base_frequencies(cfg);
    std::vector<double> lambdas(beta.size());
    for (std::size_t i = 0; i < beta.size(); ++i) {
        const double wavelength = 2.0 * 3.14159265358979323846 * beta[i];
        const double rotations = static_cast<double>(trained_context) / wavelength;
        const double t = std::clamp((rotations - ramp_low) / (ramp_high - ramp_low), 0.0, 1.0);
        const double gamma = 1.0 - t; // 1 for slow (low-frequency) pairs, 0 for fast ones
        lambdas[i] = (1.0 - gamma) + gamma * s;
    }
    return ScalingFactors(std::move(lambdas));
}

ScalingFactors asf_project(const ScalingFactors& factors) {
    std::vector<double> out = factors.values();
    double running = out.empty() ? 0.0 : out[0];
    for (double& v : out) {
        running = std::max(running, v);
        v = running;
    }
    return ScalingFactors(std::move(out));
}

bool is_monotone(const ScalingFactors& factors) {
    for (int i = 1; i < factors.size(); ++i) {
        if (factors[i] < factors[i - 1]) {
            return false;
        }
    }
    return true;
}

std::string factors_to_json(const ScalingFactors& factors, int head_dim,
                            const std::string& provenance, const nlohmann::json& config_echo) {
    nlohmann::json doc;
    doc["head_dim"] = head_dim;
    doc["lambdas"] = factors.values();
    doc["provenance"] = provenance;
    if (!config_echo.is_null()) {
        doc["config"] = config_echo;
    }
    return doc.dump(2) + "\n";
}

FactorsFile factors_from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("invalid factors JSON: ") + e.what());
    }
    if (!doc.contains("head_dim") || !doc.contains("lambdas") || !doc.contains("provenance")) {
        throw IoError("factors JSON missing head_dim/lambdas/provenance");
    }
    FactorsFile out;
    out.head_dim = doc["head_dim"].get<int>();
    out.factors = ScalingFactors(doc["lambdas"].get<std::vector<double>>());
    out.provenance = doc["provenance"].get<std::string>();
    if (doc.contains("config")) {
        out.config_echo = doc["config"];
    }
    if (out.factors.size() != out.head_dim / 2) {
        throw IoError("factors JSON: lambdas length " + std::to_string(out.factors.size()) +
                      " does not match head_dim " + std::to_string(out.head_dim));
    }
    return out;
}

void save_factors(const std::string& path, const ScalingFactors& factors, int head_dim,
                  const std::string& provenance, const nlohmann::json& config_echo) {
    atomic_write_file(path, factors_to_json(factors, head_dim, provenance, config_echo));
}

FactorsFile load_factors(const std::string& path) {
    return factors_from_json(read_file(path));
}

} // namespace dcis
