#pragma once

#include <cstdint>
#include <vector>

namespace dcis {

/// Rotary embedding geometry for one attention head: the head dimension d and
/// the frequency base b. Per-pair base frequencies are beta_i = b^(2i/d) for
/// i in [0, d/2), so pair 0 rotates fastest (one radian per position) and the
/// last pair slowest.
struct RopeConfig {
    int head_dim = 16;
    double base = 10000.0;

    int pair_count() const { return head_dim / 2; }
    void validate() const; // throws ConfigError: head_dim even and >= 4, base > 1
};

/// Per-pair angle divisors lambda_i. The rotation angle of pair i at position
/// m is m / (lambda_i * beta_i); lambda_i > 1 slows the pair down
/// (interpolation), lambda_i = 1 leaves it unscaled. Entries are clamped to
/// kMinLambda on every construction or mutation so angles stay finite; there
/// is deliberately no monotonicity requirement across pairs.
class ScalingFactors {
public:
    static constexpr double kMinLambda = 0.01;

    ScalingFactors() = default;
    explicit ScalingFactors(std::vector<double> lambdas);

    static ScalingFactors ones(int count);

    int size() const { return static_cast<int>(lambdas_.size()); }
    bool empty() const { return lambdas_.empty(); }
    double operator[](int i) const { return lambdas_[static_cast<std::size_t>(i)]; }
    const std::vector<double>& values() const { return lambdas_; }

    // adds delta to lambdas_[start .. start+width), clamping each result
    void add_to_segment(int start, int width, double delta);

    friend bool operator==(const ScalingFactors&, const ScalingFactors&) = default;

private:
    std::vector<double> lambdas_;
};

/// beta_i = base^(2i/d) for i = 0 .. d/2-1; strictly increasing, beta_0 = 1.
std::vector<double> base_frequencies(const RopeConfig& cfg);

/// angle_i = m / (lambda_i * beta_i)
std::vector<double> rotation_angles(const RopeConfig& cfg, const ScalingFactors& factors,
                                    std::int64_t position);

/// Rotates each consecutive pair (x[2i], x[2i+1]) by the pair's angle at the
/// given position. Norm-preserving. Throws ConfigError on size mismatch.
std::vector<double> apply_rope(const std::vector<double>& x, std::int64_t position,
                               const RopeConfig& cfg, const ScalingFactors& factors);

/// dot(apply_rope(q, m), apply_rope(k, n)); depends on q, k and n-m only.
double attention_score(const std::vector<double>& q, const std::vector<double>& k,
                       std::int64_t m, std::int64_t n, const RopeConfig& cfg,
                       const ScalingFactors& factors);

/// Precomputed cos/sin per (position, pair), row-major [position][pair].
/// This is what the transformer forward pass consumes; building it once per
/// sequence keeps all angle math in 64-bit regardless of activation width.
struct RopeTable {
    int pair_count = 0;
    int n_positions = 0;
    std::vector<double> cos_values;
    std::vector<double> sin_values;

    double cos_at(int position, int pair) const {
        return cos_values[static_cast<std::size_t>(position) * pair_count + pair];
    }
    double sin_at(int position, int pair) const {
        return sin_values[static_cast<std::size_t>(position) * pair_count + pair];
    }
};

RopeTable make_rope_table(const RopeConfig& cfg, const ScalingFactors& factors, int n_positions);

} // namespace dcis
