#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace convo {

using Mat = Eigen::MatrixXf;
using Vec = Eigen::VectorXf;
using DMat = Eigen::MatrixXd;
using DVec = Eigen::VectorXd;

constexpr int kMotionFps = 30;  // every modality is aligned to this clock

// All runtime contract violations surface as ConvoError with the message
// the caller can act on; the CLI maps them to nonzero exit codes.
struct ConvoError : std::runtime_error {
    explicit ConvoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ConvoError(msg);
}

// Deterministic RNG used everywhere. One instance per logical stream
// (generation, training, sampling) so seeds compose predictably.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    float uniform() { return std::uniform_real_distribution<float>(0.f, 1.f)(gen_); }
    float uniform(float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(gen_); }
    // inclusive bounds
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
    float normal() { return std::normal_distribution<float>(0.f, 1.f)(gen_); }
    float normal(float mean, float stddev) { return std::normal_distribution<float>(mean, stddev)(gen_); }

    Mat normal_mat(int rows, int cols, float stddev = 1.f) {
        Mat m(rows, cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = normal() * stddev;
        return m;
    }

    // derive an independent child stream
    Rng fork() { return Rng(((uint64_t)gen_() << 32) ^ gen_()); }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline uint64_t fnv1a_str(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline bool all_finite(const Mat& m) { return m.allFinite(); }

// chi-square utilities for the statistical oracles ------------------------

// regularized lower incomplete gamma P(a, x), series + continued fraction
inline double gamma_p(double a, double x) {
    if (x <= 0.0) return 0.0;
    const double lg = std::lgamma(a);
    if (x < a + 1.0) {
        double sum = 1.0 / a, term = sum, ap = a;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if (std::fabs(term) < std::fabs(sum) * 1e-15) break;
        }
        return sum * std::exp(-x + a * std::log(x) - lg);
    }
    // continued fraction for Q(a, x)
    double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
    for (int i = 1; i <= 500; ++i) {
        double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::fabs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-15) break;
    }
    return 1.0 - std::exp(-x + a * std::log(x) - lg) * h;
}

inline double chi2_cdf(double x, double df) { return gamma_p(df / 2.0, x / 2.0); }

// critical value such that P(X <= crit) = 1 - alpha, by bisection
inline double chi2_critical(double df, double alpha) {
    double lo = 0.0, hi = df + 200.0 * std::sqrt(2.0 * df) + 200.0;
    for (int i = 0; i < 200; ++i) {
        double mid = 0.5 * (lo + hi);
        if (chi2_cdf(mid, df) < 1.0 - alpha)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

// Pearson chi-square statistic for observed counts vs expected probabilities
inline double chi2_statistic(const std::vector<long>& counts, const std::vector<double>& probs) {
    require(counts.size() == probs.size(), "chi2: size mismatch");
    long total = 0;
    for (long c : counts) total += c;
    double stat = 0.0;
    for (size_t i = 0; i < counts.size(); ++i) {
        double expected = probs[i] * (double)total;
        if (expected <= 0.0) continue;
        double d = (double)counts[i] - expected;
        stat += d * d / expected;
    }
    return stat;
}

}  // namespace convo
