#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "encoders.hpp"
#include "error.hpp"
#include "psd.hpp"
#include "rng.hpp"

namespace pmh {

enum class ProbeMode { Exact, Stochastic };

struct PenaltySpec {
    PsdMatrix sigma_prime;
    double lambda = 0.0;
    std::optional<double> cap;
    ProbeMode probe_mode = ProbeMode::Exact;
    int n_probes = 4;
    double probe_scale = 1e-2;  // 1.0 reproduces unit-scale paired views
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lambda >= 0)) fail(ErrorKind::InvalidInput, "lambda must be >= 0");
        if (cap && !(*cap > 0)) fail(ErrorKind::InvalidInput, "cap must be > 0");
        if (!(probe_scale > 0)) fail(ErrorKind::InvalidInput, "probe_scale must be > 0");
        if (probe_mode == ProbeMode::Stochastic && n_probes < 1) fail(ErrorKind::InvalidInput, "n_probes must be >= 1");
    }
};

// Batch mean of Tr(J^T J Sigma') at unit lambda.
inline double exact_trace_penalty(const EncoderParams& enc, const Mat& x, const PsdMatrix& sigma_prime) {
    require_same_dim(enc.d_x(), sigma_prime.dim(), "exact_trace_penalty");
    check_input(enc, x);
    if (x.rows() == 0) return 0.0;
    const Mat& s = sigma_prime.entries();
    if (enc.kind == EncoderKind::Linear) return std::max(0.0, (enc.W * s * enc.W.transpose()).trace());
    // Tr(W2 D W1 S W1^T D W2^T) = sum_jk D_j D_k G_jk A_jk with G = W2^T W2, A = W1 S W1^T
    const Mat ga = (enc.W2.transpose() * enc.W2).cwiseProduct(enc.W1 * s * enc.W1.transpose());
    const Mat u = preactivation(enc, x);
    double total = 0;
    Vec dg(u.cols());
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
        for (Eigen::Index j = 0; j < u.cols(); ++j) dg(j) = act_d1(enc.activation, u(i, j));
        total += dg.dot(ga * dg);
    }
    return std::max(0.0, total / static_cast<double>(u.rows()));
}

// Lower factor used to shape probes. Jitter is relative to the mean diagonal so
// that rescaling Sigma' rescales the probes; an all-zero Sigma' gives zero probes.
inline std::optional<Mat> probe_factor(const PsdMatrix& sigma_prime) {
    const double scale = sigma_prime.entries().diagonal().mean();
    if (!(scale > 0)) return std::nullopt;
    return cholesky_jittered(sigma_prime, 1e-6 * scale);
}

// Probe block for one (seed, tag, probe) key: rows are eps * L z.
inline Mat draw_probe(const Mat& lower, double eps, Eigen::Index n, std::uint64_t seed, std::uint64_t tag,
                      std::uint64_t probe) {
    Rng g(seed, {0x9b0be, tag, probe});
    return eps * g.normal_matrix(n, lower.rows()) * lower.transpose();
}

struct StochasticEstimate {
    double value = 0.0;
    double std_error = 0.0;  // across probes
};

inline StochasticEstimate stochastic_penalty_ex(const EncoderParams& enc, const Mat& x, const PenaltySpec& spec,
                                                std::uint64_t tag = 0) {
    spec.validate();
    if (spec.probe_mode != ProbeMode::Stochastic) fail(ErrorKind::InvalidInput, "spec.probe_mode must be stochastic");
    require_same_dim(enc.d_x(), spec.sigma_prime.dim(), "stochastic_penalty");
    check_input(enc, x);
    const auto lower = probe_factor(spec.sigma_prime);
    if (!lower || x.rows() == 0) return {};
    const Mat base = forward(enc, x);
    const double eps2 = spec.probe_scale * spec.probe_scale;
    std::vector<double> per_probe;
    for (int p = 0; p < spec.n_probes; ++p) {
        const Mat xp = x + draw_probe(*lower, spec.probe_scale, x.rows(), spec.seed, tag, static_cast<std::uint64_t>(p));
        per_probe.push_back((forward(enc, xp) - base).squaredNorm() / (eps2 * static_cast<double>(x.rows())));
    }
    StochasticEstimate e;
    for (double v : per_probe) e.value += v;
    e.value /= spec.n_probes;
    if (spec.n_probes > 1) {
        double ss = 0;
        for (double v : per_probe) ss += (v - e.value) * (v - e.value);
        e.std_error = std::sqrt(ss / (spec.n_probes - 1) / spec.n_probes);
    }
    return e;
}

inline double stochastic_penalty(const EncoderParams& enc, const Mat& x, const PenaltySpec& spec) {
    return stochastic_penalty_ex(enc, x, spec).value;
}

// Unit-lambda penalty in the spec's probe mode.
inline double penalty_value(const EncoderParams& enc, const Mat& x, const PenaltySpec& spec, std::uint64_t tag = 0) {
    return spec.probe_mode == ProbeMode::Exact ? exact_trace_penalty(enc, x, spec.sigma_prime)
                                               : stochastic_penalty_ex(enc, x, spec, tag).value;
}

struct CappedTotal {
    double total = 0.0;
    double pmh_fraction = 0.0;
    bool clipped = false;
};

// `penalty` is the already-weighted term; it contributes at most cap * task_loss.
inline CappedTotal capped_combine(double task_loss, double penalty, double cap) {
    if (!(cap > 0)) fail(ErrorKind::InvalidInput, "cap must be > 0");
    if (task_loss < 0 || penalty < 0) fail(ErrorKind::InvalidInput, "losses must be nonnegative");
    CappedTotal c;
    const double limit = cap * task_loss;
    const double contrib = std::min(penalty, limit);
    c.clipped = penalty > limit;
    c.total = task_loss + contrib;
    c.pmh_fraction = c.total > 0 ? contrib / c.total : 0.0;
    return c;
}

// Sum of lambda_k * penalty_k, each clipped against the shared task loss when
// the spec carries a cap.
inline double compose_penalties(const std::vector<PenaltySpec>& specs, const EncoderParams& enc, const Mat& x,
                                double task_loss = std::numeric_limits<double>::infinity()) {
    double total = 0;
    for (std::size_t k = 0; k < specs.size(); ++k) {
        const auto& s = specs[k];
        s.validate();
        double term = s.lambda * penalty_value(enc, x, s, static_cast<std::uint64_t>(k));
        if (s.cap && std::isfinite(task_loss)) term = std::min(term, *s.cap * task_loss);
        total += term;
    }
    return total;
}

}  // namespace pmh
