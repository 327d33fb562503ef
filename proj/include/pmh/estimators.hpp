#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "psd.hpp"

namespace pmh {

enum class Family { A1, A2, A3, A4, A5, A6, A7 };

inline std::string to_string(Family f) { return "A" + std::to_string(static_cast<int>(f) + 1); }

inline Family family_from_string(const std::string& s) {
    if (s.size() == 2 && s[0] == 'A' && s[1] >= '1' && s[1] <= '7') return static_cast<Family>(s[1] - '1');
    fail(ErrorKind::ConfigError, "unknown estimator family '" + s + "'");
}

enum class GapVerdict { Pass, Marginal, Fail };

inline std::string to_string(GapVerdict v) {
    switch (v) {
        case GapVerdict::Pass: return "pass";
        case GapVerdict::Marginal: return "marginal";
        case GapVerdict::Fail: return "fail";
    }
    return "fail";
}

struct EigengapReport {
    int r = 0;
    double lambda_r = 0.0;
    double lambda_r1 = 0.0;
    double gamma_r = 0.0;       // lambda_r / lambda_{r+1}
    double decay_ratio = 0.0;   // lambda_{r+1} / lambda_r
    double additive_gap = 0.0;  // lambda_r - lambda_{r+1}
    GapVerdict verdict = GapVerdict::Fail;
    std::int64_t recommended_n = 0;  // ceil(4 r / additive_gap^2), saturated
};

constexpr double kPreflightPass = 1.2;
constexpr double kPreflightDecay = 0.95;
constexpr double kPreflightFailEps = 1e-6;

inline GapVerdict classify_gap(double gamma_r, double decay_ratio) {
    if (!(gamma_r > 1.0 + kPreflightFailEps)) return GapVerdict::Fail;
    if (gamma_r < kPreflightPass) return GapVerdict::Marginal;
    if (decay_ratio <= kPreflightDecay) return GapVerdict::Pass;
    return GapVerdict::Marginal;
}

inline EigengapReport gap_from_spectrum(const Vec& desc_eigs, int r) {
    const int d = static_cast<int>(desc_eigs.size());
    if (r < 1) fail(ErrorKind::InvalidInput, "rank must be >= 1");
    if (r >= d) fail(ErrorKind::RankTooLarge, "preflight needs r < dim");
    EigengapReport g;
    g.r = r;
    g.lambda_r = std::max(0.0, desc_eigs(r - 1));
    g.lambda_r1 = std::max(0.0, desc_eigs(r));
    const double inf = std::numeric_limits<double>::infinity();
    if (g.lambda_r == 0.0) {
        // nothing above the cut: no subspace to trust
        g.gamma_r = 1.0;
        g.decay_ratio = 1.0;
    } else {
        g.gamma_r = g.lambda_r1 > 0 ? g.lambda_r / g.lambda_r1 : inf;
        g.decay_ratio = g.lambda_r1 / g.lambda_r;
    }
    g.additive_gap = g.lambda_r - g.lambda_r1;
    g.verdict = classify_gap(g.gamma_r, g.decay_ratio);
    const double n = g.additive_gap > 0 ? std::ceil(4.0 * r / (g.additive_gap * g.additive_gap)) : inf;
    g.recommended_n = n < 9.0e18 ? static_cast<std::int64_t>(n) : std::numeric_limits<std::int64_t>::max();
    return g;
}

inline EigengapReport preflight_eigengap(const PsdMatrix& spectrum_source, int r) {
    if (r >= spectrum_source.dim()) fail(ErrorKind::RankTooLarge, "preflight needs r < dim");
    return gap_from_spectrum(eigh(spectrum_source).values, r);
}

struct DeltaSamples {
    Mat samples;  // N x d
    std::string provenance;

    DeltaSamples() = default;
    explicit DeltaSamples(Mat s, std::string prov = "") : samples(std::move(s)), provenance(std::move(prov)) {
        if (!samples.allFinite()) fail(ErrorKind::InvalidMatrix, "delta samples contain non-finite values");
    }
    int n() const { return static_cast<int>(samples.rows()); }
    int d() const { return static_cast<int>(samples.cols()); }
};

struct SigmaEstimate {
    PsdMatrix matrix;
    Family family = Family::A1;
    std::optional<int> rank;             // empty = full
    std::optional<EigengapReport> gap;   // only for rank-truncated estimators
    int sample_count = 0;
};

inline Mat second_moment(const Mat& m) { return m.transpose() * m / static_cast<double>(m.rows()); }

inline Mat centered_covariance(const Mat& m) {
    if (m.rows() < 2) fail(ErrorKind::InvalidInput, "covariance needs at least 2 rows");
    const Mat c = m.rowwise() - m.colwise().mean();
    return c.transpose() * c / static_cast<double>(m.rows() - 1);
}

inline SigmaEstimate estimate_d1_subspace(const DeltaSamples& deltas, int r) {
    if (r < 1) fail(ErrorKind::InvalidInput, "rank must be >= 1");
    if (r > std::min(deltas.n(), deltas.d())) fail(ErrorKind::RankTooLarge, "r exceeds min(N, d)");
    const Mat c = second_moment(deltas.samples);
    const auto ed = eigh_symmetric(0.5 * (c + c.transpose()));
    const Mat w = ed.vectors.leftCols(r);
    SigmaEstimate e{PsdMatrix(w * w.transpose()), Family::A1, r, std::nullopt, deltas.n()};
    if (r < deltas.d()) e.gap = gap_from_spectrum(ed.values, r);
    return e;
}

inline SigmaEstimate estimate_d2_isotropic(const DeltaSamples& noise) {
    if (noise.n() < 1 || noise.d() < 1) fail(ErrorKind::InvalidInput, "need at least one sample");
    const double s2 = noise.samples.squaredNorm() / (static_cast<double>(noise.n()) * noise.d());
    return {PsdMatrix(s2 * Mat::Identity(noise.d(), noise.d())), Family::A2, std::nullopt, std::nullopt, noise.n()};
}

// Rank-r truncation keeps the top-r eigencomponents with their eigenvalues.
inline SigmaEstimate estimate_d3_modes(const DeltaSamples& modes, std::optional<int> r = std::nullopt) {
    if (modes.n() < 1) fail(ErrorKind::InvalidInput, "need at least one mode");
    const Mat s = second_moment(modes.samples);
    if (!r) return {PsdMatrix(s), Family::A3, std::nullopt, std::nullopt, modes.n()};
    if (*r < 1) fail(ErrorKind::InvalidInput, "rank must be >= 1");
    if (*r > modes.d()) fail(ErrorKind::RankTooLarge, "r exceeds d");
    const auto ed = eigh_symmetric(s);
    const Mat v = ed.vectors.leftCols(*r);
    const Mat t = v * ed.values.head(*r).cwiseMax(0.0).asDiagonal() * v.transpose();
    SigmaEstimate e{PsdMatrix(t), Family::A3, *r, std::nullopt, modes.n()};
    if (*r < modes.d()) e.gap = gap_from_spectrum(ed.values, *r);
    return e;
}

inline SigmaEstimate estimate_d4_domain_gram(const Mat& paired_source, const Mat& paired_target) {
    if (paired_source.rows() != paired_target.rows() || paired_source.cols() != paired_target.cols())
        fail(ErrorKind::PairingError, "source and target must have matching shapes");
    if (!paired_source.allFinite() || !paired_target.allFinite())
        fail(ErrorKind::InvalidMatrix, "non-finite features");
    return {PsdMatrix(centered_covariance(paired_target - paired_source)), Family::A4, std::nullopt, std::nullopt,
            static_cast<int>(paired_source.rows())};
}

inline SigmaEstimate estimate_d5_block(const DeltaSamples& samples, const std::vector<int>& nuisance_indices) {
    if (nuisance_indices.empty()) fail(ErrorKind::EmptyBlock, "nuisance index set is empty");
    const int d = samples.d();
    Mat sub(samples.n(), static_cast<Eigen::Index>(nuisance_indices.size()));
    for (std::size_t k = 0; k < nuisance_indices.size(); ++k) {
        const int i = nuisance_indices[k];
        if (i < 0 || i >= d) fail(ErrorKind::InvalidInput, "nuisance index out of range");
        sub.col(static_cast<Eigen::Index>(k)) = samples.samples.col(i);
    }
    const Mat cov = centered_covariance(sub);
    Mat full = Mat::Zero(d, d);
    for (std::size_t a = 0; a < nuisance_indices.size(); ++a)
        for (std::size_t b = 0; b < nuisance_indices.size(); ++b)
            full(nuisance_indices[a], nuisance_indices[b]) += cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    return {PsdMatrix(full), Family::A5, std::nullopt, std::nullopt, samples.n()};
}

inline SigmaEstimate estimate_d6_increments(const std::vector<Mat>& sequences) {
    Eigen::Index d = -1;
    Mat acc;
    int count = 0;
    for (const auto& s : sequences) {
        if (d < 0) {
            d = s.cols();
            acc = Mat::Zero(d, d);
        }
        require_same_dim(s.cols(), d, "sequence width");
        if (!s.allFinite()) fail(ErrorKind::InvalidMatrix, "non-finite features");
        if (s.rows() < 2) continue;
        const Mat inc = s.bottomRows(s.rows() - 1) - s.topRows(s.rows() - 1);
        acc += inc.transpose() * inc;
        count += static_cast<int>(inc.rows());
    }
    if (count == 0) fail(ErrorKind::NoIncrements, "no sequence has length >= 2");
    return {PsdMatrix(acc / count), Family::A6, std::nullopt, std::nullopt, count};
}

inline SigmaEstimate estimate_d7_delta_gram(const DeltaSamples& deltas) {
    if (deltas.n() < 1) fail(ErrorKind::InvalidInput, "need at least one delta");
    return {PsdMatrix(second_moment(deltas.samples)), Family::A7, std::nullopt, std::nullopt, deltas.n()};
}

struct DavisKahanCheck {
    double lhs = 0.0;  // ||P_hat - P||_F
    double rhs = 0.0;  // 2 ||C_hat - C||_op / gap
    bool holds() const { return lhs <= rhs; }
};

// Compares the top-r eigenspace of c_hat against that of the population c.
inline DavisKahanCheck davis_kahan_check(const Mat& c_hat, const Mat& c, int r) {
    require_same_dim(c_hat.rows(), c.rows(), "davis_kahan_check");
    const auto eh = eigh_symmetric(0.5 * (c_hat + c_hat.transpose()));
    const auto et = eigh_symmetric(0.5 * (c + c.transpose()));
    const Mat ph = eh.vectors.leftCols(r) * eh.vectors.leftCols(r).transpose();
    const Mat pt = et.vectors.leftCols(r) * et.vectors.leftCols(r).transpose();
    const double gap = et.values(r - 1) - et.values(r);
    return {(ph - pt).norm(), gap > 0 ? 2.0 * op_norm_sym(c_hat - c) / gap : std::numeric_limits<double>::infinity()};
}

}  // namespace pmh
