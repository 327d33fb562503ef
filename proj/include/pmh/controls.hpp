#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "error.hpp"
#include "psd.hpp"
#include "rng.hpp"

namespace pmh {

struct StiefelSample {
    Mat U;  // d x r, orthonormal columns
    std::uint64_t seed = 0;
};

namespace detail {

// Haar-uniform orthonormal frame: QR of a Gaussian matrix, then flip columns so
// that diag(R) > 0. Skipping the flip biases the distribution.
inline Mat haar_frame(Rng& g, int d, int r) {
    Mat a = g.normal_matrix(d, r);
    Eigen::HouseholderQR<Mat> qr(a);
    Mat q = qr.householderQ() * Mat::Identity(d, r);
    const Mat& qrm = qr.matrixQR();
    for (int k = 0; k < r; ++k)
        if (qrm(k, k) < 0) q.col(k) = -q.col(k);
    return q;
}

inline void check_stiefel_dims(int d, int r) {
    if (d < 1 || r < 1) fail(ErrorKind::InvalidInput, "need 1 <= r <= d");
    if (r > d) fail(ErrorKind::RankTooLarge, "r > d");
}

}  // namespace detail

inline StiefelSample sample_stiefel(int d, int r, std::uint64_t seed) {
    detail::check_stiefel_dims(d, r);
    Rng g(seed, {0x57ef});
    return {detail::haar_frame(g, d, r), seed};
}

inline PsdMatrix wrong_w_sigma(int d, int r, std::uint64_t seed) {
    const auto s = sample_stiefel(d, r, seed);
    return PsdMatrix(s.U * s.U.transpose());
}

inline PsdMatrix signal_sigma(const Vec& s) {
    const double n = s.norm();
    if (!(n > 0) || !std::isfinite(n)) fail(ErrorKind::ZeroSignal, "signal direction must be nonzero");
    const Vec u = s / n;
    return PsdMatrix(u * u.transpose());
}

struct LemmaCReport {
    double mean_deviation_op = 0.0;     // ||mean UU^T - (r/d) I||_op
    double max_single_draw_op = 0.0;    // max over draws of ||UU^T - (r/d) I||_op
    double predicted_rate = 0.0;        // sqrt(r log d / d)
    double mc_standard_error_op = 0.0;  // op-norm scale of pure Monte-Carlo noise in the mean
    double max_entry_deviation = 0.0;   // max_ij |mean - (r/d) I|_ij
    int n_draws = 0;
};

// Draw k uses the stream keyed (seed, k), so any subset of draws can be
// regenerated independently.
inline LemmaCReport lemma_c_check(int d, int r, int n_draws, std::uint64_t seed) {
    detail::check_stiefel_dims(d, r);
    if (n_draws < 100) fail(ErrorKind::InvalidInput, "n_draws must be >= 100");
    Mat sum = Mat::Zero(d, d);
    Mat sumsq = Mat::Zero(d, d);
    const double rho = static_cast<double>(r) / d;
    const Mat target = rho * Mat::Identity(d, d);
    LemmaCReport rep;
    rep.n_draws = n_draws;
    for (int k = 0; k < n_draws; ++k) {
        Rng g(seed, {0x1e77ac, static_cast<std::uint64_t>(k)});
        const Mat u = detail::haar_frame(g, d, r);
        const Mat p = u * u.transpose();
        sum += p;
        sumsq += p.cwiseProduct(p);
        // UU^T shares its nonzero spectrum with the r x r Gram U^T U; the
        // remaining d - r eigenvalues are zero.
        const Vec gram = eigh_symmetric(u.transpose() * u).values;
        double op = r < d ? rho : 0.0;
        for (Eigen::Index i = 0; i < gram.size(); ++i) op = std::max(op, std::abs(gram(i) - rho));
        rep.max_single_draw_op = std::max(rep.max_single_draw_op, op);
    }
    const double n = n_draws;
    const Mat mean = sum / n;
    rep.mean_deviation_op = op_norm_sym(mean - target);
    rep.max_entry_deviation = (mean - target).cwiseAbs().maxCoeff();
    rep.predicted_rate = std::sqrt(r * std::log(static_cast<double>(d)) / d);
    // entrywise variance of the mean; a d x d noise matrix with entry scale s
    // has operator norm about 2 sqrt(d) s
    const Mat var = (sumsq / n - mean.cwiseProduct(mean)).cwiseMax(0.0) / n;
    const double rms_se = std::sqrt(var.mean());
    rep.mc_standard_error_op = 2.0 * std::sqrt(static_cast<double>(d)) * rms_se;
    return rep;
}

}  // namespace pmh
