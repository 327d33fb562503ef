#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "encoders.hpp"
#include "error.hpp"
#include "penalty.hpp"
#include "psd.hpp"
#include "rng.hpp"

namespace pmh {

struct ProbeConfig {
    double sigma = 0.01;
    int n_probes = 16;
    std::uint64_t seed = 0;
    bool final_only = false;
    bool share_probes = true;  // ignore arm_id so different arms see identical probe noise
    std::uint64_t arm_id = 0;

    void validate() const {
        if (!(sigma > 0)) fail(ErrorKind::InvalidInput, "probe sigma must be > 0");
        if (n_probes < 1) fail(ErrorKind::InvalidInput, "n_probes must be >= 1");
    }
    std::uint64_t arm_key() const { return share_probes ? 0 : arm_id; }
};

// Standard-normal probe block for (seed, stream, arm, probe).
inline Mat base_probe(const ProbeConfig& cfg, std::uint64_t stream, int p, Eigen::Index n, Eigen::Index d) {
    Rng g(cfg.seed, {stream, cfg.arm_key(), static_cast<std::uint64_t>(p)});
    return g.normal_matrix(n, d);
}

inline double trajectory_tdi(const EncoderParams& enc, const Mat& x, const ProbeConfig& cfg) {
    cfg.validate();
    check_input(enc, x);
    if (x.rows() == 0) fail(ErrorKind::InvalidInput, "empty batch");
    const auto clean = layer_outputs(enc, x, cfg.final_only);
    std::vector<double> num(clean.size(), 0.0);
    for (int p = 0; p < cfg.n_probes; ++p) {
        const Mat xp = x + cfg.sigma * base_probe(cfg, 0x7d1, p, x.rows(), x.cols());
        const auto pert = layer_outputs(enc, xp, cfg.final_only);
        for (std::size_t l = 0; l < clean.size(); ++l) num[l] += (pert[l] - clean[l]).squaredNorm();
    }
    double tdi = 0;
    for (std::size_t l = 0; l < clean.size(); ++l) {
        const double den = clean[l].squaredNorm();
        if (!(den > 0)) fail(ErrorKind::DegenerateEmbedding, "layer " + std::to_string(l) + " has zero-norm embeddings");
        tdi += num[l] / (cfg.n_probes * den);
    }
    return tdi / static_cast<double>(clean.size());
}

inline double layout_tdi(const Mat& embeddings, const std::vector<int>& group_labels) {
    if (static_cast<Eigen::Index>(group_labels.size()) != embeddings.rows())
        fail(ErrorKind::DimMismatch, "one label per embedding row");
    std::map<int, std::vector<Eigen::Index>> groups;
    for (std::size_t i = 0; i < group_labels.size(); ++i) groups[group_labels[i]].push_back(static_cast<Eigen::Index>(i));
    if (groups.size() < 2) fail(ErrorKind::GroupTooSmall, "need at least 2 groups");

    constexpr std::size_t kCap = 200;
    std::vector<Mat> members;
    for (auto& [label, idx] : groups) {
        if (idx.size() < 2) fail(ErrorKind::GroupTooSmall, "group " + std::to_string(label) + " has fewer than 2 members");
        std::vector<Eigen::Index> keep;
        if (idx.size() > kCap) {
            for (std::size_t k = 0; k < kCap; ++k) keep.push_back(idx[k * idx.size() / kCap]);
        } else {
            keep = idx;
        }
        Mat g(static_cast<Eigen::Index>(keep.size()), embeddings.cols());
        for (std::size_t k = 0; k < keep.size(); ++k) {
            const double nrm = embeddings.row(keep[k]).norm();
            if (!(nrm > 0)) fail(ErrorKind::DegenerateEmbedding, "zero embedding cannot be normalized");
            g.row(static_cast<Eigen::Index>(k)) = embeddings.row(keep[k]) / nrm;
        }
        members.push_back(std::move(g));
    }

    double intra = 0;
    long pairs = 0;
    std::vector<Vec> centroids;
    for (const auto& g : members) {
        for (Eigen::Index a = 0; a < g.rows(); ++a)
            for (Eigen::Index b = a + 1; b < g.rows(); ++b) {
                intra += (g.row(a) - g.row(b)).norm();
                ++pairs;
            }
        centroids.push_back(g.colwise().mean().transpose());
    }
    intra /= static_cast<double>(pairs);
    double inter = 0;
    long cpairs = 0;
    for (std::size_t a = 0; a < centroids.size(); ++a)
        for (std::size_t b = a + 1; b < centroids.size(); ++b) {
            inter += (centroids[a] - centroids[b]).norm();
            ++cpairs;
        }
    inter /= static_cast<double>(cpairs);
    if (!(inter > 1e-12)) fail(ErrorKind::DegenerateCentroids, "group centroids coincide");
    return intra / inter;
}

struct DirectionalDrift {
    double d_n = 0.0;
    double d_s = 0.0;
    double ratio = 0.0;
    double energy_n = 0.0;  // measured mean ||probe||^2 in each arm
    double energy_s = 0.0;
};

// Mean embedding displacement under probes confined to range(w_hat) versus its
// complement. Each probe is rescaled to norm sigma * sqrt(d_x) so both arms carry
// identical noise power.
inline DirectionalDrift directional_drift(const EncoderParams& enc, const Mat& x, const Projector& w_hat,
                                          const ProbeConfig& cfg) {
    cfg.validate();
    check_input(enc, x);
    require_same_dim(w_hat.dim(), x.cols(), "directional_drift");
    if (w_hat.rank() < 1 || w_hat.rank() >= w_hat.dim())
        fail(ErrorKind::InvalidSubspace, "projector rank must be in [1, d-1]");
    const Mat& pn = w_hat.matrix();
    const Mat ps = Mat::Identity(w_hat.dim(), w_hat.dim()) - pn;
    const double target = cfg.sigma * std::sqrt(static_cast<double>(x.cols()));
    const Mat base = forward(enc, x);
    DirectionalDrift out;
    double count = 0;
    for (int p = 0; p < cfg.n_probes; ++p) {
        const Mat z = base_probe(cfg, 0xd1d5, p, x.rows(), x.cols());
        Mat qn = z * pn, qs = z * ps;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const double a = qn.row(i).norm(), b = qs.row(i).norm();
            qn.row(i) *= a > 0 ? target / a : 0.0;
            qs.row(i) *= b > 0 ? target / b : 0.0;
        }
        out.energy_n += qn.squaredNorm();
        out.energy_s += qs.squaredNorm();
        const Mat dn = forward(enc, x + qn) - base;
        const Mat ds = forward(enc, x + qs) - base;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            out.d_n += dn.row(i).norm();
            out.d_s += ds.row(i).norm();
        }
        count += static_cast<double>(x.rows());
    }
    out.d_n /= count;
    out.d_s /= count;
    out.energy_n /= count;
    out.energy_s /= count;
    out.ratio = out.d_s > 0 ? out.d_n / out.d_s : 0.0;
    return out;
}

struct DriftComparisonRow {
    double sigma = 0.0;
    double dq_nonlinear = 0.0;          // Monte-Carlo E||phi(x + sigma L z) - phi(x)||^2
    double dq_linearized = 0.0;         // sigma^2 * exact trace
    double dq_linearized_paired = 0.0;  // E||sigma J L z||^2 on the same probes
    double remainder = 0.0;             // |dq_nonlinear - dq_linearized|
    double paired_remainder = 0.0;      // |dq_nonlinear - dq_linearized_paired|
};

// Probes are shared across the sigma grid (same z, rescaled), so the paired
// remainder isolates curvature from Monte-Carlo noise.
inline std::vector<DriftComparisonRow> drift_comparison(const EncoderParams& enc, const Mat& x, const PsdMatrix& sigma_task,
                                                        const std::vector<double>& sigma_grid, int n_probes = 16,
                                                        std::uint64_t seed = 0) {
    check_input(enc, x);
    require_same_dim(enc.d_x(), sigma_task.dim(), "drift_comparison");
    for (std::size_t i = 0; i < sigma_grid.size(); ++i) {
        if (!(sigma_grid[i] > 0)) fail(ErrorKind::InvalidInput, "sigma grid must be positive");
        if (i && !(sigma_grid[i] < sigma_grid[i - 1])) fail(ErrorKind::InvalidInput, "sigma grid must be decreasing");
    }
    if (n_probes < 1) fail(ErrorKind::InvalidInput, "n_probes must be >= 1");
    const double trace = exact_trace_penalty(enc, x, sigma_task);
    const auto lower = probe_factor(sigma_task);
    std::vector<DriftComparisonRow> rows;
    const Mat base = forward(enc, x);
    const auto jac = jacobian_analytic(enc, x);
    const double denom = static_cast<double>(n_probes) * static_cast<double>(x.rows());
    for (double s : sigma_grid) {
        DriftComparisonRow r;
        r.sigma = s;
        r.dq_linearized = s * s * trace;
        if (lower) {
            for (int p = 0; p < n_probes; ++p) {
                // antithetic pair: odd-order terms cancel, so the paired remainder is O(sigma^4)
                const Mat delta = draw_probe(*lower, s, x.rows(), seed, 0xdc, static_cast<std::uint64_t>(p));
                r.dq_nonlinear += 0.5 * ((forward(enc, x + delta) - base).squaredNorm() + (forward(enc, x - delta) - base).squaredNorm());
                for (Eigen::Index i = 0; i < x.rows(); ++i)
                    r.dq_linearized_paired += (jac[static_cast<std::size_t>(i)] * delta.row(i).transpose()).squaredNorm();
            }
            r.dq_nonlinear /= denom;
            r.dq_linearized_paired /= denom;
        }
        r.remainder = std::abs(r.dq_nonlinear - r.dq_linearized);
        r.paired_remainder = std::abs(r.dq_nonlinear - r.dq_linearized_paired);
        rows.push_back(r);
    }
    return rows;
}

struct LayoutEnvelope {
    double clean_layout = 0.0;
    double perturbed_layout = 0.0;
    double gap = 0.0;           // |perturbed - clean|
    double relative_gap = 0.0;  // gap / clean
};

inline LayoutEnvelope layout_envelope_check(const Mat& clean, const Mat& perturbed, const std::vector<int>& group_labels) {
    if (clean.rows() != perturbed.rows() || clean.cols() != perturbed.cols())
        fail(ErrorKind::DimMismatch, "clean and perturbed embeddings must match");
    LayoutEnvelope e;
    e.clean_layout = layout_tdi(clean, group_labels);
    e.perturbed_layout = layout_tdi(perturbed, group_labels);
    e.gap = std::abs(e.perturbed_layout - e.clean_layout);
    e.relative_gap = e.clean_layout > 0 ? e.gap / e.clean_layout : 0.0;
    return e;
}

struct DriftReport {
    double trajectory_tdi = 0.0;
    double tdi_at_zero_estimate = 0.0;
    std::optional<double> layout_tdi;
    double d_n = 0.0;
    double d_s = 0.0;
    double ratio = 0.0;
    double dq_nonlinear = 0.0;
    double dq_linearized = 0.0;
};

// Bundles the probes above. Optional pieces are skipped when their inputs are absent.
inline DriftReport drift_report(const EncoderParams& enc, const Mat& x, const ProbeConfig& cfg,
                                const std::optional<Projector>& w_hat = std::nullopt,
                                const std::optional<PsdMatrix>& sigma_task = std::nullopt,
                                const std::optional<std::vector<int>>& labels = std::nullopt) {
    DriftReport r;
    r.trajectory_tdi = trajectory_tdi(enc, x, cfg);
    ProbeConfig z = cfg;
    z.sigma = 0.01;
    r.tdi_at_zero_estimate = cfg.sigma == 0.01 ? r.trajectory_tdi : trajectory_tdi(enc, x, z);
    if (labels) r.layout_tdi = layout_tdi(forward(enc, x), *labels);
    if (w_hat) {
        const auto dd = directional_drift(enc, x, *w_hat, cfg);
        r.d_n = dd.d_n;
        r.d_s = dd.d_s;
        r.ratio = dd.ratio;
    }
    if (sigma_task) {
        const auto rows = drift_comparison(enc, x, *sigma_task, {1.0}, cfg.n_probes, cfg.seed);
        r.dq_nonlinear = rows[0].dq_nonlinear;
        r.dq_linearized = rows[0].dq_linearized;
    }
    return r;
}

}  // namespace pmh
