#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "error.hpp"
#include "psd.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace pmh {

// y = <w_s, s> + rho <w_n, n> + eps, x = (s, n), s and n standard normal.
struct LinearGaussianModel {
    int d_s = 1;
    int d_n = 1;
    Vec w_s;
    Vec w_n;
    double rho = 1.0;
    double sigma_eps = 0.0;

    int d_x() const { return d_s + d_n; }

    void validate() const {
        if (d_s < 1 || d_n < 1) fail(ErrorKind::InvalidInput, "d_s and d_n must be positive");
        if (w_s.size() != d_s || w_n.size() != d_n) fail(ErrorKind::DimMismatch, "w_s/w_n length");
        if (std::abs(w_s.norm() - 1.0) > 1e-10 || std::abs(w_n.norm() - 1.0) > 1e-10)
            fail(ErrorKind::InvalidInput, "w_s and w_n must be unit vectors");
        if (!(rho > 0)) fail(ErrorKind::InvalidInput, "rho must be positive");
        if (!(sigma_eps >= 0)) fail(ErrorKind::InvalidInput, "sigma_eps must be nonnegative");
    }

    // Unit directions drawn from `seed`; convenient for synthetic studies.
    static LinearGaussianModel random(int d_s, int d_n, double rho, double sigma_eps, std::uint64_t seed) {
        LinearGaussianModel m;
        m.d_s = d_s;
        m.d_n = d_n;
        Rng g(seed, {0x5157});
        m.w_s = g.normal_vector(d_s).normalized();
        m.w_n = g.normal_vector(d_n).normalized();
        m.rho = rho;
        m.sigma_eps = sigma_eps;
        m.validate();
        return m;
    }

    // Bayes regressor in input coordinates.
    Vec bayes_weights() const {
        Vec w(d_x());
        w << w_s, rho * w_n;
        return w;
    }
    Vec signal_direction() const {
        Vec s = Vec::Zero(d_x());
        s.head(d_s) = w_s;
        return s;
    }
    Vec nuisance_direction() const {
        Vec s = Vec::Zero(d_x());
        s.tail(d_n) = w_n;
        return s;
    }
    // sigma^2 times the projector onto the nuisance coordinates.
    PsdMatrix nuisance_covariance(double sigma = 1.0) const {
        Vec diag = Vec::Zero(d_x());
        diag.tail(d_n).setConstant(sigma * sigma);
        return PsdMatrix::diagonal(diag);
    }
};

struct Dataset {
    Mat x;  // n x d_x
    Vec y;
};

inline Dataset sample_dataset(const LinearGaussianModel& model, int n, std::uint64_t seed) {
    model.validate();
    if (n < 1) fail(ErrorKind::InvalidInput, "n must be >= 1");
    Rng gx(seed, {0xda7a, 0});
    Rng ge(seed, {0xda7a, 1});
    Dataset d;
    d.x = gx.normal_matrix(n, model.d_x());
    d.y = d.x.leftCols(model.d_s) * model.w_s + model.rho * (d.x.rightCols(model.d_n) * model.w_n);
    if (model.sigma_eps > 0) d.y += model.sigma_eps * ge.normal_vector(n);
    return d;
}

inline Vec pmh_minimizer(const Vec& v, const PsdMatrix& sigma_prime, double lambda) {
    require_same_dim(v.size(), sigma_prime.dim(), "pmh_minimizer");
    if (!(lambda >= 0)) fail(ErrorKind::InvalidInput, "lambda must be >= 0");
    if (lambda == 0) return v;
    // Solving in the eigenbasis of Sigma' keeps the kernel component of v exact
    // for any lambda, which a direct solve of I + 2 lambda Sigma' does not.
    // Eigenvalues at rounding level are treated as an exact kernel.
    const auto ed = eigh(sigma_prime);
    const double top = ed.values.cwiseAbs().maxCoeff();
    const double floor = 64.0 * std::numeric_limits<double>::epsilon() * static_cast<double>(v.size()) * top;
    const Vec evals = ed.values.unaryExpr([floor](double e) { return e > floor ? e : 0.0; });
    const Vec shrink = (1.0 + 2.0 * lambda * evals.array()).inverse().matrix();
    const Vec coef = ed.vectors.transpose() * v;
    const Vec w = ed.vectors * shrink.cwiseProduct(coef);
    if (!w.allFinite()) fail(ErrorKind::Internal, "non-finite minimizer");
    return w;
}

inline double linear_drift(const Vec& w, const PsdMatrix& sigma_task) {
    require_same_dim(w.size(), sigma_task.dim(), "linear_drift");
    return w.dot(sigma_task.entries() * w);
}

enum class DichotomyVerdict { Vanishing, Floored, Undetermined };

inline std::string to_string(DichotomyVerdict v) {
    switch (v) {
        case DichotomyVerdict::Vanishing: return "vanishing";
        case DichotomyVerdict::Floored: return "floored";
        case DichotomyVerdict::Undetermined: return "undetermined";
    }
    return "undetermined";
}

struct DichotomyCurve {
    std::vector<double> lambdas;
    std::vector<double> drifts;
    DichotomyVerdict verdict = DichotomyVerdict::Undetermined;
    double tail_slope = std::numeric_limits<double>::quiet_NaN();  // NaN if any tail drift is 0
};

inline std::size_t tail_start(std::size_t n) { return n / 2; }

inline double tail_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> tx, ty;
    for (std::size_t i = tail_start(x.size()); i < x.size(); ++i) {
        if (!(x[i] > 0) || !(y[i] > 0)) return std::numeric_limits<double>::quiet_NaN();
        tx.push_back(x[i]);
        ty.push_back(y[i]);
    }
    if (tx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    return loglog_slope(tx, ty);
}

inline void check_lambda_grid(const std::vector<double>& lambdas) {
    if (lambdas.size() < 4) fail(ErrorKind::InsufficientGrid, "lambda grid needs at least 4 points");
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        if (!(lambdas[i] >= 0)) fail(ErrorKind::InvalidInput, "lambda grid must be nonnegative");
        if (i && !(lambdas[i] > lambdas[i - 1])) fail(ErrorKind::InvalidInput, "lambda grid must be strictly increasing");
    }
}

inline DichotomyVerdict classify_drift_curve(const std::vector<double>& drifts) {
    const std::size_t n = drifts.size();
    bool monotone = true;
    for (std::size_t i = 1; i < n; ++i)
        if (drifts[i] > drifts[i - 1]) monotone = false;
    if (monotone && drifts.back() <= 1e-6 * drifts.front()) return DichotomyVerdict::Vanishing;
    const double a = drifts[n - 3], b = drifts[n - 2], c = drifts[n - 1];
    const double hi = std::max({a, b, c}), lo = std::min({a, b, c});
    if (c > 0 && (hi - lo) <= 1e-3 * c) return DichotomyVerdict::Floored;
    return DichotomyVerdict::Undetermined;
}

inline DichotomyCurve dichotomy_curve(const Vec& v, const PsdMatrix& sigma_prime, const PsdMatrix& sigma_task,
                                      const std::vector<double>& lambdas) {
    check_lambda_grid(lambdas);
    require_same_dim(sigma_prime.dim(), sigma_task.dim(), "dichotomy_curve");
    DichotomyCurve c;
    c.lambdas = lambdas;
    for (double l : lambdas) c.drifts.push_back(linear_drift(pmh_minimizer(v, sigma_prime, l), sigma_task));
    c.verdict = classify_drift_curve(c.drifts);
    c.tail_slope = tail_loglog_slope(c.lambdas, c.drifts);
    return c;
}

struct AllocationResult {
    Vec mu;
    double budget = 0.0;
    double achieved_drift = 0.0;
};

// sum_i lambda_i v_i^2 / (1 + 2 lambda mu_i)^2, everything in the shared eigenbasis.
inline double allocation_drift(const Vec& task_eigs, const Vec& energy, const Vec& mu, double lambda) {
    double s = 0;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const double den = 1.0 + 2.0 * lambda * mu(i);
        s += task_eigs(i) * energy(i) / (den * den);
    }
    return s;
}

inline void check_allocation_inputs(const Vec& task_eigs, const Vec& energy, double budget, double lambda) {
    require_same_dim(task_eigs.size(), energy.size(), "allocation inputs");
    if (task_eigs.size() == 0) fail(ErrorKind::InvalidInput, "empty spectrum");
    if ((task_eigs.array() < 0).any() || (energy.array() < 0).any() || !task_eigs.allFinite() || !energy.allFinite())
        fail(ErrorKind::InvalidInput, "allocation inputs must be finite and nonnegative");
    if (!(budget > 0)) fail(ErrorKind::InvalidInput, "budget must be positive");
    if (!(lambda >= 0)) fail(ErrorKind::InvalidInput, "lambda must be nonnegative");
    if ((task_eigs.array() * energy.array()).maxCoeff() <= 0)
        fail(ErrorKind::DegenerateAllocation, "every lambda_i * v_i^2 is zero");
}

inline AllocationResult waterfill_cuberoot(const Vec& task_eigs, const Vec& energy, double budget, double lambda) {
    check_allocation_inputs(task_eigs, energy, budget, lambda);
    const Eigen::Index r = task_eigs.size();
    Vec q(r);
    for (Eigen::Index i = 0; i < r; ++i) {
        const double a = task_eigs(i) * energy(i);
        q(i) = a > 0 ? std::cbrt(a) : 0.0;
    }
    AllocationResult out;
    out.budget = budget;
    out.mu = budget * q / q.sum();
    out.achieved_drift = allocation_drift(task_eigs, energy, out.mu, lambda);
    return out;
}

namespace detail {

// Moves mass t from j to i so that the pairwise objective is minimal; the
// derivative in t is increasing (convexity), so bisection is exact up to rounding.
inline void polish_pair(const Vec& a, Vec& mu, Eigen::Index i, Eigen::Index j, double lambda) {
    auto dfi = [&](double m, Eigen::Index k) {
        const double den = 1.0 + 2.0 * lambda * m;
        return -4.0 * lambda * a(k) / (den * den * den);
    };
    double lo = -mu(i), hi = mu(j);
    auto g = [&](double t) { return dfi(mu(i) + t, i) - dfi(mu(j) - t, j); };
    if (hi - lo <= 0) return;
    double t;
    if (g(lo) >= 0)
        t = lo;
    else if (g(hi) <= 0)
        t = hi;
    else {
        for (int it = 0; it < 200 && hi - lo > 0; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (mid == lo || mid == hi) break;
            (g(mid) < 0 ? lo : hi) = mid;
        }
        t = 0.5 * (lo + hi);
    }
    const double total = mu(i) + mu(j);
    mu(i) = std::max(0.0, mu(i) + t);
    mu(j) = std::max(0.0, total - mu(i));
}

}  // namespace detail

// Dense simplex grid followed by pairwise exchange polish.
inline AllocationResult waterfill_bruteforce(const Vec& task_eigs, const Vec& energy, double budget, double lambda,
                                             int grid_density = 50) {
    check_allocation_inputs(task_eigs, energy, budget, lambda);
    const int r = static_cast<int>(task_eigs.size());
    if (r > 4) fail(ErrorKind::TooLargeForOracle, "brute-force oracle supports r <= 4");
    if (grid_density < 50) fail(ErrorKind::InvalidInput, "grid_density must be >= 50");

    const int D = grid_density;
    Vec best_mu = Vec::Constant(r, budget / r);
    double best = allocation_drift(task_eigs, energy, best_mu, lambda);
    Vec mu(r);
    std::vector<int> k(static_cast<std::size_t>(r), 0);
    // enumerate compositions of D into r nonnegative parts
    auto visit = [&](auto&& self, int idx, int remaining) -> void {
        if (idx == r - 1) {
            k[static_cast<std::size_t>(idx)] = remaining;
            for (int i = 0; i < r; ++i) mu(i) = budget * k[static_cast<std::size_t>(i)] / D;
            const double f = allocation_drift(task_eigs, energy, mu, lambda);
            if (f < best) {
                best = f;
                best_mu = mu;
            }
            return;
        }
        for (int c = 0; c <= remaining; ++c) {
            k[static_cast<std::size_t>(idx)] = c;
            self(self, idx + 1, remaining - c);
        }
    };
    visit(visit, 0, D);

    const Vec a = task_eigs.cwiseProduct(energy);
    for (int sweep = 0; sweep < 500; ++sweep) {
        const Vec before = best_mu;
        for (int i = 0; i < r; ++i)
            for (int j = i + 1; j < r; ++j) detail::polish_pair(a, best_mu, i, j, lambda);
        if ((best_mu - before).cwiseAbs().maxCoeff() <= 1e-15 * budget) break;
    }
    // keep the budget exact
    best_mu *= budget / best_mu.sum();

    AllocationResult out;
    out.budget = budget;
    out.mu = best_mu;
    out.achieved_drift = allocation_drift(task_eigs, energy, best_mu, lambda);
    return out;
}

inline double blindspot_bound(double rho, double sigma, double lipschitz) {
    if (!(lipschitz > 0)) fail(ErrorKind::InvalidInput, "Lipschitz constant must be positive");
    if (!(rho > 0) || !(sigma > 0)) fail(ErrorKind::InvalidInput, "rho and sigma must be positive");
    return sigma * sigma * rho * rho / (lipschitz * lipschitz);
}

struct MismatchCurves {
    std::vector<double> lambdas;
    std::vector<double> range_excess;
    std::vector<double> alloc_excess;
    double range_slope = std::numeric_limits<double>::quiet_NaN();
    double alloc_slope = std::numeric_limits<double>::quiet_NaN();
};

// Excess drift of two comparison penalties over sigma_star. Slopes are fitted
// on the upper half of the lambda grid.
inline MismatchCurves mismatch_cost_curves(const PsdMatrix& sigma_star, const PsdMatrix& sigma_wrong_range,
                                           const PsdMatrix& sigma_wrong_alloc, const Vec& v,
                                           const PsdMatrix& sigma_task, const std::vector<double>& lambdas) {
    check_lambda_grid(lambdas);
    require_same_dim(sigma_star.dim(), sigma_wrong_range.dim(), "mismatch_cost_curves");
    require_same_dim(sigma_star.dim(), sigma_wrong_alloc.dim(), "mismatch_cost_curves");
    MismatchCurves c;
    c.lambdas = lambdas;
    for (double l : lambdas) {
        const double base = linear_drift(pmh_minimizer(v, sigma_star, l), sigma_task);
        c.range_excess.push_back(linear_drift(pmh_minimizer(v, sigma_wrong_range, l), sigma_task) - base);
        c.alloc_excess.push_back(linear_drift(pmh_minimizer(v, sigma_wrong_alloc, l), sigma_task) - base);
    }
    c.range_slope = tail_loglog_slope(c.lambdas, c.range_excess);
    c.alloc_slope = tail_loglog_slope(c.lambdas, c.alloc_excess);
    return c;
}

}  // namespace pmh
