#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "error.hpp"

namespace pmh {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
    if (a != b)
        fail(ErrorKind::DimMismatch,
             std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b));
}

struct EigenDecomposition {
    Vec values;   // descending
    Mat vectors;  // column k pairs with values(k)
};

// Symmetric eigensolver with descending order and a deterministic sign per
// column (largest-magnitude component made positive).
inline EigenDecomposition eigh_symmetric(const Mat& m) {
    if (m.rows() != m.cols()) fail(ErrorKind::DimMismatch, "eigh on non-square matrix");
    if (!m.allFinite()) fail(ErrorKind::InvalidMatrix, "non-finite entries");
    const Eigen::Index n = m.rows();
    Eigen::SelfAdjointEigenSolver<Mat> es(m);
    if (es.info() != Eigen::Success) fail(ErrorKind::Internal, "eigensolver did not converge");
    EigenDecomposition out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        out.values(k) = es.eigenvalues()(n - 1 - k);
        Vec col = es.eigenvectors().col(n - 1 - k);
        Eigen::Index imax = 0;
        col.cwiseAbs().maxCoeff(&imax);
        if (col(imax) < 0) col = -col;
        out.vectors.col(k) = col;
    }
    return out;
}

class PsdMatrix {
public:
    PsdMatrix() = default;

    explicit PsdMatrix(const Mat& m) {
        if (m.rows() != m.cols()) fail(ErrorKind::DimMismatch, "PsdMatrix must be square");
        if (m.rows() == 0) fail(ErrorKind::InvalidMatrix, "PsdMatrix must have positive dim");
        if (!m.allFinite()) fail(ErrorKind::InvalidMatrix, "non-finite entries");
        m_ = 0.5 * (m + m.transpose());
        Eigen::SelfAdjointEigenSolver<Mat> es(m_, Eigen::EigenvaluesOnly);
        const double lmin = es.eigenvalues().minCoeff();
        const double lmax = es.eigenvalues().maxCoeff();
        if (lmin < -1e-9 * std::max(lmax, 1.0))
            fail(ErrorKind::InvalidMatrix, "matrix is not PSD (min eigenvalue " + std::to_string(lmin) + ")");
    }

    static PsdMatrix identity(int d) { return PsdMatrix(Mat::Identity(d, d)); }
    static PsdMatrix zeros(int d) { return PsdMatrix(Mat::Zero(d, d)); }
    static PsdMatrix diagonal(const Vec& diag) { return PsdMatrix(Mat(diag.asDiagonal())); }
    static PsdMatrix outer(const Vec& v) { return PsdMatrix(v * v.transpose()); }

    int dim() const { return static_cast<int>(m_.rows()); }
    const Mat& entries() const { return m_; }
    double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }
    double trace() const { return m_.trace(); }

    PsdMatrix scaled(double s) const {
        if (s < 0) fail(ErrorKind::InvalidInput, "negative scale on PSD matrix");
        return PsdMatrix(s * m_);
    }
    PsdMatrix operator+(const PsdMatrix& o) const {
        require_same_dim(dim(), o.dim(), "PsdMatrix sum");
        return PsdMatrix(m_ + o.m_);
    }

private:
    Mat m_;
};

inline EigenDecomposition eigh(const PsdMatrix& m) { return eigh_symmetric(m.entries()); }

// Largest |eigenvalue| of a symmetric matrix.
inline double op_norm_sym(const Mat& m) {
    if (m.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline double op_norm(const Mat& m) {
    if (m.size() == 0) return 0.0;
    Eigen::JacobiSVD<Mat> svd(m);
    return svd.singularValues()(0);
}

constexpr double kRankThreshold = 1e-8;

class Projector {
public:
    Projector() = default;

    // Orthonormalizes the columns of `basis` (which must have full column rank).
    static Projector from_basis(const Mat& basis) {
        Projector p;
        p.dim_ = static_cast<int>(basis.rows());
        if (basis.cols() == 0) {
            p.rank_ = 0;
            p.u_ = Mat(basis.rows(), 0);
            p.p_ = Mat::Zero(basis.rows(), basis.rows());
            return p;
        }
        Eigen::HouseholderQR<Mat> qr(basis);
        Mat q = qr.householderQ() * Mat::Identity(basis.rows(), basis.cols());
        p.rank_ = static_cast<int>(basis.cols());
        p.u_ = q;
        p.p_ = q * q.transpose();
        p.p_ = 0.5 * (p.p_ + p.p_.transpose());
        return p;
    }

    // Range of a PSD matrix: eigenvectors with eigenvalue above rel_threshold * lambda_max.
    static Projector range_of(const PsdMatrix& m, double rel_threshold = kRankThreshold) {
        auto ed = eigh(m);
        const double lmax = ed.values(0);
        int r = 0;
        if (lmax > 0)
            while (r < m.dim() && ed.values(r) > rel_threshold * lmax) ++r;
        Projector p;
        p.dim_ = m.dim();
        p.rank_ = r;
        p.u_ = ed.vectors.leftCols(r);
        p.p_ = p.u_ * p.u_.transpose();
        p.p_ = 0.5 * (p.p_ + p.p_.transpose());
        return p;
    }

    Projector complement() const {
        Projector c;
        c.dim_ = dim_;
        c.rank_ = dim_ - rank_;
        c.p_ = Mat::Identity(dim_, dim_) - p_;
        c.p_ = 0.5 * (c.p_ + c.p_.transpose());
        auto ed = eigh_symmetric(c.p_);
        c.u_ = ed.vectors.leftCols(c.rank_);
        return c;
    }

    int dim() const { return dim_; }
    int rank() const { return rank_; }
    const Mat& matrix() const { return p_; }
    const Mat& basis() const { return u_; }

private:
    int dim_ = 0;
    int rank_ = 0;
    Mat u_;
    Mat p_;
};

inline bool range_covers(const PsdMatrix& a, const PsdMatrix& b, double tol) {
    require_same_dim(a.dim(), b.dim(), "range_covers");
    if (!(tol > 0.0 && tol < 1.0)) fail(ErrorKind::InvalidInput, "range_covers tol must lie in (0,1)");
    const double bn = op_norm_sym(b.entries());
    if (bn == 0.0) return true;
    const Mat q = Mat::Identity(a.dim(), a.dim()) - Projector::range_of(a).matrix();
    return op_norm_sym(q * b.entries() * q) <= tol * bn;
}

inline double projector_distance(const Projector& p, const Projector& q) {
    require_same_dim(p.dim(), q.dim(), "projector_distance");
    return (p.matrix() - q.matrix()).norm();
}

struct CholeskyFactor {
    Mat lower;
    double jitter_used = 0.0;
};

// Escalates the jitter by 10x up to three times before giving up.
inline CholeskyFactor cholesky_jittered_ex(const PsdMatrix& m, double jitter = 1e-6) {
    if (jitter < 0) fail(ErrorKind::InvalidInput, "jitter must be nonnegative");
    const Mat& a = m.entries();
    const Eigen::Index n = a.rows();
    double j = jitter;
    for (int attempt = 0; attempt <= 3; ++attempt) {
        Eigen::LLT<Mat> llt(a + j * Mat::Identity(n, n));
        if (llt.info() == Eigen::Success) {
            Mat l = llt.matrixL();
            if (l.allFinite()) return {l, j};
        }
        if (j == 0.0)
            j = 1e-10 * std::max(1.0, a.diagonal().cwiseAbs().maxCoeff());
        else
            j *= 10.0;
    }
    fail(ErrorKind::NotFactorable, "Cholesky failed after 3 jitter escalations");
}

inline Mat cholesky_jittered(const PsdMatrix& m, double jitter = 1e-6) {
    return cholesky_jittered_ex(m, jitter).lower;
}

}  // namespace pmh
