#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "error.hpp"
#include "io.hpp"
#include "psd.hpp"
#include "rng.hpp"

namespace pmh {

enum class EncoderKind { Linear, Mlp1 };
enum class Activation { Tanh, Softplus };

inline std::string to_string(EncoderKind k) { return k == EncoderKind::Linear ? "linear" : "mlp1"; }
inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "softplus"; }

// Embeddings are rows: forward maps an n x d_x batch to n x d_phi.
struct EncoderParams {
    EncoderKind kind = EncoderKind::Linear;
    Activation activation = Activation::Tanh;
    Mat W;   // linear: d_phi x d_x
    Mat W1;  // mlp1: m x d_x
    Vec b1;  // mlp1: m
    Mat W2;  // mlp1: d_phi x m

    static EncoderParams linear(Mat w) {
        EncoderParams e;
        e.kind = EncoderKind::Linear;
        e.W = std::move(w);
        e.validate();
        return e;
    }
    static EncoderParams mlp1(Mat w1, Vec b1, Mat w2, Activation a = Activation::Tanh) {
        EncoderParams e;
        e.kind = EncoderKind::Mlp1;
        e.W1 = std::move(w1);
        e.b1 = std::move(b1);
        e.W2 = std::move(w2);
        e.activation = a;
        e.validate();
        return e;
    }
    static EncoderParams random_mlp1(int d_x, int m, int d_phi, Activation a, std::uint64_t seed, double scale = 1.0) {
        Rng g(seed, {0xe1c0});
        Mat w1 = g.normal_matrix(m, d_x) * (scale / std::sqrt(static_cast<double>(d_x)));
        Vec b1 = g.normal_vector(m) * 0.5;
        Mat w2 = g.normal_matrix(d_phi, m) * (1.0 / std::sqrt(static_cast<double>(m)));
        return mlp1(std::move(w1), std::move(b1), std::move(w2), a);
    }

    int d_x() const { return static_cast<int>(kind == EncoderKind::Linear ? W.cols() : W1.cols()); }
    int d_phi() const { return static_cast<int>(kind == EncoderKind::Linear ? W.rows() : W2.rows()); }
    int width() const { return kind == EncoderKind::Linear ? 0 : static_cast<int>(W1.rows()); }

    void validate() const {
        if (kind == EncoderKind::Linear) {
            if (W.size() == 0) fail(ErrorKind::InvalidInput, "linear encoder needs a nonempty W");
            if (!W.allFinite()) fail(ErrorKind::InvalidMatrix, "non-finite encoder weights");
            return;
        }
        if (W1.size() == 0 || W2.size() == 0) fail(ErrorKind::InvalidInput, "mlp1 needs nonempty W1 and W2");
        if (b1.size() != W1.rows() || W2.cols() != W1.rows()) fail(ErrorKind::DimMismatch, "mlp1 layer shapes disagree");
        if (!W1.allFinite() || !b1.allFinite() || !W2.allFinite())
            fail(ErrorKind::InvalidMatrix, "non-finite encoder weights");
    }
};

inline double act(Activation a, double u) {
    if (a == Activation::Tanh) return std::tanh(u);
    return u > 30 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
}
inline double act_d1(Activation a, double u) {
    if (a == Activation::Tanh) {
        const double t = std::tanh(u);
        return 1.0 - t * t;
    }
    return 1.0 / (1.0 + std::exp(-u));
}
inline double act_d2(Activation a, double u) {
    if (a == Activation::Tanh) {
        const double t = std::tanh(u);
        return -2.0 * t * (1.0 - t * t);
    }
    const double s = 1.0 / (1.0 + std::exp(-u));
    return s * (1.0 - s);
}

inline void check_input(const EncoderParams& enc, const Mat& x) {
    if (x.cols() != enc.d_x())
        fail(ErrorKind::DimMismatch, "input width " + std::to_string(x.cols()) + " != d_x " + std::to_string(enc.d_x()));
}

// Pre-activations U = X W1^T + b1, n x m.
inline Mat preactivation(const EncoderParams& enc, const Mat& x) {
    return (x * enc.W1.transpose()).rowwise() + enc.b1.transpose();
}

inline Mat hidden(const EncoderParams& enc, const Mat& x) {
    check_input(enc, x);
    if (enc.kind == EncoderKind::Linear) return x * enc.W.transpose();
    return preactivation(enc, x).unaryExpr([&](double u) { return act(enc.activation, u); });
}

inline Mat forward(const EncoderParams& enc, const Mat& x) {
    check_input(enc, x);
    if (enc.kind == EncoderKind::Linear) return x * enc.W.transpose();
    return hidden(enc, x) * enc.W2.transpose();
}

// Layer outputs used by layer-averaged diagnostics.
inline std::vector<Mat> layer_outputs(const EncoderParams& enc, const Mat& x, bool final_only) {
    if (enc.kind == EncoderKind::Linear || final_only) return {forward(enc, x)};
    Mat h = hidden(enc, x);
    Mat out = h * enc.W2.transpose();
    return {std::move(h), std::move(out)};
}

using JacobianBatch = std::vector<Mat>;  // one d_phi x d_x matrix per sample

inline JacobianBatch jacobian_analytic(const EncoderParams& enc, const Mat& x) {
    check_input(enc, x);
    JacobianBatch out;
    out.reserve(static_cast<std::size_t>(x.rows()));
    if (enc.kind == EncoderKind::Linear) {
        for (Eigen::Index i = 0; i < x.rows(); ++i) out.push_back(enc.W);
        return out;
    }
    const Mat u = preactivation(enc, x);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Vec dg(u.cols());
        for (Eigen::Index j = 0; j < u.cols(); ++j) dg(j) = act_d1(enc.activation, u(i, j));
        out.push_back(enc.W2 * dg.asDiagonal() * enc.W1);
    }
    return out;
}

inline JacobianBatch jacobian_fd(const EncoderParams& enc, const Mat& x, double step) {
    check_input(enc, x);
    if (!(step > 0)) fail(ErrorKind::InvalidInput, "step must be positive");
    JacobianBatch out;
    const int d = enc.d_x();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Mat j(enc.d_phi(), d);
        for (int k = 0; k < d; ++k) {
            Mat xp = x.row(i), xm = x.row(i);
            xp(0, k) += step;
            xm(0, k) -= step;
            j.col(k) = ((forward(enc, xp) - forward(enc, xm)) / (2.0 * step)).transpose();
        }
        out.push_back(std::move(j));
    }
    return out;
}

// A one-hidden-layer encoder whose first layer annihilates range(sigma_prime),
// so its Jacobian trace penalty along sigma_prime is exactly zero everywhere.
inline EncoderParams construct_nrp_zero_penalty(const PsdMatrix& sigma_prime, int m, std::uint64_t seed, int d_phi = 2) {
    const int d = sigma_prime.dim();
    const Projector range = Projector::range_of(sigma_prime);
    const int k = d - range.rank();
    if (k == 0) fail(ErrorKind::DegenerateConstruction, "sigma_prime has full rank: only the zero first layer qualifies");
    if (m < k) fail(ErrorKind::InsufficientWidth, "hidden width " + std::to_string(m) + " < null dimension " + std::to_string(k));
    if (d_phi < 1) fail(ErrorKind::InvalidInput, "d_phi must be >= 1");
    const Mat comp = range.complement().basis();  // d x k
    Rng g(seed, {0x0e7a});
    Mat w1 = g.normal_matrix(m, k) * comp.transpose();
    // remove any rounding leakage into the penalized range
    w1 = w1 - w1 * range.matrix();
    Vec b1 = g.normal_vector(m) * 0.5;
    Mat w2 = g.normal_matrix(d_phi, m) / std::sqrt(static_cast<double>(m));
    return EncoderParams::mlp1(std::move(w1), std::move(b1), std::move(w2), Activation::Tanh);
}

inline json encoder_to_json(const EncoderParams& enc) {
    json j;
    j["kind"] = to_string(enc.kind);
    j["d_x"] = enc.d_x();
    j["d_phi"] = enc.d_phi();
    if (enc.kind == EncoderKind::Linear) {
        j["W"] = matrix_to_json(enc.W);
    } else {
        j["width"] = enc.width();
        j["activation"] = to_string(enc.activation);
        j["W1"] = matrix_to_json(enc.W1);
        j["b1"] = matrix_to_json(enc.b1);
        j["W2"] = matrix_to_json(enc.W2);
    }
    return j;
}

inline EncoderParams encoder_from_json(const json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "linear") return EncoderParams::linear(matrix_from_json(j.at("W")));
    if (kind != "mlp1") fail(ErrorKind::InvalidInput, "unknown encoder kind '" + kind + "'");
    const auto a = j.value("activation", std::string("tanh"));
    if (a != "tanh" && a != "softplus") fail(ErrorKind::InvalidInput, "unknown activation '" + a + "'");
    Mat b = matrix_from_json(j.at("b1"));
    Vec b1 = Eigen::Map<Vec>(b.data(), b.size());
    return EncoderParams::mlp1(matrix_from_json(j.at("W1")), b1, matrix_from_json(j.at("W2")),
                               a == "tanh" ? Activation::Tanh : Activation::Softplus);
}

}  // namespace pmh
