#include <gtest/gtest.h>

#include <cmath>

#include "pmh/encoders.hpp"
#include "pmh/penalty.hpp"

using namespace pmh;

namespace {

Vec vec(std::initializer_list<double> xs) {
    Vec v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v(i++) = x;
    return v;
}

template <class F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::Internal;
}

}  // namespace

TEST(Activation, DerivativesMatchFiniteDifferences) {
    for (auto a : {Activation::Tanh, Activation::Softplus})
        for (double u : {-3.0, -0.4, 0.0, 0.7, 2.5}) {
            const double h = 1e-5;
            EXPECT_NEAR(act_d1(a, u), (act(a, u + h) - act(a, u - h)) / (2 * h), 1e-8);
            EXPECT_NEAR(act_d2(a, u), (act_d1(a, u + h) - act_d1(a, u - h)) / (2 * h), 1e-8);
        }
    EXPECT_NEAR(act(Activation::Softplus, 0.0), std::log(2.0), 1e-15);
    EXPECT_NEAR(act(Activation::Softplus, 50.0), 50.0, 1e-12);
}

TEST(Encoder, LinearForwardAndJacobian) {
    Mat w(2, 3);
    w << 1, 0, 2, 0, -1, 1;
    const auto enc = EncoderParams::linear(w);
    Mat x(1, 3);
    x << 1, 2, 3;
    const Mat y = forward(enc, x);
    EXPECT_DOUBLE_EQ(y(0, 0), 7.0);
    EXPECT_DOUBLE_EQ(y(0, 1), 1.0);
    const auto j = jacobian_analytic(enc, x);
    ASSERT_EQ(j.size(), 1u);
    EXPECT_EQ(j[0], w);
    EXPECT_EQ(kind_of([&] { forward(enc, Mat::Zero(1, 2)); }), ErrorKind::DimMismatch);
}

TEST(Encoder, Mlp1ShapesAndLayers) {
    const auto enc = EncoderParams::random_mlp1(5, 7, 3, Activation::Tanh, 1);
    EXPECT_EQ(enc.d_x(), 5);
    EXPECT_EQ(enc.width(), 7);
    EXPECT_EQ(enc.d_phi(), 3);
    Rng g(2, {1});
    const Mat x = g.normal_matrix(4, 5);
    const auto layers = layer_outputs(enc, x, false);
    ASSERT_EQ(layers.size(), 2u);
    EXPECT_EQ(layers[0].cols(), 7);
    EXPECT_EQ(layers[1], forward(enc, x));
    EXPECT_EQ(layer_outputs(enc, x, true).size(), 1u);
    EXPECT_EQ(kind_of([] { EncoderParams::mlp1(Mat::Ones(3, 2), Vec::Ones(2), Mat::Ones(1, 3)); }),
              ErrorKind::DimMismatch);
}

TEST(Jacobian, AnalyticMatchesFiniteDifference) {
    for (auto a : {Activation::Tanh, Activation::Softplus})
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto enc = EncoderParams::random_mlp1(6, 9, 3, a, s, 1.5);
            Rng g(s, {7});
            const Mat x = g.normal_matrix(5, 6);
            const auto ja = jacobian_analytic(enc, x);
            const auto jf = jacobian_fd(enc, x, 1e-5);
            for (std::size_t i = 0; i < ja.size(); ++i) EXPECT_LE((ja[i] - jf[i]).cwiseAbs().maxCoeff(), 1e-7);
        }
}

TEST(NrpConstruction, PenaltyIsZeroButEncoderIsNotConstant) {
    const auto u = Rng(3, {4}).normal_matrix(6, 2);
    const PsdMatrix sp(u * u.transpose());
    const auto enc = construct_nrp_zero_penalty(sp, 8, 11);
    Rng g(5, {2});
    const Mat x = g.normal_matrix(50, 6);
    EXPECT_LE(exact_trace_penalty(enc, x, sp), 1e-12);
    for (const auto& j : jacobian_analytic(enc, x)) EXPECT_LE((j * u).cwiseAbs().maxCoeff(), 1e-12);
    // moving orthogonally to range(Sigma') does change the embedding
    EXPECT_GT(exact_trace_penalty(enc, x, PsdMatrix::identity(6)), 1e-3);

    PenaltySpec spec{sp, 1.0};
    spec.probe_mode = ProbeMode::Stochastic;
    spec.n_probes = 8;
    // the relative probe jitter leaks a little energy into the complement
    EXPECT_LE(stochastic_penalty(enc, x, spec), 1e-5);
}

TEST(NrpConstruction, Errors) {
    EXPECT_EQ(kind_of([] { construct_nrp_zero_penalty(PsdMatrix::identity(3), 4, 0); }),
              ErrorKind::DegenerateConstruction);
    EXPECT_EQ(kind_of([] { construct_nrp_zero_penalty(PsdMatrix::diagonal(vec({1, 0, 0, 0})), 2, 0); }),
              ErrorKind::InsufficientWidth);
    EXPECT_NO_THROW(construct_nrp_zero_penalty(PsdMatrix::diagonal(vec({1, 0, 0, 0})), 3, 0));
}

TEST(EncoderJson, RoundTrip) {
    const auto enc = EncoderParams::random_mlp1(3, 4, 2, Activation::Softplus, 9);
    const auto back = encoder_from_json(encoder_to_json(enc));
    EXPECT_EQ(back.W1, enc.W1);
    EXPECT_EQ(back.b1, enc.b1);
    EXPECT_EQ(back.W2, enc.W2);
    EXPECT_EQ(back.activation, Activation::Softplus);
    const auto lin = EncoderParams::linear(Rng(1, {1}).normal_matrix(2, 3));
    EXPECT_EQ(encoder_from_json(encoder_to_json(lin)).W, lin.W);
    json bad = encoder_to_json(lin);
    bad["kind"] = "conv";
    EXPECT_EQ(kind_of([&] { encoder_from_json(bad); }), ErrorKind::InvalidInput);
}
