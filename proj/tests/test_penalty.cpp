#include <gtest/gtest.h>

#include <cmath>

#include "pmh/penalty.hpp"
#include "pmh/stats.hpp"

using namespace pmh;

namespace {

Vec vec(std::initializer_list<double> xs) {
    Vec v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v(i++) = x;
    return v;
}

PenaltySpec stochastic(const PsdMatrix& s, int probes, double scale, std::uint64_t seed = 0) {
    PenaltySpec p{s, 1.0};
    p.probe_mode = ProbeMode::Stochastic;
    p.n_probes = probes;
    p.probe_scale = scale;
    p.seed = seed;
    return p;
}

}  // namespace

TEST(ExactPenalty, LinearExamples) {
    Mat w(2, 2);
    w << 1, 0, 0, 2;
    const auto enc = EncoderParams::linear(w);
    const Mat x = Mat::Zero(3, 2);
    EXPECT_DOUBLE_EQ(exact_trace_penalty(enc, x, PsdMatrix::identity(2)), 5.0);
    EXPECT_DOUBLE_EQ(exact_trace_penalty(enc, x, PsdMatrix::diagonal(vec({1, 0}))), 1.0);
    EXPECT_DOUBLE_EQ(exact_trace_penalty(enc, x, PsdMatrix::zeros(2)), 0.0);
    EXPECT_THROW(exact_trace_penalty(enc, x, PsdMatrix::identity(3)), Error);
}

TEST(ExactPenalty, Mlp1MatchesJacobianTrace) {
    for (auto a : {Activation::Tanh, Activation::Softplus}) {
        const auto enc = EncoderParams::random_mlp1(4, 6, 3, a, 2);
        Rng g(8, {1});
        const Mat x = g.normal_matrix(10, 4);
        const Mat m = g.normal_matrix(4, 4);
        const PsdMatrix sp(m * m.transpose());
        double ref = 0;
        for (const auto& j : jacobian_analytic(enc, x)) ref += (j.transpose() * j * sp.entries()).trace();
        ref /= 10;
        EXPECT_NEAR(exact_trace_penalty(enc, x, sp), ref, 1e-10 * ref);
    }
}

TEST(ExactPenalty, LinearInSigmaAndNonnegative) {
    const auto enc = EncoderParams::random_mlp1(3, 5, 2, Activation::Tanh, 4);
    const Mat x = Rng(1, {2}).normal_matrix(6, 3);
    const PsdMatrix sp = PsdMatrix::diagonal(vec({1, 2, 0.5}));
    const double base = exact_trace_penalty(enc, x, sp);
    EXPECT_GT(base, 0.0);
    EXPECT_NEAR(exact_trace_penalty(enc, x, sp.scaled(3.0)), 3.0 * base, 1e-12 * base);
    const double sum = exact_trace_penalty(enc, x, sp + PsdMatrix::identity(3));
    EXPECT_NEAR(sum, base + exact_trace_penalty(enc, x, PsdMatrix::identity(3)), 1e-12 * sum);
}

TEST(StochasticPenalty, ConvergesToExactForLinearEncoder) {
    const auto enc = EncoderParams::linear(Rng(3, {3}).normal_matrix(2, 4));
    const Mat x = Rng(4, {3}).normal_matrix(20, 4);
    const Mat m = Rng(5, {3}).normal_matrix(4, 2);
    const PsdMatrix sp(m * m.transpose());
    const double exact = exact_trace_penalty(enc, x, sp);
    const auto est = stochastic_penalty_ex(enc, x, stochastic(sp, 400, 1e-2));
    EXPECT_NEAR(est.value, exact, 3 * est.std_error + 1e-6 * exact);
    EXPECT_LT(est.std_error, 0.05 * exact);
}

TEST(StochasticPenalty, SmallProbesApproachExactForMlp) {
    const auto enc = EncoderParams::random_mlp1(4, 8, 2, Activation::Tanh, 6);
    const Mat x = Rng(7, {3}).normal_matrix(30, 4);
    const PsdMatrix sp = PsdMatrix::diagonal(vec({1, 0.5, 0, 0}));
    const double exact = exact_trace_penalty(enc, x, sp);
    const auto est = stochastic_penalty_ex(enc, x, stochastic(sp, 400, 1e-3));
    EXPECT_NEAR(est.value, exact, 4 * est.std_error + 1e-3 * exact);
}

TEST(StochasticPenalty, BiasShrinksWithProbeScaleOnMlp) {
    const auto enc = EncoderParams::random_mlp1(4, 8, 2, Activation::Tanh, 8, 2.0);
    const Mat x = Rng(9, {3}).normal_matrix(30, 4);
    const PsdMatrix sp = PsdMatrix::diagonal(vec({1, 1, 0.5, 0}));
    // the same probe draws at each scale, so the difference to a tiny scale is pure curvature bias
    const double limit = stochastic_penalty(enc, x, stochastic(sp, 64, 1e-6, 3));
    std::vector<double> bias;
    for (double eps : {0.4, 0.2, 0.1, 0.05}) bias.push_back(std::abs(stochastic_penalty(enc, x, stochastic(sp, 64, eps, 3)) - limit));
    std::vector<double> eps{0.4, 0.2, 0.1, 0.05};
    EXPECT_GE(loglog_slope(eps, bias), 1.0);
    for (std::size_t i = 1; i < bias.size(); ++i) EXPECT_LT(bias[i], bias[i - 1]);
}

TEST(StochasticPenalty, ZeroSigmaAndDeterminism) {
    const auto enc = EncoderParams::random_mlp1(3, 4, 2, Activation::Tanh, 1);
    const Mat x = Rng(2, {3}).normal_matrix(5, 3);
    EXPECT_EQ(stochastic_penalty(enc, x, stochastic(PsdMatrix::zeros(3), 4, 0.1)), 0.0);
    const auto spec = stochastic(PsdMatrix::identity(3), 4, 0.1, 77);
    EXPECT_EQ(stochastic_penalty(enc, x, spec), stochastic_penalty(enc, x, spec));
    EXPECT_NE(stochastic_penalty(enc, x, spec), stochastic_penalty(enc, x, stochastic(PsdMatrix::identity(3), 4, 0.1, 78)));
    PenaltySpec exact{PsdMatrix::identity(3), 1.0};
    EXPECT_THROW(stochastic_penalty(enc, x, exact), Error);
}

TEST(PenaltySpec, Validation) {
    PenaltySpec s{PsdMatrix::identity(2), -1.0};
    EXPECT_THROW(s.validate(), Error);
    s.lambda = 1;
    s.cap = 0.0;
    EXPECT_THROW(s.validate(), Error);
    s.cap.reset();
    s.probe_scale = 0;
    EXPECT_THROW(s.validate(), Error);
}

TEST(CappedCombine, Examples) {
    const auto clipped = capped_combine(1.0, 5.0, 0.5);
    EXPECT_TRUE(clipped.clipped);
    EXPECT_DOUBLE_EQ(clipped.total, 1.5);
    EXPECT_NEAR(clipped.pmh_fraction, 1.0 / 3.0, 1e-15);
    const auto free = capped_combine(1.0, 0.2, 0.5);
    EXPECT_FALSE(free.clipped);
    EXPECT_DOUBLE_EQ(free.total, 1.2);
    EXPECT_THROW(capped_combine(1.0, 0.2, 0.0), Error);
    EXPECT_THROW(capped_combine(-1.0, 0.2, 1.0), Error);
}

TEST(CappedCombine, MoreExamples) {
    EXPECT_NEAR(capped_combine(1.0, 100.0, 0.25).pmh_fraction, 0.2, 1e-15);
    const auto c = capped_combine(2.0, 10.0, 1.0);
    EXPECT_DOUBLE_EQ(c.total, 4.0);
    EXPECT_DOUBLE_EQ(c.pmh_fraction, 0.5);
    const auto below = capped_combine(3.0, 1.0, 1.0);
    EXPECT_DOUBLE_EQ(below.total, 4.0);
    EXPECT_DOUBLE_EQ(below.pmh_fraction, 0.25);
}

TEST(CappedCombine, FractionNeverExceedsCapShare) {
    for (double cap : {0.1, 0.5, 2.0})
        for (double task : {0.01, 1.0, 30.0})
            for (double pen : {0.0, 0.3, 100.0}) {
                const auto c = capped_combine(task, pen, cap);
                EXPECT_LE(c.pmh_fraction, cap / (1 + cap) + 1e-15);
                EXPECT_LE(c.total, task * (1 + cap) + 1e-12);
            }
}

TEST(ComposePenalties, WeightedSumWithCaps) {
    const auto enc = EncoderParams::linear(Mat::Identity(2, 2));
    const Mat x = Mat::Zero(2, 2);
    PenaltySpec a{PsdMatrix::diagonal(vec({1, 0})), 2.0};
    PenaltySpec b{PsdMatrix::diagonal(vec({0, 1})), 3.0};
    EXPECT_DOUBLE_EQ(compose_penalties({a, b}, enc, x), 5.0);
    b.cap = 0.5;
    EXPECT_DOUBLE_EQ(compose_penalties({a, b}, enc, x, 1.0), 2.5);
    EXPECT_DOUBLE_EQ(compose_penalties({}, enc, x), 0.0);
}

TEST(ComposePenalties, OrthogonalRankOneTermsAdd) {
    const auto enc = EncoderParams::linear(Rng(10, {3}).normal_matrix(3, 4));
    const Mat x = Rng(11, {3}).normal_matrix(5, 4);
    const Mat q = Eigen::HouseholderQR<Mat>(Rng(12, {3}).normal_matrix(4, 4)).householderQ() * Mat::Identity(4, 2);
    const PsdMatrix a = PsdMatrix::outer(q.col(0)), b = PsdMatrix::outer(q.col(1));
    const double sum = compose_penalties({PenaltySpec{a, 1.0}, PenaltySpec{b, 1.0}}, enc, x);
    EXPECT_NEAR(sum, exact_trace_penalty(enc, x, a) + exact_trace_penalty(enc, x, b), 1e-12 * sum);
    EXPECT_NEAR(compose_penalties({PenaltySpec{a, 2.5}}, enc, x), 2.5 * exact_trace_penalty(enc, x, a), 1e-12);
}
