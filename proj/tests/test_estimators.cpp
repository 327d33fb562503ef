#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "pmh/controls.hpp"
#include "pmh/estimators.hpp"

using namespace pmh;

namespace {

Mat rows(std::initializer_list<std::initializer_list<double>> rs) {
    Mat m(static_cast<Eigen::Index>(rs.size()), static_cast<Eigen::Index>(rs.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : rs) {
        Eigen::Index j = 0;
        for (double x : r) m(i, j++) = x;
        ++i;
    }
    return m;
}

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

TEST(Family, RoundTripAndRejectsUnknown) {
    for (int i = 0; i < 7; ++i) {
        const auto f = static_cast<Family>(i);
        EXPECT_EQ(family_from_string(to_string(f)), f);
    }
    EXPECT_EQ(kind_of([] { family_from_string("A8"); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([] { family_from_string("a1"); }), ErrorKind::ConfigError);
}

TEST(Preflight, SpecExamples) {
    const auto ok = gap_from_spectrum(vec({4, 2, 1}), 1);
    EXPECT_DOUBLE_EQ(ok.gamma_r, 2.0);
    EXPECT_DOUBLE_EQ(ok.decay_ratio, 0.5);
    EXPECT_EQ(ok.verdict, GapVerdict::Pass);
    EXPECT_EQ(ok.recommended_n, 1);

    const auto weak = gap_from_spectrum(vec({1.03, 1.0, 0.5}), 1);
    EXPECT_NEAR(weak.gamma_r, 1.03, 1e-12);
    EXPECT_EQ(weak.verdict, GapVerdict::Marginal);
    // 4 / 0.03^2 = 4444.4...
    EXPECT_EQ(weak.recommended_n, 4445);

    const auto flat = gap_from_spectrum(vec({1, 1, 1}), 2);
    EXPECT_EQ(flat.verdict, GapVerdict::Fail);
    EXPECT_EQ(flat.recommended_n, std::numeric_limits<std::int64_t>::max());

    EXPECT_EQ(kind_of([] { gap_from_spectrum(vec({1, 0.5}), 2); }), ErrorKind::RankTooLarge);
    EXPECT_EQ(kind_of([] { preflight_eigengap(PsdMatrix::identity(3), 3); }), ErrorKind::RankTooLarge);
}

TEST(Preflight, VerdictBoundaries) {
    EXPECT_EQ(classify_gap(1.2, 1 / 1.2), GapVerdict::Pass);
    EXPECT_EQ(classify_gap(1.1999, 1 / 1.1999), GapVerdict::Marginal);
    EXPECT_EQ(classify_gap(1.0 + 1e-7, 1.0), GapVerdict::Fail);
    EXPECT_EQ(classify_gap(1.0 + 1e-5, 1.0), GapVerdict::Marginal);
}

TEST(Preflight, ZeroTailIsInfiniteGap) {
    const auto g = preflight_eigengap(PsdMatrix::diagonal(vec({3, 1, 0})), 2);
    EXPECT_TRUE(std::isinf(g.gamma_r));
    EXPECT_EQ(g.verdict, GapVerdict::Pass);
    EXPECT_EQ(g.recommended_n, 8);
}

TEST(D1Subspace, RecoversSingleDirection) {
    const auto est = estimate_d1_subspace(DeltaSamples(rows({{2, 0, 0}, {-1, 0, 0}, {0.5, 0, 0}})), 1);
    Mat expect = Mat::Zero(3, 3);
    expect(0, 0) = 1;
    EXPECT_LE((est.matrix.entries() - expect).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(est.rank, 1);
    ASSERT_TRUE(est.gap.has_value());
    EXPECT_EQ(est.family, Family::A1);
    EXPECT_EQ(est.sample_count, 3);
}

TEST(D1Subspace, IsAProjectorOfRankR) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng g(s, {3});
        const int r = 1 + static_cast<int>(s % 4);
        const auto est = estimate_d1_subspace(DeltaSamples(g.normal_matrix(40, 6)), r);
        const Mat& p = est.matrix.entries();
        EXPECT_LE((p * p - p).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_NEAR(p.trace(), r, 1e-10);
    }
}

TEST(D1Subspace, RankLimits) {
    Rng g(1, {1});
    EXPECT_EQ(kind_of([&] { estimate_d1_subspace(DeltaSamples(g.normal_matrix(3, 5)), 4); }), ErrorKind::RankTooLarge);
    EXPECT_EQ(kind_of([&] { estimate_d1_subspace(DeltaSamples(g.normal_matrix(3, 5)), 0); }), ErrorKind::InvalidInput);
}

TEST(D1Subspace, DavisKahanHoldsOnPlantedCovariance) {
    // spectrum (6,5,1,1,1): gap 4 between the planted pair and the bulk
    const Mat q = sample_stiefel(5, 5, 9).U;
    const Vec spec = vec({6, 5, 1, 1, 1});
    const Mat c = q * spec.asDiagonal() * q.transpose();
    const Mat root = q * spec.cwiseSqrt().asDiagonal() * q.transpose();
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng g(s, {0xd4});
        const Mat x = g.normal_matrix(200, 5) * root;
        const auto est = estimate_d1_subspace(DeltaSamples(x), 2);
        const auto dk = davis_kahan_check(second_moment(x), c, 2);
        EXPECT_TRUE(dk.holds()) << dk.lhs << " > " << dk.rhs;
        EXPECT_NEAR(dk.lhs, (est.matrix.entries() - q.leftCols(2) * q.leftCols(2).transpose()).norm(), 1e-9);
    }
}

TEST(D2Isotropic, ExactVariance) {
    const auto est = estimate_d2_isotropic(DeltaSamples(rows({{0.5, -0.5}, {-0.5, 0.5}})));
    EXPECT_DOUBLE_EQ(est.matrix(0, 0), 0.25);
    EXPECT_DOUBLE_EQ(est.matrix(1, 1), 0.25);
    EXPECT_DOUBLE_EQ(est.matrix(0, 1), 0.0);
}

TEST(D2Isotropic, ConvergesOnGaussianNoise) {
    Rng g(4, {2});
    const auto est = estimate_d2_isotropic(DeltaSamples(0.3 * g.normal_matrix(20000, 4)));
    EXPECT_NEAR(est.matrix(0, 0), 0.09, 0.09 * 0.02);
}

TEST(D3Modes, FullAndTruncated) {
    const DeltaSamples m(rows({{2, 0, 0}, {0, 1, 0}}));
    const auto full = estimate_d3_modes(m);
    EXPECT_LE((full.matrix.entries() - PsdMatrix::diagonal(vec({2, 0.5, 0})).entries()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_FALSE(full.rank.has_value());
    const auto top = estimate_d3_modes(m, 1);
    EXPECT_LE((top.matrix.entries() - PsdMatrix::diagonal(vec({2, 0, 0})).entries()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(kind_of([&] { estimate_d3_modes(m, 4); }), ErrorKind::RankTooLarge);
}

TEST(D4DomainGram, CenteredDifferences) {
    const Mat src = rows({{0, 0}, {1, 1}});
    const Mat tgt = rows({{1, 0}, {0, 1}});
    // differences (1,0) and (-1,0): centered covariance with N-1 divisor is diag(2,0)
    const auto est = estimate_d4_domain_gram(src, tgt);
    EXPECT_LE((est.matrix.entries() - PsdMatrix::diagonal(vec({2, 0})).entries()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(kind_of([&] { estimate_d4_domain_gram(src, rows({{1, 0}})); }), ErrorKind::PairingError);
}

TEST(D4DomainGram, InvariantToCommonShift) {
    Rng g(6, {4});
    const Mat src = g.normal_matrix(30, 3);
    const Mat tgt = g.normal_matrix(30, 3);
    const Mat shifted = tgt.rowwise() + vec({5, -2, 1}).transpose();
    const auto a = estimate_d4_domain_gram(src, tgt);
    const auto b = estimate_d4_domain_gram(src, shifted);
    EXPECT_LE((a.matrix.entries() - b.matrix.entries()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(D5Block, SupportedOnBlockOnly) {
    Rng g(2, {5});
    const auto est = estimate_d5_block(DeltaSamples(g.normal_matrix(50, 4)), {1, 3});
    const Mat& m = est.matrix.entries();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if (i == 0 || i == 2 || j == 0 || j == 2) EXPECT_EQ(m(i, j), 0.0);
    EXPECT_GT(m(1, 1), 0.0);
    EXPECT_EQ(kind_of([&] { estimate_d5_block(DeltaSamples(g.normal_matrix(5, 4)), {}); }), ErrorKind::EmptyBlock);
    EXPECT_EQ(kind_of([&] { estimate_d5_block(DeltaSamples(g.normal_matrix(5, 4)), {4}); }), ErrorKind::InvalidInput);
}

TEST(D6Increments, PooledSecondMoment) {
    const auto est = estimate_d6_increments({rows({{0, 0}, {1, 0}, {1, 1}}), rows({{7, 7}})});
    EXPECT_LE((est.matrix.entries() - 0.5 * Mat::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(est.sample_count, 2);
    EXPECT_EQ(kind_of([] { estimate_d6_increments({rows({{1, 2}}), rows({{3, 4}})}); }), ErrorKind::NoIncrements);
    EXPECT_EQ(kind_of([] { estimate_d6_increments({}); }), ErrorKind::NoIncrements);
}

TEST(D7DeltaGram, UncenteredSecondMoment) {
    const auto est = estimate_d7_delta_gram(DeltaSamples(rows({{1, 0}, {1, 0}})));
    EXPECT_LE((est.matrix.entries() - PsdMatrix::diagonal(vec({1, 0})).entries()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(DeltaSamples, RejectsNonFinite) {
    Mat m = Mat::Zero(2, 2);
    m(1, 0) = std::numeric_limits<double>::infinity();
    EXPECT_EQ(kind_of([&] { DeltaSamples d(m); }), ErrorKind::InvalidMatrix);
}

TEST(Estimators, DeterministicAndSymmetric) {
    Rng g(12, {6});
    const DeltaSamples d(g.normal_matrix(25, 5));
    const auto a = estimate_d1_subspace(d, 2), b = estimate_d1_subspace(d, 2);
    EXPECT_EQ(a.matrix.entries(), b.matrix.entries());
    for (const auto& est : {estimate_d2_isotropic(d), estimate_d3_modes(d), estimate_d7_delta_gram(d), a}) {
        const Mat& m = est.matrix.entries();
        EXPECT_EQ(m, m.transpose());
        EXPECT_GE(eigh(est.matrix).values.minCoeff(), -1e-10);
    }
}
