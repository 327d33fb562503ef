#include <gtest/gtest.h>

#include <cmath>

#include "pmh/trainer.hpp"

using namespace pmh;

namespace {

Vec vec(std::initializer_list<double> xs) {
    Vec v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v(i++) = x;
    return v;
}

// Flattened view so finite differences can walk every parameter.
std::vector<double*> params(EncoderParams& e) {
    std::vector<double*> out;
    auto push = [&](auto& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data() + i);
    };
    if (e.kind == EncoderKind::Linear) {
        push(e.W);
    } else {
        push(e.W1);
        push(e.b1);
        push(e.W2);
    }
    return out;
}

std::vector<double> flatten(const EncoderGrad& g, EncoderKind kind) {
    std::vector<double> out;
    auto push = [&](const auto& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data()[i]);
    };
    if (kind == EncoderKind::Linear) {
        push(g.W);
    } else {
        push(g.W1);
        push(g.b1);
        push(g.W2);
    }
    return out;
}

template <class F>
void expect_grad_matches(EncoderParams enc, const EncoderGrad& g, F&& value, double tol) {
    const auto analytic = flatten(g, enc.kind);
    auto ps = params(enc);
    ASSERT_EQ(ps.size(), analytic.size());
    const double h = 1e-6;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const double keep = *ps[i];
        *ps[i] = keep + h;
        const double up = value(enc);
        *ps[i] = keep - h;
        const double down = value(enc);
        *ps[i] = keep;
        EXPECT_NEAR(analytic[i], (up - down) / (2 * h), tol * std::max(1.0, std::abs(analytic[i]))) << "param " << i;
    }
}

Dataset whitened_linear_data(int d_s, int d_n, double rho, int n, std::uint64_t seed) {
    const auto m = LinearGaussianModel::random(d_s, d_n, rho, 0.1, seed);
    return whiten(sample_dataset(m, n, seed + 1));
}

}  // namespace

TEST(Loss, Examples) {
    EXPECT_DOUBLE_EQ(loss_value(Loss::Mse, 2, 0), 2.0);
    EXPECT_DOUBLE_EQ(loss_grad(Loss::Mse, 2, 0), 2.0);
    EXPECT_NEAR(loss_value(Loss::Logistic, 0, 1), std::log(2.0), 1e-15);
    EXPECT_DOUBLE_EQ(loss_grad(Loss::Logistic, 0, 1), -0.5);
    EXPECT_DOUBLE_EQ(loss_value(Loss::Hinge, 0.5, 1), 0.5);
    EXPECT_DOUBLE_EQ(loss_grad(Loss::Hinge, 0.5, 1), -1.0);
    EXPECT_DOUBLE_EQ(loss_value(Loss::Hinge, 2, 1), 0.0);
    EXPECT_DOUBLE_EQ(loss_grad(Loss::Hinge, 2, 1), 0.0);
    EXPECT_NEAR(loss_value(Loss::Logistic, -100, 1), 100.0, 1e-12);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
    for (auto l : {Loss::Mse, Loss::Logistic, Loss::Hinge})
        for (double f : {-1.7, -0.3, 0.4, 2.2})
            for (double y : {-1.0, 1.0}) {
                const double h = 1e-6;
                EXPECT_NEAR(loss_grad(l, f, y), (loss_value(l, f + h, y) - loss_value(l, f - h, y)) / (2 * h), 1e-6);
            }
}

TEST(Enums, RoundTripAndRejectUnknown) {
    for (auto k : {ArmKind::Erm, ArmKind::Matched, ArmKind::Iso, ArmKind::WrongW, ArmKind::SignalW})
        EXPECT_EQ(arm_kind_from_string(to_string(k)), k);
    for (auto l : {Loss::Mse, Loss::Logistic, Loss::Hinge}) EXPECT_EQ(loss_from_string(to_string(l)), l);
    EXPECT_THROW(arm_kind_from_string("oracle"), Error);
    EXPECT_THROW(loss_from_string("l1"), Error);
}

TEST(Backprop, EncoderBackwardMatchesFiniteDifference) {
    for (auto kind : {EncoderKind::Linear, EncoderKind::Mlp1}) {
        const auto enc = kind == EncoderKind::Linear ? EncoderParams::linear(Rng(1, {1}).normal_matrix(2, 3))
                                                     : EncoderParams::random_mlp1(3, 5, 2, Activation::Softplus, 1);
        const Mat x = Rng(2, {1}).normal_matrix(4, 3);
        const Mat dphi = Rng(3, {1}).normal_matrix(4, 2);
        expect_grad_matches(enc, encoder_backward(enc, x, dphi),
                            [&](const EncoderParams& e) { return forward(e, x).cwiseProduct(dphi).sum(); }, 1e-6);
    }
}

TEST(Backprop, ExactPenaltyGradientMatchesFiniteDifference) {
    const Mat m = Rng(4, {2}).normal_matrix(3, 2);
    const PsdMatrix sp(m * m.transpose());
    const Mat x = Rng(5, {2}).normal_matrix(6, 3);
    for (auto a : {Activation::Tanh, Activation::Softplus}) {
        const auto enc = EncoderParams::random_mlp1(3, 4, 2, a, 7);
        expect_grad_matches(enc, exact_penalty_grad(enc, x, sp),
                            [&](const EncoderParams& e) { return exact_trace_penalty(e, x, sp); }, 1e-5);
    }
    const auto lin = EncoderParams::linear(Rng(6, {2}).normal_matrix(2, 3));
    expect_grad_matches(lin, exact_penalty_grad(lin, x, sp),
                        [&](const EncoderParams& e) { return exact_trace_penalty(e, x, sp); }, 1e-6);
}

TEST(Backprop, StochasticPenaltyGradientMatchesFiniteDifference) {
    PenaltySpec spec{PsdMatrix::diagonal(vec({1, 0.5, 0})), 1.0};
    spec.probe_mode = ProbeMode::Stochastic;
    spec.n_probes = 3;
    spec.probe_scale = 0.1;
    spec.seed = 5;
    const Mat x = Rng(8, {2}).normal_matrix(5, 3);
    const auto enc = EncoderParams::random_mlp1(3, 4, 2, Activation::Tanh, 9);
    const auto vg = stochastic_penalty_grad(enc, x, spec, 3);
    EXPECT_NEAR(vg.first, stochastic_penalty_ex(enc, x, spec, 3).value, 1e-12);
    expect_grad_matches(enc, vg.second,
                        [&](const EncoderParams& e) { return stochastic_penalty_ex(e, x, spec, 3).value; }, 1e-5);
}

TEST(Whiten, SecondMomentIsIdentity) {
    const auto d = whitened_linear_data(3, 2, 0.5, 200, 1);
    EXPECT_LE((second_moment(d.x) - Mat::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TrainArm, MatchedLinearConvergesToClosedForm) {
    const auto d = whitened_linear_data(3, 2, 0.8, 400, 2);
    const Vec v_hat = d.x.transpose() * d.y / static_cast<double>(d.x.rows());
    const PsdMatrix sp = PsdMatrix::diagonal(vec({0, 0, 0, 1, 1}));
    ArmSpec arm{ArmKind::Matched, {PenaltySpec{sp, 2.0}}, "test"};
    TrainConfig cfg;
    cfg.steps = 800;
    cfg.learning_rate = 0.1;
    const auto r = train_arm(d, arm, cfg);
    const Vec w = r.encoder.W.row(0).transpose() * r.head(0);
    EXPECT_LE((w - pmh_minimizer(v_hat, sp, 2.0)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_EQ(r.curve_task.size(), 800u);
    EXPECT_NEAR(r.lipschitz(), 1.0, 1e-15);
}

TEST(TrainArm, DeterministicWithMiniBatches) {
    const auto d = whitened_linear_data(3, 2, 0.8, 100, 3);
    ArmSpec arm{ArmKind::Iso, {PenaltySpec{PsdMatrix::identity(5), 0.5}}, "iso"};
    TrainConfig cfg;
    cfg.steps = 50;
    cfg.batch_size = 16;
    cfg.seed = 4;
    const auto a = train_arm(d, arm, cfg), b = train_arm(d, arm, cfg);
    EXPECT_EQ(a.encoder.W, b.encoder.W);
    cfg.seed = 5;
    EXPECT_NE(train_arm(d, arm, cfg).encoder.W, a.encoder.W);
}

TEST(TrainArm, PenaltyCapLimitsContribution) {
    const auto d = whitened_linear_data(3, 2, 0.8, 100, 3);
    PenaltySpec spec{PsdMatrix::identity(5), 1000.0};
    spec.cap = 0.1;
    ArmSpec arm{ArmKind::Iso, {spec}, "iso"};
    TrainConfig cfg;
    cfg.steps = 30;
    cfg.init = InitMode::Random;
    const auto r = train_arm(d, arm, cfg);
    for (std::size_t i = 0; i < r.curve_task.size(); ++i)
        EXPECT_LE(r.curve_penalty[i], 0.1 * r.curve_task[i] * (1 + 1e-12));
}

TEST(TrainArm, StochasticProbesTrackExactTraining) {
    const auto d = whitened_linear_data(3, 2, 0.8, 300, 6);
    const PsdMatrix sp = PsdMatrix::diagonal(vec({0, 0, 0, 1, 1}));
    PenaltySpec exact{sp, 1.0};
    PenaltySpec stoch = exact;
    stoch.probe_mode = ProbeMode::Stochastic;
    stoch.n_probes = 16;
    TrainConfig cfg;
    cfg.steps = 300;
    cfg.learning_rate = 0.05;
    const auto a = train_arm(d, {ArmKind::Matched, {exact}, ""}, cfg);
    const auto b = train_arm(d, {ArmKind::Matched, {stoch}, ""}, cfg);
    EXPECT_LE((a.encoder.W - b.encoder.W).cwiseAbs().maxCoeff(), 0.05);
}

TEST(TrainArm, Mlp1ReducesLoss) {
    const auto d = whitened_linear_data(3, 2, 0.8, 200, 7);
    TrainConfig cfg;
    cfg.encoder = EncoderKind::Mlp1;
    cfg.init = InitMode::Random;
    cfg.width = 8;
    cfg.d_phi = 2;
    cfg.train_head = true;
    cfg.steps = 200;
    cfg.learning_rate = 0.05;
    const auto r = train_arm(d, {ArmKind::Erm, {}, ""}, cfg);
    EXPECT_LT(r.curve_task.back(), 0.5 * r.curve_task.front());
}

TEST(TrainArm, InvalidConfigurationsAndDivergence) {
    const auto d = whitened_linear_data(3, 2, 0.8, 50, 8);
    TrainConfig cfg;
    EXPECT_THROW(train_arm(d, {ArmKind::Erm, {PenaltySpec{PsdMatrix::identity(5), 1.0}}, ""}, cfg), Error);
    EXPECT_THROW(train_arm(d, {ArmKind::Matched, {}, ""}, cfg), Error);
    EXPECT_THROW(train_arm(d, {ArmKind::Matched, {PenaltySpec{PsdMatrix::identity(4), 1.0}}, ""}, cfg), Error);
    TrainConfig bad = cfg;
    bad.encoder = EncoderKind::Mlp1;
    EXPECT_THROW(train_arm(d, {ArmKind::Erm, {}, ""}, bad), Error);
    TrainConfig wild = cfg;
    wild.learning_rate = 50.0;
    wild.steps = 500;
    try {
        train_arm(d, {ArmKind::Iso, {PenaltySpec{PsdMatrix::identity(5), 1.0}}, ""}, wild);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Diverged);
    }
}

TEST(Pgd, RespectsBallAndConstraint) {
    const auto enc = EncoderParams::random_mlp1(4, 6, 2, Activation::Tanh, 1);
    const Vec head = vec({1, -1});
    const Mat x = Rng(2, {9}).normal_matrix(10, 4);
    const Vec y = Rng(3, {9}).normal_vector(10);
    for (auto norm : {PgdNorm::L2, PgdNorm::Inf}) {
        PgdConfig cfg;
        cfg.epsilon = 0.3;
        cfg.step_size = 0.1;
        cfg.norm = norm;
        cfg.random_start = true;
        cfg.seed = 4;
        const auto d = pgd_attack(enc, head, x, y, Loss::Mse, cfg);
        for (Eigen::Index i = 0; i < d.samples.rows(); ++i) {
            const Vec r = d.samples.row(i).transpose();
            if (norm == PgdNorm::L2)
                EXPECT_LE(r.norm(), 0.3 + 1e-12);
            else
                EXPECT_LE(r.cwiseAbs().maxCoeff(), 0.3 + 1e-12);
        }
        EXPECT_GT(task_risk(enc, head, x + d.samples, y, Loss::Mse), task_risk(enc, head, x, y, Loss::Mse));
    }
    PgdConfig cons;
    cons.epsilon = 0.5;
    cons.constraint = PsdMatrix::diagonal(vec({0, 0, 1, 1})).entries();
    const auto d = pgd_attack(enc, head, x, y, Loss::Mse, cons);
    EXPECT_EQ(d.samples.leftCols(2).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT(d.samples.rightCols(2).cwiseAbs().maxCoeff(), 0.0);

    PgdConfig zero;
    zero.epsilon = 0;
    EXPECT_EQ(pgd_attack(enc, head, x, y, Loss::Mse, zero).samples.cwiseAbs().maxCoeff(), 0.0);
}

TEST(InputGradient, MatchesFiniteDifference) {
    const auto enc = EncoderParams::random_mlp1(3, 5, 2, Activation::Softplus, 2);
    const Vec head = vec({0.7, -0.3});
    const Mat x = Rng(1, {8}).normal_matrix(3, 3);
    const Vec y = vec({1, -1, 1});
    const Mat g = input_gradient(enc, head, x, y, Loss::Logistic);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < 3; ++i)
        for (Eigen::Index k = 0; k < 3; ++k) {
            Mat xp = x.row(i), xm = x.row(i);
            xp(0, k) += h;
            xm(0, k) -= h;
            const double fd = (loss_value(Loss::Logistic, predict(enc, head, xp)(0), y(i)) -
                               loss_value(Loss::Logistic, predict(enc, head, xm)(0), y(i))) /
                              (2 * h);
            EXPECT_NEAR(g(i, k), fd, 1e-7);
        }
}

TEST(MultiArm, RecordsEveryCellAndSummaries) {
    const auto d = whitened_linear_data(3, 2, 0.8, 100, 9);
    const PsdMatrix task = PsdMatrix::diagonal(vec({0, 0, 0, 1, 1}));
    TrainConfig cfg;
    cfg.steps = 100;
    std::vector<ArmSpec> arms = {{ArmKind::Erm, {}, ""}, {ArmKind::Matched, {PenaltySpec{task, 5.0}}, ""}};
    const auto t = run_multi_arm(d, arms, cfg, 3, task);
    EXPECT_EQ(t.cells.size(), 6u);
    ASSERT_EQ(t.summaries.size(), 2u);
    EXPECT_EQ(t.summaries[0].n_seeds, 3);
    EXPECT_LT(t.summaries[1].drift_mean, t.summaries[0].drift_mean);
    for (const auto& c : t.cells) EXPECT_FALSE(c.error.has_value());
}
