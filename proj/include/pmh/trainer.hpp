#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "encoders.hpp"
#include "error.hpp"
#include "estimators.hpp"
#include "linear_gaussian.hpp"
#include "penalty.hpp"
#include "psd.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace pmh {

enum class ArmKind { Erm, Matched, Iso, WrongW, SignalW };
enum class Loss { Mse, Logistic, Hinge };
enum class InitMode { Zero, Random };

inline std::string to_string(ArmKind k) {
    switch (k) {
        case ArmKind::Erm: return "erm";
        case ArmKind::Matched: return "matched";
        case ArmKind::Iso: return "iso";
        case ArmKind::WrongW: return "wrong_w";
        case ArmKind::SignalW: return "signal_w";
    }
    return "erm";
}

inline ArmKind arm_kind_from_string(const std::string& s) {
    if (s == "erm") return ArmKind::Erm;
    if (s == "matched") return ArmKind::Matched;
    if (s == "iso") return ArmKind::Iso;
    if (s == "wrong_w") return ArmKind::WrongW;
    if (s == "signal_w") return ArmKind::SignalW;
    fail(ErrorKind::ConfigError, "unknown arm kind '" + s + "'");
}

inline std::string to_string(Loss l) {
    switch (l) {
        case Loss::Mse: return "mse";
        case Loss::Logistic: return "logistic";
        case Loss::Hinge: return "hinge";
    }
    return "mse";
}

inline Loss loss_from_string(const std::string& s) {
    if (s == "mse") return Loss::Mse;
    if (s == "logistic") return Loss::Logistic;
    if (s == "hinge") return Loss::Hinge;
    fail(ErrorKind::ConfigError, "unknown loss '" + s + "'");
}

// MSE is 0.5 (f - y)^2. Logistic and hinge expect labels in {-1, +1}.
inline double loss_value(Loss l, double f, double y) {
    switch (l) {
        case Loss::Mse: return 0.5 * (f - y) * (f - y);
        case Loss::Logistic: {
            const double m = -y * f;
            return m > 30 ? m : std::log1p(std::exp(m));
        }
        case Loss::Hinge: return std::max(0.0, 1.0 - y * f);
    }
    return 0.0;
}

inline double loss_grad(Loss l, double f, double y) {
    switch (l) {
        case Loss::Mse: return f - y;
        case Loss::Logistic: return -y / (1.0 + std::exp(y * f));
        case Loss::Hinge: return y * f < 1.0 ? -y : 0.0;
    }
    return 0.0;
}

struct ArmSpec {
    ArmKind kind = ArmKind::Erm;
    std::vector<PenaltySpec> penalties;
    std::string sigma_source;  // free-form note: estimator family or control name

    void validate() const {
        if (kind == ArmKind::Erm && !penalties.empty()) fail(ErrorKind::InvalidInput, "erm arm cannot carry a penalty");
        if (kind != ArmKind::Erm && penalties.empty()) fail(ErrorKind::InvalidInput, "penalized arm needs a PenaltySpec");
        for (const auto& p : penalties) p.validate();
    }
};

struct TrainConfig {
    int steps = 1000;
    double learning_rate = 0.1;
    int batch_size = 0;  // 0 = full batch
    std::uint64_t seed = 0;
    Loss loss = Loss::Mse;

    EncoderKind encoder = EncoderKind::Linear;
    int d_phi = 1;
    int width = 16;
    Activation activation = Activation::Tanh;
    InitMode init = InitMode::Zero;
    double init_scale = 1.0;

    bool train_head = false;
    double head_lipschitz = 1.0;  // ||a|| of the fixed head; initial norm if trainable

    void validate() const {
        if (steps < 1) fail(ErrorKind::InvalidInput, "steps must be >= 1");
        if (!(learning_rate > 0)) fail(ErrorKind::InvalidInput, "learning_rate must be > 0");
        if (batch_size < 0) fail(ErrorKind::InvalidInput, "batch_size must be >= 0");
        if (d_phi < 1) fail(ErrorKind::InvalidInput, "d_phi must be >= 1");
        if (encoder == EncoderKind::Mlp1 && width < 1) fail(ErrorKind::InvalidInput, "width must be >= 1");
        if (encoder == EncoderKind::Mlp1 && init == InitMode::Zero)
            fail(ErrorKind::InvalidInput, "mlp1 needs random init");
        if (!(head_lipschitz > 0)) fail(ErrorKind::InvalidInput, "head_lipschitz must be > 0");
    }
};

struct ArmResult {
    ArmKind kind = ArmKind::Erm;
    EncoderParams encoder;
    Vec head;  // f = head . phi(x)
    double task_risk = 0.0;
    double exact_penalty = 0.0;  // sum_k Tr-penalty at unit lambda, on the training inputs
    std::vector<double> curve_task;
    std::vector<double> curve_penalty;  // lambda-weighted, after capping
    double lipschitz() const { return head.norm(); }
};

// Parameter-shaped gradient container.
struct EncoderGrad {
    Mat W, W1, W2;
    Vec b1;

    static EncoderGrad zeros_like(const EncoderParams& e) {
        EncoderGrad g;
        if (e.kind == EncoderKind::Linear) {
            g.W = Mat::Zero(e.W.rows(), e.W.cols());
        } else {
            g.W1 = Mat::Zero(e.W1.rows(), e.W1.cols());
            g.b1 = Vec::Zero(e.b1.size());
            g.W2 = Mat::Zero(e.W2.rows(), e.W2.cols());
        }
        return g;
    }
    void add(const EncoderGrad& o, double s = 1.0) {
        if (W.size()) W += s * o.W;
        if (W1.size()) {
            W1 += s * o.W1;
            b1 += s * o.b1;
            W2 += s * o.W2;
        }
    }
};

// Backprop of sum_i <dphi_i, phi(x_i)> into the encoder parameters.
inline EncoderGrad encoder_backward(const EncoderParams& enc, const Mat& x, const Mat& dphi) {
    EncoderGrad g;
    if (enc.kind == EncoderKind::Linear) {
        g.W = dphi.transpose() * x;
        return g;
    }
    const Mat u = preactivation(enc, x);
    const Mat h = u.unaryExpr([&](double v) { return act(enc.activation, v); });
    const Mat du = (dphi * enc.W2).cwiseProduct(u.unaryExpr([&](double v) { return act_d1(enc.activation, v); }));
    g.W2 = dphi.transpose() * h;
    g.W1 = du.transpose() * x;
    g.b1 = du.colwise().sum().transpose();
    return g;
}

// Gradient of the batch-mean exact trace penalty (unit lambda).
inline EncoderGrad exact_penalty_grad(const EncoderParams& enc, const Mat& x, const PsdMatrix& sigma_prime) {
    const Mat& s = sigma_prime.entries();
    EncoderGrad g = EncoderGrad::zeros_like(enc);
    if (enc.kind == EncoderKind::Linear) {
        g.W = 2.0 * enc.W * s;
        return g;
    }
    const Eigen::Index n = x.rows();
    const Eigen::Index m = enc.W1.rows();
    if (n == 0) return g;
    const Mat G = enc.W2.transpose() * enc.W2;
    const Mat A = enc.W1 * s * enc.W1.transpose();
    const Mat GA = G.cwiseProduct(A);
    const Mat u = preactivation(enc, x);
    Mat ddT = Mat::Zero(m, m);
    Mat dU = Mat::Zero(n, m);  // gradient w.r.t. pre-activations through D
    Vec dg(m);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) dg(j) = act_d1(enc.activation, u(i, j));
        ddT.noalias() += dg * dg.transpose();
        const Vec gad = GA * dg;
        for (Eigen::Index j = 0; j < m; ++j) dU(i, j) = 2.0 * gad(j) * act_d2(enc.activation, u(i, j));
    }
    const double inv = 1.0 / static_cast<double>(n);
    g.W2 = 2.0 * enc.W2 * A.cwiseProduct(ddT) * inv;
    g.W1 = 2.0 * G.cwiseProduct(ddT) * enc.W1 * s * inv + dU.transpose() * x * inv;
    g.b1 = dU.colwise().sum().transpose() * inv;
    return g;
}

// Value and gradient of the paired-view estimate, differentiating through phi at
// both the clean and the probed input.
inline std::pair<double, EncoderGrad> stochastic_penalty_grad(const EncoderParams& enc, const Mat& x,
                                                              const PenaltySpec& spec, std::uint64_t tag) {
    EncoderGrad g = EncoderGrad::zeros_like(enc);
    const auto lower = probe_factor(spec.sigma_prime);
    if (!lower || x.rows() == 0) return {0.0, g};
    const Mat base = forward(enc, x);
    const double scale = 1.0 / (spec.probe_scale * spec.probe_scale * static_cast<double>(x.rows()) * spec.n_probes);
    double value = 0;
    for (int p = 0; p < spec.n_probes; ++p) {
        const Mat xp = x + draw_probe(*lower, spec.probe_scale, x.rows(), spec.seed, tag, static_cast<std::uint64_t>(p));
        const Mat r = forward(enc, xp) - base;
        value += r.squaredNorm() * scale;
        g.add(encoder_backward(enc, xp, 2.0 * scale * r));
        g.add(encoder_backward(enc, x, -2.0 * scale * r));
    }
    return {value, g};
}

inline Vec predict(const EncoderParams& enc, const Vec& head, const Mat& x) { return forward(enc, x) * head; }

inline double task_risk(const EncoderParams& enc, const Vec& head, const Mat& x, const Vec& y, Loss loss) {
    require_same_dim(x.rows(), y.size(), "task_risk");
    const Vec f = predict(enc, head, x);
    double s = 0;
    for (Eigen::Index i = 0; i < f.size(); ++i) s += loss_value(loss, f(i), y(i));
    return s / static_cast<double>(f.size());
}

inline EncoderParams initial_encoder(int d_x, const TrainConfig& cfg) {
    if (cfg.encoder == EncoderKind::Linear) {
        if (cfg.init == InitMode::Zero) return EncoderParams::linear(Mat::Zero(cfg.d_phi, d_x));
        Rng g(cfg.seed, {0x1417});
        return EncoderParams::linear(g.normal_matrix(cfg.d_phi, d_x) * (cfg.init_scale / std::sqrt(static_cast<double>(d_x))));
    }
    return EncoderParams::random_mlp1(d_x, cfg.width, cfg.d_phi, cfg.activation, cfg.seed, cfg.init_scale);
}

inline Vec initial_head(const TrainConfig& cfg) {
    if (!cfg.train_head) return Vec::Constant(cfg.d_phi, cfg.head_lipschitz / std::sqrt(static_cast<double>(cfg.d_phi)));
    Rng g(cfg.seed, {0x4ead});
    Vec a = g.normal_vector(cfg.d_phi);
    return a * (cfg.head_lipschitz / a.norm());
}

inline void apply_step(EncoderParams& enc, const EncoderGrad& g, double lr) {
    if (enc.kind == EncoderKind::Linear) {
        enc.W -= lr * g.W;
        return;
    }
    enc.W1 -= lr * g.W1;
    enc.b1 -= lr * g.b1;
    enc.W2 -= lr * g.W2;
}

// Plain gradient descent on task loss + capped penalties.
inline ArmResult train_arm(const Dataset& data, const ArmSpec& arm, const TrainConfig& cfg,
                           const std::optional<EncoderParams>& init = std::nullopt) {
    arm.validate();
    cfg.validate();
    const Eigen::Index n = data.x.rows();
    const int d_x = static_cast<int>(data.x.cols());
    if (n == 0 || data.y.size() != n) fail(ErrorKind::DimMismatch, "data rows and labels disagree");
    for (const auto& p : arm.penalties) require_same_dim(p.sigma_prime.dim(), d_x, "penalty dim vs data");

    ArmResult res;
    res.kind = arm.kind;
    res.encoder = init ? *init : initial_encoder(d_x, cfg);
    res.encoder.validate();
    if (res.encoder.d_x() != d_x) fail(ErrorKind::DimMismatch, "initial encoder d_x");
    res.head = initial_head(cfg);
    if (res.head.size() != res.encoder.d_phi()) fail(ErrorKind::DimMismatch, "head size vs d_phi");
    res.curve_task.reserve(static_cast<std::size_t>(cfg.steps));
    res.curve_penalty.reserve(static_cast<std::size_t>(cfg.steps));

    const bool full = cfg.batch_size == 0 || cfg.batch_size >= n;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    Mat xb;
    Vec yb;

    for (int step = 0; step < cfg.steps; ++step) {
        const Mat* xp = &data.x;
        const Vec* yp = &data.y;
        if (!full) {
            std::iota(order.begin(), order.end(), Eigen::Index{0});
            Rng g(cfg.seed, {0xba7c, static_cast<std::uint64_t>(step)});
            std::shuffle(order.begin(), order.end(), g.engine());
            xb.resize(cfg.batch_size, d_x);
            yb.resize(cfg.batch_size);
            for (int i = 0; i < cfg.batch_size; ++i) {
                xb.row(i) = data.x.row(order[static_cast<std::size_t>(i)]);
                yb(i) = data.y(order[static_cast<std::size_t>(i)]);
            }
            xp = &xb;
            yp = &yb;
        }
        const Mat& x = *xp;
        const Vec& y = *yp;
        const double inv_n = 1.0 / static_cast<double>(x.rows());

        const Mat phi = forward(res.encoder, x);
        const Vec f = phi * res.head;
        Vec df(f.size());
        double task = 0;
        for (Eigen::Index i = 0; i < f.size(); ++i) {
            task += loss_value(cfg.loss, f(i), y(i));
            df(i) = loss_grad(cfg.loss, f(i), y(i)) * inv_n;
        }
        task *= inv_n;

        EncoderGrad grad = encoder_backward(res.encoder, x, df * res.head.transpose());
        const Vec head_grad = phi.transpose() * df;

        double pen_total = 0;
        for (std::size_t k = 0; k < arm.penalties.size(); ++k) {
            const auto& spec = arm.penalties[k];
            if (spec.lambda == 0) continue;
            double value;
            EncoderGrad pg;
            if (spec.probe_mode == ProbeMode::Exact) {
                value = exact_trace_penalty(res.encoder, x, spec.sigma_prime);
                pg = exact_penalty_grad(res.encoder, x, spec.sigma_prime);
            } else {
                // fresh probes every step, keyed by (seed, step, term)
                auto vg = stochastic_penalty_grad(res.encoder, x, spec,
                                                  (static_cast<std::uint64_t>(step) << 8) ^ static_cast<std::uint64_t>(k));
                value = vg.first;
                pg = std::move(vg.second);
            }
            double term = spec.lambda * value;
            if (spec.cap && term > *spec.cap * task) {
                // clipped: no penalty gradient this step
                term = *spec.cap * task;
            } else {
                grad.add(pg, spec.lambda);
            }
            pen_total += term;
        }

        if (!std::isfinite(task) || !std::isfinite(pen_total))
            fail(ErrorKind::Diverged, "non-finite loss at step " + std::to_string(step));
        res.curve_task.push_back(task);
        res.curve_penalty.push_back(pen_total);

        apply_step(res.encoder, grad, cfg.learning_rate);
        if (cfg.train_head) res.head -= cfg.learning_rate * head_grad;
    }

    if (!res.encoder.W.allFinite() || !res.encoder.W1.allFinite() || !res.encoder.W2.allFinite() ||
        !res.encoder.b1.allFinite() || !res.head.allFinite())
        fail(ErrorKind::Diverged, "non-finite parameters at step " + std::to_string(cfg.steps));
    res.task_risk = task_risk(res.encoder, res.head, data.x, data.y, cfg.loss);
    if (!std::isfinite(res.task_risk)) fail(ErrorKind::Diverged, "non-finite final risk at step " + std::to_string(cfg.steps));
    for (const auto& p : arm.penalties) res.exact_penalty += exact_trace_penalty(res.encoder, data.x, p.sigma_prime);
    return res;
}

// Rescales inputs so the empirical second moment X^T X / n is exactly I.
inline Dataset whiten(const Dataset& d) {
    const Mat c = second_moment(d.x);
    const auto ed = eigh_symmetric(0.5 * (c + c.transpose()));
    if (ed.values.minCoeff() <= 0) fail(ErrorKind::InvalidInput, "cannot whiten a rank-deficient sample");
    const Mat inv_sqrt = ed.vectors * ed.values.cwiseSqrt().cwiseInverse().asDiagonal() * ed.vectors.transpose();
    return {d.x * inv_sqrt, d.y};
}

enum class PgdNorm { Inf, L2 };

struct PgdConfig {
    double epsilon = 0.1;
    double step_size = 0.025;
    int k_steps = 10;
    PgdNorm norm = PgdNorm::L2;
    bool random_start = false;
    std::uint64_t seed = 0;
    std::optional<Mat> constraint;  // optional projector restricting deltas to a subspace
};

// Input gradient of the per-sample loss.
inline Mat input_gradient(const EncoderParams& enc, const Vec& head, const Mat& x, const Vec& y, Loss loss) {
    const Vec f = predict(enc, head, x);
    Mat g(x.rows(), x.cols());
    if (enc.kind == EncoderKind::Linear) {
        const Vec dir = enc.W.transpose() * head;
        for (Eigen::Index i = 0; i < x.rows(); ++i) g.row(i) = loss_grad(loss, f(i), y(i)) * dir.transpose();
        return g;
    }
    const Mat u = preactivation(enc, x);
    const Vec w2a = enc.W2.transpose() * head;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Vec t(u.cols());
        for (Eigen::Index j = 0; j < u.cols(); ++j) t(j) = act_d1(enc.activation, u(i, j)) * w2a(j);
        g.row(i) = loss_grad(loss, f(i), y(i)) * (enc.W1.transpose() * t).transpose();
    }
    return g;
}

namespace detail {
inline void project_ball(Eigen::Ref<Vec> d, double eps, PgdNorm norm) {
    if (norm == PgdNorm::Inf) {
        d = d.cwiseMax(-eps).cwiseMin(eps);
        return;
    }
    const double nrm = d.norm();
    if (nrm > eps) d *= eps / nrm;
}
}  // namespace detail

inline DeltaSamples pgd_attack(const EncoderParams& enc, const Vec& head, const Mat& x, const Vec& y, Loss loss,
                               const PgdConfig& cfg) {
    if (!(cfg.epsilon >= 0)) fail(ErrorKind::InvalidInput, "epsilon must be >= 0");
    if (cfg.k_steps < 1) fail(ErrorKind::InvalidInput, "k_steps must be >= 1");
    check_input(enc, x);
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat delta = Mat::Zero(n, d);
    if (cfg.epsilon == 0) return DeltaSamples(delta, "pgd");
    if (cfg.constraint) require_same_dim(cfg.constraint->rows(), d, "pgd constraint");
    if (cfg.random_start) {
        Rng g(cfg.seed, {0x9d6});
        for (Eigen::Index i = 0; i < n; ++i) {
            Vec z(d);
            for (Eigen::Index k = 0; k < d; ++k) z(k) = cfg.epsilon * (2.0 * g.uniform() - 1.0);
            if (cfg.constraint) z = *cfg.constraint * z;
            detail::project_ball(z, cfg.epsilon, cfg.norm);
            delta.row(i) = z.transpose();
        }
    }
    for (int k = 0; k < cfg.k_steps; ++k) {
        Mat g = input_gradient(enc, head, x + delta, y, loss);
        if (cfg.constraint) g = g * cfg.constraint->transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
            Vec gi = g.row(i).transpose();
            Vec step;
            if (cfg.norm == PgdNorm::Inf) {
                step = gi.unaryExpr([](double v) { return static_cast<double>((v > 0) - (v < 0)); });
            } else {
                const double nrm = gi.norm();
                step = nrm > 0 ? Vec(gi / nrm) : Vec::Zero(d);
            }
            Vec di = delta.row(i).transpose() + cfg.step_size * step;
            if (cfg.constraint) di = *cfg.constraint * di;
            detail::project_ball(di, cfg.epsilon, cfg.norm);
            delta.row(i) = di.transpose();
        }
    }
    return DeltaSamples(delta, "pgd");
}

struct ArmSummary {
    ArmKind kind = ArmKind::Erm;
    int n_seeds = 0;
    double risk_mean = 0, risk_std = 0;
    double drift_mean = 0, drift_std = 0;
};

struct MultiArmCell {
    ArmKind kind;
    std::uint64_t seed;
    double task_risk;
    double drift;  // exact trace along sigma_task on the training inputs
    std::optional<std::string> error;
};

struct MultiArmTable {
    std::vector<MultiArmCell> cells;
    std::vector<ArmSummary> summaries;
};

// Each (arm, seed) cell trains independently; failures are recorded per cell.
inline MultiArmTable run_multi_arm(const Dataset& data, const std::vector<ArmSpec>& arms, const TrainConfig& cfg,
                                   int n_seeds, const PsdMatrix& sigma_task) {
    if (arms.size() < 1) fail(ErrorKind::InvalidInput, "need at least one arm");
    if (n_seeds < 1) fail(ErrorKind::InvalidInput, "n_seeds must be >= 1");
    MultiArmTable t;
    for (const auto& arm : arms) {
        std::vector<double> risks, drifts;
        for (int s = 0; s < n_seeds; ++s) {
            TrainConfig c = cfg;
            c.seed = stream_key(cfg.seed, {static_cast<std::uint64_t>(s)});
            MultiArmCell cell{arm.kind, c.seed, std::numeric_limits<double>::quiet_NaN(),
                              std::numeric_limits<double>::quiet_NaN(), std::nullopt};
            try {
                const auto r = train_arm(data, arm, c);
                cell.task_risk = r.task_risk;
                cell.drift = exact_trace_penalty(r.encoder, data.x, sigma_task);
                risks.push_back(cell.task_risk);
                drifts.push_back(cell.drift);
            } catch (const Error& e) {
                cell.error = e.what();
            }
            t.cells.push_back(cell);
        }
        ArmSummary sm;
        sm.kind = arm.kind;
        sm.n_seeds = static_cast<int>(risks.size());
        sm.risk_mean = mean_of(risks);
        sm.risk_std = std_of(risks);
        sm.drift_mean = mean_of(drifts);
        sm.drift_std = std_of(drifts);
        t.summaries.push_back(sm);
    }
    return t;
}

}  // namespace pmh
