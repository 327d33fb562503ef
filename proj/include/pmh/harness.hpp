#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "controls.hpp"
#include "diagnostics.hpp"
#include "encoders.hpp"
#include "error.hpp"
#include "estimators.hpp"
#include "io.hpp"
#include "linear_gaussian.hpp"
#include "penalty.hpp"
#include "psd.hpp"
#include "stats.hpp"
#include "trainer.hpp"

#ifndef PMH_VERSION
#define PMH_VERSION "0.0.0"
#endif

namespace pmh {

namespace fs = std::filesystem;

inline std::string tool_version() { return PMH_VERSION; }

// ---------------------------------------------------------------- config

struct DataConfig {
    std::string kind = "synthetic";  // synthetic | csv
    int d_s = 45;
    int d_n = 5;
    double rho = 1.0;
    double sigma_eps = 0.1;
    int n_train = 500;
    int n_test = 2000;
    double stress = 5.0;
    std::string train_csv, test_csv;
    std::string label_column = "y";
};

struct EstimatorConfig {
    std::string family = "A1";
    std::optional<int> rank;
    std::string source = "sampled";  // sampled | planted | csv
    int n_samples = 2000;
    std::vector<double> spectrum;     // planted: second-moment spectrum over the nuisance coordinates
    std::string deltas_csv;
    std::string target_csv;           // A4 with csv source: deltas_csv is the source features
};

struct StudyConfig {
    std::string kind;  // "" | dichotomy
    std::vector<double> lambdas;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    DataConfig data;
    EstimatorConfig estimator;
    std::vector<ArmKind> arms;
    double lambda = 10.0;
    std::optional<double> cap;
    ProbeMode probe_mode = ProbeMode::Exact;
    int penalty_probes = 4;
    double probe_scale = 1e-2;
    TrainConfig train;
    ProbeConfig probe;
    int n_seeds = 3;
    double wrong_iso_tolerance = 0.05;
    double signal_margin_std = 1.0;
    bool strict_preflight = false;
    StudyConfig study;
};

namespace detail {

inline const json& at_path(const json& j, const std::string& key, const std::string& path) {
    if (!j.is_object() || !j.contains(key)) fail(ErrorKind::ConfigError, path + "." + key + ": missing");
    return j.at(key);
}

template <class T>
T get_or(const json& j, const std::string& key, const T& def, const std::string& path) {
    if (!j.is_object()) fail(ErrorKind::ConfigError, path + ": expected an object");
    if (!j.contains(key) || j.at(key).is_null()) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::ConfigError, path + "." + key + ": wrong type");
    }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& path) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) fail(ErrorKind::ConfigError, path + "." + it.key() + ": unknown field");
    }
}

inline void require(bool cond, const std::string& path, const std::string& msg) {
    if (!cond) fail(ErrorKind::ConfigError, path + ": " + msg);
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
    using detail::get_or;
    using detail::require;
    if (!j.is_object()) fail(ErrorKind::ConfigError, "$: config must be an object");
    detail::reject_unknown(j, {"seed", "output_dir", "data", "estimator", "arms", "penalty", "train", "probe", "n_seeds",
                               "verdict", "strict_preflight", "study"},
                           "$");
    ExperimentConfig c;
    c.seed = get_or<std::uint64_t>(j, "seed", 0, "$");
    c.output_dir = get_or<std::string>(j, "output_dir", "out", "$");
    c.n_seeds = get_or<int>(j, "n_seeds", 3, "$");
    require(c.n_seeds >= 1, "$.n_seeds", "must be >= 1");
    c.strict_preflight = get_or<bool>(j, "strict_preflight", false, "$");

    const json& d = detail::at_path(j, "data", "$");
    detail::reject_unknown(d, {"kind", "d_s", "d_n", "rho", "sigma_eps", "n_train", "n_test", "stress", "train_csv", "test_csv",
                               "label_column"},
                           "$.data");
    c.data.kind = get_or<std::string>(d, "kind", "synthetic", "$.data");
    require(c.data.kind == "synthetic" || c.data.kind == "csv", "$.data.kind", "must be synthetic or csv");
    c.data.d_s = get_or<int>(d, "d_s", 45, "$.data");
    c.data.d_n = get_or<int>(d, "d_n", 5, "$.data");
    c.data.rho = get_or<double>(d, "rho", 1.0, "$.data");
    c.data.sigma_eps = get_or<double>(d, "sigma_eps", 0.1, "$.data");
    c.data.n_train = get_or<int>(d, "n_train", 500, "$.data");
    c.data.n_test = get_or<int>(d, "n_test", 2000, "$.data");
    c.data.stress = get_or<double>(d, "stress", 5.0, "$.data");
    c.data.train_csv = get_or<std::string>(d, "train_csv", "", "$.data");
    c.data.test_csv = get_or<std::string>(d, "test_csv", "", "$.data");
    c.data.label_column = get_or<std::string>(d, "label_column", "y", "$.data");
    if (c.data.kind == "synthetic") {
        require(c.data.d_s >= 1 && c.data.d_n >= 1, "$.data", "d_s and d_n must be >= 1");
        require(c.data.rho > 0, "$.data.rho", "must be > 0");
        require(c.data.sigma_eps >= 0, "$.data.sigma_eps", "must be >= 0");
        require(c.data.n_train >= 2 && c.data.n_test >= 2, "$.data", "n_train and n_test must be >= 2");
    } else {
        require(!c.data.train_csv.empty(), "$.data.train_csv", "required for csv data");
    }
    require(c.data.stress > 0, "$.data.stress", "must be > 0");

    const json& e = detail::at_path(j, "estimator", "$");
    detail::reject_unknown(e, {"family", "rank", "source", "n_samples", "spectrum", "deltas_csv", "target_csv"}, "$.estimator");
    c.estimator.family = get_or<std::string>(e, "family", "A1", "$.estimator");
    try {
        family_from_string(c.estimator.family);
    } catch (const Error&) {
        fail(ErrorKind::ConfigError, "$.estimator.family: unknown family '" + c.estimator.family + "'");
    }
    if (e.contains("rank") && !e.at("rank").is_null()) c.estimator.rank = get_or<int>(e, "rank", 1, "$.estimator");
    c.estimator.source = get_or<std::string>(e, "source", "sampled", "$.estimator");
    require(c.estimator.source == "sampled" || c.estimator.source == "planted" || c.estimator.source == "csv",
            "$.estimator.source", "must be sampled, planted or csv");
    c.estimator.n_samples = get_or<int>(e, "n_samples", 2000, "$.estimator");
    c.estimator.spectrum = get_or<std::vector<double>>(e, "spectrum", {}, "$.estimator");
    c.estimator.deltas_csv = get_or<std::string>(e, "deltas_csv", "", "$.estimator");
    c.estimator.target_csv = get_or<std::string>(e, "target_csv", "", "$.estimator");
    if (c.estimator.family == "A1") require(c.estimator.rank.has_value(), "$.estimator.rank", "required for A1");
    if (c.estimator.rank) require(*c.estimator.rank >= 1, "$.estimator.rank", "must be >= 1");
    if (c.estimator.source == "planted") require(!c.estimator.spectrum.empty(), "$.estimator.spectrum", "required for planted");
    if (c.estimator.source == "csv") require(!c.estimator.deltas_csv.empty(), "$.estimator.deltas_csv", "required for csv");
    if (c.data.kind == "csv") require(c.estimator.source == "csv", "$.estimator.source", "csv data needs csv deltas");
    require(c.estimator.n_samples >= 2, "$.estimator.n_samples", "must be >= 2");

    const json& arms = detail::at_path(j, "arms", "$");
    require(arms.is_array(), "$.arms", "must be an array");
    require(!arms.empty(), "$.arms", "must not be empty");
    for (std::size_t i = 0; i < arms.size(); ++i) {
        const std::string p = "$.arms[" + std::to_string(i) + "]";
        require(arms[i].is_string(), p, "must be a string");
        try {
            c.arms.push_back(arm_kind_from_string(arms[i].get<std::string>()));
        } catch (const Error&) {
            fail(ErrorKind::ConfigError, p + ": unknown arm '" + arms[i].get<std::string>() + "'");
        }
        for (std::size_t k = 0; k < i; ++k) require(c.arms[k] != c.arms[i], p, "duplicate arm");
    }
    const bool comparison = c.arms.size() > 1;
    bool has_erm = false;
    for (auto a : c.arms) has_erm = has_erm || a == ArmKind::Erm;
    require(!comparison || has_erm, "$.arms", "comparisons require the erm arm");

    const json pen = j.value("penalty", json::object());
    detail::reject_unknown(pen, {"lambda", "cap", "probe_mode", "n_probes", "probe_scale"}, "$.penalty");
    c.lambda = get_or<double>(pen, "lambda", 10.0, "$.penalty");
    require(c.lambda >= 0, "$.penalty.lambda", "must be >= 0");
    if (pen.contains("cap") && !pen.at("cap").is_null()) {
        c.cap = get_or<double>(pen, "cap", 1.0, "$.penalty");
        require(*c.cap > 0, "$.penalty.cap", "must be > 0");
    }
    const auto pm = get_or<std::string>(pen, "probe_mode", "exact", "$.penalty");
    require(pm == "exact" || pm == "stochastic", "$.penalty.probe_mode", "must be exact or stochastic");
    c.probe_mode = pm == "exact" ? ProbeMode::Exact : ProbeMode::Stochastic;
    c.penalty_probes = get_or<int>(pen, "n_probes", 4, "$.penalty");
    c.probe_scale = get_or<double>(pen, "probe_scale", 1e-2, "$.penalty");
    require(c.penalty_probes >= 1, "$.penalty.n_probes", "must be >= 1");
    require(c.probe_scale > 0, "$.penalty.probe_scale", "must be > 0");

    const json t = j.value("train", json::object());
    detail::reject_unknown(t, {"steps", "learning_rate", "batch_size", "loss", "encoder", "d_phi", "width", "activation", "init",
                               "init_scale", "train_head", "head_lipschitz"},
                           "$.train");
    c.train.steps = get_or<int>(t, "steps", 2000, "$.train");
    c.train.learning_rate = get_or<double>(t, "learning_rate", 0.02, "$.train");
    c.train.batch_size = get_or<int>(t, "batch_size", 0, "$.train");
    try {
        c.train.loss = loss_from_string(get_or<std::string>(t, "loss", "mse", "$.train"));
    } catch (const Error&) {
        fail(ErrorKind::ConfigError, "$.train.loss: unknown loss");
    }
    const auto enc = get_or<std::string>(t, "encoder", "linear", "$.train");
    require(enc == "linear" || enc == "mlp1", "$.train.encoder", "must be linear or mlp1");
    c.train.encoder = enc == "linear" ? EncoderKind::Linear : EncoderKind::Mlp1;
    c.train.d_phi = get_or<int>(t, "d_phi", 1, "$.train");
    c.train.width = get_or<int>(t, "width", 16, "$.train");
    const auto a = get_or<std::string>(t, "activation", "tanh", "$.train");
    require(a == "tanh" || a == "softplus", "$.train.activation", "must be tanh or softplus");
    c.train.activation = a == "tanh" ? Activation::Tanh : Activation::Softplus;
    const auto init = get_or<std::string>(t, "init", enc == "linear" ? "zero" : "random", "$.train");
    require(init == "zero" || init == "random", "$.train.init", "must be zero or random");
    c.train.init = init == "zero" ? InitMode::Zero : InitMode::Random;
    c.train.init_scale = get_or<double>(t, "init_scale", 1.0, "$.train");
    c.train.train_head = get_or<bool>(t, "train_head", false, "$.train");
    c.train.head_lipschitz = get_or<double>(t, "head_lipschitz", 1.0, "$.train");
    try {
        c.train.validate();
    } catch (const Error& err) {
        fail(ErrorKind::ConfigError, std::string("$.train: ") + err.what());
    }

    const json p = j.value("probe", json::object());
    detail::reject_unknown(p, {"sigma", "n_probes", "final_only", "share_probes"}, "$.probe");
    c.probe.sigma = get_or<double>(p, "sigma", 0.01, "$.probe");
    c.probe.n_probes = get_or<int>(p, "n_probes", 16, "$.probe");
    c.probe.final_only = get_or<bool>(p, "final_only", false, "$.probe");
    c.probe.share_probes = get_or<bool>(p, "share_probes", true, "$.probe");
    require(c.probe.sigma > 0, "$.probe.sigma", "must be > 0");
    require(c.probe.n_probes >= 1, "$.probe.n_probes", "must be >= 1");

    const json v = j.value("verdict", json::object());
    detail::reject_unknown(v, {"wrong_iso_tolerance", "signal_margin_std"}, "$.verdict");
    c.wrong_iso_tolerance = get_or<double>(v, "wrong_iso_tolerance", 0.05, "$.verdict");
    c.signal_margin_std = get_or<double>(v, "signal_margin_std", 1.0, "$.verdict");

    if (j.contains("study")) {
        const json& s = j.at("study");
        detail::reject_unknown(s, {"kind", "lambdas"}, "$.study");
        c.study.kind = get_or<std::string>(s, "kind", "", "$.study");
        require(c.study.kind == "dichotomy", "$.study.kind", "only 'dichotomy' is supported");
        c.study.lambdas = get_or<std::vector<double>>(s, "lambdas", {1, 10, 100, 1000, 1e4, 1e5, 1e6}, "$.study");
        require(c.study.lambdas.size() >= 4, "$.study.lambdas", "needs at least 4 points");
    }
    return c;
}

// Normalized form: every semantic field with defaults filled in. Object keys
// are sorted by the json library, so key order in the input never matters.
inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["n_seeds"] = c.n_seeds;
    j["strict_preflight"] = c.strict_preflight;
    j["data"] = {{"kind", c.data.kind}, {"d_s", c.data.d_s}, {"d_n", c.data.d_n}, {"rho", c.data.rho},
                 {"sigma_eps", c.data.sigma_eps}, {"n_train", c.data.n_train}, {"n_test", c.data.n_test},
                 {"stress", c.data.stress}, {"train_csv", c.data.train_csv}, {"test_csv", c.data.test_csv},
                 {"label_column", c.data.label_column}};
    j["estimator"] = {{"family", c.estimator.family}, {"source", c.estimator.source}, {"n_samples", c.estimator.n_samples},
                      {"spectrum", c.estimator.spectrum}, {"deltas_csv", c.estimator.deltas_csv},
                      {"target_csv", c.estimator.target_csv}};
    j["estimator"]["rank"] = c.estimator.rank ? json(*c.estimator.rank) : json(nullptr);
    j["arms"] = json::array();
    for (auto a : c.arms) j["arms"].push_back(to_string(a));
    j["penalty"] = {{"lambda", c.lambda}, {"probe_mode", c.probe_mode == ProbeMode::Exact ? "exact" : "stochastic"},
                    {"n_probes", c.penalty_probes}, {"probe_scale", c.probe_scale}};
    j["penalty"]["cap"] = c.cap ? json(*c.cap) : json(nullptr);
    const auto& t = c.train;
    j["train"] = {{"steps", t.steps}, {"learning_rate", t.learning_rate}, {"batch_size", t.batch_size},
                  {"loss", to_string(t.loss)}, {"encoder", to_string(t.encoder)}, {"d_phi", t.d_phi},
                  {"width", t.width}, {"activation", to_string(t.activation)},
                  {"init", t.init == InitMode::Zero ? "zero" : "random"}, {"init_scale", t.init_scale},
                  {"train_head", t.train_head}, {"head_lipschitz", t.head_lipschitz}};
    j["probe"] = {{"sigma", c.probe.sigma}, {"n_probes", c.probe.n_probes}, {"final_only", c.probe.final_only},
                  {"share_probes", c.probe.share_probes}};
    j["verdict"] = {{"wrong_iso_tolerance", c.wrong_iso_tolerance}, {"signal_margin_std", c.signal_margin_std}};
    if (!c.study.kind.empty()) j["study"] = {{"kind", c.study.kind}, {"lambdas", c.study.lambdas}};
    return j;
}

inline std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// The output directory is where results go, not what they are, so it is excluded.
inline std::string config_hash(const ExperimentConfig& c) {
    json j = config_to_json(c);
    j.erase("output_dir");
    return fnv1a_hex(j.dump());
}

// ---------------------------------------------------------------- verdicts

struct ArmRow {
    ArmKind arm = ArmKind::Erm;
    int seed = 0;
    double task_risk = 0, drift = 0, tdi = 0, dn_ds = 0, stressed_risk = 0;
};

struct Verdicts {
    std::optional<bool> matched_beats_baseline;
    std::optional<bool> wrong_w_matches_iso;
    std::optional<bool> signal_w_hurts;
};

inline std::vector<double> column(const std::vector<ArmRow>& rows, ArmKind k, double ArmRow::*field) {
    std::vector<double> v;
    for (const auto& r : rows)
        if (r.arm == k) v.push_back(r.*field);
    return v;
}

inline Verdicts compute_verdicts(const std::vector<ArmRow>& rows, double wrong_iso_tolerance, double signal_margin_std) {
    auto present = [&](ArmKind k) { return !column(rows, k, &ArmRow::task_risk).empty(); };
    Verdicts v;
    if (present(ArmKind::Matched) && present(ArmKind::Erm)) {
        const double m = mean_of(column(rows, ArmKind::Matched, &ArmRow::stressed_risk));
        bool beats = true;
        for (auto k : {ArmKind::Erm, ArmKind::Iso, ArmKind::WrongW})
            if (present(k)) beats = beats && m <= mean_of(column(rows, k, &ArmRow::stressed_risk));
        v.matched_beats_baseline = beats;
    }
    if (present(ArmKind::WrongW) && present(ArmKind::Iso)) {
        const double w = mean_of(column(rows, ArmKind::WrongW, &ArmRow::dn_ds));
        const double i = mean_of(column(rows, ArmKind::Iso, &ArmRow::dn_ds));
        v.wrong_w_matches_iso = i > 0 && std::abs(w - i) / i <= wrong_iso_tolerance;
    }
    if (present(ArmKind::SignalW) && present(ArmKind::Erm)) {
        const auto e = column(rows, ArmKind::Erm, &ArmRow::task_risk);
        v.signal_w_hurts = mean_of(column(rows, ArmKind::SignalW, &ArmRow::task_risk)) > mean_of(e) + signal_margin_std * std_of(e);
    }
    return v;
}

inline json verdicts_to_json(const Verdicts& v) {
    json j = json::object();
    if (v.matched_beats_baseline) j["matched_beats_baseline"] = *v.matched_beats_baseline;
    if (v.wrong_w_matches_iso) j["wrong_w_matches_iso"] = *v.wrong_w_matches_iso;
    if (v.signal_w_hurts) j["signal_w_hurts"] = *v.signal_w_hurts;
    return j;
}

// ---------------------------------------------------------------- runner

struct RunManifest {
    std::string config_hash;
    std::string tool_version;
    std::string output_dir;
    std::map<std::string, std::string> arm_files;  // arm -> path relative to output_dir
    Verdicts verdicts;
    std::optional<EigengapReport> preflight;
    std::vector<std::string> arm_errors;
    bool aborted = false;
    std::optional<std::string> study_file;
};

inline const std::vector<std::string>& arm_csv_header() {
    static const std::vector<std::string> h{"arm", "seed", "task_risk", "drift", "tdi", "dn_ds", "stressed_risk"};
    return h;
}

inline json gap_to_json(const EigengapReport& g) {
    return {{"r", g.r}, {"lambda_r", g.lambda_r}, {"lambda_r1", g.lambda_r1}, {"gamma_r", g.gamma_r},
            {"decay_ratio", g.decay_ratio}, {"additive_gap", g.additive_gap}, {"verdict", to_string(g.verdict)},
            {"recommended_n", g.recommended_n}};
}

namespace detail {

struct Split {
    Mat x;
    Vec y;
};

inline Split load_split(const std::string& path, const std::string& label) {
    const auto t = read_csv(path);
    Eigen::Index yc = -1;
    for (std::size_t j = 0; j < t.header.size(); ++j)
        if (t.header[j] == label) yc = static_cast<Eigen::Index>(j);
    if (yc < 0) fail(ErrorKind::ConfigError, "$.data.label_column: '" + label + "' not in " + path);
    Split s;
    s.y = t.values.col(yc);
    s.x.resize(t.values.rows(), t.values.cols() - 1);
    Eigen::Index k = 0;
    for (Eigen::Index j = 0; j < t.values.cols(); ++j)
        if (j != yc) s.x.col(k++) = t.values.col(j);
    return s;
}

// Deterministic rows whose second moment is exactly diag(spectrum) on the
// first spectrum.size() coordinates of `coords`.
inline Mat planted_rows(const std::vector<double>& spectrum, const std::vector<int>& coords, int d) {
    const int k = static_cast<int>(spectrum.size());
    Mat m = Mat::Zero(k, d);
    for (int i = 0; i < k; ++i) m(i, coords[static_cast<std::size_t>(i)]) = std::sqrt(k * std::max(0.0, spectrum[static_cast<std::size_t>(i)]));
    return m;
}

inline std::string fmt(double x) { return format_double(x); }

}  // namespace detail

struct ExperimentData {
    Mat x_train, x_test, x_stress;
    Vec y_train, y_test;
    PsdMatrix sigma_task;            // deployment nuisance covariance used for drift
    std::optional<Vec> signal;       // signal direction when known
    std::optional<LinearGaussianModel> model;
};

inline ExperimentData build_data(const ExperimentConfig& c, std::uint64_t seed_index) {
    ExperimentData d;
    if (c.data.kind == "synthetic") {
        const auto model = LinearGaussianModel::random(c.data.d_s, c.data.d_n, c.data.rho, c.data.sigma_eps, c.seed);
        const auto tr = sample_dataset(model, c.data.n_train, stream_key(c.seed, {0x7a1, seed_index}));
        const auto te = sample_dataset(model, c.data.n_test, stream_key(c.seed, {0x7e5, seed_index}));
        d.x_train = tr.x;
        d.y_train = tr.y;
        d.x_test = te.x;
        d.y_test = te.y;
        d.x_stress = te.x;
        d.x_stress.rightCols(c.data.d_n) *= c.data.stress;  // labels keep the original nuisance
        d.sigma_task = model.nuisance_covariance(1.0);
        d.signal = model.signal_direction();
        d.model = model;
        return d;
    }
    auto tr = detail::load_split(c.data.train_csv, c.data.label_column);
    auto te = c.data.test_csv.empty() ? tr : detail::load_split(c.data.test_csv, c.data.label_column);
    if (tr.x.cols() != te.x.cols()) fail(ErrorKind::ConfigError, "$.data: train/test widths differ");
    d.x_train = tr.x;
    d.y_train = tr.y;
    d.x_test = te.x;
    d.y_test = te.y;
    return d;
}

inline SigmaEstimate run_estimator(const ExperimentConfig& c, const ExperimentData& data) {
    const Family fam = family_from_string(c.estimator.family);
    const int d = static_cast<int>(data.x_train.cols());
    Mat deltas;
    Mat target;
    std::vector<int> nuis;
    if (c.data.kind == "synthetic")
        for (int i = 0; i < c.data.d_n; ++i) nuis.push_back(c.data.d_s + i);
    if (c.estimator.source == "csv") {
        deltas = read_csv(c.estimator.deltas_csv).values;
        if (!c.estimator.target_csv.empty()) target = read_csv(c.estimator.target_csv).values;
    } else if (c.estimator.source == "planted") {
        if (c.estimator.spectrum.size() > nuis.size())
            fail(ErrorKind::ConfigError, "$.estimator.spectrum: longer than the nuisance block");
        deltas = detail::planted_rows(c.estimator.spectrum, nuis, d);
    } else {
        Rng g(c.seed, {0xde17a});
        deltas = Mat::Zero(c.estimator.n_samples, d);
        deltas.rightCols(c.data.d_n) = g.normal_matrix(c.estimator.n_samples, c.data.d_n);
    }
    if (deltas.cols() != d) fail(ErrorKind::ConfigError, "$.estimator: delta width does not match data width");
    const DeltaSamples ds(deltas, c.estimator.source);
    switch (fam) {
        case Family::A1: return estimate_d1_subspace(ds, *c.estimator.rank);
        case Family::A2: return estimate_d2_isotropic(ds);
        case Family::A3: return estimate_d3_modes(ds, c.estimator.rank);
        case Family::A4: {
            if (target.size() == 0) {
                // synthetic pairing: target = source + nuisance displacement
                Rng g(c.seed, {0xa4});
                const Mat src = g.normal_matrix(deltas.rows(), d);
                return estimate_d4_domain_gram(src, src + deltas);
            }
            // csv: deltas_csv holds the source features, target_csv the paired target
            return estimate_d4_domain_gram(deltas, target);
        }
        case Family::A5: {
            if (nuis.empty()) fail(ErrorKind::ConfigError, "$.estimator.family: A5 needs a known nuisance block");
            return estimate_d5_block(ds, nuis);
        }
        case Family::A6: {
            // rows are consecutive states of one label-constant sequence
            return estimate_d6_increments({deltas});
        }
        case Family::A7: return estimate_d7_delta_gram(ds);
    }
    fail(ErrorKind::Internal, "unreachable estimator family");
}


inline void write_lambda_curve_csv(const std::string& path, const DichotomyCurve& c) {
    StringTable t;
    t.header = {"lambda", "drift", "verdict"};
    for (std::size_t i = 0; i < c.lambdas.size(); ++i)
        t.rows.push_back({detail::fmt(c.lambdas[i]), detail::fmt(c.drifts[i]), to_string(c.verdict)});
    write_csv_strings(path, t);
}

struct ArmPenalties {
    std::map<ArmKind, PsdMatrix> sigma;  // per-arm penalty matrix for one seed
    std::map<ArmKind, std::string> error;
};

// Every penalized arm gets the same trace budget r, so arms differ only in
// where the penalty points.
inline ArmPenalties build_arm_penalties(const ExperimentConfig& c, const SigmaEstimate& est, const ExperimentData& data, int r,
                                        std::uint64_t seed_index) {
    const int d = static_cast<int>(data.x_train.cols());
    ArmPenalties p;
    for (auto a : c.arms) {
        switch (a) {
            case ArmKind::Erm: break;
            case ArmKind::Matched: {
                const double tr = est.matrix.trace();
                p.sigma[a] = tr > 0 ? est.matrix.scaled(r / tr) : PsdMatrix::zeros(d);
                break;
            }
            case ArmKind::Iso: p.sigma[a] = PsdMatrix::identity(d).scaled(static_cast<double>(r) / d); break;
            case ArmKind::WrongW: p.sigma[a] = wrong_w_sigma(d, r, stream_key(c.seed, {0x3a0, seed_index})); break;
            case ArmKind::SignalW:
                if (!data.signal)
                    p.error[a] = "signal direction unknown for csv data";
                else
                    p.sigma[a] = signal_sigma(*data.signal).scaled(r);
                break;
        }
    }
    return p;
}

namespace detail {
inline std::string arm_file(ArmKind a) { return "arms/" + to_string(a) + ".csv"; }
inline std::string nan_str() { return "nan"; }
}  // namespace detail

inline json manifest_to_json(const RunManifest& m, const json& extra) {
    json j;
    j["config_hash"] = m.config_hash;
    j["tool_version"] = m.tool_version;
    j["arm_files"] = m.arm_files;
    j["verdicts"] = verdicts_to_json(m.verdicts);
    j["preflight"] = m.preflight ? gap_to_json(*m.preflight) : json(nullptr);
    j["arm_errors"] = m.arm_errors;
    j["aborted"] = m.aborted;
    j["study_file"] = m.study_file ? json(*m.study_file) : json(nullptr);
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    return j;
}

inline std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

// estimate -> preflight -> train arms -> diagnose -> write tables and manifest.
inline RunManifest run_experiment(const ExperimentConfig& c) {
    RunManifest m;
    m.config_hash = config_hash(c);
    m.tool_version = tool_version();
    m.output_dir = c.output_dir;
    const fs::path out(c.output_dir);
    fs::create_directories(out / "arms");
    write_json((out / "config.normalized.json").string(), config_to_json(c));

    const ExperimentData base = build_data(c, 0);
    const int d = static_cast<int>(base.x_train.cols());
    const SigmaEstimate est = run_estimator(c, base);
    write_json((out / "sigma_hat.json").string(), psd_to_json(est.matrix));

    const Projector est_range = Projector::range_of(est.matrix);
    int r = c.estimator.rank ? *c.estimator.rank : est_range.rank();
    r = std::clamp(r, 1, d);
    if (est.gap) {
        m.preflight = est.gap;
    } else if (r < d) {
        m.preflight = preflight_eigengap(est.matrix, r);
    }
    json extra;
    extra["estimator"] = {{"family", to_string(est.family)}, {"rank", r}, {"sample_count", est.sample_count}};
    if (m.preflight && m.preflight->verdict == GapVerdict::Fail) {
        extra["preflight_recommendation"] = "eigengap fail: fall back to isotropic (A2)";
        if (c.strict_preflight) m.aborted = true;
    }

    // nuisance subspace used by the directional probes
    std::optional<Projector> w_hat;
    {
        const auto ed = eigh(est.matrix);
        if (r >= 1 && r < d && ed.values(0) > 0) w_hat = Projector::from_basis(ed.vectors.leftCols(r));
    }

    if (!c.study.kind.empty()) {
        Vec v;
        if (base.model) {
            v = base.model->bayes_weights();
        } else {
            const Mat xtx = base.x_train.transpose() * base.x_train;
            v = xtx.ldlt().solve(base.x_train.transpose() * base.y_train);
        }
        const double tr = est.matrix.trace();
        const PsdMatrix sp = tr > 0 ? est.matrix.scaled(r / tr) : est.matrix;
        const PsdMatrix st = base.model ? base.sigma_task : est.matrix;
        write_lambda_curve_csv((out / "lambda_curve.csv").string(), dichotomy_curve(v, sp, st, c.study.lambdas));
        m.study_file = "lambda_curve.csv";
    }

    std::vector<ArmRow> rows;
    if (!m.aborted) {
        std::map<ArmKind, std::vector<ArmRow>> per_arm;
        for (int s = 0; s < c.n_seeds; ++s) {
            const ExperimentData data = build_data(c, static_cast<std::uint64_t>(s));
            Mat x_stress = data.x_stress;
            if (!data.model) {
                const Mat pr = est_range.matrix();
                x_stress = data.x_test + (c.data.stress - 1.0) * data.x_test * pr;
            }
            const PsdMatrix sigma_task = data.model ? data.sigma_task : est.matrix;
            const auto pens = build_arm_penalties(c, est, data, r, static_cast<std::uint64_t>(s));
            for (auto a : c.arms) {
                const std::string cell = to_string(a) + "/seed" + std::to_string(s);
                try {
                    if (pens.error.count(a)) fail(ErrorKind::InvalidInput, pens.error.at(a));
                    ArmSpec spec;
                    spec.kind = a;
                    spec.sigma_source = a == ArmKind::Matched ? to_string(est.family) : to_string(a);
                    if (a != ArmKind::Erm) {
                        PenaltySpec ps;
                        ps.sigma_prime = pens.sigma.at(a);
                        ps.lambda = c.lambda;
                        ps.cap = c.cap;
                        ps.probe_mode = c.probe_mode;
                        ps.n_probes = c.penalty_probes;
                        ps.probe_scale = c.probe_scale;
                        ps.seed = stream_key(c.seed, {0x9e7, static_cast<std::uint64_t>(s)});
                        spec.penalties.push_back(ps);
                    }
                    TrainConfig tc = c.train;
                    tc.seed = stream_key(c.seed, {0x7a17, static_cast<std::uint64_t>(s)});
                    const auto res = train_arm({data.x_train, data.y_train}, spec, tc);
                    ArmRow row;
                    row.arm = a;
                    row.seed = s;
                    row.task_risk = task_risk(res.encoder, res.head, data.x_test, data.y_test, c.train.loss);
                    row.stressed_risk = task_risk(res.encoder, res.head, x_stress, data.y_test, c.train.loss);
                    row.drift = exact_trace_penalty(res.encoder, data.x_test, sigma_task);
                    ProbeConfig pc = c.probe;
                    pc.seed = stream_key(c.seed, {0xd1a, static_cast<std::uint64_t>(s)});
                    pc.arm_id = static_cast<std::uint64_t>(a);
                    try {
                        row.tdi = trajectory_tdi(res.encoder, data.x_test, pc);
                    } catch (const Error&) {
                        row.tdi = std::numeric_limits<double>::quiet_NaN();
                    }
                    row.dn_ds = w_hat ? directional_drift(res.encoder, data.x_test, *w_hat, pc).ratio
                                      : std::numeric_limits<double>::quiet_NaN();
                    per_arm[a].push_back(row);
                    rows.push_back(row);
                } catch (const std::exception& e) {
                    m.arm_errors.push_back(cell + ": " + e.what());
                }
            }
        }
        for (auto a : c.arms) {
            StringTable t;
            t.header = arm_csv_header();
            for (const auto& row : per_arm[a])
                t.rows.push_back({to_string(row.arm), std::to_string(row.seed), detail::fmt(row.task_risk), detail::fmt(row.drift),
                                  detail::fmt(row.tdi), detail::fmt(row.dn_ds), detail::fmt(row.stressed_risk)});
            write_csv_strings((out / detail::arm_file(a)).string(), t);
            m.arm_files[to_string(a)] = detail::arm_file(a);
        }
        m.verdicts = compute_verdicts(rows, c.wrong_iso_tolerance, c.signal_margin_std);
    }

    json mj = manifest_to_json(m, extra);
    mj["metadata"] = {{"timestamp", utc_timestamp()}};
    write_json((out / "manifest.json").string(), mj);
    return m;
}

struct ReportFiles {
    std::string task_table;
    std::string geometry_table;
    std::string staircase;
    std::optional<std::string> lambda_curve;
};

// Task metrics and geometry are written to separate tables on purpose; there is
// no combined score.
inline ReportFiles emit_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    const json mj = read_json((dir / "manifest.json").string());
    std::vector<std::string> gaps;
    std::vector<std::vector<std::string>> all;
    std::vector<std::string> header;
    for (auto it = mj.at("arm_files").begin(); it != mj.at("arm_files").end(); ++it) {
        const fs::path f = dir / it.value().get<std::string>();
        if (!fs::exists(f)) {
            gaps.push_back(it.key() + " -> " + f.string());
            continue;
        }
        const auto t = read_csv_strings(f.string());
        if (t.header != arm_csv_header()) {
            gaps.push_back(it.key() + " -> " + f.string() + " (bad header)");
            continue;
        }
        for (const auto& r : t.rows) all.push_back(r);
    }
    std::optional<std::string> curve;
    if (mj.contains("study_file") && mj.at("study_file").is_string()) {
        const fs::path f = dir / mj.at("study_file").get<std::string>();
        if (!fs::exists(f))
            gaps.push_back("study -> " + f.string());
        else
            curve = f.string();
    }
    if (!gaps.empty()) {
        std::string msg = "missing report inputs:";
        for (const auto& g : gaps) msg += " [" + g + "]";
        fail(ErrorKind::PartialReport, msg);
    }
    fs::create_directories(dir / "report");
    // column indices in arm_csv_header()
    enum { kArm, kSeed, kRisk, kDrift, kTdi, kDnDs, kStress };
    StringTable task, geo, stair;
    task.header = {"arm", "seed", "task_risk", "stressed_risk"};
    geo.header = {"arm", "seed", "drift", "tdi", "dn_ds"};
    stair.header = {"arm", "dn_ds_mean", "dn_ds_std", "n"};
    std::map<std::string, std::vector<double>> dnds;
    std::vector<std::string> order;
    for (const auto& r : all) {
        task.rows.push_back({r[kArm], r[kSeed], r[kRisk], r[kStress]});
        geo.rows.push_back({r[kArm], r[kSeed], r[kDrift], r[kTdi], r[kDnDs]});
        if (!dnds.count(r[kArm])) order.push_back(r[kArm]);
        dnds[r[kArm]].push_back(std::stod(r[kDnDs]));
    }
    for (const auto& a : order)
        stair.rows.push_back({a, detail::fmt(mean_of(dnds[a])), detail::fmt(std_of(dnds[a])), std::to_string(dnds[a].size())});
    ReportFiles rf;
    rf.task_table = (dir / "report" / "task_table.csv").string();
    rf.geometry_table = (dir / "report" / "geometry_table.csv").string();
    rf.staircase = (dir / "report" / "staircase.csv").string();
    write_csv_strings(rf.task_table, task);
    write_csv_strings(rf.geometry_table, geo);
    write_csv_strings(rf.staircase, stair);
    if (curve) {
        rf.lambda_curve = (dir / "report" / "lambda_curve.csv").string();
        fs::copy_file(*curve, *rf.lambda_curve, fs::copy_options::overwrite_existing);
    }
    return rf;
}

}  // namespace pmh
