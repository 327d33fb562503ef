// Command-line front end: thin wrappers over the library plus the experiment runner.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "pmh/harness.hpp"
#include "pmh/pmh.hpp"

namespace fs = std::filesystem;
using namespace pmh;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitStrict = 3;

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            fail(ErrorKind::ConfigError, "not a number: '" + item + "'");
        }
    }
    return out;
}

Vec to_vec(const std::vector<double>& xs) { return Eigen::Map<const Vec>(xs.data(), static_cast<Eigen::Index>(xs.size())); }

void ensure_parent(const std::string& path) {
    const fs::path p = fs::path(path).parent_path();
    if (!p.empty()) fs::create_directories(p);
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed, const std::string& out, bool strict) {
    json j;
    try {
        j = read_json(path);
    } catch (const Error& e) {
        fail(ErrorKind::ConfigError, e.what());
    }
    auto c = parse_config(j);
    if (seed) c.seed = *seed;
    if (!out.empty()) c.output_dir = out;
    if (strict) c.strict_preflight = true;
    return c;
}

int finish_run(const ExperimentConfig& c, const RunManifest& m) {
    std::cout << "wrote " << c.output_dir << "/manifest.json (" << m.arm_files.size() << " arms, " << m.arm_errors.size()
              << " failed)\n";
    for (const auto& e : m.arm_errors) std::cerr << "arm failure: " << e << "\n";
    if (m.preflight) std::cout << "preflight: " << to_string(m.preflight->verdict) << " (gamma_r " << m.preflight->gamma_r << ")\n";
    if (c.strict_preflight && (m.aborted || !m.arm_errors.empty())) return kExitStrict;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Matched-penalty estimation, training and diagnostics"};
    app.require_subcommand(1);
    app.set_version_flag("--version", tool_version());

    // estimate
    auto* est = app.add_subcommand("estimate", "Estimate a nuisance covariance from delta samples");
    std::string family = "A7", deltas, target, out;
    std::optional<int> rank;
    std::vector<int> block;
    est->add_option("--family", family, "Estimator family A1..A7")->capture_default_str();
    est->add_option("--deltas", deltas, "CSV of samples, one per row")->required()->check(CLI::ExistingFile);
    est->add_option("--target", target, "Paired target features (A4)")->check(CLI::ExistingFile);
    est->add_option("--rank", rank, "Rank for A1/A3");
    est->add_option("--block", block, "Nuisance coordinates for A5")->delimiter(',');
    est->add_option("--out", out, "Output directory")->required();

    // preflight
    auto* pre = app.add_subcommand("preflight", "Eigengap check on a covariance file");
    std::string sigma_path;
    int pre_rank = 1;
    pre->add_option("--sigma", sigma_path, "PSD matrix JSON")->required()->check(CLI::ExistingFile);
    pre->add_option("--rank", pre_rank, "Subspace rank r")->required();
    pre->add_option("--out", out, "Write the report here instead of stdout");

    // train / run share the config options
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool strict = false;
    auto* train = app.add_subcommand("train", "Train every configured arm and write per-arm tables");
    auto* run = app.add_subcommand("run", "Train, diagnose and emit the report");
    for (auto* s : {train, run}) {
        s->add_option("config", config_path, "Experiment config (JSON)")->required();
        s->add_option("--seed", seed, "Override the global seed");
        s->add_option("--out", out, "Override the output directory");
        s->add_flag("--strict-preflight", strict, "Abort on preflight fail; exit 3 on any arm failure");
    }

    // diagnose
    auto* diag = app.add_subcommand("diagnose", "Drift diagnostics for a saved encoder");
    std::string enc_path, samples, projector, sigma_task, labels_col;
    double probe_sigma = 0.01;
    int probe_n = 16;
    std::uint64_t diag_seed = 0;
    diag->add_option("--encoder", enc_path, "Encoder JSON")->required()->check(CLI::ExistingFile);
    diag->add_option("--samples", samples, "Input CSV")->required()->check(CLI::ExistingFile);
    diag->add_option("--projector", projector, "PSD JSON whose range is the nuisance subspace")->check(CLI::ExistingFile);
    diag->add_option("--sigma-task", sigma_task, "PSD JSON for the linearized drift")->check(CLI::ExistingFile);
    diag->add_option("--labels", labels_col, "Column of integer group labels for the layout index");
    diag->add_option("--sigma", probe_sigma, "Probe scale")->capture_default_str();
    diag->add_option("--probes", probe_n, "Number of probes")->capture_default_str();
    diag->add_option("--seed", diag_seed, "Probe seed");
    diag->add_option("--out", out, "Output JSON")->required();

    // controls
    auto* ctl = app.add_subcommand("controls", "Averaged random-frame report as CSV");
    int d = 16, r = 4, draws = 1000;
    std::uint64_t ctl_seed = 0;
    ctl->add_option("--d", d)->capture_default_str();
    ctl->add_option("--r", r)->capture_default_str();
    ctl->add_option("--draws", draws)->capture_default_str();
    ctl->add_option("--seed", ctl_seed);
    ctl->add_option("--out", out, "Output CSV")->required();

    // theoremA
    auto* tha = app.add_subcommand("theoremA", "Closed-form drift against lambda");
    std::string sp_path, st_path, v_list, lambda_list = "1,10,100,1000,10000,100000,1000000";
    tha->add_option("--sigma-prime", sp_path, "Penalty PSD JSON")->required()->check(CLI::ExistingFile);
    tha->add_option("--sigma-task", st_path, "Task PSD JSON")->required()->check(CLI::ExistingFile);
    tha->add_option("--v", v_list, "Regressor, comma separated")->required();
    tha->add_option("--lambdas", lambda_list, "Increasing lambda grid")->capture_default_str();
    tha->add_option("--out", out, "Output CSV")->required();

    // report
    auto* rep = app.add_subcommand("report", "Tables and plot data from a finished run");
    std::string run_dir;
    rep->add_option("run_dir", run_dir, "Run output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*est) {
            const Mat m = read_csv(deltas).values;
            const DeltaSamples ds(m, deltas);
            SigmaEstimate e;
            switch (family_from_string(family)) {
                case Family::A1:
                    if (!rank) fail(ErrorKind::ConfigError, "--rank is required for A1");
                    e = estimate_d1_subspace(ds, *rank);
                    break;
                case Family::A2: e = estimate_d2_isotropic(ds); break;
                case Family::A3: e = estimate_d3_modes(ds, rank); break;
                case Family::A4:
                    if (target.empty()) fail(ErrorKind::ConfigError, "--target is required for A4");
                    e = estimate_d4_domain_gram(m, read_csv(target).values);
                    break;
                case Family::A5: e = estimate_d5_block(ds, block); break;
                case Family::A6: e = estimate_d6_increments({m}); break;
                case Family::A7: e = estimate_d7_delta_gram(ds); break;
            }
            fs::create_directories(out);
            write_json((fs::path(out) / "sigma_hat.json").string(), psd_to_json(e.matrix));
            json g = {{"family", to_string(e.family)}, {"sample_count", e.sample_count}};
            g["rank"] = e.rank ? json(*e.rank) : json(nullptr);
            g["gap"] = e.gap ? gap_to_json(*e.gap) : json(nullptr);
            write_json((fs::path(out) / "gap_report.json").string(), g);
            std::cout << "wrote " << out << "/sigma_hat.json\n";
        } else if (*pre) {
            const auto g = preflight_eigengap(psd_from_json(read_json(sigma_path)), pre_rank);
            const json j = gap_to_json(g);
            if (out.empty()) {
                std::cout << j.dump(2) << "\n";
            } else {
                ensure_parent(out);
                write_json(out, j);
            }
        } else if (*train || *run) {
            const auto c = load_config(config_path, seed, out, strict);
            const auto m = run_experiment(c);
            const int code = finish_run(c, m);
            if (*run && !m.aborted) {
                const auto rf = emit_report(c.output_dir);
                std::cout << "wrote " << rf.task_table << " and " << rf.geometry_table << "\n";
            }
            return code;
        } else if (*diag) {
            const auto enc = encoder_from_json(read_json(enc_path));
            const auto table = read_csv(samples);
            Mat x = table.values;
            std::optional<std::vector<int>> labels;
            if (!labels_col.empty()) {
                Eigen::Index col = -1;
                for (std::size_t j = 0; j < table.header.size(); ++j)
                    if (table.header[j] == labels_col) col = static_cast<Eigen::Index>(j);
                if (col < 0) fail(ErrorKind::ConfigError, "--labels: no column '" + labels_col + "'");
                labels.emplace();
                for (Eigen::Index i = 0; i < x.rows(); ++i) labels->push_back(static_cast<int>(x(i, col)));
                Mat rest(x.rows(), x.cols() - 1);
                Eigen::Index k = 0;
                for (Eigen::Index j = 0; j < x.cols(); ++j)
                    if (j != col) rest.col(k++) = x.col(j);
                x = rest;
            }
            ProbeConfig pc;
            pc.sigma = probe_sigma;
            pc.n_probes = probe_n;
            pc.seed = diag_seed;
            std::optional<Projector> w;
            if (!projector.empty()) w = Projector::range_of(psd_from_json(read_json(projector)));
            std::optional<PsdMatrix> st;
            if (!sigma_task.empty()) st = psd_from_json(read_json(sigma_task));
            const auto dr = drift_report(enc, x, pc, w, st, labels);
            json j = {{"trajectory_tdi", dr.trajectory_tdi}, {"tdi_at_zero_estimate", dr.tdi_at_zero_estimate}};
            j["layout_tdi"] = dr.layout_tdi ? json(*dr.layout_tdi) : json(nullptr);
            if (w) j["directional"] = {{"d_n", dr.d_n}, {"d_s", dr.d_s}, {"ratio", dr.ratio}};
            if (st) j["drift"] = {{"dq_nonlinear", dr.dq_nonlinear}, {"dq_linearized", dr.dq_linearized}};
            ensure_parent(out);
            write_json(out, j);
        } else if (*ctl) {
            const auto rep_c = lemma_c_check(d, r, draws, ctl_seed);
            StringTable t;
            t.header = {"d", "r", "n_draws", "mean_deviation_op", "max_single_draw_op", "predicted_rate",
                        "mc_standard_error_op", "max_entry_deviation"};
            t.rows.push_back({std::to_string(d), std::to_string(r), std::to_string(draws), format_double(rep_c.mean_deviation_op),
                              format_double(rep_c.max_single_draw_op), format_double(rep_c.predicted_rate),
                              format_double(rep_c.mc_standard_error_op), format_double(rep_c.max_entry_deviation)});
            ensure_parent(out);
            write_csv_strings(out, t);
        } else if (*tha) {
            const auto curve = dichotomy_curve(to_vec(parse_list(v_list)), psd_from_json(read_json(sp_path)),
                                               psd_from_json(read_json(st_path)), parse_list(lambda_list));
            ensure_parent(out);
            write_lambda_curve_csv(out, curve);
            std::cout << to_string(curve.verdict) << " (tail slope " << curve.tail_slope << ")\n";
        } else if (*rep) {
            const auto rf = emit_report(run_dir);
            std::cout << "wrote " << rf.task_table << ", " << rf.geometry_table << ", " << rf.staircase << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
        return e.kind() == ErrorKind::ConfigError ? kExitConfig : kExitError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitOk;
}
