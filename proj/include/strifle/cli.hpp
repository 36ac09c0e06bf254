#pragma once

#include <strifle/estimators.hpp>
#include <strifle/io.hpp>
#include <strifle/simulation.hpp>

#include <nlohmann/json.hpp>

#include <Eigen/Core>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#ifndef STRIFLE_VERSION
#define STRIFLE_VERSION "0.0.0"
#endif

namespace strifle::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { exit_ok = 0, exit_runtime = 1, exit_validation = 2 };

enum class Mode { simulate, fit, oracle, report };

inline std::string_view to_string(Mode m)
{
    switch (m) {
    case Mode::simulate: return "simulate";
    case Mode::fit: return "fit";
    case Mode::oracle: return "oracle";
    case Mode::report: return "report";
    }
    return "?";
}

/// Command-line overrides applied on top of the JSON config.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> jobs;
    std::optional<std::string> methods;  // comma separated
    std::vector<std::string> inputs;     // report inputs
};

struct RunConfig {
    Mode mode = Mode::simulate;
    sim::SimConfig sim;
    PipelineConfig pipeline;
    std::set<Method> methods{Method::SUP, Method::SAS, Method::CS, Method::Meta, Method::STRIFLE, Method::TransGLM};
    std::uint64_t master_seed = 1;
    std::uint64_t oracle_seed = 20240601;
    int parallelism = 1;
    std::string output_dir = "strifle_out";
    std::string oracle_cache_dir;  // empty: output_dir
    int export_reps = 0;           // simulate: write the first k replication datasets as CSV
    // fit mode
    std::string data_csv;
    std::string sidecar;
    bool standardize = true;
    bool per_population = false;
    // report mode
    std::vector<std::string> report_inputs;

    json effective;  // the resolved configuration, recorded in the manifest
};

namespace detail {

inline void check_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed)
{
    if (!j.is_object()) throw ValidationError(std::string(where) + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw ValidationError("unknown field '" + std::string(where) + "." + key + "'");
    }
}

template <class T>
T get_field(const json& j, const char* key, std::string_view where, T fallback)
{
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError("field '" + std::string(where) + "." + key + "' has the wrong type");
    }
}

inline std::set<Method> parse_methods(const std::vector<std::string>& names)
{
    std::set<Method> out;
    for (const auto& n : names) {
        const auto m = parse_method(n);
        if (!m) throw ValidationError("field 'methods': unknown method '" + n + "'");
        out.insert(*m);
    }
    if (out.empty()) throw ValidationError("field 'methods' must name at least one method");
    return out;
}

inline std::vector<std::string> split_commas(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

inline PenaltySpec parse_penalty(const json& j, std::string_view where)
{
    if (j.is_string()) {
        const PenaltyFamily f = parse_penalty_family(j.get<std::string>());
        if (f == PenaltyFamily::scad) return PenaltySpec::scad(0.0);
        if (f == PenaltyFamily::mcp) return PenaltySpec::mcp(0.0);
        return PenaltySpec{f, 0.0, 0.0, {}};
    }
    check_keys(j, where, {"family", "shape"});
    PenaltySpec p = parse_penalty(j.at("family"), where);
    if (j.contains("shape")) p.shape = get_field<double>(j, "shape", where, p.shape);
    p.validate();
    return p;
}

inline sim::SimConfig parse_sim(const json& j)
{
    check_keys(j, "sim",
               {"scenario", "iota", "n_target", "N_target", "n_source", "N_source", "p", "q", "reps",
                "mprime_s_index", "oracle_n", "oracle_tol", "bias"});
    sim::SimConfig c;
    c.scenario = sim::parse_scenario(get_field<std::string>(j, "scenario", "sim", "C1"));
    c.iota = get_field(j, "iota", "sim", c.iota);
    c.n_target = get_field(j, "n_target", "sim", c.n_target);
    c.N_target = get_field(j, "N_target", "sim", c.N_target);
    c.n_source = get_field(j, "n_source", "sim", c.n_source);
    c.N_source = get_field(j, "N_source", "sim", c.N_source);
    c.p = get_field(j, "p", "sim", c.p);
    c.q = get_field(j, "q", "sim", c.q);
    c.reps = get_field(j, "reps", "sim", c.reps);
    c.mprime_s_index = get_field(j, "mprime_s_index", "sim", c.mprime_s_index);
    c.oracle_n = get_field(j, "oracle_n", "sim", c.oracle_n);
    c.oracle_tol = get_field(j, "oracle_tol", "sim", c.oracle_tol);
    const std::string bias = get_field<std::string>(j, "bias", "sim", "bias_of_mean");
    if (bias == "bias_of_mean") c.bias = sim::BiasDefinition::bias_of_mean;
    else if (bias == "mean_abs_deviation") c.bias = sim::BiasDefinition::mean_abs_deviation;
    else throw ValidationError("field 'sim.bias' must be bias_of_mean or mean_abs_deviation");
    try {
        c.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("sim: ") + e.what());
    }
    return c;
}

inline PipelineConfig parse_pipeline(const json& j)
{
    check_keys(j, "pipeline",
               {"link", "theta_penalty", "delta_penalty", "beta_penalty", "folds", "epsilon0", "tol", "max_iter",
                "grid_size", "min_ratio", "dr_method", "dr_ridge_lambda", "dr_cutoff_const"});
    PipelineConfig c;
    if (j.contains("link")) c.link = parse_link(get_field<std::string>(j, "link", "pipeline", "logit")) ==
                                             LinkKind::identity
                                         ? identity_link
                                         : logit_link;
    if (j.contains("theta_penalty")) c.theta_penalty = parse_penalty(j.at("theta_penalty"), "pipeline.theta_penalty");
    if (j.contains("delta_penalty")) c.delta_penalty = parse_penalty(j.at("delta_penalty"), "pipeline.delta_penalty");
    if (j.contains("beta_penalty")) c.beta_penalty = parse_penalty(j.at("beta_penalty"), "pipeline.beta_penalty");
    c.folds = get_field(j, "folds", "pipeline", c.folds);
    c.epsilon0 = get_field(j, "epsilon0", "pipeline", c.epsilon0);
    c.solver.tol = get_field(j, "tol", "pipeline", c.solver.tol);
    c.solver.max_iter = get_field(j, "max_iter", "pipeline", c.solver.max_iter);
    c.grid.size = get_field(j, "grid_size", "pipeline", c.grid.size);
    c.grid.min_ratio = get_field(j, "min_ratio", "pipeline", c.grid.min_ratio);
    const std::string dr = get_field<std::string>(j, "dr_method", "pipeline", "ridge_threshold");
    if (dr == "ridge_threshold") c.dr.method = DrMethod::ridge_threshold;
    else if (dr == "lasso") c.dr.method = DrMethod::lasso;
    else throw ValidationError("field 'pipeline.dr_method' must be ridge_threshold or lasso");
    c.dr.ridge_lambda = get_field(j, "dr_ridge_lambda", "pipeline", c.dr.ridge_lambda);
    c.dr.cutoff_const = get_field(j, "dr_cutoff_const", "pipeline", c.dr.cutoff_const);
    require(c.folds >= 2, "field 'pipeline.folds' must be at least 2");
    require(c.epsilon0 >= 0.0, "field 'pipeline.epsilon0' must be nonnegative");
    require(c.grid.size >= 1, "field 'pipeline.grid_size' must be at least 1");
    require(c.grid.min_ratio > 0.0 && c.grid.min_ratio <= 1.0, "field 'pipeline.min_ratio' must lie in (0, 1]");
    c.solver.validate();
    return c;
}

}  // namespace detail

/**
 * Parses a JSON run configuration, then applies command-line and
 * environment overrides (STRIFLE_OUT, STRIFLE_JOBS). Throws ValidationError.
 */
inline RunConfig parse_run_config(const json& j, Mode mode, const Overrides& ov = {})
{
    using detail::get_field;
    detail::check_keys(j, "config",
                       {"mode", "sim", "pipeline", "methods", "master_seed", "oracle_seed", "parallelism",
                        "output_dir", "oracle_cache_dir", "data", "inputs", "export_reps"});
    RunConfig c;
    c.mode = mode;
    if (j.contains("mode") && get_field<std::string>(j, "mode", "config", "") != to_string(mode))
        throw ValidationError("field 'mode' does not match the subcommand '" + std::string(to_string(mode)) + "'");
    c.sim = detail::parse_sim(j.value("sim", json::object()));
    c.pipeline = detail::parse_pipeline(j.value("pipeline", json::object()));
    if (j.contains("methods")) {
        if (!j.at("methods").is_array()) throw ValidationError("field 'methods' must be an array of method names");
        c.methods = detail::parse_methods(get_field<std::vector<std::string>>(j, "methods", "config", {}));
    }
    c.master_seed = get_field(j, "master_seed", "config", c.master_seed);
    c.oracle_seed = get_field(j, "oracle_seed", "config", c.oracle_seed);
    c.parallelism = get_field(j, "parallelism", "config", c.parallelism);
    c.output_dir = get_field(j, "output_dir", "config", c.output_dir);
    c.oracle_cache_dir = get_field(j, "oracle_cache_dir", "config", c.oracle_cache_dir);
    c.export_reps = get_field(j, "export_reps", "config", c.export_reps);
    if (j.contains("data")) {
        const json& d = j.at("data");
        detail::check_keys(d, "data", {"csv", "sidecar", "standardize", "per_population"});
        c.data_csv = get_field<std::string>(d, "csv", "data", "");
        c.sidecar = get_field<std::string>(d, "sidecar", "data", "");
        c.standardize = get_field(d, "standardize", "data", c.standardize);
        c.per_population = get_field(d, "per_population", "data", c.per_population);
    }
    if (j.contains("inputs")) c.report_inputs = get_field<std::vector<std::string>>(j, "inputs", "config", {});

    if (const char* env = std::getenv("STRIFLE_OUT"); env && *env) c.output_dir = env;
    if (const char* env = std::getenv("STRIFLE_JOBS"); env && *env) {
        try {
            c.parallelism = std::stoi(env);
        } catch (const std::exception&) {
            throw ValidationError("environment variable STRIFLE_JOBS is not an integer");
        }
    }
    if (ov.seed) c.master_seed = *ov.seed;
    if (ov.out) c.output_dir = *ov.out;
    if (ov.jobs) c.parallelism = *ov.jobs;
    if (ov.methods) c.methods = detail::parse_methods(detail::split_commas(*ov.methods));
    if (!ov.inputs.empty()) c.report_inputs = ov.inputs;
    c.sim.seed = c.master_seed;

    require(c.parallelism >= 1, "field 'parallelism' must be at least 1");
    require(c.export_reps >= 0 && c.export_reps <= c.sim.reps, "field 'export_reps' must lie in [0, sim.reps]");
    if (mode == Mode::fit) {
        require(!c.data_csv.empty() && !c.sidecar.empty(), "fit mode requires 'data.csv' and 'data.sidecar'");
        require(fs::exists(c.data_csv), "field 'data.csv': file '" + c.data_csv + "' does not exist");
        require(fs::exists(c.sidecar), "field 'data.sidecar': file '" + c.sidecar + "' does not exist");
    }
    if (mode == Mode::report) {
        require(!c.report_inputs.empty(), "report mode requires at least one input file");
        for (const auto& p : c.report_inputs)
            require(fs::exists(p), "field 'inputs': file '" + p + "' does not exist");
    }

    json eff = j;
    eff["mode"] = std::string(to_string(mode));
    eff["master_seed"] = c.master_seed;
    eff["output_dir"] = c.output_dir;
    eff["parallelism"] = c.parallelism;
    std::vector<std::string> names;
    for (Method m : c.methods) names.emplace_back(to_string(m));
    eff["methods"] = names;
    if (!c.report_inputs.empty()) eff["inputs"] = c.report_inputs;
    c.effective = eff;
    return c;
}

inline RunConfig load_run_config(const fs::path& path, Mode mode, const Overrides& ov = {})
{
    return parse_run_config(io::read_json(path), mode, ov);
}

/// Hash of the resolved configuration, excluding keys that do not affect results.
inline std::string config_hash(const RunConfig& c)
{
    json k = c.effective;
    k.erase("parallelism");
    k.erase("output_dir");
    return io::hex64(io::fnv1a(k.dump()));
}

inline json manifest(const RunConfig& c, const std::vector<std::string>& outputs, double seconds)
{
    return json{{"tool", "strifle"},
                {"version", STRIFLE_VERSION},
                {"mode", std::string(to_string(c.mode))},
                {"config_hash", config_hash(c)},
                {"master_seed", c.master_seed},
                {"config", c.effective},
                {"outputs", outputs},
                {"seconds", seconds},
                {"versions",
                 {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION)},
                  {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                        std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                        std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                  {"compiler", __VERSION__},
                  {"cplusplus", __cplusplus}}}};
}

/// Machine-readable error record: printed to stderr and, when possible, written to out_dir/error.json.
inline int report_error(int code, std::string_view kind, std::string_view message, const std::string& out_dir)
{
    const json rec{{"status", "error"}, {"exit_code", code}, {"kind", std::string(kind)}, {"message", std::string(message)}};
    std::cerr << rec.dump() << '\n';
    if (!out_dir.empty()) {
        try {
            io::write_json(fs::path(out_dir) / "error.json", rec);
        } catch (...) {
        }
    }
    return code;
}

template <class Body>
int guarded(const std::string& out_dir, Body&& body)
{
    try {
        return body();
    } catch (const ValidationError& e) {
        return report_error(exit_validation, "validation", e.what(), out_dir);
    } catch (const std::invalid_argument& e) {
        return report_error(exit_validation, "validation", e.what(), out_dir);
    } catch (const std::exception& e) {
        return report_error(exit_runtime, "runtime", e.what(), out_dir);
    }
}

inline fs::path oracle_dir(const RunConfig& c)
{
    return c.oracle_cache_dir.empty() ? fs::path(c.output_dir) : fs::path(c.oracle_cache_dir);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline int run_simulate(const RunConfig& c, std::ostream& log = std::cerr)
{
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path out(c.output_dir);
    fs::create_directories(out);
    bool computed = false;
    const sim::OracleParams oracle = io::load_or_compute_oracle(c.sim, c.oracle_seed, oracle_dir(c), &computed);
    log << "oracle " << (computed ? "computed" : "loaded from cache") << " for " << sim::to_string(c.sim.scenario)
        << '\n';
    const sim::SimulationResult res = sim::run_replications(c.sim, oracle, c.pipeline, c.methods, c.parallelism);
    io::write_csv(out / "per_rep.csv", io::per_rep_table(res));
    io::write_csv(out / "aggregate.csv", io::aggregate_table(c.sim, res.aggregate));
    std::vector<std::string> outputs{"per_rep.csv", "aggregate.csv"};
    for (int rep = 0; rep < c.export_reps; ++rep) {
        const auto [table, sidecar] = io::study_to_table(sim::replication_data(c.sim, oracle, rep).data);
        const std::string name = "data_rep" + std::to_string(rep) + ".csv";
        io::write_csv(out / name, table);
        outputs.push_back(name);
        if (rep == 0) {
            io::write_json(out / "sidecar.json", sidecar.to_json());
            outputs.emplace_back("sidecar.json");
        }
    }
    if (!res.failures.empty()) {
        io::write_csv(out / "failures.csv", io::failures_table(res));
        outputs.emplace_back("failures.csv");
        log << res.failures.size() << " replication(s) failed; see failures.csv\n";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io::write_json(out / "manifest.json", manifest(c, outputs, secs));
    if (res.records.empty()) throw NumericalError("every replication failed");
    return exit_ok;
}

inline int run_oracle(const RunConfig& c, std::ostream& log = std::cerr)
{
    const auto t0 = std::chrono::steady_clock::now();
    bool computed = false;
    const sim::OracleParams oracle = io::load_or_compute_oracle(c.sim, c.oracle_seed, oracle_dir(c), &computed);
    const std::string name = "oracle_" + io::oracle_key(c.sim, c.oracle_seed) + ".json";
    log << "oracle " << (computed ? "computed" : "already cached") << ": " << (oracle_dir(c) / name).string()
        << " (|grad| = " << oracle.grad_norm << ")\n";
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fs::create_directories(c.output_dir);
    io::write_json(fs::path(c.output_dir) / "manifest.json", manifest(c, {name}, secs));
    return exit_ok;
}

struct FitOutput {
    json estimates;
    std::map<Method, Vector> beta_original;
};

/// Loads data, standardizes it if requested, runs the methods, and maps coefficients back to the raw scale.
inline FitOutput fit_study(const StudyData& raw, const RunConfig& c)
{
    StudyData data = raw;
    std::optional<ScalingRecord> scaling;
    if (c.standardize) {
        auto [std_data, rec] = standardize(raw, c.per_population);
        data = std::move(std_data);
        scaling = std::move(rec);
    }
    PipelineConfig pc = c.pipeline;
    pc.cv_seed = sim::derive_seed(c.master_seed, 1);
    pc.split_seed = sim::derive_seed(c.master_seed, 2);
    const auto t0 = std::chrono::steady_clock::now();
    const EstimatorBundle b = run_methods(data, pc, c.methods);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    FitOutput out;
    json methods = json::object();
    for (const auto& [m, est] : b.beta) {
        const Vector orig = scaling ? scaling->to_original_scale(est.beta) : est.beta;
        out.beta_original[m] = orig;
        methods[std::string(to_string(m))] = json{{"beta", io::vector_to_json(orig)},
                                                  {"beta_standardized", io::vector_to_json(est.beta)},
                                                  {"lambda", est.lambda}};
    }
    json lambdas = json::object();
    if (c.methods.count(Method::SAS) || c.methods.count(Method::STRIFLE))
        lambdas["theta_target"] = b.theta_target.lambda;
    if (c.methods.count(Method::Meta) || c.methods.count(Method::STRIFLE)) {
        lambdas["theta_pooled"] = b.meta.pooled.lambda;
        lambdas["delta"] = b.meta.delta.lambda;
    }
    out.estimates = json{{"methods", methods},
                         {"nuisance_lambdas", lambdas},
                         {"seconds", secs},
                         {"n_target", data.n_target()},
                         {"N_target", data.N_target()},
                         {"n_source", data.n_source()},
                         {"N_source", data.N_source()},
                         {"standardized", c.standardize}};
    if (c.methods.count(Method::STRIFLE)) {
        out.estimates["rho"] = b.decision.rho;
        out.estimates["loss_meta"] = b.decision.loss_meta;
        out.estimates["loss_target"] = b.decision.loss_target;
    }
    if (b.dr.zeta.size() > 0) out.estimates["density_ratio_zeta"] = io::vector_to_json(b.dr.zeta);
    return out;
}

inline int run_fit(const RunConfig& c, std::ostream& log = std::cerr)
{
    const auto t0 = std::chrono::steady_clock::now();
    const io::Sidecar sc = io::Sidecar::from_json(io::read_json(c.sidecar));
    const StudyData raw = io::load_study(c.data_csv, sc);
    log << "loaded " << raw.n_target() << "/" << raw.N_target() << " target and " << raw.n_source() << "/"
        << raw.N_source() << " source rows (labeled/unlabeled), p = " << raw.p() - 1 << ", q = " << raw.q() << '\n';
    FitOutput fit = fit_study(raw, c);
    json x_names = json::array({"(intercept)"});
    for (const auto& n : sc.x_cols) x_names.push_back(n);
    fit.estimates["coefficient_names"] = x_names;
    const fs::path out(c.output_dir);
    io::write_json(out / "estimates.json", fit.estimates);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io::write_json(out / "manifest.json", manifest(c, {"estimates.json"}, secs));
    return exit_ok;
}

struct ReportRow {
    std::string scenario, iota, n_source, method;
    double abs_bias = 0.0, l2_err = 0.0, auc = 0.0, rho_rate = 0.0;
    std::string reps_used;
};

inline std::string fixed2(double v)
{
    if (std::isnan(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

/// Renders |Bias| in units of 1e-2 with two decimals (0.0097 -> "0.97").
inline std::string format_bias_x100(double abs_bias) { return fixed2(abs_bias * 100.0); }

inline std::vector<ReportRow> merge_aggregates(const std::vector<std::string>& paths)
{
    std::vector<ReportRow> rows;
    std::set<std::tuple<std::string, std::string, std::string, std::string>> seen;
    for (const auto& p : paths) {
        const io::CsvTable t = io::read_csv(p);
        const std::size_t cs = t.column("scenario"), ci = t.column("iota"), cn = t.column("n_source"),
                          cm = t.column("method"), cb = t.column("abs_bias"), cl = t.column("l2_err"),
                          ca = t.column("auc"), cr = t.column("rho_rate"), cu = t.column("reps_used");
        for (const auto& r : t.rows) {
            ReportRow row{r[cs], r[ci], r[cn], r[cm], io::parse_double(r[cb], "abs_bias"),
                          io::parse_double(r[cl], "l2_err"), io::parse_double(r[ca], "auc"),
                          io::parse_double(r[cr], "rho_rate"), r[cu]};
            if (!parse_method(row.method)) throw ValidationError("'" + p + "': unknown method '" + row.method + "'");
            if (!seen.insert({row.scenario, row.iota, row.n_source, row.method}).second)
                throw ValidationError("duplicate entry for scenario " + row.scenario + " (iota " + row.iota +
                                      ", n_source " + row.n_source + ") method " + row.method);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

inline io::CsvTable report_table(const std::vector<ReportRow>& rows)
{
    io::CsvTable t;
    t.header = {"scenario", "iota", "n_source", "method", "abs_bias_x100", "l2_err", "auc", "rho_rate", "reps_used"};
    for (const auto& r : rows)
        t.rows.push_back({r.scenario, r.iota, r.n_source, r.method, format_bias_x100(r.abs_bias), fixed2(r.l2_err),
                          fixed2(r.auc), fixed2(r.rho_rate), r.reps_used});
    return t;
}

inline std::string render_text(const io::CsvTable& t)
{
    std::vector<std::size_t> width(t.header.size());
    for (std::size_t k = 0; k < t.header.size(); ++k) width[k] = t.header[k].size();
    for (const auto& r : t.rows)
        for (std::size_t k = 0; k < r.size(); ++k) width[k] = std::max(width[k], r[k].size());
    std::ostringstream os;
    auto emit = [&](const std::vector<std::string>& r) {
        for (std::size_t k = 0; k < r.size(); ++k) {
            if (k) os << "  ";
            os << std::string(width[k] - r[k].size(), ' ') << r[k];
        }
        os << '\n';
    };
    emit(t.header);
    for (const auto& r : t.rows) emit(r);
    return os.str();
}

inline int run_report(const RunConfig& c, std::ostream& out = std::cout)
{
    const auto t0 = std::chrono::steady_clock::now();
    const io::CsvTable t = report_table(merge_aggregates(c.report_inputs));
    const std::string text = render_text(t);
    out << text;
    const fs::path dir(c.output_dir);
    io::write_csv(dir / "report.csv", t);
    {
        std::ofstream f(dir / "report.txt", std::ios::binary);
        f << text;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io::write_json(dir / "manifest.json", manifest(c, {"report.csv", "report.txt"}, secs));
    return exit_ok;
}

/// Entry point shared by the executable and tests: parse, dispatch, map errors to exit codes.
inline int dispatch(Mode mode, const std::string& config_path, const Overrides& ov)
{
    std::string out_dir = ov.out.value_or("");
    return guarded(out_dir, [&] {
        json j = json::object();
        if (!config_path.empty()) j = io::read_json(config_path);
        else require(mode == Mode::report, "--config is required for " + std::string(to_string(mode)));
        if (out_dir.empty() && j.is_object() && j.contains("output_dir") && j.at("output_dir").is_string())
            out_dir = j.at("output_dir").get<std::string>();
        const RunConfig c = parse_run_config(j, mode, ov);
        out_dir = c.output_dir;
        return guarded(out_dir, [&] {
            switch (mode) {
            case Mode::simulate: return run_simulate(c);
            case Mode::fit: return run_fit(c);
            case Mode::oracle: return run_oracle(c);
            case Mode::report: return run_report(c);
            }
            return static_cast<int>(exit_runtime);
        });
    });
}

}  // namespace strifle::cli
