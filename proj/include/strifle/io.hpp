#pragma once

#include <strifle/estimators.hpp>
#include <strifle/glm_core.hpp>
#include <strifle/simulation.hpp>

#include <nlohmann/json.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace strifle::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Shortest decimal string that parses back to the same double.
inline std::string format_double(double v)
{
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::string_view what = "value")
{
    if (s == "NA" || s == "nan" || s == "NaN") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    const char* first = s.data();
    if (!s.empty() && s.front() == '+') ++first;
    const auto res = std::from_chars(first, s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ValidationError("cannot parse " + std::string(what) + " '" + std::string(s) + "' as a number");
    return v;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const
    {
        for (std::size_t k = 0; k < header.size(); ++k)
            if (header[k] == name) return k;
        throw ValidationError("column '" + std::string(name) + "' not found");
    }
    bool has_column(std::string_view name) const
    {
        for (const auto& h : header)
            if (h == name) return true;
        return false;
    }
};

inline std::vector<std::string> split_csv_line(std::string_view line)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline CsvTable read_csv(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path.string() + "'");
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("'" + path.string() + "' is empty");
    t.header = split_csv_line(line);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != t.header.size())
            throw ValidationError("'" + path.string() + "' line " + std::to_string(lineno) + ": expected " +
                                  std::to_string(t.header.size()) + " fields, found " + std::to_string(fields.size()));
        t.rows.push_back(std::move(fields));
    }
    return t;
}

inline void write_csv(const fs::path& path, const CsvTable& t)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NumericalError("cannot write '" + path.string() + "'");
    auto emit = [&](const std::vector<std::string>& r) {
        for (std::size_t k = 0; k < r.size(); ++k) {
            if (k) out << ',';
            out << r[k];
        }
        out << '\n';
    };
    emit(t.header);
    for (const auto& r : t.rows) emit(r);
}

// ---------------------------------------------------------------------------
// Column-role sidecar and data ingestion
// ---------------------------------------------------------------------------

struct Sidecar {
    std::string population_col;
    std::string labeled_col;
    std::string y_col;
    std::vector<std::string> x_cols;  // predictors without the intercept
    std::vector<std::string> s_cols;

    static Sidecar from_json(const json& j)
    {
        Sidecar sc;
        auto need_string = [&](const char* key) {
            if (!j.contains(key) || !j.at(key).is_string())
                throw ValidationError(std::string("sidecar field '") + key + "' must be a string");
            return j.at(key).get<std::string>();
        };
        auto need_list = [&](const char* key) {
            if (!j.contains(key) || !j.at(key).is_array())
                throw ValidationError(std::string("sidecar field '") + key + "' must be an array of strings");
            std::vector<std::string> out;
            for (const auto& v : j.at(key)) {
                if (!v.is_string())
                    throw ValidationError(std::string("sidecar field '") + key + "' must be an array of strings");
                out.push_back(v.get<std::string>());
            }
            return out;
        };
        sc.population_col = need_string("population_col");
        sc.labeled_col = need_string("labeled_col");
        sc.y_col = need_string("y_col");
        sc.x_cols = need_list("x_cols");
        sc.s_cols = need_list("s_cols");
        return sc;
    }

    json to_json() const
    {
        return json{{"population_col", population_col}, {"labeled_col", labeled_col}, {"y_col", y_col},
                    {"x_cols", x_cols},                 {"s_cols", s_cols}};
    }
};

inline json read_json(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

inline void write_json(const fs::path& path, const json& j)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NumericalError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

inline Population parse_population(std::string_view v, std::size_t row)
{
    if (v == "target" || v == "T" || v == "0") return Population::target;
    if (v == "source" || v == "S" || v == "1") return Population::source;
    throw ValidationError("row " + std::to_string(row) + ": population '" + std::string(v) +
                          "' is not one of target/source");
}

inline bool parse_flag(std::string_view v, std::size_t row)
{
    if (v == "1" || v == "true" || v == "TRUE") return true;
    if (v == "0" || v == "false" || v == "FALSE") return false;
    throw ValidationError("row " + std::to_string(row) + ": labeled flag '" + std::string(v) + "' is not 0/1");
}

/**
 * Builds StudyData from a flat table. Rows are routed to the four blocks by
 * population and labeled flag, keeping file order; an intercept column is
 * prepended to X.
 */
inline StudyData study_from_table(const CsvTable& t, const Sidecar& sc)
{
    const std::size_t pc = t.column(sc.population_col), lc = t.column(sc.labeled_col);
    const std::size_t yc = t.column(sc.y_col);
    std::vector<std::size_t> xc, scol;
    for (const auto& c : sc.x_cols) xc.push_back(t.column(c));
    for (const auto& c : sc.s_cols) scol.push_back(t.column(c));
    const Index p = static_cast<Index>(xc.size()) + 1, q = static_cast<Index>(scol.size());

    std::vector<std::size_t> members[2][2];
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const int pop = parse_population(row[pc], r + 1) == Population::source ? 1 : 0;
        const int lab = parse_flag(row[lc], r + 1) ? 1 : 0;
        if (lab && (row[yc].empty() || row[yc] == "NA"))
            throw ValidationError("row " + std::to_string(r + 1) + ": labeled row has no value in '" + sc.y_col + "'");
        members[pop][lab].push_back(r);
    }
    auto build = [&](int pop, int lab) {
        ObservationBlock b = make_block(pop ? Population::source : Population::target, lab == 1, p, q);
        const auto& idx = members[pop][lab];
        const Index n = static_cast<Index>(idx.size());
        b.x.resize(n, p);
        b.s.resize(n, q);
        Vector y(n);
        for (Index i = 0; i < n; ++i) {
            const auto& row = t.rows[idx[static_cast<std::size_t>(i)]];
            const std::size_t line = idx[static_cast<std::size_t>(i)] + 1;
            b.x(i, 0) = 1.0;
            for (Index j = 1; j < p; ++j)
                b.x(i, j) = parse_double(row[xc[static_cast<std::size_t>(j - 1)]],
                                         "row " + std::to_string(line) + " column " + sc.x_cols[static_cast<std::size_t>(j - 1)]);
            for (Index j = 0; j < q; ++j)
                b.s(i, j) = parse_double(row[scol[static_cast<std::size_t>(j)]],
                                         "row " + std::to_string(line) + " column " + sc.s_cols[static_cast<std::size_t>(j)]);
            if (lab) y[i] = parse_double(row[yc], "row " + std::to_string(line) + " column " + sc.y_col);
        }
        if (lab) b.y = std::move(y);
        return b;
    };
    StudyData d;
    d.target_labeled = build(0, 1);
    d.target_unlabeled = build(0, 0);
    d.source_labeled = build(1, 1);
    d.source_unlabeled = build(1, 0);
    d.validate();
    return d;
}

inline StudyData load_study(const fs::path& csv, const Sidecar& sc) { return study_from_table(read_csv(csv), sc); }

/// Flat table for a StudyData (intercept column dropped), plus a matching sidecar.
inline std::pair<CsvTable, Sidecar> study_to_table(const StudyData& d)
{
    Sidecar sc{"population", "labeled", "y", {}, {}};
    const Index p = d.p(), q = d.q();
    for (Index j = 1; j < p; ++j) sc.x_cols.push_back("x" + std::to_string(j));
    for (Index j = 0; j < q; ++j) sc.s_cols.push_back("s" + std::to_string(j + 1));
    CsvTable t;
    t.header = {sc.population_col, sc.labeled_col, sc.y_col};
    t.header.insert(t.header.end(), sc.x_cols.begin(), sc.x_cols.end());
    t.header.insert(t.header.end(), sc.s_cols.begin(), sc.s_cols.end());
    d.for_each_block([&](const ObservationBlock& b) {
        for (Index i = 0; i < b.rows(); ++i) {
            std::vector<std::string> row;
            row.push_back(b.population == Population::source ? "source" : "target");
            row.push_back(b.labeled ? "1" : "0");
            row.push_back(b.labeled ? format_double((*b.y)[i]) : "");
            for (Index j = 1; j < p; ++j) row.push_back(format_double(b.x(i, j)));
            for (Index j = 0; j < q; ++j) row.push_back(format_double(b.s(i, j)));
            t.rows.push_back(std::move(row));
        }
    });
    return {std::move(t), std::move(sc)};
}

// ---------------------------------------------------------------------------
// Vectors and oracle cache
// ---------------------------------------------------------------------------

/// JSON arrays carry doubles with 17 significant digits, which round-trips.
inline json vector_to_json(const Vector& v)
{
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Vector vector_from_json(const json& a, std::string_view what)
{
    if (!a.is_array()) throw ValidationError(std::string(what) + " must be an array of numbers");
    Vector v(static_cast<Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_number()) throw ValidationError(std::string(what) + " must be an array of numbers");
        v[static_cast<Index>(i)] = a[i].get<double>();
    }
    return v;
}

inline json oracle_to_json(const sim::OracleParams& o)
{
    return json{{"scenario", std::string(sim::to_string(o.scenario))},
                {"iota", o.iota},
                {"oracle_n", o.oracle_n},
                {"tol", o.tol},
                {"grad_norm", o.grad_norm},
                {"newton_iterations", o.newton_iterations},
                {"seed", o.seed},
                {"mprime_s_index", o.mprime_s_index},
                {"beta0", vector_to_json(o.beta0)},
                {"scaling",
                 {{"reference_n", o.scaling.reference_n},
                  {"x_mean", vector_to_json(o.scaling.x_mean)},
                  {"x_scale", vector_to_json(o.scaling.x_scale)},
                  {"s_mean", vector_to_json(o.scaling.s_mean)},
                  {"s_scale", vector_to_json(o.scaling.s_scale)}}}};
}

inline sim::OracleParams oracle_from_json(const json& j)
{
    try {
        sim::OracleParams o;
        o.scenario = sim::parse_scenario(j.at("scenario").get<std::string>());
        o.iota = j.at("iota").get<double>();
        o.oracle_n = j.at("oracle_n").get<Index>();
        o.tol = j.at("tol").get<double>();
        o.grad_norm = j.at("grad_norm").get<double>();
        o.newton_iterations = j.at("newton_iterations").get<int>();
        o.seed = j.at("seed").get<std::uint64_t>();
        o.mprime_s_index = j.at("mprime_s_index").get<int>();
        o.beta0 = vector_from_json(j.at("beta0"), "beta0");
        const json& s = j.at("scaling");
        o.scaling.reference_n = s.at("reference_n").get<Index>();
        o.scaling.x_mean = vector_from_json(s.at("x_mean"), "x_mean");
        o.scaling.x_scale = vector_from_json(s.at("x_scale"), "x_scale");
        o.scaling.s_mean = vector_from_json(s.at("s_mean"), "s_mean");
        o.scaling.s_scale = vector_from_json(s.at("s_scale"), "s_scale");
        return o;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed oracle cache: ") + e.what());
    }
}

/// FNV-1a 64-bit hash, used for config and cache keys.
inline std::uint64_t fnv1a(std::string_view s)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    static constexpr char digits[] = "0123456789abcdef";
    for (int i = 15; i >= 0; --i) {
        buf[i] = digits[v & 0xF];
        v >>= 4;
    }
    buf[16] = '\0';
    return buf;
}

/// Cache key: everything the oracle depends on.
inline std::string oracle_key(const sim::SimConfig& cfg, std::uint64_t oracle_seed)
{
    const json k{{"scenario", std::string(sim::to_string(cfg.scenario))},
                 {"iota", cfg.iota},
                 {"p", cfg.p},
                 {"q", cfg.q},
                 {"oracle_n", cfg.oracle_n},
                 {"tol", cfg.oracle_tol},
                 {"mprime_s_index", cfg.scenario == sim::Scenario::C5 ? cfg.mprime_s_index : 0},
                 {"seed", oracle_seed}};
    return std::string(sim::to_string(cfg.scenario)) + "_" + hex64(fnv1a(k.dump()));
}

/// Loads the cached oracle for cfg from dir, computing and storing it when absent.
inline sim::OracleParams load_or_compute_oracle(const sim::SimConfig& cfg, std::uint64_t oracle_seed,
                                                const fs::path& dir, bool* computed = nullptr)
{
    const fs::path file = dir / ("oracle_" + oracle_key(cfg, oracle_seed) + ".json");
    if (fs::exists(file)) {
        if (computed) *computed = false;
        return oracle_from_json(read_json(file));
    }
    sim::OracleParams o = sim::compute_oracle_beta0(cfg, oracle_seed);
    write_json(file, oracle_to_json(o));
    if (computed) *computed = true;
    return o;
}

// ---------------------------------------------------------------------------
// Simulation outputs
// ---------------------------------------------------------------------------

inline CsvTable per_rep_table(const sim::SimulationResult& res)
{
    CsvTable t;
    t.header = {"method", "rep", "abs_bias", "l2_err", "auc", "rho", "seconds"};
    for (const auto& r : res.records)
        t.rows.push_back({std::string(to_string(r.method)), std::to_string(r.rep), format_double(r.abs_bias),
                          format_double(r.l2_err), format_double(r.auc), format_double(r.rho),
                          format_double(r.seconds)});
    return t;
}

inline CsvTable aggregate_table(const sim::SimConfig& cfg, const std::vector<sim::MetricRow>& rows)
{
    CsvTable t;
    t.header = {"scenario", "iota", "n_source", "method", "abs_bias", "l2_err", "auc", "rho_rate", "reps_used"};
    for (const auto& r : rows)
        t.rows.push_back({std::string(sim::to_string(cfg.scenario)), format_double(cfg.iota),
                          std::to_string(cfg.n_source), std::string(to_string(r.method)), format_double(r.abs_bias),
                          format_double(r.l2_err), format_double(r.auc), format_double(r.rho_rate),
                          std::to_string(r.reps_used)});
    return t;
}

inline CsvTable failures_table(const sim::SimulationResult& res)
{
    CsvTable t;
    t.header = {"rep", "message"};
    for (const auto& f : res.failures) {
        std::string msg;
        for (char c : f.message) msg += (c == '"') ? std::string("\"\"") : std::string(1, c);
        t.rows.push_back({std::to_string(f.rep), "\"" + msg + "\""});
    }
    return t;
}

}  // namespace strifle::io
