#pragma once

#include <strifle/estimators.hpp>
#include <strifle/glm_core.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace strifle::sim {

using Rng = std::mt19937_64;

enum class Scenario { C1, C2, C3, C4, C5 };
enum class OutcomeModel { M_cor, M_mis, M_mis_prime };
enum class MembershipModel { W_cor, W_mis, W_mis_prime };

inline std::string_view to_string(Scenario s)
{
    static constexpr std::string_view names[] = {"C1", "C2", "C3", "C4", "C5"};
    return names[static_cast<int>(s)];
}

inline Scenario parse_scenario(std::string_view name)
{
    for (int k = 0; k < 5; ++k)
        if (to_string(static_cast<Scenario>(k)) == name) return static_cast<Scenario>(k);
    throw ValidationError("unknown scenario '" + std::string(name) + "'");
}

inline OutcomeModel outcome_model(Scenario s)
{
    switch (s) {
    case Scenario::C1:
    case Scenario::C3: return OutcomeModel::M_cor;
    case Scenario::C2:
    case Scenario::C4: return OutcomeModel::M_mis;
    case Scenario::C5: return OutcomeModel::M_mis_prime;
    }
    return OutcomeModel::M_cor;
}

inline MembershipModel membership_model(Scenario s)
{
    switch (s) {
    case Scenario::C1:
    case Scenario::C2: return MembershipModel::W_cor;
    case Scenario::C3:
    case Scenario::C4: return MembershipModel::W_mis;
    case Scenario::C5: return MembershipModel::W_mis_prime;
    }
    return MembershipModel::W_cor;
}

enum class BiasDefinition { bias_of_mean, mean_abs_deviation };

struct SimConfig {
    Scenario scenario = Scenario::C1;
    double iota = 0.0;
    Index n_target = 150;
    Index N_target = 10000;
    Index n_source = 1200;
    Index N_source = 10000;
    Index p = 150;  // predictors, excluding the intercept
    Index q = 30;
    int reps = 100;
    std::uint64_t seed = 1;
    int mprime_s_index = 3;  // which S enters M'_mis with coefficient -3 (2 or 3)
    Index oracle_n = 1000000;
    double oracle_tol = 1e-10;
    BiasDefinition bias = BiasDefinition::bias_of_mean;

    void validate() const
    {
        require(iota >= 0.0 && iota < 1.0, "iota must lie in [0, 1)");
        require(p >= 10, "the data-generating models use X_1..X_10, so p >= 10");
        require(q >= 3, "the data-generating models use S_1..S_3, so q >= 3");
        require(n_target >= 4 && n_source >= 0 && N_target >= 0 && N_source >= 0, "invalid sample sizes");
        require(reps >= 1, "reps must be at least 1");
        require(mprime_s_index == 2 || mprime_s_index == 3, "mprime_s_index must be 2 or 3");
        require(scenario != Scenario::C5 || iota == 0.0, "scenario C5 requires iota = 0");
    }
};

/// Deterministic child seed: splitmix64 of (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream)
{
    std::uint64_t z = seed ^ (stream + 0x9E3779B97F4A7C15ULL + (seed << 6) + (seed >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// a(t) = log(1 + e^t).
inline double softplus(double t) { return log1p_exp(t); }

/// W ~ N(0, Sigma) with Sigma_jk = iota^|j-k|, drawn as a stationary AR(1) across columns.
inline Matrix gen_latent(Index n, Index d, double iota, Rng& rng)
{
    std::normal_distribution<double> norm(0.0, 1.0);
    Matrix w(n, d);
    const double innov = std::sqrt(1.0 - iota * iota);
    for (Index i = 0; i < n; ++i) {
        double prev = 0.0;
        for (Index j = 0; j < d; ++j) {
            const double e = norm(rng);
            prev = j == 0 ? e : iota * prev + innov * e;
            w(i, j) = prev;
        }
    }
    return w;
}

/// Raw (unstandardized) predictors (n x p, no intercept) and surrogates (n x q) from latent W.
inline std::pair<Matrix, Matrix> raw_covariates(const Matrix& w, Index p, Index q)
{
    const Index n = w.rows();
    Matrix x(n, p), s(n, q);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < p; ++j) x(i, j) = softplus(w(i, j));
        double s1 = w(i, p), s2 = w(i, p + 1), s3 = w(i, p + 2);
        for (Index j = 0; j < 5; ++j) s1 += x(i, j);
        for (Index j = 2; j < 7; ++j) s2 += x(i, j);
        for (Index j = 5; j < 10; ++j) s3 += x(i, j);
        s(i, 0) = softplus(s1);
        s(i, 1) = softplus(s2);
        s(i, 2) = softplus(s3);
        for (Index j = 3; j < q; ++j) s(i, j) = softplus(w(i, p + j));
    }
    return {std::move(x), std::move(s)};
}

/// Population moments used to standardize X (without intercept) and S.
struct CovariateScaling {
    Vector x_mean, x_scale, s_mean, s_scale;
    Index reference_n = 0;
};

/**
 * Standardization constants estimated once from a large reference draw so
 * that every replication and the oracle share one data-generating law.
 */
inline CovariateScaling reference_scaling(Index p, Index q, double iota, Index n_ref, std::uint64_t seed)
{
    Rng rng(seed);
    const Index batch = 8192;
    Vector sx = Vector::Zero(p), sxx = Vector::Zero(p), ss = Vector::Zero(q), sss = Vector::Zero(q);
    // shifted sums (first-batch means as pivots) keep the variance accurate
    Vector px, ps;
    Index done = 0;
    while (done < n_ref) {
        const Index m = std::min(batch, n_ref - done);
        const auto [x, s] = raw_covariates(gen_latent(m, p + q, iota, rng), p, q);
        if (done == 0) {
            px = x.colwise().mean().transpose();
            ps = s.colwise().mean().transpose();
        }
        const Matrix xc = x.rowwise() - px.transpose();
        const Matrix sc = s.rowwise() - ps.transpose();
        sx += xc.colwise().sum().transpose();
        sxx += xc.array().square().colwise().sum().matrix().transpose();
        ss += sc.colwise().sum().transpose();
        sss += sc.array().square().colwise().sum().matrix().transpose();
        done += m;
    }
    const double n = static_cast<double>(n_ref);
    CovariateScaling out;
    out.reference_n = n_ref;
    const Vector mx = sx / n, ms = ss / n;
    out.x_mean = px + mx;
    out.s_mean = ps + ms;
    out.x_scale = (sxx / n - mx.cwiseAbs2()).cwiseSqrt();
    out.s_scale = (sss / n - ms.cwiseAbs2()).cwiseSqrt();
    return out;
}

/**
 * n rows of standardized covariates. X gets the intercept prepended as
 * column 0, so X_j (1-based) sits in column j and S_j in column j - 1.
 */
inline std::pair<Matrix, Matrix> gen_covariates(Index n, Index p, Index q, double iota, const CovariateScaling& scaling,
                                                Rng& rng)
{
    auto [xr, sr] = raw_covariates(gen_latent(n, p + q, iota, rng), p, q);
    Matrix x(n, p + 1);
    x.col(0).setOnes();
    for (Index j = 0; j < p; ++j) x.col(j + 1) = (xr.col(j).array() - scaling.x_mean[j]) / scaling.x_scale[j];
    for (Index j = 0; j < q; ++j) sr.col(j) = (sr.col(j).array() - scaling.s_mean[j]) / scaling.s_scale[j];
    return {std::move(x), std::move(sr)};
}

/// logit P(Y = 1 | Z) for one row; x includes the intercept in position 0.
inline double outcome_logit(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Eigen::Ref<const Eigen::RowVectorXd>& s,
                            OutcomeModel model, int mprime_s_index = 3)
{
    const double x1 = x[1], x2 = x[2], x3 = x[3];
    const double s1 = s[0], s2 = s[1], s3 = s[2];
    switch (model) {
    case OutcomeModel::M_cor: return 0.2 - x1 + x2 - x3 + 2.0 * s1 - 2.0 * s2 + 2.0 * s3;
    case OutcomeModel::M_mis:
        return -x1 + x2 + x3 * x3 - s2 + 2.0 * s3 + 2.0 * s1 / (1.0 + std::exp(-x1 * s1 * s1));
    case OutcomeModel::M_mis_prime: {
        const double s_neg = mprime_s_index == 2 ? s2 : s3;
        return -1.0 - 2.0 * x1 + x2 * x2 + 3.0 * s1 - 3.0 * s_neg + 1.0 / (1.0 + std::exp(-x3 * s3 * s3));
    }
    }
    return 0.0;
}

/// logit P(R = 1 | Z); R = 1 routes the row to the source population.
inline double membership_logit(const Eigen::Ref<const Eigen::RowVectorXd>& x,
                               const Eigen::Ref<const Eigen::RowVectorXd>& s, MembershipModel model)
{
    const double x1 = x[1], x2 = x[2], x3 = x[3];
    const double s1 = s[0], s2 = s[1], s3 = s[2];
    double tail = 0.0;
    for (int j = 3; j <= 10; ++j) tail += x[j];
    switch (model) {
    case MembershipModel::W_cor: return x1 - x2 - x3 + s1;
    case MembershipModel::W_mis: return 1.8 * s2 - 2.0 * s3 + s1 * (1.0 + (x1 + x2) / (1.0 + std::exp(-tail)));
    case MembershipModel::W_mis_prime:
        return -2.0 * x1 + 2.0 * x2 + 3.0 * s1 - 3.0 * s2 + s3 * (x1 + x2) / (1.0 + std::exp(-tail));
    }
    return 0.0;
}

inline Vector gen_outcome(const Matrix& x, const Matrix& s, Scenario scenario, Rng& rng, int mprime_s_index = 3)
{
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Vector y(x.rows());
    const OutcomeModel m = outcome_model(scenario);
    for (Index i = 0; i < x.rows(); ++i)
        y[i] = unif(rng) < expit(outcome_logit(x.row(i), s.row(i), m, mprime_s_index)) ? 1.0 : 0.0;
    return y;
}

inline std::vector<int> gen_membership(const Matrix& x, const Matrix& s, Scenario scenario, Rng& rng)
{
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<int> r(static_cast<std::size_t>(x.rows()));
    const MembershipModel m = membership_model(scenario);
    for (Index i = 0; i < x.rows(); ++i)
        r[static_cast<std::size_t>(i)] = unif(rng) < expit(membership_logit(x.row(i), s.row(i), m)) ? 1 : 0;
    return r;
}

/// Generated study plus the withheld outcomes of the target-unlabeled rows.
struct SimulatedStudy {
    StudyData data;
    Vector target_unlabeled_y;
    Index rows_generated = 0;
};

namespace detail {

struct BlockBuilder {
    Index quota = 0;
    Index filled = 0;
    Matrix x, s;
    Vector y;
    BlockBuilder(Index quota_, Index p1, Index q) : quota(quota_), x(quota_, p1), s(quota_, q), y(quota_) {}
    bool full() const { return filled >= quota; }
    void push(const Matrix& bx, const Matrix& bs, const Vector& by, Index i)
    {
        x.row(filled) = bx.row(i);
        s.row(filled) = bs.row(i);
        y[filled] = by[i];
        ++filled;
    }
};

}  // namespace detail

/**
 * Generates (Z, Y, R) rows in batches and routes them by R into the source
 * or target pool, filling the labeled quota first and then the unlabeled one.
 * Rows arriving for a population whose quotas are both full are discarded.
 */
inline SimulatedStudy generate_study(const SimConfig& cfg, const CovariateScaling& scaling, Rng& rng)
{
    cfg.validate();
    const Index p1 = cfg.p + 1;
    detail::BlockBuilder tl(cfg.n_target, p1, cfg.q), tu(cfg.N_target, p1, cfg.q);
    detail::BlockBuilder sl(cfg.n_source, p1, cfg.q), su(cfg.N_source, p1, cfg.q);
    const Index batch = 4096;
    SimulatedStudy out;
    Index guard = 0;
    while (!(tl.full() && tu.full() && sl.full() && su.full())) {
        auto [x, s] = gen_covariates(batch, cfg.p, cfg.q, cfg.iota, scaling, rng);
        const Vector y = gen_outcome(x, s, cfg.scenario, rng, cfg.mprime_s_index);
        const std::vector<int> r = gen_membership(x, s, cfg.scenario, rng);
        out.rows_generated += batch;
        for (Index i = 0; i < batch; ++i) {
            auto& labeled = r[static_cast<std::size_t>(i)] ? sl : tl;
            auto& unlabeled = r[static_cast<std::size_t>(i)] ? su : tu;
            if (!labeled.full()) labeled.push(x, s, y, i);
            else if (!unlabeled.full()) unlabeled.push(x, s, y, i);
        }
        if (++guard > 100000) throw NumericalError("generate_study: quotas could not be filled");
    }
    auto finish = [](detail::BlockBuilder& b, Population pop, bool labeled) {
        ObservationBlock blk;
        blk.x = std::move(b.x);
        blk.s = std::move(b.s);
        blk.population = pop;
        blk.labeled = labeled;
        if (labeled) blk.y = std::move(b.y);
        return blk;
    };
    out.target_unlabeled_y = tu.y;
    out.data.target_labeled = finish(tl, Population::target, true);
    out.data.target_unlabeled = finish(tu, Population::target, false);
    out.data.source_labeled = finish(sl, Population::source, true);
    out.data.source_unlabeled = finish(su, Population::source, false);
    return out;
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

struct OracleParams {
    Scenario scenario = Scenario::C1;
    double iota = 0.0;
    Vector beta0;  // length p + 1, intercept first
    CovariateScaling scaling;
    Index oracle_n = 0;
    double tol = 0.0;
    double grad_norm = 0.0;
    int newton_iterations = 0;
    std::uint64_t seed = 0;
    int mprime_s_index = 3;
    bool zero_surrogate_effects = false;
};

/**
 * Unpenalized logistic fit of Y on X by damped Newton, streaming the design
 * in chunks for the Hessian. Stops when ||grad||_2 < tol.
 */
inline Vector newton_logistic(const Matrix& x, const Vector& y, double tol, int& iterations, double& grad_norm,
                              int max_iter = 100)
{
    const Index n = x.rows(), d = x.cols();
    const double nn = static_cast<double>(n);
    Vector beta = Vector::Zero(d);
    auto objective = [&](const Vector& b, Vector* grad, Matrix* hess) {
        const Vector eta = x * b;
        double f = 0.0;
        Vector r(n), wts(n);
        for (Index i = 0; i < n; ++i) {
            f += log1p_exp(eta[i]) - y[i] * eta[i];
            const double m = expit(eta[i]);
            r[i] = m - y[i];
            wts[i] = m * (1.0 - m);
        }
        if (grad) *grad = x.transpose() * r / nn;
        if (hess) {
            hess->setZero(d, d);
            const Index chunk = 16384;
            for (Index s0 = 0; s0 < n; s0 += chunk) {
                const Index m = std::min(chunk, n - s0);
                const Matrix xw = x.middleRows(s0, m).array().colwise() * wts.segment(s0, m).array();
                hess->noalias() += x.middleRows(s0, m).transpose() * xw;
            }
            *hess /= nn;
        }
        return f / nn;
    };
    Vector g;
    Matrix h;
    double f = objective(beta, &g, &h);
    for (iterations = 0; iterations < max_iter; ++iterations) {
        grad_norm = g.norm();
        if (grad_norm < tol) return beta;
        const Vector step = h.ldlt().solve(g);
        double t = 1.0;
        Vector bn;
        double fn = 0.0;
        for (;;) {
            bn = beta - t * step;
            fn = objective(bn, nullptr, nullptr);
            if (fn <= f - 1e-4 * t * g.dot(step) || t < 1e-10) break;
            t *= 0.5;
        }
        beta = bn;
        f = objective(beta, &g, &h);
    }
    grad_norm = g.norm();
    if (grad_norm >= tol) throw NumericalError("oracle fit did not converge");
    return beta;
}

/**
 * beta0 solving the target moment condition E_T[X {Y - g(X' beta)}] = 0,
 * approximated by an unpenalized fit on oracle_n target draws.
 */
inline OracleParams compute_oracle_beta0(const SimConfig& cfg, std::uint64_t seed, bool zero_surrogate_effects = false)
{
    cfg.validate();
    OracleParams out;
    out.scenario = cfg.scenario;
    out.iota = cfg.iota;
    out.oracle_n = cfg.oracle_n;
    out.tol = cfg.oracle_tol;
    out.seed = seed;
    out.mprime_s_index = cfg.mprime_s_index;
    out.zero_surrogate_effects = zero_surrogate_effects;
    out.scaling = reference_scaling(cfg.p, cfg.q, cfg.iota, cfg.oracle_n, derive_seed(seed, 1));

    Rng rng(derive_seed(seed, 2));
    const Index n = cfg.oracle_n;
    Matrix x(n, cfg.p + 1);
    Vector y(n);
    Index filled = 0;
    const Index batch = 8192;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const OutcomeModel om = outcome_model(cfg.scenario);
    const MembershipModel mm = membership_model(cfg.scenario);
    while (filled < n) {
        auto [bx, bs] = gen_covariates(batch, cfg.p, cfg.q, cfg.iota, out.scaling, rng);
        for (Index i = 0; i < batch && filled < n; ++i) {
            double eta_y = outcome_logit(bx.row(i), bs.row(i), om, cfg.mprime_s_index);
            if (zero_surrogate_effects) {
                // test-only variant of M_cor whose Y | X law is exactly logistic
                eta_y = 0.2 - bx(i, 1) + bx(i, 2) - bx(i, 3);
            }
            const double yi = unif(rng) < expit(eta_y) ? 1.0 : 0.0;
            const bool source = unif(rng) < expit(membership_logit(bx.row(i), bs.row(i), mm));
            if (source) continue;
            x.row(filled) = bx.row(i);
            y[filled] = yi;
            ++filled;
        }
    }
    out.beta0 = newton_logistic(x, y, cfg.oracle_tol, out.newton_iterations, out.grad_norm);
    return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/**
 * Average absolute bias over coordinates. bias_of_mean averages the
 * estimates across replications first; mean_abs_deviation averages
 * |beta_hat - beta0| per replication.
 */
inline double metric_abs_bias(const std::vector<Vector>& beta_hats, const Vector& beta0,
                              BiasDefinition def = BiasDefinition::bias_of_mean)
{
    require(!beta_hats.empty(), "metric_abs_bias needs at least one estimate");
    const double reps = static_cast<double>(beta_hats.size());
    if (def == BiasDefinition::bias_of_mean) {
        Vector mean = Vector::Zero(beta0.size());
        for (const auto& b : beta_hats) {
            require(b.size() == beta0.size(), "estimate length does not match beta0");
            mean += b;
        }
        mean /= reps;
        return (mean - beta0).cwiseAbs().mean();
    }
    double acc = 0.0;
    for (const auto& b : beta_hats) {
        require(b.size() == beta0.size(), "estimate length does not match beta0");
        acc += (b - beta0).cwiseAbs().mean();
    }
    return acc / reps;
}

inline double metric_l2(const Vector& beta_hat, const Vector& beta0) { return (beta_hat - beta0).norm(); }

/// Mann-Whitney AUC with ties counted one half (midranks).
inline double metric_auc(const Vector& scores, const Vector& labels)
{
    require(scores.size() == labels.size(), "scores and labels differ in length");
    const Index n = scores.size();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    Index n_pos = 0;
    for (Index i = 0; i < n; ++i) {
        require(labels[i] == 0.0 || labels[i] == 1.0, "AUC labels must be binary");
        if (labels[i] == 1.0) ++n_pos;
    }
    const Index n_neg = n - n_pos;
    require(n_pos > 0 && n_neg > 0, "AUC needs both classes present");
    std::size_t k = 0;
    while (k < order.size()) {
        std::size_t e = k;
        while (e + 1 < order.size() && scores[order[e + 1]] == scores[order[k]]) ++e;
        const double midrank = (static_cast<double>(k) + static_cast<double>(e)) / 2.0 + 1.0;
        for (std::size_t r = k; r <= e; ++r)
            if (labels[order[r]] == 1.0) rank_sum_pos += midrank;
        k = e + 1;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// ---------------------------------------------------------------------------
// Replication driver
// ---------------------------------------------------------------------------

struct RepRecord {
    Method method = Method::SUP;
    int rep = 0;
    double abs_bias = 0.0;  // mean |beta_hat - beta0| for this replication
    double l2_err = 0.0;
    double auc = 0.0;
    double rho = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0.0;
    Vector beta;
};

struct RepFailure {
    int rep = 0;
    std::string message;
};

struct MetricRow {
    Method method = Method::SUP;
    double abs_bias = 0.0;
    double l2_err = 0.0;
    double auc = 0.0;
    double rho_rate = std::numeric_limits<double>::quiet_NaN();
    int reps_used = 0;
};

struct SimulationResult {
    std::vector<RepRecord> records;  // ordered by (rep, method)
    std::vector<MetricRow> aggregate;
    std::vector<RepFailure> failures;
};

inline std::uint64_t rep_seed(std::uint64_t master, int rep) { return derive_seed(master, static_cast<std::uint64_t>(rep)); }

/// Study data of one replication, regenerated from (config, oracle, rep).
inline SimulatedStudy replication_data(const SimConfig& cfg, const OracleParams& oracle, int rep)
{
    Rng rng(derive_seed(rep_seed(cfg.seed, rep), 0));
    return generate_study(cfg, oracle.scaling, rng);
}

/// Pipeline settings of one replication: seeds derived from the replication seed.
inline PipelineConfig replication_pipeline(const SimConfig& cfg, PipelineConfig base, int rep)
{
    const std::uint64_t s = rep_seed(cfg.seed, rep);
    base.cv_seed = derive_seed(s, 1);
    base.split_seed = derive_seed(s, 2);
    return base;
}

inline std::vector<RepRecord> run_one_replication(const SimConfig& cfg, const OracleParams& oracle,
                                                  const PipelineConfig& base, const std::set<Method>& methods, int rep)
{
    const auto t0 = std::chrono::steady_clock::now();
    const SimulatedStudy study = replication_data(cfg, oracle, rep);
    const PipelineConfig pc = replication_pipeline(cfg, base, rep);
    const EstimatorBundle b = run_methods(study.data, pc, methods);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::vector<RepRecord> out;
    for (Method m : all_methods) {
        if (!methods.count(m)) continue;
        const OutcomeEstimate& est = b.beta.at(m);
        RepRecord r;
        r.method = m;
        r.rep = rep;
        r.beta = est.beta;
        r.abs_bias = (est.beta - oracle.beta0).cwiseAbs().mean();
        r.l2_err = metric_l2(est.beta, oracle.beta0);
        r.auc = metric_auc(study.data.target_unlabeled.x * est.beta, study.target_unlabeled_y);
        if (m == Method::STRIFLE) r.rho = b.decision.rho;
        r.seconds = secs;
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<MetricRow> aggregate_records(const std::vector<RepRecord>& records, const Vector& beta0,
                                                BiasDefinition def)
{
    std::vector<MetricRow> rows;
    for (Method m : all_methods) {
        std::vector<const RepRecord*> mine;
        for (const auto& r : records)
            if (r.method == m) mine.push_back(&r);
        if (mine.empty()) continue;
        // order-independent aggregation: sort by replication index first
        std::sort(mine.begin(), mine.end(), [](auto* a, auto* b) { return a->rep < b->rep; });
        MetricRow row;
        row.method = m;
        row.reps_used = static_cast<int>(mine.size());
        std::vector<Vector> betas;
        double rho_sum = 0.0;
        bool has_rho = false;
        for (auto* r : mine) {
            betas.push_back(r->beta);
            row.l2_err += r->l2_err;
            row.auc += r->auc;
            if (!std::isnan(r->rho)) {
                rho_sum += r->rho;
                has_rho = true;
            }
        }
        const double k = static_cast<double>(mine.size());
        row.l2_err /= k;
        row.auc /= k;
        row.abs_bias = metric_abs_bias(betas, beta0, def);
        if (has_rho) row.rho_rate = rho_sum / k;
        rows.push_back(row);
    }
    return rows;
}

/**
 * Runs cfg.reps replications on up to `parallelism` threads. Every
 * replication draws from its own seed stream, so results do not depend on
 * scheduling. Failed replications are reported and excluded.
 */
inline SimulationResult run_replications(const SimConfig& cfg, const OracleParams& oracle, const PipelineConfig& base,
                                         const std::set<Method>& methods, int parallelism = 1,
                                         const std::function<void(int)>& on_done = {})
{
    cfg.validate();
    require(!methods.empty(), "no methods requested");
    require(oracle.beta0.size() == cfg.p + 1, "oracle beta0 does not match p");
    require(oracle.scenario == cfg.scenario && oracle.iota == cfg.iota, "oracle computed for a different scenario");
    std::vector<std::vector<RepRecord>> per_rep(static_cast<std::size_t>(cfg.reps));
    std::vector<std::string> errors(static_cast<std::size_t>(cfg.reps));
    std::atomic<int> next{0};
    std::mutex cb_mutex;
    auto worker = [&] {
        for (int rep = next++; rep < cfg.reps; rep = next++) {
            try {
                per_rep[static_cast<std::size_t>(rep)] = run_one_replication(cfg, oracle, base, methods, rep);
            } catch (const std::exception& e) {
                errors[static_cast<std::size_t>(rep)] = e.what();
                if (errors[static_cast<std::size_t>(rep)].empty()) errors[static_cast<std::size_t>(rep)] = "unknown error";
            }
            if (on_done) {
                std::lock_guard lock(cb_mutex);
                on_done(rep);
            }
        }
    };
    const int threads = std::max(1, std::min(parallelism, cfg.reps));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    SimulationResult out;
    for (int rep = 0; rep < cfg.reps; ++rep) {
        const auto k = static_cast<std::size_t>(rep);
        if (!errors[k].empty()) out.failures.push_back({rep, errors[k]});
        else
            for (auto& r : per_rep[k]) out.records.push_back(std::move(r));
    }
    out.aggregate = aggregate_records(out.records, oracle.beta0, cfg.bias);
    return out;
}

}  // namespace strifle::sim
