#pragma once

#include <strifle/density_ratio.hpp>
#include <strifle/glm_core.hpp>
#include <strifle/penalty.hpp>
#include <strifle/solver.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace strifle {

enum class Method { SUP, SAS, CS, Meta, STRIFLE, TransGLM };

inline constexpr Method all_methods[] = {Method::SUP, Method::SAS, Method::CS,
                                         Method::Meta, Method::STRIFLE, Method::TransGLM};

inline std::string_view to_string(Method m)
{
    switch (m) {
    case Method::SUP: return "SUP";
    case Method::SAS: return "SAS";
    case Method::CS: return "CS";
    case Method::Meta: return "Meta";
    case Method::STRIFLE: return "STRIFLE";
    case Method::TransGLM: return "TransGLM";
    }
    return "?";
}

inline std::optional<Method> parse_method(std::string_view name)
{
    for (Method m : all_methods)
        if (to_string(m) == name) return m;
    return std::nullopt;
}

struct DrConfig {
    DrMethod method = DrMethod::ridge_threshold;
    double ridge_lambda = 1e-5;
    double cutoff_const = 10.0;
    DrSolverConfig ridge_solver{};
    DrLassoOptions lasso{};
    BasisSpec basis = BasisSpec::identity();
};

/**
 * Settings shared by every estimator. Each component selects its own lambda
 * by CV; the penalty templates only fix the family and shape.
 */
struct PipelineConfig {
    Link link = logit_link;
    PenaltySpec theta_penalty = PenaltySpec::lasso(0.0);
    PenaltySpec delta_penalty = PenaltySpec::lasso(0.0);
    PenaltySpec beta_penalty = PenaltySpec::lasso(0.0);
    int folds = 5;
    GridOptions grid{};
    FitConfig solver{};
    double epsilon0 = 0.0;
    std::optional<double> fixed_lambda;  // bypasses CV for every penalized fit when set
    std::uint64_t cv_seed = 20240101;
    std::uint64_t split_seed = 20240102;
    DrConfig dr{};
};

enum class ImputationKind { target_only, pooled, meta, strifle };

inline std::string_view to_string(ImputationKind k)
{
    switch (k) {
    case ImputationKind::target_only: return "target_only";
    case ImputationKind::pooled: return "pooled";
    case ImputationKind::meta: return "meta";
    case ImputationKind::strifle: return "strifle";
    }
    return "?";
}

struct ImputationEstimate {
    Vector theta;
    ImputationKind kind = ImputationKind::target_only;
    double lambda = 0.0;
    std::vector<std::string> provenance;  // blocks consumed
    std::optional<int> rho;               // strifle only
};

struct TransferDecision {
    int rho = 0;
    double epsilon0 = 0.0;
    double loss_meta = 0.0;
    double loss_target = 0.0;
    std::uint64_t split_seed = 0;
    // target-labeled row indices: halves[k] fits fold k, the other half evaluates it
    std::vector<Index> halves[2];
};

struct OutcomeEstimate {
    Vector beta;
    Method method = Method::SUP;
    double lambda = 0.0;
};

// ---------------------------------------------------------------------------
// Design helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix vstack(const Matrix& a, const Matrix& b)
{
    Matrix out(a.rows() + b.rows(), std::max(a.cols(), b.cols()));
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
}

inline Vector vconcat(const Vector& a, const Vector& b)
{
    Vector out(a.size() + b.size());
    out.head(a.size()) = a;
    out.tail(b.size()) = b;
    return out;
}

inline Matrix take_rows(const Matrix& m, const std::vector<Index>& idx)
{
    Matrix out(static_cast<Index>(idx.size()), m.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Index>(r)) = m.row(idx[r]);
    return out;
}

inline ObservationBlock take_rows(const ObservationBlock& b, const std::vector<Index>& idx)
{
    ObservationBlock out;
    out.x = take_rows(b.x, idx);
    out.s = take_rows(b.s, idx);
    out.population = b.population;
    out.labeled = b.labeled;
    if (b.y) {
        Vector y(static_cast<Index>(idx.size()));
        for (std::size_t r = 0; r < idx.size(); ++r) y[static_cast<Index>(r)] = (*b.y)[idx[r]];
        out.y = std::move(y);
    }
    return out;
}

inline CvFit cv_fit(const GlmData& d, const PenaltySpec& family, const PipelineConfig& cfg)
{
    const PenaltySpec pen = family.with_mask(intercept_mask(d.cols()));
    if (cfg.fixed_lambda) {
        CvFit out;
        out.fit = fit_penalized(d, cfg.link, pen.with_lambda(*cfg.fixed_lambda), cfg.solver);
        out.cv.lambda = *cfg.fixed_lambda;
        out.cv.grid = {*cfg.fixed_lambda};
        out.cv.cv_curve = Vector::Zero(1);
        return out;
    }
    const int folds = static_cast<int>(std::min<Index>(cfg.folds, d.rows()));
    require(folds >= 2, "too few rows for cross-validation");
    return fit_cv(d, cfg.link, pen, folds, cfg.cv_seed, cfg.solver, cfg.grid);
}

// Held-out loss (2/n_T) sum_{i in eval} {G(z_i' theta) - y_i z_i' theta}; unpenalized.
inline double half_sample_loss(const Matrix& z, const Vector& y, const Vector& theta, Link link, Index n_total)
{
    const Vector eta = z * theta;
    double acc = 0.0;
    for (Index i = 0; i < eta.size(); ++i) acc += link.cumulant(eta[i]) - y[i] * eta[i];
    return 2.0 * acc / static_cast<double>(n_total);
}

inline std::array<std::vector<Index>, 2> random_halves(Index n, std::uint64_t seed)
{
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto h = static_cast<std::ptrdiff_t>(n / 2);
    std::array<std::vector<Index>, 2> out{std::vector<Index>(perm.begin(), perm.begin() + h),
                                          std::vector<Index>(perm.begin() + h, perm.end())};
    std::sort(out[0].begin(), out[0].end());
    std::sort(out[1].begin(), out[1].end());
    return out;
}

}  // namespace detail

/// Copy of the study with the target-labeled block restricted to the given rows.
inline StudyData with_target_labeled_rows(const StudyData& data, const std::vector<Index>& idx)
{
    StudyData out = data;
    out.target_labeled = detail::take_rows(data.target_labeled, idx);
    return out;
}

/// Importance weights w(z) on the source-labeled rows.
inline Vector source_weights(const StudyData& data, const DensityRatioFit& dr, const BasisSpec& basis = {})
{
    if (data.n_source() == 0) return Vector(0);
    const Vector w = eval_weights(dr, basis.apply(data.source_labeled.z()));
    for (Index i = 0; i < w.size(); ++i)
        if (!std::isfinite(w[i])) throw NumericalError("non-finite importance weight");
    return w;
}

inline DensityRatioFit fit_density_ratio(const StudyData& data, const DrConfig& cfg)
{
    if (cfg.method == DrMethod::ridge_threshold)
        return fit_dr_ridge_threshold(data, cfg.basis, cfg.ridge_lambda, cfg.cutoff_const, cfg.ridge_solver);
    return fit_dr_lasso(data, cfg.basis, cfg.lasso);
}

// ---------------------------------------------------------------------------
// Imputation model
// ---------------------------------------------------------------------------

/// Penalized quasi-likelihood of y on z over the target-labeled rows.
inline ImputationEstimate fit_theta_target_only(const StudyData& data, const PipelineConfig& cfg)
{
    require(data.n_target() >= 2, "target-only fit needs labeled target rows");
    const GlmData d{data.target_labeled.z(), *data.target_labeled.y, {}, {}};
    const CvFit f = detail::cv_fit(d, cfg.theta_penalty, cfg);
    return {f.fit.coef, ImputationKind::target_only, f.fit.lambda, {"target_labeled"}, std::nullopt};
}

/**
 * Pooled fit over source-labeled and target-labeled rows, source rows
 * weighted by w(z). With no source rows the problem is exactly the
 * target-only one.
 */
inline ImputationEstimate fit_theta_pooled(const StudyData& data, const Vector& src_weights, const PipelineConfig& cfg)
{
    require(src_weights.size() == data.n_source(), "one importance weight per source-labeled row");
    for (Index i = 0; i < src_weights.size(); ++i)
        if (!std::isfinite(src_weights[i]) || src_weights[i] < 0.0)
            throw NumericalError("importance weights must be finite and nonnegative");
    GlmData d;
    if (data.n_source() == 0) {
        d = GlmData{data.target_labeled.z(), *data.target_labeled.y, {}, {}};
    } else {
        d.design = detail::vstack(data.source_labeled.z(), data.target_labeled.z());
        d.response = detail::vconcat(*data.source_labeled.y, *data.target_labeled.y);
        d.weights = detail::vconcat(src_weights, Vector::Ones(data.n_target()));
    }
    const CvFit f = detail::cv_fit(d, cfg.theta_penalty, cfg);
    return {f.fit.coef, ImputationKind::pooled, f.fit.lambda, {"source_labeled", "target_labeled"}, std::nullopt};
}

inline ImputationEstimate fit_theta_pooled(const StudyData& data, const DensityRatioFit& dr, const PipelineConfig& cfg)
{
    return fit_theta_pooled(data, source_weights(data, dr, cfg.dr.basis), cfg);
}

struct DeltaFit {
    Vector delta;
    double lambda = 0.0;
};

/// Bias correction on the target-labeled rows with offset z' theta_tilde.
inline DeltaFit fit_delta(const StudyData& data, const Vector& theta_tilde, const PipelineConfig& cfg)
{
    require(theta_tilde.size() == data.d(), "theta_tilde must have length p + q");
    const Matrix z = data.target_labeled.z();
    const GlmData d{z, *data.target_labeled.y, {}, z * theta_tilde};
    const CvFit f = detail::cv_fit(d, cfg.delta_penalty, cfg);
    return {f.fit.coef, f.fit.lambda};
}

struct MetaFit {
    ImputationEstimate pooled;
    DeltaFit delta;
    ImputationEstimate meta;
};

/**
 * Two-step meta-learning: pooled weighted fit, then target-only correction.
 * Without source rows the pooled fit is the target-only fit and the bias it
 * would correct is zero by definition, so the correction step is skipped.
 */
inline MetaFit fit_theta_meta(const StudyData& data, const Vector& src_weights, const PipelineConfig& cfg)
{
    MetaFit out;
    out.pooled = fit_theta_pooled(data, src_weights, cfg);
    if (data.n_source() == 0) out.delta = {Vector::Zero(data.d()), 0.0};
    else out.delta = fit_delta(data, out.pooled.theta, cfg);
    out.meta = {out.pooled.theta + out.delta.delta, ImputationKind::meta, out.delta.lambda,
                {"source_labeled", "target_labeled"}, std::nullopt};
    return out;
}

/**
 * Cross-fitted transferability indicator. Each half of the target-labeled
 * rows fits a target-only and a meta estimate (lambdas re-tuned on the
 * half); the other half scores both with the unpenalized loss.
 */
inline TransferDecision estimate_rho(const StudyData& data, const Vector& src_weights, const PipelineConfig& cfg,
                                     double epsilon0, std::uint64_t split_seed)
{
    require(epsilon0 >= 0.0, "epsilon0 must be nonnegative");
    const Index nT = data.n_target();
    if (nT < 4) throw ValidationError("estimate_rho needs at least 4 labeled target rows");
    TransferDecision dec;
    dec.epsilon0 = epsilon0;
    dec.split_seed = split_seed;
    auto halves = detail::random_halves(nT, split_seed);
    dec.halves[0] = halves[0];
    dec.halves[1] = halves[1];
    const Matrix z = data.target_labeled.z();
    const Vector& y = *data.target_labeled.y;
    double lm = 0.0, lt = 0.0;
    for (int k = 0; k < 2; ++k) {
        const StudyData part = with_target_labeled_rows(data, halves[static_cast<std::size_t>(k)]);
        const auto& other = halves[static_cast<std::size_t>(1 - k)];
        const Matrix z_eval = detail::take_rows(z, other);
        Vector y_eval(static_cast<Index>(other.size()));
        for (std::size_t r = 0; r < other.size(); ++r) y_eval[static_cast<Index>(r)] = y[other[r]];

        const ImputationEstimate t_k = fit_theta_target_only(part, cfg);
        const MetaFit m_k = fit_theta_meta(part, src_weights, cfg);
        lt += detail::half_sample_loss(z_eval, y_eval, t_k.theta, cfg.link, nT) / 2.0;
        lm += detail::half_sample_loss(z_eval, y_eval, m_k.meta.theta, cfg.link, nT) / 2.0;
    }
    dec.loss_meta = lm;
    dec.loss_target = lt;
    dec.rho = lm <= lt - epsilon0 ? 1 : 0;
    return dec;
}

/// All imputation-model fits produced by one STRIFLE run.
struct EstimatorBundle {
    DensityRatioFit dr;
    ImputationEstimate theta_target;
    MetaFit meta;
    TransferDecision decision;
    ImputationEstimate theta_strifle;
    std::map<Method, OutcomeEstimate> beta;
};

inline ImputationEstimate combine_strifle(const ImputationEstimate& target, const ImputationEstimate& meta, int rho)
{
    ImputationEstimate out = rho == 1 ? meta : target;
    out.kind = ImputationKind::strifle;
    out.rho = rho;
    out.provenance = rho == 1 ? meta.provenance : target.provenance;
    return out;
}

struct StrifleThetaFit {
    ImputationEstimate theta_target;
    MetaFit meta;
    TransferDecision decision;
    ImputationEstimate theta_strifle;
};

/// rho * theta_meta + (1 - rho) * theta_target with full-data component fits.
inline StrifleThetaFit fit_theta_strifle(const StudyData& data, const Vector& src_weights, const PipelineConfig& cfg)
{
    StrifleThetaFit out;
    out.theta_target = fit_theta_target_only(data, cfg);
    out.meta = fit_theta_meta(data, src_weights, cfg);
    out.decision = estimate_rho(data, src_weights, cfg, cfg.epsilon0, cfg.split_seed);
    out.theta_strifle = combine_strifle(out.theta_target, out.meta.meta, out.decision.rho);
    return out;
}

// ---------------------------------------------------------------------------
// Outcome model
// ---------------------------------------------------------------------------

/**
 * Semi-supervised outcome fit: target-unlabeled rows carry pseudo-responses
 * g(z' theta_hat), target-labeled rows their observed y.
 */
inline OutcomeEstimate fit_beta_ss(const StudyData& data, const Vector& theta_hat, const PipelineConfig& cfg,
                                   Method label = Method::SAS)
{
    require(theta_hat.size() == data.d(), "theta_hat must have length p + q");
    GlmData d;
    if (data.N_target() == 0) {
        d = GlmData{data.target_labeled.x, *data.target_labeled.y, {}, {}};
    } else {
        const Vector eta = data.target_unlabeled.z() * theta_hat;
        Vector pseudo(eta.size());
        for (Index i = 0; i < eta.size(); ++i) pseudo[i] = cfg.link.mean(eta[i]);
        d.design = detail::vstack(data.target_unlabeled.x, data.target_labeled.x);
        d.response = detail::vconcat(pseudo, *data.target_labeled.y);
    }
    const CvFit f = detail::cv_fit(d, cfg.beta_penalty, cfg);
    return {f.fit.coef, label, f.fit.lambda};
}

/// Supervised fit of y on x over the target-labeled rows only.
inline OutcomeEstimate fit_beta_sup(const StudyData& data, const PipelineConfig& cfg)
{
    const GlmData d{data.target_labeled.x, *data.target_labeled.y, {}, {}};
    const CvFit f = detail::cv_fit(d, cfg.beta_penalty, cfg);
    return {f.fit.coef, Method::SUP, f.fit.lambda};
}

/// Importance-weighted pooled supervised fit of y on x.
inline OutcomeEstimate fit_beta_cs(const StudyData& data, const Vector& src_weights, const PipelineConfig& cfg)
{
    require(src_weights.size() == data.n_source(), "one importance weight per source-labeled row");
    GlmData d;
    if (data.n_source() == 0) {
        d = GlmData{data.target_labeled.x, *data.target_labeled.y, {}, {}};
    } else {
        d.design = detail::vstack(data.source_labeled.x, data.target_labeled.x);
        d.response = detail::vconcat(*data.source_labeled.y, *data.target_labeled.y);
        d.weights = detail::vconcat(src_weights, Vector::Ones(data.n_target()));
    }
    const CvFit f = detail::cv_fit(d, cfg.beta_penalty, cfg);
    return {f.fit.coef, Method::CS, f.fit.lambda};
}

struct TransGlmFit {
    OutcomeEstimate estimate;
    Vector beta_source;
    Vector delta;
    TransferDecision decision;
};

/**
 * Two-step transfer baseline on the x-only model: a source fit, an
 * offset-based correction on the target-labeled rows, and the same
 * cross-fitted gate as the imputation model. Without source rows it is SUP.
 */
inline TransGlmFit fit_beta_transglm_detail(const StudyData& data, const PipelineConfig& cfg, double epsilon0,
                                            std::uint64_t split_seed)
{
    TransGlmFit out;
    const OutcomeEstimate sup = fit_beta_sup(data, cfg);
    if (data.n_source() == 0) {
        out.estimate = sup;
        out.estimate.method = Method::TransGLM;
        out.beta_source = Vector::Zero(data.p());
        out.delta = Vector::Zero(data.p());
        return out;
    }
    const GlmData src{data.source_labeled.x, *data.source_labeled.y, {}, {}};
    const CvFit fs = detail::cv_fit(src, cfg.beta_penalty, cfg);
    out.beta_source = fs.fit.coef;

    auto correction = [&](const Matrix& x, const Vector& y) {
        const GlmData d{x, y, {}, x * out.beta_source};
        return detail::cv_fit(d, cfg.delta_penalty, cfg).fit;
    };
    const Matrix& x = data.target_labeled.x;
    const Vector& y = *data.target_labeled.y;
    const FitResult corr = correction(x, y);
    out.delta = corr.coef;

    const Index nT = data.n_target();
    if (nT < 4) throw ValidationError("TransGLM gate needs at least 4 labeled target rows");
    auto halves = detail::random_halves(nT, split_seed);
    out.decision.epsilon0 = epsilon0;
    out.decision.split_seed = split_seed;
    out.decision.halves[0] = halves[0];
    out.decision.halves[1] = halves[1];
    double lm = 0.0, lt = 0.0;
    for (int k = 0; k < 2; ++k) {
        const auto& fit_idx = halves[static_cast<std::size_t>(k)];
        const auto& ev_idx = halves[static_cast<std::size_t>(1 - k)];
        const Matrix xf = detail::take_rows(x, fit_idx), xe = detail::take_rows(x, ev_idx);
        Vector yf(static_cast<Index>(fit_idx.size())), ye(static_cast<Index>(ev_idx.size()));
        for (std::size_t r = 0; r < fit_idx.size(); ++r) yf[static_cast<Index>(r)] = y[fit_idx[r]];
        for (std::size_t r = 0; r < ev_idx.size(); ++r) ye[static_cast<Index>(r)] = y[ev_idx[r]];
        const Vector trans_k = out.beta_source + correction(xf, yf).coef;
        const Vector target_k = detail::cv_fit(GlmData{xf, yf, {}, {}}, cfg.beta_penalty, cfg).fit.coef;
        lm += detail::half_sample_loss(xe, ye, trans_k, cfg.link, nT) / 2.0;
        lt += detail::half_sample_loss(xe, ye, target_k, cfg.link, nT) / 2.0;
    }
    out.decision.loss_meta = lm;
    out.decision.loss_target = lt;
    out.decision.rho = lm <= lt - epsilon0 ? 1 : 0;
    if (out.decision.rho == 1) out.estimate = {out.beta_source + out.delta, Method::TransGLM, corr.lambda};
    else out.estimate = {sup.beta, Method::TransGLM, sup.lambda};
    return out;
}

inline OutcomeEstimate fit_beta_transglm(const StudyData& data, const PipelineConfig& cfg, double epsilon0,
                                         std::uint64_t split_seed)
{
    return fit_beta_transglm_detail(data, cfg, epsilon0, split_seed).estimate;
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/**
 * Fits the requested outcome estimators on one study. Shared components
 * (density ratio, theta fits) are computed once; STRIFLE reuses the SAS or
 * Meta outcome fit when its selected theta coincides with theirs.
 */
inline EstimatorBundle run_methods(const StudyData& data, const PipelineConfig& cfg, const std::set<Method>& methods)
{
    data.validate();
    EstimatorBundle b;
    auto want = [&](Method m) { return methods.count(m) != 0; };
    const bool need_dr = want(Method::CS) || want(Method::Meta) || want(Method::STRIFLE);
    const bool need_meta = want(Method::Meta) || want(Method::STRIFLE);
    const bool need_target = want(Method::SAS) || want(Method::STRIFLE);

    Vector w;
    if (need_dr) {
        if (data.N_source() > 0 && data.N_target() > 0) {
            b.dr = fit_density_ratio(data, cfg.dr);
            w = source_weights(data, b.dr, cfg.dr.basis);
        } else {
            b.dr.zeta = Vector::Zero(cfg.dr.basis.output_dim(data.d()));
            w = Vector::Ones(data.n_source());
        }
    }
    if (need_target) b.theta_target = fit_theta_target_only(data, cfg);
    if (need_meta) b.meta = fit_theta_meta(data, w, cfg);
    if (want(Method::STRIFLE)) {
        b.decision = estimate_rho(data, w, cfg, cfg.epsilon0, cfg.split_seed);
        b.theta_strifle = combine_strifle(b.theta_target, b.meta.meta, b.decision.rho);
    }

    if (want(Method::SUP)) b.beta[Method::SUP] = fit_beta_sup(data, cfg);
    if (want(Method::SAS)) b.beta[Method::SAS] = fit_beta_ss(data, b.theta_target.theta, cfg, Method::SAS);
    if (want(Method::Meta)) b.beta[Method::Meta] = fit_beta_ss(data, b.meta.meta.theta, cfg, Method::Meta);
    if (want(Method::STRIFLE)) {
        const Method twin = b.decision.rho == 1 ? Method::Meta : Method::SAS;
        if (auto it = b.beta.find(twin); it != b.beta.end()) {
            b.beta[Method::STRIFLE] = it->second;
            b.beta[Method::STRIFLE].method = Method::STRIFLE;
        } else {
            b.beta[Method::STRIFLE] = fit_beta_ss(data, b.theta_strifle.theta, cfg, Method::STRIFLE);
        }
    }
    if (want(Method::CS)) b.beta[Method::CS] = fit_beta_cs(data, w, cfg);
    if (want(Method::TransGLM)) b.beta[Method::TransGLM] = fit_beta_transglm(data, cfg, cfg.epsilon0, cfg.split_seed);
    return b;
}

}  // namespace strifle
