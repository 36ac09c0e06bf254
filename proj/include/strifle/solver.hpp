#pragma once

#include <strifle/glm_core.hpp>
#include <strifle/penalty.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace strifle {

struct FitConfig {
    double tol = 1e-8;
    int max_iter = 10000;
    double step0 = 1.0;
    double backtrack = 0.5;
    std::optional<double> l1_radius;
    bool record_trace = false;

    void validate() const
    {
        require(tol > 0.0, "FitConfig.tol must be positive");
        require(max_iter >= 1, "FitConfig.max_iter must be at least 1");
        require(step0 > 0.0, "FitConfig.step0 must be positive");
        require(backtrack > 0.0 && backtrack < 1.0, "FitConfig.backtrack must lie in (0, 1)");
        if (l1_radius) require(*l1_radius > 0.0, "FitConfig.l1_radius must be positive");
    }
};

struct FitResult {
    Vector coef;
    double objective = 0.0;
    int iterations = 0;
    bool converged = false;
    double lambda = 0.0;
    std::vector<double> trace;  // objective after each accepted step, if requested
};

namespace detail {

/**
 * Loss, linear predictor and gradient (1/n) X' resid in a single row-blocked
 * pass, so each block of the design is read once while it is in cache.
 */
inline double loss_and_gradient(const GlmData& data, const Vector& coef, Link link, Vector& eta, Vector& grad)
{
    constexpr Index block = 2048;
    const Index n = data.rows();
    eta.resize(n);
    grad.setZero(data.cols());
    if (n == 0) return 0.0;
    const bool logit = link.kind == LinkKind::logit;
    double acc = 0.0;
    Vector r(block);
    for (Index r0 = 0; r0 < n; r0 += block) {
        const Index m = std::min(block, n - r0);
        const auto xb = data.design.middleRows(r0, m);
        auto eb = eta.segment(r0, m);
        eb.noalias() = xb * coef;
        if (data.has_offset()) eb += data.offset.segment(r0, m);
        for (Index k = 0; k < m; ++k) {
            const Index i = r0 + k;
            const double w = data.weight(i);
            const double u = eb[k];
            const double y = data.response[i];
            if (logit) {
                const double e = std::exp(-std::abs(u));
                const double cum = (u > 0.0 ? u : 0.0) + std::log1p(e);
                const double mu = u >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
                acc += w * (cum - y * u);
                r[k] = w * (mu - y);
            } else {
                acc += w * (0.5 * u * u - y * u);
                r[k] = w * (u - y);
            }
        }
        grad.noalias() += xb.transpose() * r.head(m);
    }
    const double nn = static_cast<double>(n);
    grad /= nn;
    return acc / nn;
}

// Euclidean projection onto {x : sum_{masked} |x_j| <= radius}.
inline void project_l1(Vector& x, double radius, const PenaltySpec& spec)
{
    std::vector<double> mags;
    double total = 0.0;
    for (Index j = 0; j < x.size(); ++j)
        if (spec.penalized(j)) {
            mags.push_back(std::abs(x[j]));
            total += std::abs(x[j]);
        }
    if (total <= radius) return;
    std::sort(mags.begin(), mags.end(), std::greater<>());
    double cum = 0.0, theta = 0.0;
    for (std::size_t k = 0; k < mags.size(); ++k) {
        cum += mags[k];
        const double t = (cum - radius) / static_cast<double>(k + 1);
        if (k + 1 == mags.size() || mags[k + 1] <= t) {
            theta = t;
            break;
        }
    }
    for (Index j = 0; j < x.size(); ++j)
        if (spec.penalized(j)) x[j] = soft_threshold(x[j], theta);
}

inline double max_step(const PenaltySpec& spec)
{
    const double mu = weak_convexity(spec);
    return mu > 0.0 ? 0.99 / mu : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// Composite objective (1/n) sum_i w_i {G(eta_i) - y_i eta_i} + sum_j p_lambda(coef_j).
inline double penalized_objective(const GlmData& data, const Vector& coef, Link link, const PenaltySpec& penalty)
{
    return neg_quasi_loglik(data, coef, link) + penalty_value(coef, penalty);
}

/**
 * ||x - prox_1(x - grad f(x))||, the unit-step proximal-gradient residual.
 * Zero exactly at first-order stationary points.
 */
inline double stationarity_residual(const GlmData& data, const Vector& coef, Link link, const PenaltySpec& penalty)
{
    const Vector g = neg_quasi_grad(data, coef, link);
    return (coef - prox_step(coef - g, 1.0, penalty)).norm();
}

/**
 * Minimizes the weighted penalized negative quasi-log-likelihood by proximal
 * gradient. Step sizes start from the Barzilai-Borwein estimate and are cut
 * by `backtrack` until the quadratic upper bound holds, so the objective
 * never increases between accepted iterates.
 *
 * Converged means the relative objective change fell below `tol` and the
 * unit-step stationarity residual is below 10 tol (1 + ||coef||).
 */
inline FitResult fit_penalized(const GlmData& data, Link link, const PenaltySpec& penalty,
                               const FitConfig& config = {}, const Vector* warm = nullptr)
{
    data.validate();
    penalty.validate();
    config.validate();
    const Index dim = data.cols();
    require(penalty.mask.empty() || static_cast<Index>(penalty.mask.size()) == dim,
            "penalty mask length does not match design columns");

    FitResult res;
    res.lambda = penalty.lambda;
    Vector x = Vector::Zero(dim);
    if (warm) {
        require(warm->size() == dim, "warm start length does not match design columns");
        x = *warm;
    }
    if (config.l1_radius) detail::project_l1(x, *config.l1_radius, penalty);

    const double t_max = detail::max_step(penalty);

    Vector eta, grad;
    double f = detail::loss_and_gradient(data, x, link, eta, grad);
    double F = f + penalty_value(x, penalty);
    if (!std::isfinite(F)) throw NumericalError("fit_penalized: non-finite objective at the starting point");

    double t = std::min(config.step0, t_max);
    Vector xn(dim), etan, gradn;
    for (int iter = 1; iter <= config.max_iter; ++iter) {
        double fn = 0.0, Fn = 0.0;
        Vector d;
        for (;;) {
            xn = prox_step(x - t * grad, t, penalty);
            if (config.l1_radius) detail::project_l1(xn, *config.l1_radius, penalty);
            d = xn - x;
            fn = detail::loss_and_gradient(data, xn, link, etan, gradn);
            const double model = f + grad.dot(d) + d.squaredNorm() / (2.0 * t);
            if (std::isfinite(fn)) {
                Fn = fn + penalty_value(xn, penalty);
                const double slack = 1e-12 * (1.0 + std::abs(F));
                if (fn <= model + slack && Fn <= F + slack) break;
            }
            t *= config.backtrack;
            if (t < 1e-30) throw NumericalError("fit_penalized: step size underflow (diverging objective)");
        }

        const double change = std::abs(F - Fn);
        const double sy = d.dot(gradn - grad);
        x.swap(xn);
        eta.swap(etan);
        grad.swap(gradn);
        f = fn;
        F = Fn;
        res.iterations = iter;
        if (config.record_trace) res.trace.push_back(F);

        if (change <= config.tol * (1.0 + std::abs(F))) {
            const double r = (x - prox_step(x - grad, 1.0, penalty)).norm();
            if (r < 10.0 * config.tol * (1.0 + x.norm()) || d.squaredNorm() == 0.0) {
                res.converged = true;
                break;
            }
        }

        // Barzilai-Borwein step for the next iteration.
        const double ss = d.squaredNorm();
        if (sy > 0.0 && ss > 0.0) t = ss / sy;
        else t = std::min(t * 2.0, 1e12);
        t = std::clamp(t, 1e-12, std::min(1e12, t_max));
    }
    res.coef = std::move(x);
    res.objective = F;
    if (!std::isfinite(res.objective)) throw NumericalError("fit_penalized: non-finite objective");
    return res;
}

/// Separate-argument form.
inline FitResult fit_penalized(const Matrix& design, const Vector& response, const Vector& weights, Link link,
                               const PenaltySpec& penalty, const FitConfig& config = {},
                               const std::optional<Vector>& warm = std::nullopt)
{
    GlmData d{design, response, weights, {}};
    return fit_penalized(d, link, penalty, config, warm ? &*warm : nullptr);
}

// ---------------------------------------------------------------------------
// Lambda grid and cross-validation
// ---------------------------------------------------------------------------

/// Fit with every masked coordinate held at zero.
inline FitResult fit_null_model(const GlmData& data, Link link, const PenaltySpec& penalty, const FitConfig& config)
{
    PenaltySpec pinned = PenaltySpec::lasso(std::numeric_limits<double>::max() / 1e12).with_mask(penalty.mask);
    FitResult r = fit_penalized(data, link, pinned, config);
    r.objective = neg_quasi_loglik(data, r.coef, link);
    r.lambda = std::numeric_limits<double>::infinity();
    return r;
}

/// Smallest lambda whose penalized solution has every masked coefficient at zero.
inline double lambda_max(const GlmData& data, Link link, const PenaltySpec& penalty, const FitConfig& config = {})
{
    const FitResult null = fit_null_model(data, link, penalty, config);
    const Vector g = neg_quasi_grad(data, null.coef, link);
    double m = 0.0;
    for (Index j = 0; j < g.size(); ++j)
        if (penalty.penalized(j)) m = std::max(m, std::abs(g[j]));
    return m;
}

struct GridOptions {
    int size = 50;
    double min_ratio = 0.01;
};

/// Log-spaced descending grid from lambda_max to min_ratio * lambda_max.
inline std::vector<double> lambda_grid(double lmax, GridOptions opts = {})
{
    require(opts.size >= 1, "lambda grid needs at least one point");
    require(opts.min_ratio > 0.0 && opts.min_ratio <= 1.0, "lambda grid min_ratio must lie in (0, 1]");
    if (!(lmax > 0.0)) return {0.0};
    std::vector<double> grid(static_cast<std::size_t>(opts.size));
    if (opts.size == 1) {
        grid[0] = lmax;
        return grid;
    }
    const double lo = std::log(opts.min_ratio);
    for (int k = 0; k < opts.size; ++k)
        grid[static_cast<std::size_t>(k)] = lmax * std::exp(lo * k / (opts.size - 1));
    return grid;
}

/// Fold index per row: a seeded permutation dealt round-robin into `folds` groups.
inline std::vector<int> fold_assignment(Index rows, int folds, std::uint64_t seed)
{
    std::vector<Index> perm(static_cast<std::size_t>(rows));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> fold(static_cast<std::size_t>(rows));
    for (std::size_t k = 0; k < perm.size(); ++k)
        fold[static_cast<std::size_t>(perm[k])] = static_cast<int>(k % static_cast<std::size_t>(folds));
    return fold;
}

/// Held-out weighted loss sum_i w_i l_i / sum_i w_i.
inline double heldout_loss(const GlmData& data, const Vector& coef, Link link)
{
    const Vector eta = linear_predictor(data, coef);
    double num = 0.0, den = 0.0;
    for (Index i = 0; i < data.rows(); ++i) {
        const double w = data.weight(i);
        num += w * (link.cumulant(eta[i]) - data.response[i] * eta[i]);
        den += w;
    }
    if (!(den > 0.0)) throw ValidationError("cross-validation fold has zero total weight");
    return num / den;
}

/// Fits the path over `grid` (descending) with warm starts.
namespace detail {

inline GlmData select_columns(const GlmData& data, const std::vector<Index>& cols)
{
    GlmData sub;
    sub.design.resize(data.rows(), static_cast<Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) sub.design.col(static_cast<Index>(k)) = data.design.col(cols[k]);
    sub.response = data.response;
    sub.weights = data.weights;
    sub.offset = data.offset;
    return sub;
}

/**
 * Lasso fit at one lambda restricted to a screened column set. Columns
 * outside the set are checked against the KKT condition |grad_j| <= lambda
 * and added back until none violate it.
 */
inline FitResult fit_screened(const GlmData& data, Link link, const PenaltySpec& penalty, const FitConfig& config,
                              const Vector& start, Vector& grad, double prev_lambda)
{
    const Index dim = data.cols();
    const double lam = penalty.lambda;
    std::vector<bool> keep(static_cast<std::size_t>(dim), false);
    for (Index j = 0; j < dim; ++j)
        keep[static_cast<std::size_t>(j)] = !penalty.penalized(j) || start[j] != 0.0 ||
                                            std::abs(grad[j]) >= 2.0 * lam - prev_lambda;
    FitResult out;
    Vector coef = start;
    for (;;) {
        std::vector<Index> cols;
        std::vector<bool> mask;
        for (Index j = 0; j < dim; ++j)
            if (keep[static_cast<std::size_t>(j)]) {
                cols.push_back(j);
                mask.push_back(penalty.penalized(j));
            }
        Vector warm(static_cast<Index>(cols.size()));
        for (std::size_t k = 0; k < cols.size(); ++k) warm[static_cast<Index>(k)] = coef[cols[k]];
        const GlmData sub = select_columns(data, cols);
        FitResult r = fit_penalized(sub, link, penalty.with_mask(mask), config, &warm);
        coef.setZero(dim);
        for (std::size_t k = 0; k < cols.size(); ++k) coef[cols[k]] = r.coef[static_cast<Index>(k)];
        Vector eta;
        const double f = loss_and_gradient(data, coef, link, eta, grad);
        out.iterations += r.iterations;
        out.converged = r.converged;
        out.trace.insert(out.trace.end(), r.trace.begin(), r.trace.end());
        out.objective = f + penalty_value(coef, penalty);
        bool violated = false;
        for (Index j = 0; j < dim; ++j)
            if (!keep[static_cast<std::size_t>(j)] && std::abs(grad[j]) > lam) {
                keep[static_cast<std::size_t>(j)] = true;
                violated = true;
            }
        if (!violated) break;
    }
    out.coef = std::move(coef);
    out.lambda = lam;
    return out;
}

}  // namespace detail

/**
 * Fits a descending lambda sequence, warm-starting each fit from the
 * previous solution. Lasso paths solve each point on the strong-rule set and
 * verify the KKT conditions on the remaining columns, which yields the same
 * minimizer as a fit over all columns.
 */
inline std::vector<FitResult> fit_path(const GlmData& data, Link link, const PenaltySpec& penalty,
                                       std::span<const double> grid, const FitConfig& config,
                                       const Vector* warm = nullptr)
{
    std::vector<FitResult> path;
    path.reserve(grid.size());
    Vector start = warm ? *warm : Vector::Zero(data.cols());
    const bool screen = penalty.family == PenaltyFamily::lasso && !config.l1_radius && data.rows() > 0;
    Vector grad;
    if (screen) {
        data.validate();
        Vector eta;
        detail::loss_and_gradient(data, start, link, eta, grad);
    }
    double prev = grid.empty() ? 0.0 : grid.front();
    for (double l : grid) {
        if (screen) {
            penalty.with_lambda(l).validate();
            config.validate();
            path.push_back(detail::fit_screened(data, link, penalty.with_lambda(l), config, start, grad, prev));
        } else {
            path.push_back(fit_penalized(data, link, penalty.with_lambda(l), config, &start));
        }
        start = path.back().coef;
        prev = l;
    }
    return path;
}

struct CvResult {
    double lambda = 0.0;
    std::size_t best = 0;
    std::vector<double> grid;
    Vector cv_curve;
};

/**
 * K-fold cross-validation over a descending lambda grid. Within each fold the
 * path is fitted with warm starts from larger lambda; ties in the averaged
 * held-out loss go to the smallest lambda.
 */
inline CvResult cv_select_lambda(const GlmData& data, Link link, const PenaltySpec& penalty,
                                 std::span<const double> grid, int folds, std::uint64_t seed,
                                 const FitConfig& config = {})
{
    require(folds >= 2, "cross-validation needs at least two folds");
    require(!grid.empty(), "lambda grid is empty");
    require(std::is_sorted(grid.begin(), grid.end(), std::greater<>()), "lambda grid must be descending");
    require(data.rows() >= folds, "fewer rows than cross-validation folds");

    CvResult out;
    out.grid.assign(grid.begin(), grid.end());
    out.cv_curve = Vector::Zero(static_cast<Index>(grid.size()));
    if (grid.size() == 1) {
        out.lambda = grid[0];
        out.best = 0;
    }
    const std::vector<int> fold = fold_assignment(data.rows(), folds, seed);
    for (int k = 0; k < folds; ++k) {
        std::vector<Index> train, test;
        for (Index i = 0; i < data.rows(); ++i)
            (fold[static_cast<std::size_t>(i)] == k ? test : train).push_back(i);
        const GlmData tr = data.take(train);
        const GlmData te = data.take(test);
        const auto path = fit_path(tr, link, penalty, grid, config);
        for (std::size_t g = 0; g < grid.size(); ++g)
            out.cv_curve[static_cast<Index>(g)] += heldout_loss(te, path[g].coef, link) / folds;
    }
    std::size_t best = 0;
    for (std::size_t g = 1; g < grid.size(); ++g)
        if (out.cv_curve[static_cast<Index>(g)] <= out.cv_curve[static_cast<Index>(best)]) best = g;
    out.best = best;
    out.lambda = grid[best];
    return out;
}

struct CvFit {
    FitResult fit;
    CvResult cv;
};

/**
 * Builds the lambda_max-anchored grid, selects lambda by CV and refits on all
 * rows along the path down to the selected lambda.
 */
inline CvFit fit_cv(const GlmData& data, Link link, const PenaltySpec& penalty, int folds, std::uint64_t seed,
                    const FitConfig& config = {}, GridOptions grid_opts = {})
{
    const std::vector<double> grid = lambda_grid(lambda_max(data, link, penalty, config), grid_opts);
    CvFit out;
    out.cv = cv_select_lambda(data, link, penalty, grid, folds, seed, config);
    const std::span<const double> prefix(grid.data(), out.cv.best + 1);
    auto path = fit_path(data, link, penalty, prefix, config);
    out.fit = std::move(path.back());
    return out;
}

}  // namespace strifle
