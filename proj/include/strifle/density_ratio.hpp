#pragma once

#include <strifle/glm_core.hpp>
#include <strifle/penalty.hpp>
#include <strifle/solver.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>

namespace strifle {

/// Largest |f(z)' zeta| accepted before exp() is considered an overflow.
inline constexpr double max_log_weight = 700.0;

/// Feature map f used by the working density-ratio model w(z) = exp{f(z)' zeta}.
struct BasisSpec {
    enum class Kind { identity, custom };
    Kind kind = Kind::identity;
    std::function<Matrix(const Matrix&)> map;  // custom only
    Index dim = 0;                             // custom only

    static BasisSpec identity() { return {}; }
    static BasisSpec custom(std::function<Matrix(const Matrix&)> f, Index dim) { return {Kind::custom, std::move(f), dim}; }

    Index output_dim(Index d) const { return kind == Kind::identity ? d : dim; }

    Matrix apply(const Matrix& z) const
    {
        if (kind == Kind::identity) return z;
        Matrix out = map(z);
        require(out.rows() == z.rows() && out.cols() == dim, "basis map returned the wrong shape");
        return out;
    }
};

enum class DrMethod { ridge_threshold, lasso };

inline std::string_view to_string(DrMethod m)
{
    return m == DrMethod::ridge_threshold ? "ridge_threshold" : "lasso";
}

struct DensityRatioFit {
    Vector zeta;
    DrMethod method = DrMethod::ridge_threshold;
    double loss = 0.0;
    Index support = 0;
    double lambda = 0.0;
    int iterations = 0;
};

namespace detail {

// Returns +inf instead of throwing when a linear predictor exceeds the overflow bound.
inline double dr_loss_unchecked(const Vector& zeta, const Matrix& f_source, const Vector& target_mean,
                                Vector* grad)
{
    const Vector eta = f_source * zeta;
    const double ns = static_cast<double>(std::max<Index>(f_source.rows(), 1));
    if (eta.size() && eta.maxCoeff() > max_log_weight) return std::numeric_limits<double>::infinity();
    const Vector e = eta.array().exp().matrix();
    if (grad) *grad = f_source.transpose() * e / ns - target_mean;
    return e.sum() / ns - target_mean.dot(zeta);
}

inline Vector column_mean(const Matrix& m)
{
    if (m.rows() == 0) return Vector::Zero(m.cols());
    return m.colwise().mean().transpose();
}

struct NewtonResult {
    Vector x;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
};

/**
 * Damped Newton for mean_S exp(f' zeta) - tmean' zeta + ridge ||zeta||^2.
 * Steps are accepted on the Armijo test, or, once the objective change is
 * below rounding, whenever the gradient norm decreases.
 */
inline NewtonResult newton_dr(const Matrix& f_source, const Vector& target_mean, double ridge, double grad_tol,
                              int max_iter)
{
    const Index d = f_source.cols();
    const double ns = static_cast<double>(f_source.rows());
    auto value = [&](const Vector& z, Vector* g) {
        double v = dr_loss_unchecked(z, f_source, target_mean, g);
        v += ridge * z.squaredNorm();
        if (g) *g += 2.0 * ridge * z;
        return v;
    };
    NewtonResult r;
    r.x = Vector::Zero(d);
    Vector g;
    r.value = value(r.x, &g);
    for (int it = 0; it < max_iter; ++it) {
        const double gnorm = g.lpNorm<Eigen::Infinity>();
        if (gnorm <= grad_tol) {
            r.converged = true;
            r.iterations = it;
            return r;
        }
        const Vector w = (f_source * r.x).array().exp().matrix();
        Matrix h = f_source.transpose() * (f_source.array().colwise() * w.array()).matrix() / ns;
        h.diagonal().array() += 2.0 * ridge;
        Eigen::LDLT<Matrix> ldlt(h);
        Vector dir = -ldlt.solve(g);
        if (ldlt.info() != Eigen::Success || !dir.allFinite()) dir = -g;
        const double slope = g.dot(dir);
        double step = 1.0;
        Vector xn, gn;
        for (;;) {
            xn = r.x + step * dir;
            const double vn = value(xn, &gn);
            const bool armijo = std::isfinite(vn) && vn <= r.value + 1e-4 * step * slope;
            const bool flat = std::isfinite(vn) && std::abs(vn - r.value) <= 1e-13 * (1.0 + std::abs(r.value)) &&
                              gn.lpNorm<Eigen::Infinity>() < gnorm;
            if (armijo || flat) {
                r.value = vn;
                break;
            }
            step *= 0.5;
            if (step < 1e-12) {
                r.iterations = it;
                return r;
            }
        }
        r.x = std::move(xn);
        g = std::move(gn);
        r.iterations = it + 1;
    }
    r.converged = g.lpNorm<Eigen::Infinity>() <= grad_tol;
    return r;
}

}  // namespace detail

/**
 * L(zeta) = mean_{source unlabeled} exp{f' zeta} - mean_{target unlabeled} f' zeta.
 * Throws NumericalError when any source linear predictor exceeds 700.
 */
inline double dr_loss(const Vector& zeta, const Matrix& f_source, const Matrix& f_target, Vector* grad = nullptr)
{
    require(zeta.size() == f_source.cols() && zeta.size() == f_target.cols(), "zeta dimension does not match basis");
    const double v = detail::dr_loss_unchecked(zeta, f_source, detail::column_mean(f_target), grad);
    if (!std::isfinite(v)) throw NumericalError("dr_loss: linear predictor exceeds the overflow bound");
    return v;
}

inline Vector dr_gradient(const Vector& zeta, const Matrix& f_source, const Matrix& f_target)
{
    Vector g;
    dr_loss(zeta, f_source, f_target, &g);
    return g;
}

/// w(z) = exp{f(z)' zeta} per row.
inline Vector eval_weights(const DensityRatioFit& fit, const Matrix& f_rows)
{
    require(fit.zeta.size() == f_rows.cols(), "zeta dimension does not match basis rows");
    const Vector eta = f_rows * fit.zeta;
    if (eta.size() && eta.cwiseAbs().maxCoeff() > max_log_weight)
        throw NumericalError("eval_weights: linear predictor exceeds the overflow bound");
    return eta.array().exp().matrix();
}

struct DrSolverConfig {
    double grad_tol = 1e-10;
    int max_iter = 200;
};

/// Hard-threshold cutoff c sqrt(log d / (N_S + N_T)).
inline double dr_threshold_cutoff(double cutoff_const, Index d, Index N_source, Index N_target)
{
    return cutoff_const * std::sqrt(std::log(static_cast<double>(d)) / static_cast<double>(N_source + N_target));
}

/**
 * Ridge-stabilized fit of the exponential-tilt loss followed by hard
 * thresholding of every |zeta_j| below the cutoff.
 */
inline DensityRatioFit fit_dr_ridge_threshold(const Matrix& f_source, const Matrix& f_target, double ridge_lambda = 1e-5,
                                              double cutoff_const = 10.0, const DrSolverConfig& cfg = {})
{
    require(f_source.rows() >= 1 && f_target.rows() >= 1, "density ratio fit needs N_S >= 1 and N_T >= 1");
    require(f_source.cols() == f_target.cols(), "source and target bases differ in dimension");
    require(ridge_lambda >= 0.0 && cutoff_const >= 0.0, "ridge lambda and cutoff constant must be nonnegative");
    const Vector tmean = detail::column_mean(f_target);
    auto opt = detail::newton_dr(f_source, tmean, ridge_lambda, cfg.grad_tol, cfg.max_iter);
    if (!opt.converged) throw NumericalError("fit_dr_ridge_threshold: optimizer did not converge");

    DensityRatioFit out;
    out.method = DrMethod::ridge_threshold;
    out.lambda = ridge_lambda;
    out.iterations = opt.iterations;
    out.zeta = opt.x;
    const double cut = dr_threshold_cutoff(cutoff_const, f_source.cols(), f_source.rows(), f_target.rows());
    for (Index j = 0; j < out.zeta.size(); ++j)
        if (std::abs(out.zeta[j]) < cut) out.zeta[j] = 0.0;
    out.support = (out.zeta.array() != 0.0).count();
    out.loss = detail::dr_loss_unchecked(out.zeta, f_source, tmean, nullptr);
    return out;
}

inline DensityRatioFit fit_dr_ridge_threshold(const StudyData& data, const BasisSpec& basis, double ridge_lambda = 1e-5,
                                              double cutoff_const = 10.0, const DrSolverConfig& cfg = {})
{
    return fit_dr_ridge_threshold(basis.apply(data.source_unlabeled.z()), basis.apply(data.target_unlabeled.z()),
                                  ridge_lambda, cutoff_const, cfg);
}

namespace detail {

/**
 * Pooled single-sum form of the L1 problem over all unlabeled rows:
 * (1/N) sum_i [ (N/N_S) R_i exp(f_i' zeta) + (R_i - 1)(N/N_T) f_i' zeta ],
 * with R_i = 1 for source rows.
 */
struct PooledDrObjective {
    Matrix f;       // all unlabeled rows, source first
    Vector is_src;  // R_i
    double N = 0, Ns = 0, Nt = 0;

    PooledDrObjective(const Matrix& fs, const Matrix& ft)
        : f(fs.rows() + ft.rows(), fs.cols()), is_src(fs.rows() + ft.rows()),
          N(static_cast<double>(fs.rows() + ft.rows())), Ns(static_cast<double>(fs.rows())),
          Nt(static_cast<double>(ft.rows()))
    {
        f.topRows(fs.rows()) = fs;
        f.bottomRows(ft.rows()) = ft;
        is_src.head(fs.rows()).setOnes();
        is_src.tail(ft.rows()).setZero();
    }

    double operator()(const Vector& zeta, Vector* grad) const
    {
        const Vector eta = f * zeta;
        Vector r(eta.size());
        double acc = 0.0;
        for (Index i = 0; i < eta.size(); ++i) {
            if (is_src[i] != 0.0) {
                if (eta[i] > max_log_weight) return std::numeric_limits<double>::infinity();
                const double e = (N / Ns) * std::exp(eta[i]);
                acc += e;
                r[i] = e;
            } else {
                acc -= (N / Nt) * eta[i];
                r[i] = -(N / Nt);
            }
        }
        if (grad) *grad = f.transpose() * r / N;
        return acc / N;
    }
};

inline DensityRatioFit prox_gradient_dr(const PooledDrObjective& obj, const PenaltySpec& pen, Vector x,
                                        const FitConfig& cfg)
{
    Vector g;
    double fval = obj(x, &g);
    if (!std::isfinite(fval)) throw NumericalError("fit_dr_lasso: non-finite loss at the starting point");
    double F = fval + penalty_value(x, pen);
    double t = cfg.step0;
    DensityRatioFit out;
    out.method = DrMethod::lasso;
    out.lambda = pen.lambda;
    bool converged = false;
    for (int it = 1; it <= cfg.max_iter; ++it) {
        Vector xn, gn, d;
        double fn = 0.0, Fn = 0.0;
        for (;;) {
            xn = prox_step(x - t * g, t, pen);
            d = xn - x;
            fn = obj(xn, &gn);
            if (std::isfinite(fn)) {
                Fn = fn + penalty_value(xn, pen);
                const double slack = 1e-12 * (1.0 + std::abs(F));
                if (fn <= fval + g.dot(d) + d.squaredNorm() / (2.0 * t) + slack) break;
            }
            t *= cfg.backtrack;
            if (t < 1e-30) throw NumericalError("fit_dr_lasso: step size underflow");
        }
        const double change = std::abs(F - Fn);
        const double sy = d.dot(gn - g);
        x = std::move(xn);
        g = std::move(gn);
        fval = fn;
        F = Fn;
        out.iterations = it;
        if (change <= cfg.tol * (1.0 + std::abs(F))) {
            const double r = (x - prox_step(x - g, 1.0, pen)).norm();
            if (r < 10.0 * cfg.tol * (1.0 + x.norm()) || d.squaredNorm() == 0.0) {
                converged = true;
                break;
            }
        }
        const double ss = d.squaredNorm();
        t = (sy > 0.0 && ss > 0.0) ? ss / sy : std::min(2.0 * t, 1e12);
        t = std::clamp(t, 1e-12, 1e12);
    }
    if (!converged) throw NumericalError("fit_dr_lasso: did not converge");
    out.zeta = std::move(x);
    out.loss = fval;
    out.support = (out.zeta.array() != 0.0).count();
    return out;
}

}  // namespace detail

struct DrLassoOptions {
    std::optional<double> lambda;  // unset: 5-fold CV over a lambda_max-anchored grid
    int folds = 5;
    std::uint64_t seed = 0;
    GridOptions grid{};
    FitConfig solver{};
    bool penalize_intercept = false;  // coordinate 0 of f is the constant term for the identity basis
};

/// Rate-based default sqrt(log d / N_S).
inline double dr_lasso_default_lambda(Index d, Index N_source)
{
    return std::sqrt(std::log(static_cast<double>(std::max<Index>(d, 2))) / static_cast<double>(N_source));
}

/**
 * L1-penalized exponential-tilt fit, solved on the pooled indicator-weighted
 * form. Without an explicit lambda, lambda is chosen by K-fold CV on the
 * unpenalized held-out loss, splitting source and target rows separately.
 */
inline DensityRatioFit fit_dr_lasso(const Matrix& f_source, const Matrix& f_target, const DrLassoOptions& opts = {})
{
    require(f_source.rows() >= 1 && f_target.rows() >= 1, "density ratio fit needs N_S >= 1 and N_T >= 1");
    require(f_source.cols() == f_target.cols(), "source and target bases differ in dimension");
    const Index d = f_source.cols();
    PenaltySpec pen = PenaltySpec::lasso(0.0);
    if (!opts.penalize_intercept) pen.mask = intercept_mask(d);

    auto solve = [&](const Matrix& fs, const Matrix& ft, double lambda, const Vector& start) {
        const detail::PooledDrObjective obj(fs, ft);
        return detail::prox_gradient_dr(obj, pen.with_lambda(lambda), start, opts.solver);
    };

    if (opts.lambda) return solve(f_source, f_target, *opts.lambda, Vector::Zero(d));

    // lambda_max from the gradient at the null (unpenalized-only) model
    const detail::PooledDrObjective full(f_source, f_target);
    const double huge = std::numeric_limits<double>::max() / 1e12;
    const DensityRatioFit null = detail::prox_gradient_dr(full, pen.with_lambda(huge), Vector::Zero(d), opts.solver);
    Vector g;
    full(null.zeta, &g);
    double lmax = 0.0;
    for (Index j = 0; j < d; ++j)
        if (pen.penalized(j)) lmax = std::max(lmax, std::abs(g[j]));
    const std::vector<double> grid = lambda_grid(lmax, opts.grid);

    require(opts.folds >= 2, "cross-validation needs at least two folds");
    require(f_source.rows() >= opts.folds && f_target.rows() >= opts.folds, "fewer unlabeled rows than folds");
    const auto fold_s = fold_assignment(f_source.rows(), opts.folds, opts.seed);
    const auto fold_t = fold_assignment(f_target.rows(), opts.folds, opts.seed + 1);
    auto rows_where = [](const Matrix& m, const std::vector<int>& fold, int k, bool in) {
        std::vector<Index> idx;
        for (Index i = 0; i < m.rows(); ++i)
            if ((fold[static_cast<std::size_t>(i)] == k) == in) idx.push_back(i);
        Matrix out(static_cast<Index>(idx.size()), m.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Index>(r)) = m.row(idx[r]);
        return out;
    };
    Vector curve = Vector::Zero(static_cast<Index>(grid.size()));
    for (int k = 0; k < opts.folds; ++k) {
        const Matrix fs_tr = rows_where(f_source, fold_s, k, false), fs_te = rows_where(f_source, fold_s, k, true);
        const Matrix ft_tr = rows_where(f_target, fold_t, k, false), ft_te = rows_where(f_target, fold_t, k, true);
        const Vector tmean_te = detail::column_mean(ft_te);
        Vector start = Vector::Zero(d);
        for (std::size_t gi = 0; gi < grid.size(); ++gi) {
            const DensityRatioFit f = solve(fs_tr, ft_tr, grid[gi], start);
            start = f.zeta;
            const double l = detail::dr_loss_unchecked(f.zeta, fs_te, tmean_te, nullptr);
            curve[static_cast<Index>(gi)] += (std::isfinite(l) ? l : std::numeric_limits<double>::max() / 16) / opts.folds;
        }
    }
    std::size_t best = 0;
    for (std::size_t gi = 1; gi < grid.size(); ++gi)
        if (curve[static_cast<Index>(gi)] <= curve[static_cast<Index>(best)]) best = gi;
    Vector start = Vector::Zero(d);
    DensityRatioFit out;
    for (std::size_t gi = 0; gi <= best; ++gi) {
        out = solve(f_source, f_target, grid[gi], start);
        start = out.zeta;
    }
    return out;
}

inline DensityRatioFit fit_dr_lasso(const StudyData& data, const BasisSpec& basis, const DrLassoOptions& opts = {})
{
    return fit_dr_lasso(basis.apply(data.source_unlabeled.z()), basis.apply(data.target_unlabeled.z()), opts);
}

}  // namespace strifle
