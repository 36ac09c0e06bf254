#include <strifle/solver.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace strifle;

namespace {

Matrix random_design(Index n, Index p, std::uint64_t seed, bool intercept = true)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Matrix x(n, p);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < p; ++j) x(i, j) = nd(rng);
    if (intercept) x.col(0).setOnes();
    return x;
}

Vector logistic_response(const Matrix& x, const Vector& beta, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Vector y(x.rows());
    const Vector eta = x * beta;
    for (Index i = 0; i < x.rows(); ++i) y[i] = u(rng) < expit(eta[i]) ? 1.0 : 0.0;
    return y;
}

GlmData logistic_problem(Index n, Index p, std::uint64_t seed)
{
    const Matrix x = random_design(n, p, seed);
    Vector beta = Vector::Zero(p);
    beta.head(std::min<Index>(p, 4)) << 0.3, 1.0, -1.0, 0.5;
    return {x, logistic_response(x, beta, seed + 1), {}, {}};
}

}  // namespace

TEST(FitPenalized, IdentityNoPenaltyIsLeastSquares)
{
    const Matrix x = random_design(40, 5, 1);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd(0.0, 1.0);
    Vector y(40);
    for (Index i = 0; i < 40; ++i) y[i] = nd(rng);
    FitConfig cfg;
    cfg.tol = 1e-14;
    const FitResult r = fit_penalized(GlmData{x, y, {}, {}}, identity_link, PenaltySpec::lasso(0.0), cfg);
    const Vector ols = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    EXPECT_TRUE(r.converged);
    EXPECT_LT((r.coef - ols).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FitPenalized, WeightedIdentityIsWeightedLeastSquares)
{
    const Matrix x = random_design(30, 4, 3);
    const Vector y = random_design(30, 1, 4, false).col(0);
    Vector w = (random_design(30, 1, 5, false).col(0).array().abs() + 0.1).matrix();
    FitConfig cfg;
    cfg.tol = 1e-14;
    const FitResult r = fit_penalized(GlmData{x, y, w, {}}, identity_link, PenaltySpec::lasso(0.0), cfg);
    const Matrix xtw = x.transpose() * w.asDiagonal();
    const Vector wls = (xtw * x).ldlt().solve(xtw * y);
    EXPECT_LT((r.coef - wls).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FitPenalized, LogitInterceptOnlyIsLogOdds)
{
    const Matrix x = Matrix::Ones(50, 1);
    Vector y = Vector::Zero(50);
    y.head(18).setOnes();
    FitConfig cfg;
    cfg.tol = 1e-14;
    const FitResult r = fit_penalized(GlmData{x, y, {}, {}}, logit_link, PenaltySpec::lasso(0.0), cfg);
    EXPECT_NEAR(r.coef[0], std::log(18.0 / 32.0), 1e-7);
}

TEST(FitPenalized, HugeLambdaLeavesOnlyIntercept)
{
    const GlmData d = logistic_problem(200, 6, 7);
    const FitResult r =
        fit_penalized(d, logit_link, PenaltySpec::lasso(1e6).with_mask(intercept_mask(6)), FitConfig{});
    for (Index j = 1; j < 6; ++j) EXPECT_EQ(r.coef[j], 0.0);
    const double ybar = d.response.mean();
    EXPECT_NEAR(r.coef[0], std::log(ybar / (1 - ybar)), 1e-6);
}

TEST(FitPenalized, ObjectiveTraceIsMonotone)
{
    const GlmData d = logistic_problem(300, 20, 9);
    FitConfig cfg;
    cfg.record_trace = true;
    for (const PenaltySpec& pen : {PenaltySpec::lasso(0.02), PenaltySpec::scad(0.02), PenaltySpec::mcp(0.02)}) {
        const FitResult r = fit_penalized(d, logit_link, pen.with_mask(intercept_mask(20)), cfg);
        ASSERT_FALSE(r.trace.empty());
        for (std::size_t k = 1; k < r.trace.size(); ++k)
            EXPECT_LE(r.trace[k], r.trace[k - 1] + 1e-12 * (1 + std::abs(r.trace[k - 1])));
        EXPECT_TRUE(r.converged);
    }
}

TEST(FitPenalized, StationarityAtConvergence)
{
    const GlmData d = logistic_problem(250, 15, 11);
    const FitConfig cfg;
    for (double lam : {0.1, 0.03, 0.005}) {
        const PenaltySpec pen = PenaltySpec::lasso(lam).with_mask(intercept_mask(15));
        const FitResult r = fit_penalized(d, logit_link, pen, cfg);
        ASSERT_TRUE(r.converged);
        EXPECT_LT(stationarity_residual(d, r.coef, logit_link, pen), 10 * cfg.tol * (1 + r.coef.norm()));
    }
}

TEST(FitPenalized, WeightAndLambdaRescalingInvariance)
{
    GlmData d = logistic_problem(150, 8, 13);
    const PenaltySpec pen = PenaltySpec::lasso(0.02).with_mask(intercept_mask(8));
    FitConfig cfg;
    cfg.tol = 1e-12;
    const FitResult a = fit_penalized(d, logit_link, pen, cfg);
    d.weights = Vector::Constant(150, 3.0);
    const FitResult b = fit_penalized(d, logit_link, pen.with_lambda(0.06), cfg);
    EXPECT_LT((a.coef - b.coef).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FitPenalized, L1RadiusIsEnforced)
{
    const GlmData d = logistic_problem(200, 6, 15);
    FitConfig cfg;
    cfg.l1_radius = 0.5;
    const PenaltySpec pen = PenaltySpec::lasso(0.0).with_mask(intercept_mask(6));
    const FitResult r = fit_penalized(d, logit_link, pen, cfg);
    EXPECT_LE(r.coef.tail(5).cwiseAbs().sum(), 0.5 + 1e-12);
}

TEST(FitPenalized, Errors)
{
    const GlmData d = logistic_problem(20, 3, 17);
    Vector warm(2);
    EXPECT_THROW(fit_penalized(d, logit_link, PenaltySpec::lasso(0.1), FitConfig{}, &warm), ValidationError);
    GlmData bad = d;
    bad.weights = Vector::Constant(20, -1.0);
    EXPECT_THROW(fit_penalized(bad, logit_link, PenaltySpec::lasso(0.1)), ValidationError);
    FitConfig cfg;
    cfg.backtrack = 1.5;
    EXPECT_THROW(fit_penalized(d, logit_link, PenaltySpec::lasso(0.1), cfg), ValidationError);
}

TEST(QuasiObjective, GradientMatchesFiniteDifferences)
{
    GlmData d = logistic_problem(60, 5, 19);
    d.weights = (random_design(60, 1, 20, false).col(0).array().abs() + 0.2).matrix();
    d.offset = 0.3 * random_design(60, 1, 21, false).col(0);
    Vector coef(5);
    coef << 0.1, -0.4, 0.8, 0.0, 0.3;
    for (const Link& link : {logit_link, identity_link}) {
        Vector eta, grad;
        const double f = detail::loss_and_gradient(d, coef, link, eta, grad);
        EXPECT_NEAR(f, neg_quasi_loglik(d, coef, link), 1e-14);
        for (Index j = 0; j < 5; ++j) {
            const double h = 1e-6;
            Vector a = coef, b = coef;
            a[j] += h;
            b[j] -= h;
            const double fd = (neg_quasi_loglik(d, a, link) - neg_quasi_loglik(d, b, link)) / (2 * h);
            EXPECT_NEAR(fd, grad[j], 1e-6 * std::max(1.0, std::abs(grad[j])));
        }
    }
}

TEST(LambdaGrid, ShapeAndEndpoints)
{
    const auto g = lambda_grid(2.0, GridOptions{});
    ASSERT_EQ(g.size(), 50u);
    EXPECT_DOUBLE_EQ(g.front(), 2.0);
    EXPECT_NEAR(g.back(), 0.02, 1e-15);
    for (std::size_t k = 1; k < g.size(); ++k) EXPECT_NEAR(g[k] / g[k - 1], std::pow(0.01, 1.0 / 49), 1e-12);
}

TEST(LambdaGrid, LambdaMaxZeroesPenalizedCoordinates)
{
    const GlmData d = logistic_problem(200, 10, 23);
    const PenaltySpec pen = PenaltySpec::lasso(0.0).with_mask(intercept_mask(10));
    const double lmax = lambda_max(d, logit_link, pen);
    const FitResult at = fit_penalized(d, logit_link, pen.with_lambda(lmax * 1.0001));
    EXPECT_EQ(at.coef.tail(9).cwiseAbs().maxCoeff(), 0.0);
    const FitResult below = fit_penalized(d, logit_link, pen.with_lambda(lmax * 0.9));
    EXPECT_GT(below.coef.tail(9).cwiseAbs().maxCoeff(), 0.0);
}

TEST(FitPath, WarmStartNoWorseThanColdStart)
{
    const GlmData d = logistic_problem(300, 25, 25);
    const PenaltySpec pen = PenaltySpec::lasso(0.0).with_mask(intercept_mask(25));
    const auto grid = lambda_grid(lambda_max(d, logit_link, pen), GridOptions{});
    const auto path = fit_path(d, logit_link, pen, grid, FitConfig{});
    for (std::size_t k = 0; k < grid.size(); k += 5) {
        const FitResult cold = fit_penalized(d, logit_link, pen.with_lambda(grid[k]));
        EXPECT_LE(path[k].objective, cold.objective + 1e-8);
    }
}

TEST(FitPath, ScreenedPathEqualsFullPath)
{
    const GlmData d = logistic_problem(400, 40, 27);
    const PenaltySpec pen = PenaltySpec::lasso(0.0).with_mask(intercept_mask(40));
    const auto grid = lambda_grid(lambda_max(d, logit_link, pen), GridOptions{});
    const auto path = fit_path(d, logit_link, pen, grid, FitConfig{});
    Vector start = Vector::Zero(40);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const FitResult full = fit_penalized(d, logit_link, pen.with_lambda(grid[k]), FitConfig{}, &start);
        EXPECT_LT((full.coef - path[k].coef).cwiseAbs().maxCoeff(), 1e-5) << k;
        EXPECT_NEAR(full.objective, path[k].objective, 1e-8);
        // KKT on the zero coordinates of the screened solution
        const Vector g = neg_quasi_grad(d, path[k].coef, logit_link);
        for (Index j = 1; j < 40; ++j)
            if (path[k].coef[j] == 0.0) EXPECT_LE(std::abs(g[j]), grid[k] + 1e-6);
        start = full.coef;
    }
}

TEST(CrossValidation, SingleLambdaGridReturnsIt)
{
    const GlmData d = logistic_problem(100, 5, 29);
    const std::vector<double> grid{0.05};
    const CvResult cv = cv_select_lambda(d, logit_link, PenaltySpec::lasso(0.0).with_mask(intercept_mask(5)), grid, 5, 1);
    EXPECT_EQ(cv.lambda, 0.05);
}

TEST(CrossValidation, DeterministicAndArgmin)
{
    const GlmData d = logistic_problem(150, 12, 31);
    const PenaltySpec pen = PenaltySpec::lasso(0.0).with_mask(intercept_mask(12));
    const auto grid = lambda_grid(lambda_max(d, logit_link, pen), GridOptions{});
    const CvResult a = cv_select_lambda(d, logit_link, pen, grid, 5, 99);
    const CvResult b = cv_select_lambda(d, logit_link, pen, grid, 5, 99);
    EXPECT_EQ(a.lambda, b.lambda);
    EXPECT_EQ(a.cv_curve, b.cv_curve);
    EXPECT_LE(a.cv_curve[static_cast<Index>(a.best)], a.cv_curve[a.cv_curve.size() - 1]);
    EXPECT_LE(a.cv_curve[static_cast<Index>(a.best)], a.cv_curve.minCoeff());
}

TEST(CrossValidation, NoiseResponseDoesNotOverfit)
{
    GlmData d = logistic_problem(120, 30, 33);
    d.response = logistic_response(d.design, Vector::Zero(30), 34);
    const PenaltySpec pen = PenaltySpec::lasso(0.0).with_mask(intercept_mask(30));
    const auto grid = lambda_grid(lambda_max(d, logit_link, pen), GridOptions{});
    const CvResult cv = cv_select_lambda(d, logit_link, pen, grid, 5, 3);
    EXPECT_LE(cv.cv_curve[static_cast<Index>(cv.best)], cv.cv_curve[cv.cv_curve.size() - 1]);
}

TEST(CrossValidation, TiesGoToSmallestLambda)
{
    // a constant response makes every penalized fit the intercept-only model
    GlmData d{random_design(40, 4, 35), Vector::Constant(40, 0.5), {}, {}};
    const PenaltySpec pen = PenaltySpec::lasso(0.0).with_mask(intercept_mask(4));
    const std::vector<double> grid{1.0, 0.5, 0.25};
    const CvResult cv = cv_select_lambda(d, logit_link, pen, grid, 4, 1);
    EXPECT_EQ(cv.lambda, 0.25);
}

TEST(CrossValidation, Errors)
{
    const GlmData d = logistic_problem(30, 3, 37);
    const PenaltySpec pen = PenaltySpec::lasso(0.0);
    const std::vector<double> asc{0.1, 0.2}, empty;
    EXPECT_THROW(cv_select_lambda(d, logit_link, pen, asc, 5, 1), ValidationError);
    EXPECT_THROW(cv_select_lambda(d, logit_link, pen, empty, 5, 1), ValidationError);
    const std::vector<double> one{0.1};
    EXPECT_THROW(cv_select_lambda(d, logit_link, pen, one, 1, 1), ValidationError);
}

TEST(CrossValidation, FoldAssignmentBalancedAndSeeded)
{
    const auto a = fold_assignment(103, 5, 7), b = fold_assignment(103, 5, 7), c = fold_assignment(103, 5, 8);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    std::vector<int> counts(5, 0);
    for (int f : a) ++counts[static_cast<std::size_t>(f)];
    for (int k : counts) EXPECT_TRUE(k == 20 || k == 21);
}
