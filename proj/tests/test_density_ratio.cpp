#include <strifle/density_ratio.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace strifle;

namespace {

Matrix gaussian(Index n, Index d, std::uint64_t seed, double shift = 0.0, bool intercept = false)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(shift, 1.0);
    Matrix m(n, d);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < d; ++j) m(i, j) = nd(rng);
    if (intercept) m.col(0).setOnes();
    return m;
}

}  // namespace

TEST(DrLoss, ZeroZetaGivesOne)
{
    const Matrix fs = gaussian(50, 4, 1), ft = gaussian(70, 4, 2);
    EXPECT_DOUBLE_EQ(dr_loss(Vector::Zero(4), fs, ft), 1.0);
}

TEST(DrLoss, ScalarCase)
{
    const Matrix one = Matrix::Ones(1, 1);
    for (double t : {-2.0, -0.3, 0.0, 0.7, 3.0}) {
        Vector z(1);
        z << t;
        EXPECT_NEAR(dr_loss(z, one, one), std::exp(t) - t, 1e-15);
    }
    const DensityRatioFit fit = fit_dr_ridge_threshold(one, one, 0.0, 0.0);
    EXPECT_NEAR(fit.zeta[0], 0.0, 1e-10);
}

TEST(DrLoss, GradientMatchesFiniteDifferences)
{
    const Matrix fs = gaussian(200, 6, 3), ft = gaussian(150, 6, 4, 0.3);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (int rep = 0; rep < 10; ++rep) {
        Vector zeta(6);
        for (Index j = 0; j < 6; ++j) zeta[j] = nd(rng);
        const Vector g = dr_gradient(zeta, fs, ft);
        for (Index j = 0; j < 6; ++j) {
            const double h = 1e-6 * std::max(1.0, std::abs(zeta[j]));
            Vector a = zeta, b = zeta;
            a[j] += h;
            b[j] -= h;
            const double fd = (dr_loss(a, fs, ft) - dr_loss(b, fs, ft)) / (2 * h);
            EXPECT_NEAR(fd, g[j], 1e-6 * std::max(1.0, std::abs(g[j])));
        }
    }
}

TEST(DrLoss, MidpointConvexity)
{
    const Matrix fs = gaussian(100, 5, 6), ft = gaussian(100, 5, 7, -0.2);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int rep = 0; rep < 200; ++rep) {
        Vector a(5), b(5);
        for (Index j = 0; j < 5; ++j) a[j] = nd(rng), b[j] = nd(rng);
        EXPECT_LE(dr_loss(0.5 * (a + b), fs, ft), 0.5 * (dr_loss(a, fs, ft) + dr_loss(b, fs, ft)) + 1e-10);
    }
}

TEST(DrLoss, OverflowIsAnError)
{
    const Matrix one = Matrix::Ones(1, 1);
    Vector z(1);
    z << 701.0;
    EXPECT_THROW(dr_loss(z, one, one), NumericalError);
    EXPECT_THROW(dr_loss(Vector::Zero(2), one, one), ValidationError);
}

TEST(DrRidgeThreshold, MomentMatchingFirstOrderCondition)
{
    const Matrix fs = gaussian(3000, 5, 9, 0.0, true), ft = gaussian(2000, 5, 10, 0.25, true);
    const DensityRatioFit fit = fit_dr_ridge_threshold(fs, ft, 0.0, 0.0);
    const Vector w = eval_weights(fit, fs);
    const Vector weighted_src = fs.transpose() * w / static_cast<double>(fs.rows());
    const Vector tmean = ft.colwise().mean().transpose();
    EXPECT_LT((weighted_src - tmean).lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(DrRidgeThreshold, IdenticalDistributionsThresholdToZero)
{
    int all_zero = 0;
    for (int run = 0; run < 100; ++run) {
        const Matrix fs = gaussian(10000, 20, 1000 + 2 * run), ft = gaussian(10000, 20, 1001 + 2 * run);
        const DensityRatioFit fit = fit_dr_ridge_threshold(fs, ft);
        if (fit.support == 0) ++all_zero;
    }
    EXPECT_GE(all_zero, 95);
}

TEST(DrRidgeThreshold, ZeroCutoffKeepsEveryEntry)
{
    const Matrix fs = gaussian(500, 4, 11, 0.0, true), ft = gaussian(500, 4, 12, 0.1, true);
    const DensityRatioFit fit = fit_dr_ridge_threshold(fs, ft, 1e-5, 0.0);
    EXPECT_EQ(fit.support, 4);
    const DensityRatioFit cut = fit_dr_ridge_threshold(fs, ft, 1e-5, 10.0);
    for (Index j = 0; j < 4; ++j)
        if (cut.zeta[j] != 0.0) EXPECT_DOUBLE_EQ(cut.zeta[j], fit.zeta[j]);
}

TEST(DrRidgeThreshold, LargeRidgeShrinksToZero)
{
    const Matrix fs = gaussian(500, 4, 13), ft = gaussian(500, 4, 14, 1.0);
    const DensityRatioFit fit = fit_dr_ridge_threshold(fs, ft, 1e8, 0.0);
    EXPECT_LT(fit.zeta.lpNorm<Eigen::Infinity>(), 1e-7);
}

TEST(DrRidgeThreshold, CutoffUsesNaturalLog)
{
    EXPECT_NEAR(dr_threshold_cutoff(10.0, 180, 11200, 10150), 10.0 * std::sqrt(std::log(180.0) / 21350.0), 1e-15);
}

TEST(DrRidgeThreshold, Errors)
{
    const Matrix empty(0, 3), fs = gaussian(10, 3, 15);
    EXPECT_THROW(fit_dr_ridge_threshold(empty, fs), ValidationError);
    EXPECT_THROW(fit_dr_ridge_threshold(fs, empty), ValidationError);
    EXPECT_THROW(fit_dr_ridge_threshold(fs, gaussian(10, 2, 16)), ValidationError);
}

TEST(DrLasso, HugeLambdaGivesZeroSlopes)
{
    const Matrix fs = gaussian(400, 4, 17, 0.0, true), ft = gaussian(400, 4, 18, 0.5, true);
    DrLassoOptions opts;
    opts.lambda = 1e6;
    const DensityRatioFit fit = fit_dr_lasso(fs, ft, opts);
    EXPECT_EQ(fit.zeta.tail(3).cwiseAbs().maxCoeff(), 0.0);
    opts.penalize_intercept = true;
    EXPECT_EQ(fit_dr_lasso(fs, ft, opts).zeta.cwiseAbs().maxCoeff(), 0.0);
}

TEST(DrLasso, IdenticalDistributionsNearZero)
{
    int small = 0;
    const int runs = 20;
    for (int run = 0; run < runs; ++run) {
        const Matrix fs = gaussian(5000, 5, 3000 + 2 * run, 0.0, true);
        const Matrix ft = gaussian(5000, 5, 3001 + 2 * run, 0.0, true);
        DrLassoOptions opts;
        opts.seed = static_cast<std::uint64_t>(run);
        if (fit_dr_lasso(fs, ft, opts).zeta.norm() < 0.1) ++small;
    }
    EXPECT_GE(small, 19);
}

TEST(DrLasso, GaussianShiftSlope)
{
    // source N(0,1), target N(0.5,1): log density ratio is -0.125 + 0.5 z
    const Matrix fs = gaussian(20000, 2, 19, 0.0, true), ft = gaussian(20000, 2, 20, 0.5, true);
    DrLassoOptions opts;
    opts.lambda = dr_lasso_default_lambda(2, 20000);
    const DensityRatioFit fit = fit_dr_lasso(fs, ft, opts);
    EXPECT_NEAR(fit.zeta[1], 0.5, 0.1);
    EXPECT_NEAR(fit.zeta[0], -0.125, 0.1);
    opts.lambda.reset();
    EXPECT_NEAR(fit_dr_lasso(fs, ft, opts).zeta[1], 0.5, 0.1);
}

TEST(DrLasso, PooledObjectiveGradient)
{
    const Matrix fs = gaussian(80, 3, 21), ft = gaussian(120, 3, 22, 0.4);
    const detail::PooledDrObjective obj(fs, ft);
    Vector z(3);
    z << 0.2, -0.1, 0.3;
    Vector g;
    const double f = obj(z, &g);
    EXPECT_NEAR(f, dr_loss(z, fs, ft), 1e-12);
    for (Index j = 0; j < 3; ++j) {
        Vector a = z, b = z;
        a[j] += 1e-6;
        b[j] -= 1e-6;
        EXPECT_NEAR((obj(a, nullptr) - obj(b, nullptr)) / 2e-6, g[j], 1e-6 * std::max(1.0, std::abs(g[j])));
    }
}

TEST(EvalWeights, Examples)
{
    DensityRatioFit fit;
    fit.zeta = Vector::Zero(3);
    EXPECT_TRUE((eval_weights(fit, gaussian(5, 3, 23)).array() == 1.0).all());
    fit.zeta = Vector(2);
    fit.zeta << std::log(2.0), 5.0;
    Matrix row(1, 2);
    row << 1.0, 0.0;
    EXPECT_NEAR(eval_weights(fit, row)[0], 2.0, 1e-15);
}

TEST(EvalWeights, FiniteOnHeldOutRowsAndOverflowGuard)
{
    const Matrix fs = gaussian(2000, 4, 24, 0.0, true), ft = gaussian(2000, 4, 25, 0.3, true);
    const DensityRatioFit fit = fit_dr_ridge_threshold(fs, ft);
    const Vector w = eval_weights(fit, gaussian(500, 4, 26, 0.0, true));
    EXPECT_TRUE(w.allFinite());
    EXPECT_GT(w.minCoeff(), 0.0);
    EXPECT_LT(w.maxCoeff(), std::exp(700.0));
    DensityRatioFit big;
    big.zeta = Vector::Constant(1, 800.0);
    EXPECT_THROW(eval_weights(big, Matrix::Ones(1, 1)), NumericalError);
    EXPECT_THROW(eval_weights(big, Matrix::Ones(1, 2)), ValidationError);
}
