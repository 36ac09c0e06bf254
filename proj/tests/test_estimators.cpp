#include <strifle/estimators.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace strifle;

namespace {

struct StudySpec {
    Index nT = 60, NT = 300, nS = 200, NS = 300, p = 6, q = 3;
    double source_shift = 0.0;
    bool identity = false;
};

ObservationBlock draw_block(Population pop, bool labeled, Index n, const StudySpec& sp, std::mt19937_64& rng)
{
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ObservationBlock b = make_block(pop, labeled, sp.p, sp.q);
    const double shift = pop == Population::source ? sp.source_shift : 0.0;
    b.x.resize(n, sp.p);
    b.s.resize(n, sp.q);
    for (Index i = 0; i < n; ++i) {
        b.x(i, 0) = 1.0;
        for (Index j = 1; j < sp.p; ++j) b.x(i, j) = nd(rng) + shift;
        for (Index j = 0; j < sp.q; ++j) b.s(i, j) = nd(rng) + (j == 0 && sp.p > 1 ? b.x(i, 1) : 0.0);
    }
    if (labeled) {
        Vector y(n);
        for (Index i = 0; i < n; ++i) {
            double eta = 0.2 + (sp.p > 2 ? b.x(i, 1) - b.x(i, 2) : 0.0) + (sp.q > 0 ? 1.5 * b.s(i, 0) : 0.0);
            y[i] = sp.identity ? eta + nd(rng) : (u(rng) < expit(eta) ? 1.0 : 0.0);
        }
        b.y = std::move(y);
    }
    return b;
}

StudyData make_study(const StudySpec& sp, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    StudyData d;
    d.target_labeled = draw_block(Population::target, true, sp.nT, sp, rng);
    d.target_unlabeled = draw_block(Population::target, false, sp.NT, sp, rng);
    d.source_labeled = draw_block(Population::source, true, sp.nS, sp, rng);
    d.source_unlabeled = draw_block(Population::source, false, sp.NS, sp, rng);
    d.validate();
    return d;
}

PipelineConfig identity_cfg(double lambda)
{
    PipelineConfig c;
    c.link = identity_link;
    c.fixed_lambda = lambda;
    c.solver.tol = 1e-14;
    c.solver.max_iter = 200000;
    return c;
}

Vector wls(const Matrix& z, const Vector& y, const Vector& w)
{
    const Matrix zw = z.transpose() * w.asDiagonal();
    return (zw * z).ldlt().solve(zw * y);
}

double max_abs_diff(const Vector& a, const Vector& b)
{
    EXPECT_EQ(a.size(), b.size());
    return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace

TEST(ThetaTargetOnly, IdentityLinkIsLeastSquares)
{
    StudySpec sp;
    sp.q = 0;
    sp.identity = true;
    const StudyData d = make_study(sp, 1);
    const ImputationEstimate t = fit_theta_target_only(d, identity_cfg(0.0));
    const Matrix z = d.target_labeled.z();
    EXPECT_LT(max_abs_diff(t.theta, wls(z, *d.target_labeled.y, Vector::Ones(z.rows()))), 1e-8);
}

TEST(ThetaTargetOnly, HugeLambdaLeavesIntercept)
{
    const StudyData d = make_study({}, 2);
    PipelineConfig c;
    c.fixed_lambda = 1e6;
    const ImputationEstimate t = fit_theta_target_only(d, c);
    EXPECT_EQ(t.theta.tail(d.d() - 1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ThetaTargetOnly, Deterministic)
{
    const StudyData d = make_study({}, 3);
    const PipelineConfig c;
    EXPECT_EQ(fit_theta_target_only(d, c).theta, fit_theta_target_only(d, c).theta);
}

TEST(ThetaPooled, TinyWeightedLeastSquares)
{
    StudySpec sp;
    sp.nT = 3, sp.nS = 3, sp.p = 2, sp.q = 1, sp.identity = true;
    const StudyData d = make_study(sp, 4);
    Vector w(3);
    w << 0.5, 2.0, 1.3;
    const ImputationEstimate t = fit_theta_pooled(d, w, identity_cfg(0.0));
    const Matrix z = detail::vstack(d.source_labeled.z(), d.target_labeled.z());
    const Vector y = detail::vconcat(*d.source_labeled.y, *d.target_labeled.y);
    EXPECT_LT(max_abs_diff(t.theta, wls(z, y, detail::vconcat(w, Vector::Ones(3)))), 1e-8);
}

TEST(ThetaPooled, UnitWeightsEqualUnweightedPooledFit)
{
    const StudyData d = make_study({}, 5);
    const PipelineConfig c;
    DensityRatioFit zero;
    zero.zeta = Vector::Zero(d.d());
    const ImputationEstimate pooled = fit_theta_pooled(d, zero, c);
    const GlmData unweighted{detail::vstack(d.source_labeled.z(), d.target_labeled.z()),
                             detail::vconcat(*d.source_labeled.y, *d.target_labeled.y), {}, {}};
    const CvFit ref = detail::cv_fit(unweighted, c.theta_penalty, c);
    EXPECT_LT(max_abs_diff(pooled.theta, ref.fit.coef), 1e-10);
}

TEST(ThetaPooled, NoSourceRowsIsTargetOnly)
{
    StudySpec sp;
    sp.nS = 0;
    const StudyData d = make_study(sp, 6);
    const PipelineConfig c;
    EXPECT_LT(max_abs_diff(fit_theta_pooled(d, Vector(0), c).theta, fit_theta_target_only(d, c).theta), 1e-10);
}

TEST(ThetaPooled, RejectsBadWeights)
{
    const StudyData d = make_study({}, 7);
    EXPECT_THROW(fit_theta_pooled(d, Vector::Ones(3), PipelineConfig{}), ValidationError);
    Vector w = Vector::Ones(d.n_source());
    w[0] = -1.0;
    EXPECT_THROW(fit_theta_pooled(d, w, PipelineConfig{}), NumericalError);
}

TEST(Delta, ZeroThetaTildeIsTargetOnly)
{
    const StudyData d = make_study({}, 8);
    const PipelineConfig c;
    EXPECT_LT(max_abs_diff(fit_delta(d, Vector::Zero(d.d()), c).delta, fit_theta_target_only(d, c).theta), 1e-10);
}

TEST(Delta, IdentityLinkIsResidualRegression)
{
    StudySpec sp;
    sp.identity = true;
    const StudyData d = make_study(sp, 9);
    Vector tilde = Vector::LinSpaced(d.d(), -0.5, 0.5);
    const Matrix z = d.target_labeled.z();
    const Vector resid = *d.target_labeled.y - z * tilde;
    const DeltaFit f = fit_delta(d, tilde, identity_cfg(0.0));
    EXPECT_LT(max_abs_diff(f.delta, wls(z, resid, Vector::Ones(z.rows()))), 1e-8);
}

TEST(Delta, OptimalThetaTildeGivesZeroCorrection)
{
    const StudyData d = make_study({}, 10);
    PipelineConfig c;
    c.fixed_lambda = 0.0;
    c.solver.tol = 1e-14;
    c.solver.max_iter = 200000;
    const Vector opt = fit_theta_target_only(d, c).theta;
    c.fixed_lambda = 10.0;
    const DeltaFit f = fit_delta(d, opt, c);
    EXPECT_LT(f.delta.cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(f.delta.tail(d.d() - 1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Rho, EqualLossesWithZeroMarginTransfer)
{
    StudySpec sp;
    sp.nS = 0;
    const StudyData d = make_study(sp, 11);
    const PipelineConfig c;
    const TransferDecision a = estimate_rho(d, Vector(0), c, 0.0, 5);
    EXPECT_EQ(a.loss_meta, a.loss_target);
    EXPECT_EQ(a.rho, 1);
    EXPECT_EQ(estimate_rho(d, Vector(0), c, 0.01, 5).rho, 0);
}

TEST(Rho, HalvesAreDisjointAndBalanced)
{
    StudySpec sp;
    sp.nT = 61;
    const StudyData d = make_study(sp, 12);
    const TransferDecision dec = estimate_rho(d, Vector::Ones(d.n_source()), PipelineConfig{}, 0.0, 9);
    EXPECT_EQ(dec.halves[0].size(), 30u);
    EXPECT_EQ(dec.halves[1].size(), 31u);
    std::vector<int> seen(61, 0);
    for (const auto& h : dec.halves)
        for (Index i : h) ++seen[static_cast<std::size_t>(i)];
    for (int s : seen) EXPECT_EQ(s, 1);
    EXPECT_THROW(estimate_rho(d, Vector::Ones(d.n_source()), PipelineConfig{}, -1.0, 9), ValidationError);
}

TEST(Strifle, SelectsOneOfTheComponents)
{
    ImputationEstimate t, m;
    t.theta = Vector::Constant(3, 1.0);
    m.theta = Vector::Constant(3, 2.0);
    EXPECT_EQ(combine_strifle(t, m, 1).theta, m.theta);
    EXPECT_EQ(combine_strifle(t, m, 0).theta, t.theta);
    EXPECT_EQ(*combine_strifle(t, m, 0).rho, 0);

    const StudyData d = make_study({}, 13);
    const StrifleThetaFit f = fit_theta_strifle(d, Vector::Ones(d.n_source()), PipelineConfig{});
    const Vector& expect = f.decision.rho == 1 ? f.meta.meta.theta : f.theta_target.theta;
    EXPECT_EQ(f.theta_strifle.theta, expect);
}

TEST(BetaSemiSupervised, NoUnlabeledRowsIsSupervised)
{
    StudySpec sp;
    sp.NT = 0;
    const StudyData d = make_study(sp, 14);
    const PipelineConfig c;
    const Vector theta = Vector::Constant(d.d(), 0.1);
    EXPECT_LT(max_abs_diff(fit_beta_ss(d, theta, c).beta, fit_beta_sup(d, c).beta), 1e-10);
}

TEST(BetaSemiSupervised, NoiselessLinearPseudoResponses)
{
    StudySpec sp;
    sp.NT = 2000;
    sp.identity = true;
    StudyData d = make_study(sp, 15);
    Vector beta_star(sp.p);
    beta_star << 0.3, 1.0, -0.5, 0.0, 0.25, 0.0;
    *d.target_labeled.y = d.target_labeled.x * beta_star;
    Vector theta = Vector::Zero(d.d());
    theta.head(sp.p) = beta_star;
    const OutcomeEstimate b = fit_beta_ss(d, theta, identity_cfg(0.0));
    EXPECT_LT(max_abs_diff(b.beta, beta_star), 1e-8);
}

TEST(BetaSup, InterceptOnlyIsLogOdds)
{
    StudySpec sp;
    sp.p = 1;
    sp.q = 0;
    sp.nT = 80;
    const StudyData d = make_study(sp, 16);
    PipelineConfig c;
    c.fixed_lambda = 0.0;
    c.solver.tol = 1e-14;
    const double ybar = d.target_labeled.y->mean();
    EXPECT_NEAR(fit_beta_sup(d, c).beta[0], std::log(ybar / (1 - ybar)), 1e-7);
}

TEST(BetaSup, IgnoresOtherBlocks)
{
    StudyData d = make_study({}, 17);
    const PipelineConfig c;
    const Vector before = fit_beta_sup(d, c).beta;
    d.source_labeled.x.array() += 3.0;
    (*d.source_labeled.y).setZero();
    d.target_unlabeled.s.array() *= -2.0;
    d.source_unlabeled.x.setRandom();
    EXPECT_EQ(fit_beta_sup(d, c).beta, before);
}

TEST(BetaCs, NoSourceIsSupAndUnitWeightsArePooled)
{
    StudySpec sp;
    sp.nS = 0;
    const StudyData d0 = make_study(sp, 18);
    const PipelineConfig c;
    EXPECT_LT(max_abs_diff(fit_beta_cs(d0, Vector(0), c).beta, fit_beta_sup(d0, c).beta), 1e-10);

    const StudyData d = make_study({}, 19);
    const GlmData unweighted{detail::vstack(d.source_labeled.x, d.target_labeled.x),
                             detail::vconcat(*d.source_labeled.y, *d.target_labeled.y), {}, {}};
    EXPECT_LT(max_abs_diff(fit_beta_cs(d, Vector::Ones(d.n_source()), c).beta,
                           detail::cv_fit(unweighted, c.beta_penalty, c).fit.coef),
              1e-10);
}

TEST(BetaCs, TinyWeightedLeastSquares)
{
    StudySpec sp;
    sp.nT = 4, sp.nS = 3, sp.p = 3, sp.q = 1, sp.identity = true;
    const StudyData d = make_study(sp, 20);
    Vector w(3);
    w << 1.5, 0.2, 0.9;
    const OutcomeEstimate b = fit_beta_cs(d, w, identity_cfg(0.0));
    const Matrix x = detail::vstack(d.source_labeled.x, d.target_labeled.x);
    const Vector y = detail::vconcat(*d.source_labeled.y, *d.target_labeled.y);
    EXPECT_LT(max_abs_diff(b.beta, wls(x, y, detail::vconcat(w, Vector::Ones(4)))), 1e-8);
}

TEST(TransGlm, NoSourceIsSupAndDeterministic)
{
    StudySpec sp;
    sp.nS = 0;
    const StudyData d0 = make_study(sp, 21);
    const PipelineConfig c;
    EXPECT_LT(max_abs_diff(fit_beta_transglm(d0, c, 0.0, 3).beta, fit_beta_sup(d0, c).beta), 1e-10);
    const StudyData d = make_study({}, 22);
    EXPECT_EQ(fit_beta_transglm(d, c, 0.0, 3).beta, fit_beta_transglm(d, c, 0.0, 3).beta);
}

TEST(TransGlm, IdenticalPopulationsNeedSmallCorrection)
{
    int small = 0;
    const int runs = 10;
    for (int run = 0; run < runs; ++run) {
        StudySpec sp;
        sp.nT = 150, sp.nS = 1200, sp.p = 11, sp.q = 0;
        const StudyData d = make_study(sp, 500 + static_cast<std::uint64_t>(run));
        PipelineConfig c;
        c.cv_seed = static_cast<std::uint64_t>(run);
        const TransGlmFit f = fit_beta_transglm_detail(d, c, 0.0, 7);
        if (f.delta.norm() < f.beta_source.norm() / 2) ++small;
    }
    EXPECT_GE(small, 9);
}

TEST(Degeneracy, NoSourceRowsCollapseTheMethods)
{
    StudySpec sp;
    sp.nS = 0;
    const StudyData d = make_study(sp, 23);
    const PipelineConfig c;
    const std::set<Method> all(std::begin(all_methods), std::end(all_methods));
    const EstimatorBundle b = run_methods(d, c, all);
    EXPECT_LT(max_abs_diff(b.meta.pooled.theta, b.theta_target.theta), 1e-10);
    EXPECT_LT(max_abs_diff(b.meta.meta.theta, b.theta_target.theta), 1e-10);
    EXPECT_EQ(b.decision.rho, 1);
    EXPECT_LT(max_abs_diff(b.theta_strifle.theta, b.theta_target.theta), 1e-10);
    EXPECT_LT(max_abs_diff(b.beta.at(Method::CS).beta, b.beta.at(Method::SUP).beta), 1e-10);
    EXPECT_LT(max_abs_diff(b.beta.at(Method::STRIFLE).beta, b.beta.at(Method::SAS).beta), 1e-10);
    EXPECT_LT(max_abs_diff(b.beta.at(Method::TransGLM).beta, b.beta.at(Method::SUP).beta), 1e-10);
}

TEST(Pipeline, RunMethodsDeterministicAndSubsetConsistent)
{
    const StudyData d = make_study({}, 24);
    const PipelineConfig c;
    const EstimatorBundle a = run_methods(d, c, {Method::SUP, Method::SAS, Method::STRIFLE});
    const EstimatorBundle b = run_methods(d, c, {Method::SUP, Method::SAS, Method::STRIFLE});
    for (const auto& [m, est] : a.beta) EXPECT_EQ(est.beta, b.beta.at(m).beta);
    const EstimatorBundle only = run_methods(d, c, {Method::SUP});
    EXPECT_EQ(only.beta.at(Method::SUP).beta, a.beta.at(Method::SUP).beta);
    EXPECT_EQ(only.beta.size(), 1u);
}

TEST(Pipeline, UnlabeledTargetRowsWithoutResponseOnly)
{
    StudyData d = make_study({}, 25);
    d.target_unlabeled.y = Vector::Zero(d.N_target());
    EXPECT_THROW(run_methods(d, PipelineConfig{}, {Method::SUP}), ValidationError);
}
