#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace strifle {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Bad input: wrong shapes, invalid parameters, malformed configuration.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A computation produced something non-finite or failed to converge.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what)
{
    if (!ok) throw ValidationError(what);
}

// log(1 + e^u) without overflow for large |u|.
inline double log1p_exp(double u)
{
    return u > 0.0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
}

inline double expit(double u)
{
    if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
    const double e = std::exp(u);
    return e / (1.0 + e);
}

enum class LinkKind { identity, logit };

inline std::string_view to_string(LinkKind k)
{
    return k == LinkKind::identity ? "identity" : "logit";
}

inline LinkKind parse_link(std::string_view name)
{
    if (name == "identity") return LinkKind::identity;
    if (name == "logit") return LinkKind::logit;
    throw ValidationError("unknown link '" + std::string(name) + "'");
}

/**
 * Canonical link g together with its cumulant G (G' = g).
 *
 * For the logit link the cumulant is log(1 + e^u); this differs from the
 * integral of g over [0, u] by the constant log 2, which never moves an
 * argmin but does shift reported objective values by log 2 per row.
 */
struct Link {
    LinkKind kind = LinkKind::logit;

    double mean(double u) const { return kind == LinkKind::identity ? u : expit(u); }

    double mean_deriv(double u) const
    {
        if (kind == LinkKind::identity) return 1.0;
        const double m = expit(u);
        return m * (1.0 - m);
    }

    double cumulant(double u) const
    {
        return kind == LinkKind::identity ? 0.5 * u * u : log1p_exp(u);
    }

    /// Upper bound on g', used for Lipschitz estimates.
    double max_mean_deriv() const { return kind == LinkKind::identity ? 1.0 : 0.25; }

    friend bool operator==(const Link&, const Link&) = default;
};

inline constexpr Link identity_link{LinkKind::identity};
inline constexpr Link logit_link{LinkKind::logit};

/// Q{g(u), y} = y u - G(u).
inline double quasi_loglik(double u, double y, Link link)
{
    if (!std::isfinite(u) || !std::isfinite(y))
        throw ValidationError("quasi_loglik: non-finite input");
    return y * u - link.cumulant(u);
}

/**
 * Rows of a weighted GLM problem. An empty offset means no offset; an empty
 * weight vector means unit weights.
 */
struct GlmData {
    Matrix design;
    Vector response;
    Vector weights;
    Vector offset;

    Index rows() const { return design.rows(); }
    Index cols() const { return design.cols(); }
    bool has_offset() const { return offset.size() != 0; }
    double weight(Index i) const { return weights.size() == 0 ? 1.0 : weights[i]; }

    void validate() const
    {
        require(response.size() == design.rows(), "response length does not match design rows");
        require(weights.size() == 0 || weights.size() == design.rows(),
                "weights length does not match design rows");
        require(offset.size() == 0 || offset.size() == design.rows(),
                "offset length does not match design rows");
        for (Index i = 0; i < weights.size(); ++i)
            require(std::isfinite(weights[i]) && weights[i] >= 0.0,
                    "weights must be finite and nonnegative");
    }

    /// Subset of rows in the given order.
    GlmData take(const std::vector<Index>& idx) const
    {
        GlmData out;
        out.design.resize(static_cast<Index>(idx.size()), design.cols());
        out.response.resize(static_cast<Index>(idx.size()));
        if (weights.size()) out.weights.resize(static_cast<Index>(idx.size()));
        if (offset.size()) out.offset.resize(static_cast<Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto r = static_cast<Index>(k);
            out.design.row(r) = design.row(idx[k]);
            out.response[r] = response[idx[k]];
            if (weights.size()) out.weights[r] = weights[idx[k]];
            if (offset.size()) out.offset[r] = offset[idx[k]];
        }
        return out;
    }
};

inline Vector linear_predictor(const GlmData& data, const Vector& coef)
{
    Vector eta = data.design * coef;
    if (data.has_offset()) eta += data.offset;
    return eta;
}

/// (1/n) sum_i w_i {G(eta_i) - y_i eta_i} for a given linear predictor.
inline double neg_quasi_loglik_eta(const GlmData& data, const Vector& eta, Link link)
{
    const Index n = data.rows();
    if (n == 0) return 0.0;
    double acc = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double w = data.weight(i);
        if (w == 0.0) continue;
        acc += w * (link.cumulant(eta[i]) - data.response[i] * eta[i]);
    }
    return acc / static_cast<double>(n);
}

inline double neg_quasi_loglik(const GlmData& data, const Vector& coef, Link link)
{
    require(coef.size() == data.cols(), "coefficient length does not match design columns");
    return neg_quasi_loglik_eta(data, linear_predictor(data, coef), link);
}

/// Gradient (1/n) sum_i w_i {g(eta_i) - y_i} z_i given the linear predictor.
inline Vector neg_quasi_grad_eta(const GlmData& data, const Vector& eta, Link link)
{
    const Index n = data.rows();
    if (n == 0) return Vector::Zero(data.cols());
    Vector r(n);
    for (Index i = 0; i < n; ++i)
        r[i] = data.weight(i) * (link.mean(eta[i]) - data.response[i]);
    return data.design.transpose() * r / static_cast<double>(n);
}

inline Vector neg_quasi_grad(const GlmData& data, const Vector& coef, Link link)
{
    require(coef.size() == data.cols(), "coefficient length does not match design columns");
    return neg_quasi_grad_eta(data, linear_predictor(data, coef), link);
}

/// Convenience form taking the pieces separately.
inline Vector neg_quasi_grad(const Matrix& design, const Vector& y, const Vector& coef,
                             const Vector& weights, Link link)
{
    require(weights.size() == design.rows(), "weights length does not match design rows");
    GlmData d{design, y, weights, {}};
    d.validate();
    return neg_quasi_grad(d, coef, link);
}

// ---------------------------------------------------------------------------
// Study data
// ---------------------------------------------------------------------------

enum class Population { target, source };

inline std::string_view to_string(Population p)
{
    return p == Population::target ? "target" : "source";
}

/**
 * One of the four observation blocks. X carries the intercept in column 0;
 * unlabeled blocks have no response.
 */
struct ObservationBlock {
    Matrix x;
    Matrix s;
    std::optional<Vector> y;
    Population population = Population::target;
    bool labeled = false;

    Index rows() const { return x.rows(); }

    /// Z = (X, S) row-wise.
    Matrix z() const
    {
        Matrix out(x.rows(), x.cols() + s.cols());
        out.leftCols(x.cols()) = x;
        out.rightCols(s.cols()) = s;
        return out;
    }

    void validate() const
    {
        require(x.cols() >= 1, "X must have at least the intercept column");
        require(s.rows() == x.rows(), "X and S row counts differ");
        require(labeled == (y.has_value()), "labeled blocks carry y and unlabeled blocks do not");
        if (y) require(y->size() == x.rows(), "y length does not match block rows");
    }
};

inline ObservationBlock make_block(Population pop, bool labeled, Index p, Index q)
{
    ObservationBlock b;
    b.x.resize(0, p);
    b.s.resize(0, q);
    b.population = pop;
    b.labeled = labeled;
    if (labeled) b.y = Vector(0);
    return b;
}

struct StudyData {
    ObservationBlock target_labeled;
    ObservationBlock target_unlabeled;
    ObservationBlock source_labeled;
    ObservationBlock source_unlabeled;

    Index n_target() const { return target_labeled.rows(); }
    Index N_target() const { return target_unlabeled.rows(); }
    Index n_source() const { return source_labeled.rows(); }
    Index N_source() const { return source_unlabeled.rows(); }
    Index p() const { return target_labeled.x.cols(); }
    Index q() const { return target_labeled.s.cols(); }
    Index d() const { return p() + q(); }

    template <class F>
    void for_each_block(F&& f)
    {
        f(target_labeled);
        f(target_unlabeled);
        f(source_labeled);
        f(source_unlabeled);
    }

    template <class F>
    void for_each_block(F&& f) const
    {
        f(target_labeled);
        f(target_unlabeled);
        f(source_labeled);
        f(source_unlabeled);
    }

    /// Checks block roles and shapes. The sample-size condition n_T <= N_T
    /// is not enforced here since several reductions (N_T = 0) violate it.
    void validate() const
    {
        const Index pp = p();
        const Index qq = q();
        auto check = [&](const ObservationBlock& b, Population pop, bool labeled) {
            b.validate();
            require(b.population == pop && b.labeled == labeled, "observation block has the wrong role");
            require(b.x.cols() == pp && b.s.cols() == qq, "all blocks must share p and q");
        };
        check(target_labeled, Population::target, true);
        check(target_unlabeled, Population::target, false);
        check(source_labeled, Population::source, true);
        check(source_unlabeled, Population::source, false);
    }

    bool satisfies_size_assumption() const { return n_target() <= N_target(); }
};

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Column means and scales used to standardize X (columns 1..p-1) and S.
struct ColumnScaling {
    Vector x_mean, x_scale;  // entry 0 (intercept) is 0 / 1
    Vector s_mean, s_scale;
};

struct ScalingRecord {
    bool per_population = false;
    std::string divisor = "n";
    ColumnScaling target;
    ColumnScaling source;  // equal to target unless per_population

    /**
     * Maps coefficients on standardized X back to the raw X scale of the
     * target population.
     */
    Vector to_original_scale(const Vector& beta) const
    {
        const ColumnScaling& sc = target;
        require(beta.size() == sc.x_mean.size(), "coefficient length does not match scaling record");
        Vector out = beta;
        double shift = 0.0;
        for (Index j = 1; j < beta.size(); ++j) {
            out[j] = beta[j] / sc.x_scale[j];
            shift += out[j] * sc.x_mean[j];
        }
        out[0] = beta[0] - shift;
        return out;
    }
};

namespace detail {

struct MomentAccumulator {
    Vector sum, sumsq;
    Index count = 0;
    explicit MomentAccumulator(Index cols) : sum(Vector::Zero(cols)), sumsq(Vector::Zero(cols)) {}
    void add(const Matrix& m)
    {
        if (m.rows() == 0) return;
        sum += m.colwise().sum().transpose();
        count += m.rows();
    }
    void add_sq(const Matrix& m, const Vector& mean)
    {
        if (m.rows() == 0) return;
        sumsq += (m.rowwise() - mean.transpose()).array().square().colwise().sum().matrix().transpose();
    }
};

inline void scale_columns(Matrix& m, const Vector& mean, const Vector& scale, Index first)
{
    for (Index j = first; j < m.cols(); ++j)
        m.col(j) = (m.col(j).array() - mean[j]) / scale[j];
}

inline ColumnScaling compute_scaling(const std::vector<const ObservationBlock*>& blocks, Index p, Index q)
{
    detail::MomentAccumulator ax(p), as(q);
    for (const auto* b : blocks) {
        ax.add(b->x);
        as.add(b->s);
    }
    require(ax.count > 0, "standardize: no rows in scope");
    const double n = static_cast<double>(ax.count);
    ColumnScaling sc;
    sc.x_mean = ax.sum / n;
    sc.s_mean = as.sum / n;
    for (const auto* b : blocks) {
        ax.add_sq(b->x, sc.x_mean);
        as.add_sq(b->s, sc.s_mean);
    }
    sc.x_scale = (ax.sumsq / n).cwiseSqrt();
    sc.s_scale = (as.sumsq / n).cwiseSqrt();
    sc.x_mean[0] = 0.0;
    sc.x_scale[0] = 1.0;
    constexpr double tiny = 1e-12;
    for (Index j = 1; j < p; ++j)
        if (!(sc.x_scale[j] > tiny))
            throw ValidationError("standardize: zero-variance column x[" + std::to_string(j) + "]");
    for (Index j = 0; j < q; ++j)
        if (!(sc.s_scale[j] > tiny))
            throw ValidationError("standardize: zero-variance column s[" + std::to_string(j) + "]");
    return sc;
}

inline void apply_scaling(ObservationBlock& b, const ColumnScaling& sc)
{
    scale_columns(b.x, sc.x_mean, sc.x_scale, 1);
    scale_columns(b.s, sc.s_mean, sc.s_scale, 0);
}

}  // namespace detail

/**
 * Centers and scales every non-intercept column of X and S to mean 0 and
 * variance 1 (divisor n) over either all rows or each population separately.
 */
inline std::pair<StudyData, ScalingRecord> standardize(const StudyData& data, bool per_population)
{
    data.validate();
    const Index p = data.p();
    const Index q = data.q();
    StudyData out = data;
    ScalingRecord rec;
    rec.per_population = per_population;
    if (per_population) {
        rec.target = detail::compute_scaling({&data.target_labeled, &data.target_unlabeled}, p, q);
        if (data.n_source() + data.N_source() > 0)
            rec.source = detail::compute_scaling({&data.source_labeled, &data.source_unlabeled}, p, q);
        else
            rec.source = rec.target;
    } else {
        rec.target = detail::compute_scaling({&data.target_labeled, &data.target_unlabeled,
                                              &data.source_labeled, &data.source_unlabeled},
                                             p, q);
        rec.source = rec.target;
    }
    detail::apply_scaling(out.target_labeled, rec.target);
    detail::apply_scaling(out.target_unlabeled, rec.target);
    detail::apply_scaling(out.source_labeled, rec.source);
    detail::apply_scaling(out.source_unlabeled, rec.source);
    return {std::move(out), std::move(rec)};
}

}  // namespace strifle
