#pragma once

#include <strifle/glm_core.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

namespace strifle {

enum class PenaltyFamily { lasso, ridge, scad, mcp };

inline std::string_view to_string(PenaltyFamily f)
{
    switch (f) {
    case PenaltyFamily::lasso: return "lasso";
    case PenaltyFamily::ridge: return "ridge";
    case PenaltyFamily::scad: return "scad";
    case PenaltyFamily::mcp: return "mcp";
    }
    return "?";
}

inline PenaltyFamily parse_penalty_family(std::string_view name)
{
    if (name == "lasso") return PenaltyFamily::lasso;
    if (name == "ridge") return PenaltyFamily::ridge;
    if (name == "scad") return PenaltyFamily::scad;
    if (name == "mcp") return PenaltyFamily::mcp;
    throw ValidationError("unknown penalty family '" + std::string(name) + "'");
}

/**
 * A separable penalty p_lambda applied to the coordinates selected by mask.
 *
 * An empty mask penalizes every coordinate. `shape` is the SCAD `a` (> 2)
 * or the MCP `gamma` (> 1) and is ignored otherwise.
 */
struct PenaltySpec {
    PenaltyFamily family = PenaltyFamily::lasso;
    double lambda = 0.0;
    double shape = 0.0;
    std::vector<bool> mask;

    static constexpr double default_scad_a = 3.7;
    static constexpr double default_mcp_gamma = 3.0;

    static PenaltySpec lasso(double lambda) { return {PenaltyFamily::lasso, lambda, 0.0, {}}; }
    static PenaltySpec ridge(double lambda) { return {PenaltyFamily::ridge, lambda, 0.0, {}}; }
    static PenaltySpec scad(double lambda, double a = default_scad_a)
    {
        return {PenaltyFamily::scad, lambda, a, {}};
    }
    static PenaltySpec mcp(double lambda, double gamma = default_mcp_gamma)
    {
        return {PenaltyFamily::mcp, lambda, gamma, {}};
    }

    PenaltySpec with_lambda(double l) const
    {
        PenaltySpec out = *this;
        out.lambda = l;
        return out;
    }

    PenaltySpec with_mask(std::vector<bool> m) const
    {
        PenaltySpec out = *this;
        out.mask = std::move(m);
        return out;
    }

    bool penalized(Index j) const
    {
        return mask.empty() || mask[static_cast<std::size_t>(j)];
    }

    bool convex() const { return family == PenaltyFamily::lasso || family == PenaltyFamily::ridge; }

    void validate() const
    {
        require(std::isfinite(lambda) && lambda >= 0.0, "penalty lambda must be finite and nonnegative");
        if (family == PenaltyFamily::scad) require(shape > 2.0, "SCAD requires a > 2");
        if (family == PenaltyFamily::mcp) require(shape > 1.0, "MCP requires gamma > 1");
    }
};

/// Mask that leaves the intercept (coordinate 0) unpenalized.
inline std::vector<bool> intercept_mask(Index dim)
{
    std::vector<bool> m(static_cast<std::size_t>(dim), true);
    if (dim > 0) m[0] = false;
    return m;
}

/// Weak-convexity constant: p(t) + mu t^2 / 2 is convex.
inline double weak_convexity(const PenaltySpec& spec)
{
    switch (spec.family) {
    case PenaltyFamily::scad: return 1.0 / (spec.shape - 1.0);
    case PenaltyFamily::mcp: return 1.0 / spec.shape;
    default: return 0.0;
    }
}

inline double penalty_value(double t, const PenaltySpec& spec)
{
    const double a = std::abs(t);
    const double l = spec.lambda;
    switch (spec.family) {
    case PenaltyFamily::lasso: return l * a;
    case PenaltyFamily::ridge: return l * t * t;
    case PenaltyFamily::scad: {
        const double s = spec.shape;
        if (a <= l) return l * a;
        if (a <= s * l) return (2.0 * s * l * a - a * a - l * l) / (2.0 * (s - 1.0));
        return l * l * (s + 1.0) / 2.0;
    }
    case PenaltyFamily::mcp: {
        const double g = spec.shape;
        if (a <= g * l) return l * a - a * a / (2.0 * g);
        return g * l * l / 2.0;
    }
    }
    return 0.0;
}

/// Sum of p_lambda over masked coordinates.
inline double penalty_value(const Vector& coef, const PenaltySpec& spec)
{
    double acc = 0.0;
    for (Index j = 0; j < coef.size(); ++j)
        if (spec.penalized(j)) acc += penalty_value(coef[j], spec);
    return acc;
}

inline double penalty_derivative(double t, const PenaltySpec& spec)
{
    if (!(t > 0.0)) throw ValidationError("penalty_derivative requires t > 0");
    const double l = spec.lambda;
    switch (spec.family) {
    case PenaltyFamily::lasso: return l;
    case PenaltyFamily::ridge: return 2.0 * l * t;
    case PenaltyFamily::scad: {
        const double s = spec.shape;
        if (t <= l) return l;
        return std::max(s * l - t, 0.0) / (s - 1.0);
    }
    case PenaltyFamily::mcp: return std::max(l - t / spec.shape, 0.0);
    }
    return 0.0;
}

inline double soft_threshold(double v, double k)
{
    if (v > k) return v - k;
    if (v < -k) return v + k;
    return 0.0;
}

/// argmin_t (t - v)^2 / (2 step) + p_lambda(t). Requires step * mu < 1.
inline double prox_scalar(double v, double step, const PenaltySpec& spec)
{
    const double l = spec.lambda;
    switch (spec.family) {
    case PenaltyFamily::lasso: return soft_threshold(v, step * l);
    case PenaltyFamily::ridge: return v / (1.0 + 2.0 * step * l);
    case PenaltyFamily::scad: {
        const double s = spec.shape;
        const double a = std::abs(v);
        if (a <= l * (1.0 + step)) return soft_threshold(v, step * l);
        if (a <= s * l) {
            const double m = (a * (s - 1.0) - step * s * l) / ((s - 1.0) - step);
            return std::copysign(m, v);
        }
        return v;
    }
    case PenaltyFamily::mcp: {
        const double g = spec.shape;
        const double a = std::abs(v);
        if (a <= step * l) return 0.0;
        if (a <= g * l) return std::copysign((a - step * l) / (1.0 - step / g), v);
        return v;
    }
    }
    return v;
}

/// Componentwise prox on masked coordinates; unmasked coordinates pass through.
inline Vector prox_step(const Vector& v, double step, const PenaltySpec& spec)
{
    require(step > 0.0, "prox_step requires a positive step");
    if (step * weak_convexity(spec) >= 1.0)
        throw ValidationError("prox_step: step * mu >= 1, the prox is not unique");
    Vector out = v;
    for (Index j = 0; j < v.size(); ++j)
        if (spec.penalized(j)) out[j] = prox_scalar(v[j], step, spec);
    return out;
}

/// Outcome of the grid checks of the regularity conditions on p_lambda.
struct PenaltyConditions {
    bool zero_at_origin = false;
    bool symmetric = false;
    bool nondecreasing = false;
    bool ratio_nonincreasing = false;  // p(t) / t on t > 0
    bool weakly_convex = false;        // p(t) + mu t^2 / 2 has nonnegative second differences
    bool all() const { return zero_at_origin && symmetric && nondecreasing && ratio_nonincreasing && weakly_convex; }
};

/**
 * Checks the penalty regularity conditions on the grid t_k = k h,
 * k = 1..points, h = 10 lambda / points. Comparisons carry a relative
 * rounding slack of 1e-12.
 */
inline PenaltyConditions check_penalty_conditions(const PenaltySpec& spec, int points = 2000)
{
    spec.validate();
    require(spec.lambda > 0.0, "check_penalty_conditions needs lambda > 0");
    require(points >= 3, "check_penalty_conditions needs at least three grid points");
    const double h = 10.0 * spec.lambda / points;
    const double mu = weak_convexity(spec);
    const double scale = std::max(1.0, penalty_value(10.0 * spec.lambda, spec));
    const double slack = 1e-12 * scale;
    PenaltyConditions c;
    c.zero_at_origin = penalty_value(0.0, spec) == 0.0;
    c.symmetric = c.nondecreasing = c.ratio_nonincreasing = c.weakly_convex = true;
    double prev = penalty_value(0.0, spec), prev_ratio = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= points; ++k) {
        const double t = k * h;
        const double v = penalty_value(t, spec);
        if (std::abs(v - penalty_value(-t, spec)) > slack) c.symmetric = false;
        if (v < prev - slack) c.nondecreasing = false;
        const double ratio = v / t;
        if (ratio > prev_ratio + slack / t) c.ratio_nonincreasing = false;
        prev = v;
        prev_ratio = ratio;
    }
    // second differences on a grid symmetric around zero
    auto convexified = [&](double t) { return penalty_value(t, spec) + 0.5 * mu * t * t; };
    for (int k = -points + 1; k < points; ++k) {
        const double t = k * h;
        const double second = convexified(t - h) - 2.0 * convexified(t) + convexified(t + h);
        if (second < -4.0 * slack) c.weakly_convex = false;
    }
    return c;
}

}  // namespace strifle
