#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "kappa_sphere/vmf.hpp"

namespace kappa_sphere {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// First/second moment estimates for one flat parameter vector.
struct AdamState {
    Vector m;
    Vector v;
    long step = 0;

    static AdamState zeros(Eigen::Index n) { return {Vector::Zero(n), Vector::Zero(n), 0}; }
};

/// One bias-corrected Adam update, in place.
inline void adam_step(Vector& params, const Vector& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    if (grads.size() != params.size()) throw DomainError("adam: gradient length differs from parameters");
    if (state.m.size() == 0 && state.v.size() == 0 && state.step == 0) state = AdamState::zeros(params.size());
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DomainError("adam: optimizer state length differs from parameters");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        const double g = grads(i);
        state.m(i) = cfg.beta1 * state.m(i) + (1.0 - cfg.beta1) * g;
        state.v(i) = cfg.beta2 * state.v(i) + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m(i) / bc1;
        const double v_hat = state.v(i) / bc2;
        params(i) -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
}

struct GradientCheckReport {
    bool passed = true;
    double max_rel_error = 0.0;
    Eigen::Index worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Relative errors use max(|analytic|, |numeric|, 1e-6) as the denominator so that
/// exactly-zero gradient entries are judged on absolute scale.
inline constexpr double kGradientCheckFloor = 1e-6;

/// Compares `analytic` with central differences of `loss` at `params`,
/// step h = 1e-5 * max(1, |x_i|).
inline GradientCheckReport finite_diff_check(const std::function<double(const Vector&)>& loss,
                                             const Vector& params, const Vector& analytic, double tolerance) {
    if (analytic.size() != params.size()) throw DomainError("gradient check: length mismatch");
    GradientCheckReport report;
    Vector x = params;
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        const double h = 1e-5 * std::max(1.0, std::abs(params(i)));
        x(i) = params(i) + h;
        const double up = loss(x);
        x(i) = params(i) - h;
        const double down = loss(x);
        x(i) = params(i);
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic(i)), std::abs(numeric), kGradientCheckFloor});
        double rel = std::abs(analytic(i) - numeric) / denom;
        if (std::isnan(rel)) rel = std::numeric_limits<double>::infinity();
        if (report.worst_index < 0 || rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = analytic(i);
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    return report;
}

}  // namespace kappa_sphere
