#pragma once

// Reference evaluations of the modified Bessel function of the first kind.
// Validated for 0 <= v <= 300 and 0 < kappa <= 1e4. These exist to check the
// closed-form log-partition surrogate and to evaluate exact vMF densities at
// small d; training and scoring never call them.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "kappa_sphere/errors.hpp"

namespace kappa_sphere {

inline constexpr double kBesselMaxOrder = 300.0;
inline constexpr double kBesselMaxKappa = 1e4;

namespace detail {

inline void check_bessel_range(double v, double kappa) {
    if (!(v >= 0.0 && v <= kBesselMaxOrder) || !(kappa > 0.0 && kappa <= kBesselMaxKappa)) {
        std::ostringstream os;
        os << "bessel oracle outside validated range (v=" << v << ", kappa=" << kappa << ")";
        throw RangeError(os.str());
    }
}

}  // namespace detail

/// log I_v(kappa) by the ascending power series, summed in log space outward
/// from its largest term.
inline double log_bessel_exact(double v, double kappa) {
    detail::check_bessel_range(v, kappa);
    const double half = 0.5 * kappa;
    const double log_half = std::log(half);
    const double q = half * half;

    // Terms grow while q > (k+1)(k+v+1).
    const double disc = (v + 2.0) * (v + 2.0) - 4.0 * (v + 1.0 - q);
    double k_peak = 0.0;
    if (disc > 0.0) {
        k_peak = std::max(0.0, std::floor((-(v + 2.0) + std::sqrt(disc)) / 2.0) + 1.0);
    }
    const double log_peak =
        (2.0 * k_peak + v) * log_half - std::lgamma(k_peak + 1.0) - std::lgamma(k_peak + v + 1.0);

    constexpr double kTail = 1e-18;
    double sum = 1.0;
    double term = 1.0;
    for (double k = k_peak; ; k += 1.0) {
        term *= q / ((k + 1.0) * (k + v + 1.0));
        sum += term;
        if (term < kTail * sum) break;
    }
    term = 1.0;
    for (double k = k_peak; k >= 1.0; k -= 1.0) {
        term *= (k * (k + v)) / q;
        sum += term;
        if (term < kTail * sum) break;
    }
    return log_peak + std::log(sum);
}

/// I_{v+1}(kappa) / I_v(kappa) by the Gauss continued fraction (modified Lentz).
inline double bessel_ratio_exact(double v, double kappa) {
    detail::check_bessel_range(v, kappa);
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 1e-16;
    constexpr int kMaxIter = 10'000'000;

    // I_{v+1}/I_v = 1 / (b_0 + 1 / (b_1 + 1 / (b_2 + ...))),  b_j = 2 (v + 1 + j) / kappa
    const double inv = 2.0 / kappa;
    double f = (v + 1.0) * inv;
    double c = f;
    double d = 0.0;
    for (int j = 1; j <= kMaxIter; ++j) {
        const double b = (v + 1.0 + j) * inv;
        d = b + d;
        if (d == 0.0) d = kTiny;
        c = b + 1.0 / c;
        if (c == 0.0) c = kTiny;
        d = 1.0 / d;
        const double delta = c * d;
        f *= delta;
        if (std::abs(delta - 1.0) < kEps) return 1.0 / f;
    }
    throw RangeError("bessel ratio continued fraction did not converge");
}

/// Amos (1974) lower bound on I_{v+1}/I_v.
inline double amos_lower_bound(double v, double kappa) {
    return kappa / (v + 0.5 + std::sqrt(kappa * kappa + (v + 1.5) * (v + 1.5)));
}

/// Amos (1974) upper bound on I_{v+1}/I_v.
inline double amos_upper_bound(double v, double kappa) {
    return kappa / (v + 0.5 + std::sqrt(kappa * kappa + (v + 0.5) * (v + 0.5)));
}

}  // namespace kappa_sphere
