#pragma once

// von Mises-Fisher distribution on S^{d-1}: the closed-form log-partition
// surrogate used for training, its gradients, exact densities for small d,
// sampling, concentration estimation and resultant-vector fusion.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <vector>

#include "kappa_sphere/bessel.hpp"
#include "kappa_sphere/errors.hpp"

namespace kappa_sphere {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

inline constexpr double kUnitTolerance = 1e-9;

/// A direction on the unit hypersphere, d >= 2.
class UnitDescriptor {
public:
    UnitDescriptor() = default;

    /// Wraps an already-normalized vector; throws if its norm is off by more than 1e-9.
    static UnitDescriptor from_unit(Vector values) {
        check_dim(values.size());
        const double n = values.norm();
        if (!std::isfinite(n) || std::abs(n - 1.0) > kUnitTolerance) {
            std::ostringstream os;
            os << "descriptor norm " << n << " is not 1";
            throw DomainError(os.str());
        }
        return UnitDescriptor(std::move(values));
    }

    /// Projects an arbitrary non-zero vector onto the sphere.
    static UnitDescriptor normalize(const Vector& values) {
        check_dim(values.size());
        const double n = values.norm();
        if (!std::isfinite(n) || n < 1e-300) throw DegenerateError("cannot normalize a zero vector");
        return UnitDescriptor(values / n);
    }

    static UnitDescriptor basis(Eigen::Index d, Eigen::Index i) {
        Vector v = Vector::Zero(d);
        v(i) = 1.0;
        return from_unit(std::move(v));
    }

    const Vector& values() const noexcept { return values_; }
    Eigen::Index dim() const noexcept { return values_.size(); }
    double operator()(Eigen::Index i) const { return values_(i); }

    double dot(const UnitDescriptor& other) const {
        if (other.dim() != dim()) throw DomainError("descriptor dimension mismatch");
        return values_.dot(other.values_);
    }

    UnitDescriptor operator-() const { return UnitDescriptor(-values_); }

    friend bool operator==(const UnitDescriptor& a, const UnitDescriptor& b) {
        return a.values_.size() == b.values_.size() && a.values_ == b.values_;
    }

private:
    explicit UnitDescriptor(Vector v) : values_(std::move(v)) {}

    static void check_dim(Eigen::Index d) {
        if (d < 2) throw DomainError("descriptor dimension must be at least 2");
    }

    Vector values_;
};

/// Bessel order bookkeeping for dimension d: v = d/2 - 1, v_tilde = v + 1/2.
struct BesselOrder {
    int d = 0;
    double v = 0.0;
    double v_tilde = 0.0;

    static BesselOrder for_dimension(int dim) {
        if (dim < 2) throw DomainError("vMF dimension must be at least 2");
        return {dim, 0.5 * dim - 1.0, 0.5 * (dim - 1)};
    }
};

struct VmfParams {
    UnitDescriptor mu;
    double kappa = 0.0;

    VmfParams(UnitDescriptor mean, double concentration) : mu(std::move(mean)), kappa(concentration) {
        if (!std::isfinite(kappa) || kappa < 0.0) throw DomainError("kappa must be finite and >= 0");
    }
};

namespace detail {

inline void check_kappa(double kappa) {
    if (!std::isfinite(kappa) || kappa < 0.0) {
        std::ostringstream os;
        os << "kappa must be finite and non-negative, got " << kappa;
        throw DomainError(os.str());
    }
}

inline double clamp_cos(double c) { return std::clamp(c, -1.0, 1.0); }

inline void check_pair(const UnitDescriptor& z, const UnitDescriptor& mu, const BesselOrder& order) {
    if (z.dim() != mu.dim()) throw DomainError("z and mu dimensions differ");
    if (z.dim() != order.d) throw DomainError("descriptor dimension does not match Bessel order");
}

}  // namespace detail

/// Integrated Amos upper bound standing in for log I_v(k) - v log k (up to a constant):
/// sqrt(k^2 + vt^2) - vt * log(vt + sqrt(k^2 + vt^2)).
inline double stable_log_partition(double kappa, const BesselOrder& order) {
    detail::check_kappa(kappa);
    const double vt = order.v_tilde;
    const double s = std::hypot(kappa, vt);
    return s - vt * std::log(vt + s);
}

/// d/dkappa of stable_log_partition, which equals the Amos upper bound on I_{v+1}/I_v.
inline double stable_log_partition_grad(double kappa, const BesselOrder& order) {
    detail::check_kappa(kappa);
    const double vt = order.v_tilde;
    return kappa / (vt + std::hypot(kappa, vt));
}

/// vMF negative log-likelihood with the stable log-partition, additive constant dropped.
inline double vmf_nll(const UnitDescriptor& z, const UnitDescriptor& mu, double kappa,
                      const BesselOrder& order) {
    detail::check_pair(z, mu, order);
    return stable_log_partition(kappa, order) - kappa * mu.dot(z);
}

inline double vmf_nll_grad_kappa(const UnitDescriptor& z, const UnitDescriptor& mu, double kappa,
                                 const BesselOrder& order) {
    detail::check_pair(z, mu, order);
    return stable_log_partition_grad(kappa, order) - mu.dot(z);
}

struct SphereGradient {
    Vector raw;      ///< gradient in the ambient space
    Vector tangent;  ///< projection onto the tangent plane at z
};

inline SphereGradient vmf_nll_grad_z(const UnitDescriptor& z, const UnitDescriptor& mu, double kappa) {
    if (z.dim() != mu.dim()) throw DomainError("z and mu dimensions differ");
    detail::check_kappa(kappa);
    Vector raw = -kappa * mu.values();
    Vector tangent = raw - z.values() * z.values().dot(raw);
    return {std::move(raw), std::move(tangent)};
}

/// log C_d(kappa), exact. Uses the Bessel oracle, so d <= 64 and kappa <= 1e4.
inline double log_normalizer_exact(double kappa, const BesselOrder& order) {
    detail::check_kappa(kappa);
    if (order.d > 64 || kappa > kBesselMaxKappa) throw RangeError("exact vMF normalizer out of validated range");
    const double half_d = 0.5 * order.d;
    if (kappa == 0.0) {
        // reciprocal surface area of S^{d-1}
        return std::lgamma(half_d) - std::log(2.0) - half_d * std::log(std::numbers::pi);
    }
    return order.v * std::log(kappa) - half_d * std::log(2.0 * std::numbers::pi) -
           log_bessel_exact(order.v, kappa);
}

inline double log_density(const UnitDescriptor& z, const VmfParams& params, const BesselOrder& order) {
    detail::check_pair(z, params.mu, order);
    return log_normalizer_exact(params.kappa, order) + params.kappa * params.mu.dot(z);
}

/// Draws `count` samples. Wood (1994) rejection sampling of the component along mu,
/// plus a uniformly distributed tangent direction.
inline std::vector<UnitDescriptor> sample_vmf(const VmfParams& params, std::size_t count, Rng& rng) {
    if (count < 1) throw DomainError("sample count must be at least 1");
    const Eigen::Index d = params.mu.dim();
    const double kappa = params.kappa;
    const double dm1 = static_cast<double>(d - 1);

    const double b = dm1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dm1 * dm1));
    const double x0 = (1.0 - b) / (1.0 + b);
    const double c = kappa * x0 + dm1 * std::log((1.0 - x0) * (1.0 + x0));

    std::gamma_distribution<double> gamma(0.5 * dm1, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    const Vector& mu = params.mu.values();
    std::vector<UnitDescriptor> out;
    out.reserve(count);
    Vector tangent(d);
    for (std::size_t n = 0; n < count; ++n) {
        double w = 0.0;
        for (;;) {
            const double ga = gamma(rng);
            const double gb = gamma(rng);
            const double beta = ga / (ga + gb);
            w = (1.0 - (1.0 + b) * beta) / (1.0 - (1.0 - b) * beta);
            const double u = uniform(rng);
            if (kappa * w + dm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
        }
        double tn = 0.0;
        while (tn < 1e-12) {
            for (Eigen::Index i = 0; i < d; ++i) tangent(i) = normal(rng);
            tangent -= mu * mu.dot(tangent);
            tn = tangent.norm();
        }
        tangent /= tn;
        w = std::clamp(w, -1.0, 1.0);
        Vector x = w * mu + std::sqrt(std::max(0.0, 1.0 - w * w)) * tangent;
        out.push_back(UnitDescriptor::normalize(x));
    }
    return out;
}

inline std::vector<UnitDescriptor> sample_vmf(const VmfParams& params, std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    return sample_vmf(params, count, rng);
}

/// Banerjee et al. (2005) approximation kappa = R (d - R^2) / (1 - R^2), R the mean resultant length.
inline double mle_kappa_from_resultant(double mean_resultant, int d) {
    const double r = mean_resultant;
    if (1.0 - r <= 1e-12) throw DegenerateError("mean resultant length is 1; concentration is unbounded");
    return std::max(0.0, r * (d - r * r) / (1.0 - r * r));
}

inline double mle_kappa(std::span<const UnitDescriptor> samples) {
    if (samples.size() < 2) throw DomainError("mle_kappa needs at least two samples");
    const Eigen::Index d = samples.front().dim();
    Vector sum = Vector::Zero(d);
    for (const auto& s : samples) {
        if (s.dim() != d) throw DomainError("samples have unequal dimension");
        sum += s.values();
    }
    const double r = sum.norm() / static_cast<double>(samples.size());
    return mle_kappa_from_resultant(r, static_cast<int>(d));
}

inline double mean_resultant_length(std::span<const UnitDescriptor> samples) {
    Vector sum = Vector::Zero(samples.front().dim());
    for (const auto& s : samples) sum += s.values();
    return sum.norm() / static_cast<double>(samples.size());
}

inline constexpr double kDefaultUncertaintyCap = 1e12;

struct ResultantScore {
    double value = 0.0;
    bool degenerate = false;
};

/// Inverse norm of kappa_a * a + kappa_b * b given cos(a, b):
/// 1 / sqrt(ka^2 + kb^2 + 2 ka kb cos). Magnitudes below 1e-12 return `cap` flagged degenerate.
inline ResultantScore resultant_uncertainty(double kappa_a, double kappa_b, double cos_ab,
                                            double cap = kDefaultUncertaintyCap) {
    if (!std::isfinite(kappa_a) || !std::isfinite(kappa_b) || !std::isfinite(cos_ab)) {
        throw DomainError("resultant_uncertainty inputs must be finite");
    }
    if (kappa_a < 0.0 || kappa_b < 0.0) throw DomainError("concentrations must be non-negative");
    const double c = detail::clamp_cos(cos_ab);
    const double sq = kappa_a * kappa_a + kappa_b * kappa_b + 2.0 * kappa_a * kappa_b * c;
    const double magnitude = std::sqrt(std::max(0.0, sq));
    if (magnitude < 1e-12) return {cap, true};
    return {1.0 / magnitude, false};
}

}  // namespace kappa_sphere
