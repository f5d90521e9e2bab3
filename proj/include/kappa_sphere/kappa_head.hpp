#pragma once

// Concentration head: feature map -> kappa > 0.
//
//   Aggregation: per-location L2 normalization over channels -> GeM pooling ->
//                linear projection (channels -> hidden) -> linear to scalar -> softplus
//   LinearOnly:  flatten -> linear to scalar -> softplus

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "kappa_sphere/vmf.hpp"

namespace kappa_sphere {

/// channels x (height * width), row-major per channel.
class FeatureMap {
public:
    FeatureMap() = default;

    FeatureMap(int channels, int height, int width)
        : height_(height), width_(width), values_(Matrix::Zero(channels, static_cast<Eigen::Index>(height) * width)) {
        validate_shape();
    }

    FeatureMap(int channels, int height, int width, Matrix values)
        : height_(height), width_(width), values_(std::move(values)) {
        validate_shape();
        if (values_.rows() != channels || values_.cols() != static_cast<Eigen::Index>(height) * width) {
            throw DomainError("feature map values do not match its shape");
        }
        if (!values_.allFinite()) throw DomainError("feature map contains non-finite values");
    }

    int channels() const noexcept { return static_cast<int>(values_.rows()); }
    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int spatial() const noexcept { return static_cast<int>(values_.cols()); }
    Eigen::Index size() const noexcept { return values_.size(); }

    const Matrix& values() const noexcept { return values_; }
    Matrix& values() noexcept { return values_; }
    double& operator()(int c, int s) { return values_(c, s); }
    double operator()(int c, int s) const { return values_(c, s); }

    /// Channel-major flattening, as the linear-only head consumes it.
    Vector flatten() const {
        Vector out(values_.size());
        Eigen::Index k = 0;
        for (Eigen::Index c = 0; c < values_.rows(); ++c)
            for (Eigen::Index s = 0; s < values_.cols(); ++s) out(k++) = values_(c, s);
        return out;
    }

private:
    void validate_shape() const {
        if (values_.rows() < 1 || height_ < 1 || width_ < 1) throw DomainError("feature map shape must be positive");
    }

    int height_ = 0;
    int width_ = 0;
    Matrix values_;
};

/// Strictly positive: deep negative inputs return the smallest normal double instead of 0.
inline double softplus(double x) {
    const double y = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    return std::max(y, std::numeric_limits<double>::min());
}

inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) {
    if (!(y > 0.0)) throw DomainError("softplus inverse needs a positive argument");
    return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

/// Generalized-mean pooling per channel: (mean_s max(x, 0)^p)^(1/p).
inline Vector gem_pool(const Matrix& values, double p) {
    if (!std::isfinite(p) || p < 1.0) throw DomainError("GeM exponent must be finite and >= 1");
    Vector out(values.rows());
    for (Eigen::Index c = 0; c < values.rows(); ++c) {
        const double peak = values.row(c).maxCoeff();
        if (peak <= 0.0) {
            out(c) = 0.0;
            continue;
        }
        double acc = 0.0;
        for (Eigen::Index s = 0; s < values.cols(); ++s) {
            const double u = std::max(values(c, s), 0.0) / peak;
            if (u > 0.0) acc += std::pow(u, p);
        }
        out(c) = peak * std::pow(acc / static_cast<double>(values.cols()), 1.0 / p);
    }
    return out;
}

inline Vector gem_pool(const FeatureMap& fm, double p) { return gem_pool(fm.values(), p); }

/// Per-location L2 normalization across channels; all-zero columns stay zero.
inline Matrix l2_normalize_channels(const Matrix& values) {
    Matrix out = values;
    for (Eigen::Index s = 0; s < out.cols(); ++s) {
        const double n = out.col(s).norm();
        if (n > 1e-12) out.col(s) /= n;
    }
    return out;
}

enum class HeadVariant { Aggregation, LinearOnly };

inline std::string to_string(HeadVariant v) {
    return v == HeadVariant::Aggregation ? "aggregation" : "linear";
}

struct HeadParams {
    HeadVariant variant = HeadVariant::Aggregation;
    int channels = 0;
    int height = 0;
    int width = 0;
    double gem_p = 3.0;
    bool train_gem_p = false;
    Matrix proj_weights;   ///< hidden x channels (Aggregation only)
    Vector kappa_weights;  ///< hidden (Aggregation) or channels*height*width (LinearOnly)
    double kappa_bias = 0.0;

    int hidden() const noexcept { return static_cast<int>(proj_weights.rows()); }

    /// Random projection, zero output weights: every input starts at kappa = initial_kappa.
    static HeadParams initialize(HeadVariant variant, int channels, int height, int width, int hidden,
                                 double initial_kappa, Rng& rng) {
        HeadParams p;
        p.variant = variant;
        p.channels = channels;
        p.height = height;
        p.width = width;
        std::normal_distribution<double> normal(0.0, 1.0);
        if (variant == HeadVariant::Aggregation) {
            if (hidden < 1) throw DomainError("hidden width must be positive");
            p.proj_weights = Matrix(hidden, channels);
            const double s = 1.0 / std::sqrt(static_cast<double>(channels));
            for (Eigen::Index i = 0; i < p.proj_weights.size(); ++i) p.proj_weights.data()[i] = s * normal(rng);
            p.kappa_weights = Vector::Zero(hidden);
        } else {
            p.kappa_weights = Vector::Zero(static_cast<Eigen::Index>(channels) * height * width);
        }
        p.kappa_bias = softplus_inverse(initial_kappa);
        return p;
    }

    void validate() const {
        if (!(gem_p >= 1.0) || !std::isfinite(gem_p)) throw DomainError("gem_p must be >= 1");
        if (!std::isfinite(kappa_bias) || !kappa_weights.allFinite() || !proj_weights.allFinite()) {
            throw DomainError("head parameters must be finite");
        }
        if (variant == HeadVariant::Aggregation) {
            if (proj_weights.cols() != channels || kappa_weights.size() != proj_weights.rows()) {
                throw DomainError("aggregation head weight shapes are inconsistent");
            }
        } else if (kappa_weights.size() != static_cast<Eigen::Index>(channels) * height * width) {
            throw DomainError("linear head weight shape is inconsistent");
        }
    }

    /// Trainable parameters as one flat vector: [proj (col-major), kappa_weights, bias, (gem_p)].
    Vector pack() const {
        const Eigen::Index n = proj_weights.size() + kappa_weights.size() + 1 + (train_gem_p ? 1 : 0);
        Vector out(n);
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < proj_weights.size(); ++i) out(k++) = proj_weights.data()[i];
        for (Eigen::Index i = 0; i < kappa_weights.size(); ++i) out(k++) = kappa_weights(i);
        out(k++) = kappa_bias;
        if (train_gem_p) out(k++) = gem_p;
        return out;
    }

    void unpack(const Vector& flat) {
        if (flat.size() != pack_size()) throw DomainError("head parameter vector has the wrong length");
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < proj_weights.size(); ++i) proj_weights.data()[i] = flat(k++);
        for (Eigen::Index i = 0; i < kappa_weights.size(); ++i) kappa_weights(i) = flat(k++);
        kappa_bias = flat(k++);
        if (train_gem_p) gem_p = std::max(1.0, flat(k++));
    }

    Eigen::Index pack_size() const {
        return proj_weights.size() + kappa_weights.size() + 1 + (train_gem_p ? 1 : 0);
    }
};

struct HeadGradients {
    Matrix proj_weights;
    Vector kappa_weights;
    double kappa_bias = 0.0;
    double gem_p = 0.0;

    Vector pack(bool with_gem_p) const {
        Vector out(proj_weights.size() + kappa_weights.size() + 1 + (with_gem_p ? 1 : 0));
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < proj_weights.size(); ++i) out(k++) = proj_weights.data()[i];
        for (Eigen::Index i = 0; i < kappa_weights.size(); ++i) out(k++) = kappa_weights(i);
        out(k++) = kappa_bias;
        if (with_gem_p) out(k++) = gem_p;
        return out;
    }
};

/// Intermediate values kept for the backward pass.
struct HeadTrace {
    Matrix normalized;  ///< Aggregation: L2-normalized feature map
    Vector pooled;      ///< Aggregation: GeM output per channel
    Vector hidden;      ///< Aggregation: projection output
    Vector flat;        ///< LinearOnly: flattened input
    double pre = 0.0;
    double kappa = 0.0;
};

namespace detail {

inline void check_head_shape(const FeatureMap& fm, const HeadParams& params) {
    if (fm.channels() != params.channels || fm.height() != params.height || fm.width() != params.width) {
        throw DomainError("feature map shape does not match the head");
    }
}

}  // namespace detail

inline HeadTrace head_trace(const FeatureMap& fm, const HeadParams& params) {
    detail::check_head_shape(fm, params);
    HeadTrace t;
    if (params.variant == HeadVariant::Aggregation) {
        t.normalized = l2_normalize_channels(fm.values());
        t.pooled = gem_pool(t.normalized, params.gem_p);
        t.hidden = params.proj_weights * t.pooled;
        t.pre = params.kappa_weights.dot(t.hidden) + params.kappa_bias;
    } else {
        t.flat = fm.flatten();
        t.pre = params.kappa_weights.dot(t.flat) + params.kappa_bias;
    }
    t.kappa = softplus(t.pre);
    return t;
}

/// kappa = softplus(pre-activation) > 0.
inline double head_forward(const FeatureMap& fm, const HeadParams& params) { return head_trace(fm, params).kappa; }

/// d GeM_c / d p for one channel of non-negative-clipped values.
inline double gem_grad_p(const Eigen::Ref<const Eigen::RowVectorXd>& row, double p, double pooled) {
    if (pooled <= 0.0) return 0.0;
    const double peak = row.maxCoeff();
    double s = 0.0;
    double s_log = 0.0;
    for (Eigen::Index i = 0; i < row.size(); ++i) {
        const double u = std::max(row(i), 0.0) / peak;
        if (u <= 0.0) continue;
        const double up = std::pow(u, p);
        s += up;
        s_log += up * std::log(u);
    }
    const double n = static_cast<double>(row.size());
    s /= n;
    s_log /= n;
    return pooled * (-std::log(s) / (p * p) + s_log / (p * s));
}

/// Backward pass from a stored trace.
inline HeadGradients head_backward(const HeadTrace& t, const HeadParams& params, double upstream) {
    HeadGradients g;
    const double dpre = upstream * logistic(t.pre);
    g.kappa_bias = dpre;
    if (params.variant == HeadVariant::Aggregation) {
        g.kappa_weights = dpre * t.hidden;
        const Vector dhidden = dpre * params.kappa_weights;
        g.proj_weights = dhidden * t.pooled.transpose();
        if (params.train_gem_p) {
            const Vector dpooled = params.proj_weights.transpose() * dhidden;
            double acc = 0.0;
            for (Eigen::Index c = 0; c < t.pooled.size(); ++c) {
                acc += dpooled(c) * gem_grad_p(t.normalized.row(c), params.gem_p, t.pooled(c));
            }
            g.gem_p = acc;
        }
    } else {
        g.proj_weights = Matrix(0, 0);
        g.kappa_weights = dpre * t.flat;
    }
    return g;
}

/// Parameter gradients of upstream * kappa.
inline HeadGradients head_backward(const FeatureMap& fm, const HeadParams& params, double upstream) {
    const HeadTrace t = head_trace(fm, params);
    return head_backward(t, params, upstream);
}

}  // namespace kappa_sphere
