#pragma once

// Training objectives beyond the vMF likelihood: the large-margin cosine
// classification loss, the isotropic Gaussian NLL used by the GNLL variant,
// and the linear encoder that stands in for a retrieval backbone.

#include <cmath>

#include "kappa_sphere/anchoring.hpp"
#include "kappa_sphere/vmf.hpp"

namespace kappa_sphere {

struct LmclConfig {
    double scale = 30.0;
    double margin = 0.35;

    void validate() const {
        if (!(scale > 0.0) || !std::isfinite(scale)) throw DomainError("LMCL scale must be positive");
        if (!(margin >= 0.0) || !(margin < 1.0)) throw DomainError("LMCL margin must lie in [0, 1)");
    }
};

struct LmclResult {
    double loss = 0.0;
    Vector grad_embedding;   ///< d
    Matrix grad_prototypes;  ///< d x C, w.r.t. the raw prototype columns
};

/// Cross-entropy over s * (cos_j - m [j == label]).
inline LmclResult lmcl_loss(const UnitDescriptor& embedding, const PrototypeSet& prototypes, int label,
                            const LmclConfig& cfg) {
    cfg.validate();
    if (label < 0 || label >= prototypes.num_classes()) throw LookupError("LMCL label out of range");
    if (embedding.dim() != prototypes.dim()) throw DomainError("embedding and prototype dimensions differ");

    const Matrix& w = prototypes.weights();
    Vector logits = cfg.scale * (w.transpose() * embedding.values());
    logits(label) -= cfg.scale * cfg.margin;

    const double peak = logits.maxCoeff();
    Vector prob = (logits.array() - peak).exp().matrix();
    const double z = prob.sum();
    prob /= z;

    LmclResult r;
    r.loss = -(logits(label) - peak - std::log(z));
    Vector dlogits = prob;
    dlogits(label) -= 1.0;
    dlogits *= cfg.scale;
    r.grad_embedding = w * dlogits;
    r.grad_prototypes = embedding.values() * dlogits.transpose();
    return r;
}

struct GnllResult {
    double loss = 0.0;
    double grad_sigma_sq = 0.0;
    Vector grad_z;
    Vector grad_mu;
};

/// ||z - mu||^2 / (2 sigma^2) + (d / 2) ln sigma^2.
inline GnllResult gnll_loss(const UnitDescriptor& z, const UnitDescriptor& mu, double sigma_sq, int d) {
    if (!(sigma_sq > 0.0) || !std::isfinite(sigma_sq)) throw DomainError("sigma^2 must be positive and finite");
    if (z.dim() != mu.dim() || z.dim() != d) throw DomainError("GNLL dimension mismatch");
    const Vector diff = z.values() - mu.values();
    const double sq = diff.squaredNorm();
    GnllResult r;
    r.loss = sq / (2.0 * sigma_sq) + 0.5 * d * std::log(sigma_sq);
    r.grad_sigma_sq = -sq / (2.0 * sigma_sq * sigma_sq) + 0.5 * d / sigma_sq;
    r.grad_z = diff / sigma_sq;
    r.grad_mu = -r.grad_z;
    return r;
}

/// Linear map from raw features (length m) to a descriptor on S^{d-1}.
class LinearEncoder {
public:
    LinearEncoder() = default;
    explicit LinearEncoder(Matrix weights) : weights_(std::move(weights)) {}

    static LinearEncoder identity(int d) { return LinearEncoder(Matrix::Identity(d, d)); }

    int input_dim() const noexcept { return static_cast<int>(weights_.cols()); }
    int output_dim() const noexcept { return static_cast<int>(weights_.rows()); }
    const Matrix& weights() const noexcept { return weights_; }
    Matrix& weights() noexcept { return weights_; }

    UnitDescriptor encode(const Vector& raw) const {
        if (raw.size() != weights_.cols()) throw DomainError("raw feature length does not match encoder");
        return UnitDescriptor::normalize(weights_ * raw);
    }

    /// dL/dW given dL/de at e = normalize(W x).
    Matrix backward(const Vector& raw, const Vector& grad_embedding) const {
        const Vector u = weights_ * raw;
        const double n = u.norm();
        const Vector e = u / n;
        const Vector du = (grad_embedding - e * e.dot(grad_embedding)) / n;
        return du * raw.transpose();
    }

private:
    Matrix weights_;
};

}  // namespace kappa_sphere
