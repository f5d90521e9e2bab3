#pragma once

#include <span>
#include <string>
#include <vector>

#include "kappa_sphere/vmf.hpp"

namespace kappa_sphere {

/// Class prototypes w_0..w_{C-1}, stored as the columns of a d x C matrix.
class PrototypeSet {
public:
    PrototypeSet() = default;

    explicit PrototypeSet(std::span<const UnitDescriptor> prototypes) {
        if (prototypes.empty()) throw DomainError("prototype set is empty");
        const Eigen::Index d = prototypes.front().dim();
        weights_.resize(d, static_cast<Eigen::Index>(prototypes.size()));
        for (std::size_t j = 0; j < prototypes.size(); ++j) {
            if (prototypes[j].dim() != d) throw DomainError("prototype dimensions differ");
            weights_.col(static_cast<Eigen::Index>(j)) = prototypes[j].values();
        }
    }

    /// Takes a d x C matrix whose columns are unit-norm within 1e-9.
    static PrototypeSet from_matrix(Matrix weights) {
        PrototypeSet set;
        for (Eigen::Index j = 0; j < weights.cols(); ++j) {
            if (std::abs(weights.col(j).norm() - 1.0) > kUnitTolerance) {
                throw DomainError("prototype " + std::to_string(j) + " is not unit-norm");
            }
        }
        set.weights_ = std::move(weights);
        return set;
    }

    int num_classes() const noexcept { return static_cast<int>(weights_.cols()); }
    int dim() const noexcept { return static_cast<int>(weights_.rows()); }
    const Matrix& weights() const noexcept { return weights_; }

    UnitDescriptor at(int label) const {
        if (label < 0 || label >= num_classes()) {
            throw LookupError("unknown class label " + std::to_string(label));
        }
        return UnitDescriptor::from_unit(weights_.col(label));
    }

    void set(int label, const UnitDescriptor& w) {
        if (label < 0 || label >= num_classes()) {
            throw LookupError("unknown class label " + std::to_string(label));
        }
        if (w.dim() != dim()) throw DomainError("prototype dimension mismatch");
        weights_.col(label) = w.values();
    }

    /// Applies `delta` to the raw matrix and re-projects every column onto the sphere.
    void step_and_renormalize(const Matrix& delta) {
        if (delta.rows() != weights_.rows() || delta.cols() != weights_.cols()) {
            throw DomainError("prototype update shape mismatch");
        }
        weights_ += delta;
        for (Eigen::Index j = 0; j < weights_.cols(); ++j) weights_.col(j).normalize();
    }

private:
    Matrix weights_;
};

/// mu_Q = w_label.
inline UnitDescriptor class_anchor(const PrototypeSet& prototypes, int label) {
    return prototypes.at(label);
}

/// Normalized sum of positive embeddings. Throws DegenerateError when the sum vanishes.
inline UnitDescriptor batch_centroid_anchor(std::span<const UnitDescriptor> positives) {
    if (positives.empty()) throw DomainError("batch centroid needs at least one positive");
    const Eigen::Index d = positives.front().dim();
    Vector sum = Vector::Zero(d);
    for (const auto& p : positives) {
        if (p.dim() != d) throw DomainError("positive dimensions differ");
        sum += p.values();
    }
    if (sum.norm() < 1e-12) throw DegenerateError("positive centroid has zero length");
    return UnitDescriptor::normalize(sum);
}

struct CentroidOptions {
    bool include_query = false;
};

/// Batch-centroid anchor for a query; the query's own embedding joins the sum only when asked.
inline UnitDescriptor batch_centroid_anchor(const UnitDescriptor& query,
                                            std::span<const UnitDescriptor> positives,
                                            CentroidOptions options = {}) {
    if (!options.include_query) return batch_centroid_anchor(positives);
    std::vector<UnitDescriptor> all(positives.begin(), positives.end());
    all.push_back(query);
    return batch_centroid_anchor(all);
}

}  // namespace kappa_sphere
