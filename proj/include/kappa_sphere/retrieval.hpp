#pragma once

// Exact cosine nearest-neighbour search, ground-truth resolution and Recall@K.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "kappa_sphere/parallel.hpp"
#include "kappa_sphere/vmf.hpp"

namespace kappa_sphere {

using ImageId = std::int64_t;

struct Pose {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Pose&, const Pose&) = default;
};

inline double distance(const Pose& a, const Pose& b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Row-aligned descriptor collection. Rows of `descriptors` are unit-norm.
struct DescriptorBank {
    Matrix descriptors;  ///< N x d
    std::vector<ImageId> ids;
    std::vector<int> labels;
    std::optional<std::vector<Pose>> poses;
    std::optional<std::vector<double>> true_kappa;
    std::optional<std::vector<double>> kappas;

    std::size_t size() const noexcept { return ids.size(); }
    int dim() const noexcept { return static_cast<int>(descriptors.cols()); }

    UnitDescriptor row(std::size_t i) const {
        return UnitDescriptor::from_unit(descriptors.row(static_cast<Eigen::Index>(i)).transpose());
    }

    void validate() const {
        const std::size_t n = ids.size();
        if (static_cast<std::size_t>(descriptors.rows()) != n || labels.size() != n) {
            throw DomainError("descriptor bank arrays have unequal length");
        }
        if ((poses && poses->size() != n) || (true_kappa && true_kappa->size() != n) ||
            (kappas && kappas->size() != n)) {
            throw DomainError("descriptor bank optional arrays have unequal length");
        }
        for (Eigen::Index i = 0; i < descriptors.rows(); ++i) {
            if (std::abs(descriptors.row(i).norm() - 1.0) > kUnitTolerance) {
                throw DomainError("descriptor row " + std::to_string(i) + " is not unit-norm");
            }
        }
    }

    DescriptorBank subset(const std::vector<std::size_t>& rows) const {
        DescriptorBank out;
        out.descriptors.resize(static_cast<Eigen::Index>(rows.size()), descriptors.cols());
        if (poses) out.poses.emplace();
        if (true_kappa) out.true_kappa.emplace();
        if (kappas) out.kappas.emplace();
        for (std::size_t k = 0; k < rows.size(); ++k) {
            const std::size_t r = rows[k];
            out.descriptors.row(static_cast<Eigen::Index>(k)) = descriptors.row(static_cast<Eigen::Index>(r));
            out.ids.push_back(ids[r]);
            out.labels.push_back(labels[r]);
            if (poses) out.poses->push_back((*poses)[r]);
            if (true_kappa) out.true_kappa->push_back((*true_kappa)[r]);
            if (kappas) out.kappas->push_back((*kappas)[r]);
        }
        return out;
    }
};

struct RetrievalResult {
    ImageId query_id = 0;
    std::vector<ImageId> ref_ids;       ///< ranked
    std::vector<std::size_t> ref_rows;  ///< bank rows of ref_ids
    std::vector<double> similarities;   ///< descending
    std::vector<bool> success;          ///< success[k]: a positive within the first k+1; filled by mark_success
};

/// Exact top-K by cosine similarity; ties go to the smaller reference id.
inline RetrievalResult knn(const UnitDescriptor& query, const DescriptorBank& bank, std::size_t k,
                           ImageId query_id = 0) {
    if (k < 1 || k > bank.size()) throw DomainError("K must lie in [1, bank size]");
    if (query.dim() != bank.dim()) throw DomainError("query and bank dimensions differ");
    const Vector sims = bank.descriptors * query.values();
    std::vector<std::size_t> order(bank.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto better = [&](std::size_t a, std::size_t b) {
        if (sims(static_cast<Eigen::Index>(a)) != sims(static_cast<Eigen::Index>(b))) {
            return sims(static_cast<Eigen::Index>(a)) > sims(static_cast<Eigen::Index>(b));
        }
        return bank.ids[a] < bank.ids[b];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
    RetrievalResult r;
    r.query_id = query_id;
    for (std::size_t i = 0; i < k; ++i) {
        r.ref_rows.push_back(order[i]);
        r.ref_ids.push_back(bank.ids[order[i]]);
        r.similarities.push_back(sims(static_cast<Eigen::Index>(order[i])));
    }
    return r;
}

/// knn for every row of `queries`, results in query row order.
inline std::vector<RetrievalResult> knn_all(const DescriptorBank& queries, const DescriptorBank& bank,
                                            std::size_t k) {
    std::vector<RetrievalResult> out(queries.size());
    parallel_for(queries.size(), [&](std::size_t i) { out[i] = knn(queries.row(i), bank, k, queries.ids[i]); });
    return out;
}

/// Either "reference within tau scene units of the query" or an explicit positive set per query.
class GroundTruth {
public:
    struct DistanceThreshold {
        double tau;
    };
    using PositiveMap = std::map<ImageId, std::set<ImageId>>;

    static GroundTruth distance_threshold(double tau, std::unordered_map<ImageId, Pose> poses) {
        if (!(tau > 0.0)) throw DomainError("ground-truth threshold must be positive");
        GroundTruth gt;
        gt.mode_ = DistanceThreshold{tau};
        gt.poses_ = std::move(poses);
        return gt;
    }

    /// Threshold ground truth over the poses of the given banks.
    static GroundTruth distance_threshold(double tau, const DescriptorBank& queries, const DescriptorBank& refs) {
        if (!queries.poses || !refs.poses) throw UnsupportedError("distance ground truth needs poses");
        std::unordered_map<ImageId, Pose> poses;
        for (std::size_t i = 0; i < queries.size(); ++i) poses[queries.ids[i]] = (*queries.poses)[i];
        for (std::size_t i = 0; i < refs.size(); ++i) poses[refs.ids[i]] = (*refs.poses)[i];
        return distance_threshold(tau, std::move(poses));
    }

    static GroundTruth explicit_positives(PositiveMap positives) {
        GroundTruth gt;
        gt.mode_ = std::move(positives);
        return gt;
    }

    /// Same-label references are the positives (for banks without poses).
    static GroundTruth from_labels(const DescriptorBank& queries, const DescriptorBank& refs) {
        std::map<int, std::set<ImageId>> by_label;
        for (std::size_t i = 0; i < refs.size(); ++i) by_label[refs.labels[i]].insert(refs.ids[i]);
        PositiveMap m;
        for (std::size_t i = 0; i < queries.size(); ++i) {
            auto it = by_label.find(queries.labels[i]);
            m[queries.ids[i]] = it == by_label.end() ? std::set<ImageId>{} : it->second;
        }
        return explicit_positives(std::move(m));
    }

    /// Precomputes the explicit sets a threshold would produce for these banks.
    GroundTruth to_explicit(const DescriptorBank& queries, const DescriptorBank& refs) const {
        PositiveMap m;
        for (std::size_t i = 0; i < queries.size(); ++i) {
            auto& set = m[queries.ids[i]];
            for (std::size_t j = 0; j < refs.size(); ++j)
                if (is_positive(queries.ids[i], refs.ids[j])) set.insert(refs.ids[j]);
        }
        return explicit_positives(std::move(m));
    }

    bool is_threshold() const noexcept { return std::holds_alternative<DistanceThreshold>(mode_); }
    double tau() const { return std::get<DistanceThreshold>(mode_).tau; }

    bool is_positive(ImageId query, ImageId ref) const {
        if (const auto* t = std::get_if<DistanceThreshold>(&mode_)) {
            const auto q = poses_.find(query);
            const auto r = poses_.find(ref);
            if (q == poses_.end() || r == poses_.end()) throw LookupError("no pose for image id");
            return distance(q->second, r->second) <= t->tau;
        }
        const auto& m = std::get<PositiveMap>(mode_);
        const auto it = m.find(query);
        if (it == m.end()) throw LookupError("query " + std::to_string(query) + " missing from ground truth");
        return it->second.count(ref) > 0;
    }

private:
    std::variant<DistanceThreshold, PositiveMap> mode_{DistanceThreshold{25.0}};
    std::unordered_map<ImageId, Pose> poses_;
};

/// Fills result.success for every prefix length.
inline void mark_success(RetrievalResult& result, const GroundTruth& gt) {
    result.success.assign(result.ref_ids.size(), false);
    bool hit = false;
    for (std::size_t i = 0; i < result.ref_ids.size(); ++i) {
        hit = hit || gt.is_positive(result.query_id, result.ref_ids[i]);
        result.success[i] = hit;
    }
}

inline void mark_success(std::vector<RetrievalResult>& results, const GroundTruth& gt) {
    for (auto& r : results) mark_success(r, gt);
}

/// Per-query success flags at depth K (results must already be marked).
inline std::vector<bool> success_at(const std::vector<RetrievalResult>& results, std::size_t k) {
    std::vector<bool> out;
    out.reserve(results.size());
    for (const auto& r : results) {
        if (k < 1 || k > r.success.size()) throw DomainError("K exceeds the marked retrieval depth");
        out.push_back(r.success[k - 1]);
    }
    return out;
}

/// Fraction of queries with a positive among their top K.
inline double recall_at_k(const std::vector<RetrievalResult>& results, const GroundTruth& gt, std::size_t k) {
    if (results.empty()) throw DomainError("recall over an empty result set");
    std::size_t hits = 0;
    for (const auto& r : results) {
        if (k < 1 || k > r.ref_ids.size()) throw DomainError("K exceeds the retrieval depth");
        for (std::size_t i = 0; i < k; ++i) {
            if (gt.is_positive(r.query_id, r.ref_ids[i])) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

}  // namespace kappa_sphere
