#pragma once

// End-to-end evaluation: retrieval, Recall@K, and calibration reports per method and K
// at query level and match level.

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "kappa_sphere/calibration.hpp"
#include "kappa_sphere/retrieval.hpp"
#include "kappa_sphere/scores.hpp"

namespace kappa_sphere {

struct EvalOptions {
    std::vector<std::size_t> ks{1, 5, 10};
    std::vector<Method> methods{Method::KappaPlace, Method::InverseKappa, Method::L2,
                                Method::PA,         Method::SUE,          Method::SUELog};
    int num_bins = 10;
    BinningStrategy strategy = BinningStrategy::EqualWidth;
    std::optional<ClampMode> clamp;  ///< unset: per-method default
    std::size_t sue_k = 10;
    double cap = kDefaultUncertaintyCap;

    BinningConfig binning_for(Method m) const {
        BinningConfig b;
        b.num_bins = num_bins;
        b.strategy = strategy;
        b.clamp = clamp.value_or(default_clamp(m));
        return b;
    }

    void validate() const {
        if (ks.empty()) throw DomainError("at least one K is required");
        for (std::size_t k : ks)
            if (k < 1) throw DomainError("K must be positive");
        if (methods.empty()) throw DomainError("at least one method is required");
        if (num_bins < 2) throw DomainError("at least two bins are required");
        if (sue_k < 2) throw DomainError("SUE needs K >= 2");
    }
};

struct MethodReport {
    Method method = Method::KappaPlace;
    std::optional<std::string> unsupported;  ///< reason, when the inputs cannot support the method
    std::vector<CalibrationReport> per_k;    ///< aligned with EvalOptions::ks
};

struct EvalReport {
    std::string level = "query";
    std::size_t num_queries = 0;
    std::size_t num_references = 0;
    std::vector<std::size_t> ks;
    std::vector<double> recall;  ///< aligned with ks
    std::vector<MethodReport> methods;

    const MethodReport& method(Method m) const {
        for (const auto& r : methods)
            if (r.method == m) return r;
        throw LookupError("method " + to_string(m) + " not in report");
    }

    /// ECE of method m at K; throws if the method was unsupported or K not evaluated.
    double ece(Method m, std::size_t k) const {
        const MethodReport& r = method(m);
        if (r.unsupported) throw UnsupportedError(*r.unsupported);
        for (std::size_t i = 0; i < ks.size(); ++i)
            if (ks[i] == k) return r.per_k[i].ece;
        throw LookupError("K=" + std::to_string(k) + " not evaluated");
    }
};

/// Retrieval depth needed to serve every requested K (and SUE's neighbourhood).
inline std::size_t retrieval_depth(const EvalOptions& opts, std::size_t bank_size) {
    std::size_t depth = *std::max_element(opts.ks.begin(), opts.ks.end());
    if (std::find(opts.methods.begin(), opts.methods.end(), Method::SUE) != opts.methods.end() ||
        std::find(opts.methods.begin(), opts.methods.end(), Method::SUELog) != opts.methods.end()) {
        depth = std::max(depth, opts.sue_k);
    }
    if (std::find(opts.methods.begin(), opts.methods.end(), Method::PA) != opts.methods.end()) {
        depth = std::max<std::size_t>(depth, 2);
    }
    if (depth > bank_size) throw DomainError("database smaller than the requested retrieval depth");
    return depth;
}

inline EvalReport evaluate_queries(const DescriptorBank& queries, const DescriptorBank& database,
                                   const GroundTruth& gt, const EvalOptions& opts) {
    opts.validate();
    if (queries.size() == 0) throw DomainError("no queries to evaluate");
    auto results = knn_all(queries, database, retrieval_depth(opts, database.size()));
    mark_success(results, gt);

    EvalReport rep;
    rep.num_queries = queries.size();
    rep.num_references = database.size();
    rep.ks = opts.ks;
    for (std::size_t k : opts.ks) rep.recall.push_back(recall_at_k(results, gt, k));

    ScoreInputs in;
    in.results = &results;
    in.queries = &queries;
    in.references = &database;
    in.sue_k = opts.sue_k;
    in.cap = opts.cap;
    for (Method m : opts.methods) {
        MethodReport mr;
        mr.method = m;
        try {
            const auto scored = score_queries(m, in);
            for (std::size_t k : opts.ks) mr.per_k.push_back(ece_at_k(scored, success_at(results, k), k, opts.binning_for(m)));
        } catch (const UnsupportedError& e) {
            mr.unsupported = e.what();
            mr.per_k.clear();
        }
        rep.methods.push_back(std::move(mr));
    }
    return rep;
}

/// Match-level reports for the pair-capable methods (kappaplace, l2) among opts.methods.
inline EvalReport evaluate_matches(const DescriptorBank& queries, const DescriptorBank& database,
                                   const GroundTruth& gt, const EvalOptions& opts) {
    opts.validate();
    if (queries.size() == 0) throw DomainError("no queries to evaluate");
    const std::size_t depth = *std::max_element(opts.ks.begin(), opts.ks.end());
    if (depth > database.size()) throw DomainError("database smaller than the requested K");
    auto results = knn_all(queries, database, depth);
    mark_success(results, gt);

    EvalReport rep;
    rep.level = "match";
    rep.num_queries = queries.size();
    rep.num_references = database.size();
    rep.ks = opts.ks;
    for (std::size_t k : opts.ks) rep.recall.push_back(recall_at_k(results, gt, k));

    ScoreInputs in;
    in.results = &results;
    in.queries = &queries;
    in.references = &database;
    in.cap = opts.cap;
    for (Method m : opts.methods) {
        if (m != Method::KappaPlace && m != Method::L2) continue;
        MethodReport mr;
        mr.method = m;
        try {
            for (std::size_t k : opts.ks) {
                auto cr = match_ece_at_k(score_pairs(m, in, k, gt), k, queries.size(), opts.binning_for(m));
                cr.method = to_string(m);
                mr.per_k.push_back(std::move(cr));
            }
        } catch (const UnsupportedError& e) {
            mr.unsupported = e.what();
            mr.per_k.clear();
        }
        rep.methods.push_back(std::move(mr));
    }
    return rep;
}

struct SimilarityStratum {
    double sim_low = 0.0;
    double sim_high = 0.0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    double mean_positive = 0.0;  ///< mean score of positive pairs; 0 when none
    double mean_negative = 0.0;
};

/// Pairs stratified into `strata` equal-count similarity bands; mean score of positive and
/// negative pairs inside each band. Separates what the score knows beyond similarity.
inline std::vector<SimilarityStratum> stratify_by_similarity(const std::vector<ScoredPair>& pairs, int strata = 10) {
    if (strata < 1) throw DomainError("need at least one stratum");
    if (pairs.empty()) return {};
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pairs[a].similarity < pairs[b].similarity; });
    std::vector<SimilarityStratum> out;
    const std::size_t n = pairs.size();
    for (int s = 0; s < strata; ++s) {
        const std::size_t lo = n * static_cast<std::size_t>(s) / static_cast<std::size_t>(strata);
        const std::size_t hi = n * static_cast<std::size_t>(s + 1) / static_cast<std::size_t>(strata);
        if (lo == hi) continue;
        SimilarityStratum st;
        st.sim_low = pairs[order[lo]].similarity;
        st.sim_high = pairs[order[hi - 1]].similarity;
        double sp = 0.0;
        double sn = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            const ScoredPair& p = pairs[order[i]];
            if (p.is_positive) {
                ++st.positives;
                sp += p.score;
            } else {
                ++st.negatives;
                sn += p.score;
            }
        }
        if (st.positives) st.mean_positive = sp / static_cast<double>(st.positives);
        if (st.negatives) st.mean_negative = sn / static_cast<double>(st.negatives);
        out.push_back(st);
    }
    return out;
}

}  // namespace kappa_sphere
