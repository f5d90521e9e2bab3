#pragma once

// Per-query and per-pair uncertainty scores. Every score is oriented so that
// larger means more uncertain.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "kappa_sphere/retrieval.hpp"
#include "kappa_sphere/vmf.hpp"

namespace kappa_sphere {

/// Predicted concentrations below this are raised to it before any score is built.
inline constexpr double kKappaFloor = 1.0;

inline double floor_kappa(double kappa) {
    if (!std::isfinite(kappa) || kappa < 0.0) throw DomainError("predicted kappa must be finite and >= 0");
    return std::max(kappa, kKappaFloor);
}

enum class Method { KappaPlace, InverseKappa, L2, PA, SUE, SUELog, GNLL };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::KappaPlace: return "kappaplace";
        case Method::InverseKappa: return "inverse-kappa";
        case Method::L2: return "l2";
        case Method::PA: return "pa";
        case Method::SUE: return "sue";
        case Method::SUELog: return "sue-log";
        case Method::GNLL: return "gnll";
    }
    return "unknown";
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::KappaPlace, Method::InverseKappa, Method::L2, Method::PA, Method::SUE, Method::SUELog,
                     Method::GNLL}) {
        if (to_string(m) == s) return m;
    }
    throw DomainError("unknown method '" + s + "'");
}

struct ScoredQuery {
    ImageId query_id = 0;
    double score = 0.0;
    Method method = Method::KappaPlace;
    bool degenerate = false;
};

struct ScoredPair {
    ImageId query_id = 0;
    ImageId ref_id = 0;
    std::size_t rank = 0;  ///< 1-based
    double similarity = 0.0;
    double score = 0.0;
    bool is_positive = false;
    bool degenerate = false;
};

/// Resultant-vector uncertainty of the query and its top-1 reference, kappas floored at 1.
inline ResultantScore query_uncertainty(double kappa_q, double kappa_r1, double cos_qr1,
                                        double cap = kDefaultUncertaintyCap) {
    return resultant_uncertainty(floor_kappa(kappa_q), floor_kappa(kappa_r1), cos_qr1, cap);
}

/// Same kernel applied to an arbitrary query-reference pair.
inline ResultantScore match_uncertainty(double kappa_q, double kappa_r, double cos_qr,
                                        double cap = kDefaultUncertaintyCap) {
    return resultant_uncertainty(floor_kappa(kappa_q), floor_kappa(kappa_r), cos_qr, cap);
}

/// 1 / max(kappa, 1), in (0, 1].
inline double query_uncertainty_inverse_kappa(double kappa_q) { return 1.0 / floor_kappa(kappa_q); }

/// Euclidean distance between unit vectors with the given cosine.
inline double l2_from_cos(double cos) { return std::sqrt(std::max(0.0, 2.0 - 2.0 * std::clamp(cos, -1.0, 1.0))); }

/// Distance to the top-1 reference.
inline double baseline_l2(const RetrievalResult& result) {
    if (result.similarities.empty()) throw DomainError("L2 score needs at least one retrieved reference");
    return l2_from_cos(result.similarities.front());
}

/// d1 / d2 over the two nearest references; d2 = 0 counts as maximal ambiguity.
inline double baseline_pa(const RetrievalResult& result) {
    if (result.similarities.size() < 2) throw DomainError("PA score needs at least two retrieved references");
    const double d1 = l2_from_cos(result.similarities[0]);
    const double d2 = l2_from_cos(result.similarities[1]);
    if (d2 <= 0.0) return 1.0;
    return std::min(1.0, d1 / d2);
}

/// Trace of the softmax(similarity)-weighted covariance of the top-K reference poses.
/// `ref_poses` is indexed by bank row.
inline double baseline_sue(const RetrievalResult& result, const std::optional<std::vector<Pose>>& ref_poses,
                           std::size_t k) {
    if (!ref_poses) throw UnsupportedError("SUE needs reference poses");
    if (k < 2 || k > result.ref_rows.size()) throw DomainError("SUE needs 2 <= K <= retrieval depth");
    const double peak = result.similarities.front();
    std::vector<double> w(k);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        w[i] = std::exp(result.similarities[i] - peak);
        total += w[i];
    }
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        w[i] /= total;
        const Pose& p = (*ref_poses)[result.ref_rows[i]];
        mx += w[i] * p.x;
        my += w[i] * p.y;
    }
    double trace = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const Pose& p = (*ref_poses)[result.ref_rows[i]];
        trace += w[i] * ((p.x - mx) * (p.x - mx) + (p.y - my) * (p.y - my));
    }
    return std::max(0.0, trace);
}

inline double sue_log(double v) { return std::log1p(v); }

struct ScoreInputs {
    const std::vector<RetrievalResult>* results = nullptr;
    const DescriptorBank* queries = nullptr;    ///< kappas used by kappa-based methods
    const DescriptorBank* references = nullptr;  ///< kappas and poses
    std::size_t sue_k = 10;
    double cap = kDefaultUncertaintyCap;
};

/// Query-level scores for one method. Throws UnsupportedError when the inputs lack
/// what the method needs (kappas, poses).
inline std::vector<ScoredQuery> score_queries(Method method, const ScoreInputs& in) {
    const auto& results = *in.results;
    const bool needs_kappa = method == Method::KappaPlace || method == Method::InverseKappa || method == Method::GNLL;
    if (needs_kappa && !in.queries->kappas) throw UnsupportedError(to_string(method) + " needs predicted query kappas");
    if (method == Method::KappaPlace && !in.references->kappas) {
        throw UnsupportedError("kappaplace needs predicted reference kappas");
    }
    if ((method == Method::SUE || method == Method::SUELog) && !in.references->poses) {
        throw UnsupportedError(to_string(method) + " needs reference poses");
    }
    std::vector<ScoredQuery> out;
    out.reserve(results.size());
    for (std::size_t i = 0; i < results.size(); ++i) {
        const RetrievalResult& r = results[i];
        ScoredQuery s{r.query_id, 0.0, method, false};
        switch (method) {
            case Method::KappaPlace: {
                const auto u = query_uncertainty((*in.queries->kappas)[i], (*in.references->kappas)[r.ref_rows.front()],
                                                 r.similarities.front(), in.cap);
                s.score = u.value;
                s.degenerate = u.degenerate;
                break;
            }
            case Method::InverseKappa: s.score = query_uncertainty_inverse_kappa((*in.queries->kappas)[i]); break;
            case Method::GNLL: s.score = (*in.queries->kappas)[i]; break;
            case Method::L2: s.score = baseline_l2(r); break;
            case Method::PA: s.score = baseline_pa(r); break;
            case Method::SUE: s.score = baseline_sue(r, in.references->poses, in.sue_k); break;
            case Method::SUELog: s.score = sue_log(baseline_sue(r, in.references->poses, in.sue_k)); break;
        }
        out.push_back(s);
    }
    return out;
}

/// Pair-level scores over the top K of every result (K * N pairs, query-major, rank-minor).
/// Supported methods: KappaPlace (resultant kernel) and L2 (pairwise distance).
inline std::vector<ScoredPair> score_pairs(Method method, const ScoreInputs& in, std::size_t k, const GroundTruth& gt) {
    if (method != Method::KappaPlace && method != Method::L2) {
        throw UnsupportedError(to_string(method) + " has no pair-level score");
    }
    if (method == Method::KappaPlace && (!in.queries->kappas || !in.references->kappas)) {
        throw UnsupportedError("kappaplace pair scores need predicted kappas");
    }
    const auto& results = *in.results;
    std::vector<ScoredPair> out;
    out.reserve(results.size() * k);
    for (std::size_t i = 0; i < results.size(); ++i) {
        const RetrievalResult& r = results[i];
        if (r.ref_ids.size() < k) throw DomainError("retrieval depth smaller than K");
        for (std::size_t j = 0; j < k; ++j) {
            ScoredPair p;
            p.query_id = r.query_id;
            p.ref_id = r.ref_ids[j];
            p.rank = j + 1;
            p.similarity = r.similarities[j];
            p.is_positive = gt.is_positive(r.query_id, r.ref_ids[j]);
            if (method == Method::KappaPlace) {
                const auto u = match_uncertainty((*in.queries->kappas)[i], (*in.references->kappas)[r.ref_rows[j]],
                                                 r.similarities[j], in.cap);
                p.score = u.value;
                p.degenerate = u.degenerate;
            } else {
                p.score = l2_from_cos(r.similarities[j]);
            }
            out.push_back(p);
        }
    }
    return out;
}

}  // namespace kappa_sphere
