#pragma once

// ECE@K with rank-anchored expected levels.
//
// Scores are clamped at fixed percentiles, partitioned into M bins (bin 1 = most
// certain), and each bin's observed success rate is compared with
// C(B_i) = (M - i) / (M - 1):
//
//   ECE = sum_i |B_i| / N * |observed(B_i) - C(B_i)|
//
// The match-level variant bins K * N query-reference pairs and uses the
// fraction of ground-truth positives per bin as the observed rate.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "kappa_sphere/errors.hpp"
#include "kappa_sphere/scores.hpp"

namespace kappa_sphere {

enum class BinningStrategy { EqualWidth, Quantile };
enum class ClampMode { TwoSided, OneSidedHigh, None };

inline std::string to_string(BinningStrategy s) { return s == BinningStrategy::EqualWidth ? "equal-width" : "quantile"; }

inline std::string to_string(ClampMode c) {
    switch (c) {
        case ClampMode::TwoSided: return "two-sided";
        case ClampMode::OneSidedHigh: return "one-sided-high";
        case ClampMode::None: return "none";
    }
    return "none";
}

inline BinningStrategy binning_from_string(const std::string& s) {
    if (s == "equal-width") return BinningStrategy::EqualWidth;
    if (s == "quantile") return BinningStrategy::Quantile;
    throw DomainError("unknown binning strategy '" + s + "'");
}

inline ClampMode clamp_from_string(const std::string& s) {
    if (s == "two-sided") return ClampMode::TwoSided;
    if (s == "one-sided-high") return ClampMode::OneSidedHigh;
    if (s == "none") return ClampMode::None;
    throw DomainError("unknown clamp mode '" + s + "'");
}

inline constexpr double kClampLowPercentile = 0.01;
inline constexpr double kClampHighPercentile = 0.99;

struct BinningConfig {
    int num_bins = 10;
    BinningStrategy strategy = BinningStrategy::EqualWidth;
    ClampMode clamp = ClampMode::TwoSided;

    void validate() const {
        if (num_bins < 2) throw DomainError("at least two bins are required");
    }
};

/// Clamp mode the evaluation protocol uses for each score family: two-sided for
/// concentration-derived scores, high tail only for distance-like scores.
inline ClampMode default_clamp(Method m) {
    switch (m) {
        case Method::L2:
        case Method::SUE:
        case Method::SUELog: return ClampMode::OneSidedHigh;
        default: return ClampMode::TwoSided;
    }
}

struct ClampResult {
    std::vector<double> values;
    double low = 0.0;   ///< lower bound applied (or the minimum when unclamped)
    double high = 0.0;  ///< upper bound applied (or the maximum when unclamped)
};

/// Lower bound = order statistic floor(0.01 (n-1)), upper = order statistic ceil(0.99 (n-1)).
/// Using order statistics rather than interpolated percentiles makes clamping idempotent.
inline ClampResult clamp_values(const std::vector<double>& values, ClampMode mode) {
    if (values.empty()) throw DomainError("cannot clamp an empty score vector");
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const double n1 = static_cast<double>(sorted.size() - 1);
    ClampResult r;
    r.low = sorted.front();
    r.high = sorted.back();
    if (mode == ClampMode::TwoSided) {
        r.low = sorted[static_cast<std::size_t>(std::floor(kClampLowPercentile * n1))];
    }
    if (mode != ClampMode::None) {
        r.high = sorted[static_cast<std::size_t>(std::ceil(kClampHighPercentile * n1))];
    }
    r.values.reserve(values.size());
    for (double v : values) r.values.push_back(std::clamp(v, r.low, r.high));
    return r;
}

/// 1-based bin per value. EqualWidth splits [min, max] into M intervals; Quantile assigns
/// by the count of strictly smaller values, so ties share a bin. A zero range puts
/// everything in bin 1.
inline std::vector<int> bin_assign(const std::vector<double>& values, int num_bins, BinningStrategy strategy) {
    if (num_bins < 1) throw DomainError("num_bins must be positive");
    std::vector<int> bins(values.size(), 1);
    if (values.empty()) return bins;
    if (strategy == BinningStrategy::EqualWidth) {
        const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
        const double lo = *mn;
        const double range = *mx - lo;
        if (!(range > 0.0)) return bins;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double t = (values[i] - lo) / range * num_bins;
            bins[i] = std::min(num_bins, static_cast<int>(std::floor(t)) + 1);
        }
        return bins;
    }
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    const std::size_t n = values.size();
    std::size_t rank_low = 0;
    for (std::size_t pos = 0; pos < n; ++pos) {
        if (pos > 0 && values[order[pos]] != values[order[pos - 1]]) rank_low = pos;
        bins[order[pos]] = static_cast<int>(rank_low * static_cast<std::size_t>(num_bins) / n) + 1;
    }
    return bins;
}

/// C(B_i) = (M - i) / (M - 1).
inline double expected_level(int bin, int num_bins) {
    if (num_bins < 2 || bin < 1 || bin > num_bins) throw DomainError("expected_level: bin index out of range");
    return static_cast<double>(num_bins - bin) / static_cast<double>(num_bins - 1);
}

struct BinStat {
    int index = 0;  ///< 1-based
    std::size_t count = 0;
    double observed = 0.0;  ///< R@K(B_i) or acc(B_i); 0 for an empty bin
    double expected = 0.0;  ///< C(B_i)
};

struct CalibrationReport {
    std::string method;
    std::string level = "query";  ///< "query" or "match"
    std::size_t k = 1;
    std::size_t total = 0;  ///< N (query level) or T = K * N (match level)
    int num_bins = 0;
    BinningStrategy strategy = BinningStrategy::EqualWidth;
    ClampMode clamp = ClampMode::TwoSided;
    double clamp_low = 0.0;
    double clamp_high = 0.0;
    std::size_t degenerate = 0;
    std::vector<BinStat> bins;
    double ece = 0.0;
};

namespace detail {

inline CalibrationReport calibrate(const std::vector<double>& scores, const std::vector<bool>& hits,
                                   const BinningConfig& cfg) {
    cfg.validate();
    if (scores.size() != hits.size()) throw DomainError("scores and success flags differ in length");
    if (scores.empty()) throw DomainError("calibration over zero items");
    const ClampResult clamped = clamp_values(scores, cfg.clamp);
    const std::vector<int> bins = bin_assign(clamped.values, cfg.num_bins, cfg.strategy);

    CalibrationReport rep;
    rep.total = scores.size();
    rep.num_bins = cfg.num_bins;
    rep.strategy = cfg.strategy;
    rep.clamp = cfg.clamp;
    rep.clamp_low = clamped.low;
    rep.clamp_high = clamped.high;

    std::vector<std::size_t> count(static_cast<std::size_t>(cfg.num_bins), 0);
    std::vector<std::size_t> success(static_cast<std::size_t>(cfg.num_bins), 0);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto b = static_cast<std::size_t>(bins[i] - 1);
        ++count[b];
        if (hits[i]) ++success[b];
    }
    const double n = static_cast<double>(scores.size());
    double ece = 0.0;
    for (int i = 1; i <= cfg.num_bins; ++i) {
        const auto b = static_cast<std::size_t>(i - 1);
        BinStat st;
        st.index = i;
        st.count = count[b];
        st.expected = expected_level(i, cfg.num_bins);
        if (count[b] > 0) {
            st.observed = static_cast<double>(success[b]) / static_cast<double>(count[b]);
            ece += (static_cast<double>(count[b]) / n) * std::abs(st.observed - st.expected);
        }
        rep.bins.push_back(st);
    }
    rep.ece = ece;
    return rep;
}

}  // namespace detail

/// Query-level ECE@K from one score and one success flag per query.
inline CalibrationReport ece_at_k(const std::vector<ScoredQuery>& scored, const std::vector<bool>& success,
                                  std::size_t k, const BinningConfig& cfg) {
    std::vector<double> s;
    s.reserve(scored.size());
    std::size_t degenerate = 0;
    for (const auto& q : scored) {
        s.push_back(q.score);
        degenerate += q.degenerate ? 1 : 0;
    }
    CalibrationReport rep = detail::calibrate(s, success, cfg);
    rep.k = k;
    rep.degenerate = degenerate;
    if (!scored.empty()) rep.method = to_string(scored.front().method);
    return rep;
}

/// Raw-score overload.
inline CalibrationReport ece_at_k(const std::vector<double>& scores, const std::vector<bool>& success,
                                  const BinningConfig& cfg) {
    return detail::calibrate(scores, success, cfg);
}

/// Match-level ECE@K over exactly K * N pairs.
inline CalibrationReport match_ece_at_k(const std::vector<ScoredPair>& pairs, std::size_t k, std::size_t num_queries,
                                        const BinningConfig& cfg) {
    if (pairs.size() != k * num_queries) throw DomainError("match-level ECE needs exactly K * N pairs");
    std::vector<double> s;
    std::vector<bool> pos;
    s.reserve(pairs.size());
    pos.reserve(pairs.size());
    std::size_t degenerate = 0;
    for (const auto& p : pairs) {
        s.push_back(p.score);
        pos.push_back(p.is_positive);
        degenerate += p.degenerate ? 1 : 0;
    }
    CalibrationReport rep = detail::calibrate(s, pos, cfg);
    rep.level = "match";
    rep.k = k;
    rep.degenerate = degenerate;
    return rep;
}

}  // namespace kappa_sphere
