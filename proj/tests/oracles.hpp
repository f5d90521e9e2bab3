#pragma once

// Independent reference implementations used only by the tests.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <boost/math/special_functions/bessel.hpp>

#include "kappa_sphere/calibration.hpp"
#include "kappa_sphere/retrieval.hpp"

namespace oracle {

using kappa_sphere::BinningStrategy;
using kappa_sphere::ClampMode;
using kappa_sphere::Matrix;
using kappa_sphere::Rng;
using kappa_sphere::UnitDescriptor;
using kappa_sphere::Vector;

/// I_{v+1}(k) / I_v(k) from Boost in extended precision.
inline double bessel_ratio(double v, double kappa) {
    const long double a = boost::math::cyl_bessel_i(static_cast<long double>(v) + 1.0L, static_cast<long double>(kappa));
    const long double b = boost::math::cyl_bessel_i(static_cast<long double>(v), static_cast<long double>(kappa));
    return static_cast<double>(a / b);
}

inline double log_bessel(double v, double kappa) {
    return static_cast<double>(
        std::log(boost::math::cyl_bessel_i(static_cast<long double>(v), static_cast<long double>(kappa))));
}

inline UnitDescriptor random_unit(int d, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vector v(d);
    for (int i = 0; i < d; ++i) v(i) = n(rng);
    return UnitDescriptor::normalize(v);
}

/// Value of order statistic `idx` found by selection rather than a full sort.
inline double order_stat(std::vector<double> v, std::size_t idx) {
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
    return v[idx];
}

struct EceOracle {
    double ece = 0.0;
    std::vector<std::size_t> counts;
    std::vector<double> observed;
};

/// Brute-force ECE: explicit percentile clamp, per-item binning by the stated formulas,
/// quadratic rank counting for quantile bins.
inline EceOracle ece(const std::vector<double>& scores, const std::vector<bool>& hits, int m,
                     BinningStrategy strategy, ClampMode clamp) {
    const std::size_t n = scores.size();
    const double n1 = static_cast<double>(n - 1);
    double lo = *std::min_element(scores.begin(), scores.end());
    double hi = *std::max_element(scores.begin(), scores.end());
    if (clamp == ClampMode::TwoSided) lo = order_stat(scores, static_cast<std::size_t>(std::floor(0.01 * n1)));
    if (clamp != ClampMode::None) hi = order_stat(scores, static_cast<std::size_t>(std::ceil(0.99 * n1)));
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = scores[i] < lo ? lo : (scores[i] > hi ? hi : scores[i]);

    std::vector<int> bin(n, 1);
    if (strategy == BinningStrategy::EqualWidth) {
        const double mn = *std::min_element(v.begin(), v.end());
        const double mx = *std::max_element(v.begin(), v.end());
        if (mx > mn) {
            for (std::size_t i = 0; i < n; ++i) {
                const double t = (v[i] - mn) / (mx - mn) * m;
                bin[i] = std::min(m, static_cast<int>(std::floor(t)) + 1);
            }
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t below = 0;
            for (std::size_t j = 0; j < n; ++j) below += v[j] < v[i] ? 1 : 0;
            bin[i] = static_cast<int>(below * static_cast<std::size_t>(m) / n) + 1;
        }
    }
    EceOracle out;
    out.counts.assign(static_cast<std::size_t>(m), 0);
    out.observed.assign(static_cast<std::size_t>(m), 0.0);
    std::vector<std::size_t> good(static_cast<std::size_t>(m), 0);
    for (std::size_t i = 0; i < n; ++i) {
        ++out.counts[static_cast<std::size_t>(bin[i] - 1)];
        if (hits[i]) ++good[static_cast<std::size_t>(bin[i] - 1)];
    }
    for (int b = 1; b <= m; ++b) {
        const auto k = static_cast<std::size_t>(b - 1);
        if (out.counts[k] == 0) continue;
        out.observed[k] = static_cast<double>(good[k]) / static_cast<double>(out.counts[k]);
        const double expected = static_cast<double>(m - b) / static_cast<double>(m - 1);
        out.ece += (static_cast<double>(out.counts[k]) / static_cast<double>(n)) * std::abs(out.observed[k] - expected);
    }
    return out;
}

/// Indices of the top-k bank rows by cosine, ties to the smaller id, via a full sort.
inline std::vector<std::size_t> knn(const Vector& q, const kappa_sphere::DescriptorBank& bank, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        double s = 0.0;
        for (Eigen::Index j = 0; j < q.size(); ++j) s += bank.descriptors(static_cast<Eigen::Index>(i), j) * q(j);
        all.emplace_back(s, i);
    }
    std::sort(all.begin(), all.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return bank.ids[a.second] < bank.ids[b.second];
    });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
    return out;
}

/// Scratch directory for file-based tests, unique per test name.
inline std::filesystem::path scratch(const std::string& name) {
    const char* base = std::getenv("KAPPA_TEST_TMP");
    std::filesystem::path dir = base ? std::filesystem::path(base) : std::filesystem::temp_directory_path() / "kappa_test";
    dir /= name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace oracle
