#pragma once

// Synthetic place-recognition scenes with known ground truth.
//
// Classes sit on a square grid of poses. Each class j owns a prototype w_j;
// image i of class j draws an ambiguity a_i ~ U[0, 1], a concentration
// kappa*_i = kappa_min + (kappa_max - kappa_min) (1 - a_i) and a descriptor
// z_i ~ vMF(w_j, kappa*_i). Its feature map carries a_i in channel 0 and
// Gaussian nuisance elsewhere, so a pooled head can recover kappa*.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kappa_sphere/anchoring.hpp"
#include "kappa_sphere/kappa_head.hpp"
#include "kappa_sphere/retrieval.hpp"
#include "kappa_sphere/vmf.hpp"

namespace kappa_sphere {

struct SceneConfig {
    int num_classes = 32;
    int images_per_class = 50;
    int descriptor_dim = 512;
    double kappa_min = 5.0;
    double kappa_max = 500.0;
    double pose_spacing = 100.0;
    double pose_jitter = 10.0;
    double aliasing_rate = 0.0;
    int feature_channels = 8;
    int feature_height = 4;
    int feature_width = 4;
    double noise_std = 0.2;
    std::array<double, 3> split_fractions{0.5, 0.3, 0.2};  ///< train, database, query
    double gt_threshold = 25.0;
    std::uint64_t seed = 0;

    /// The desk-scale scene used throughout the test suites: C=32, d=64, kappa in [5, 500],
    /// a quarter of the classes aliased.
    static SceneConfig desk_default(std::uint64_t seed = 0) {
        SceneConfig c;
        c.descriptor_dim = 64;
        c.aliasing_rate = 0.25;
        c.seed = seed;
        return c;
    }

    void validate() const {
        if (num_classes < 2) throw DomainError("scene needs at least two classes");
        if (images_per_class < 1) throw DomainError("images_per_class must be positive");
        if (descriptor_dim < 2) throw DomainError("descriptor_dim must be at least 2");
        if (!(kappa_min > 0.0) || !(kappa_min <= kappa_max) || !std::isfinite(kappa_max)) {
            throw DomainError("need 0 < kappa_min <= kappa_max");
        }
        if (!(pose_jitter >= 0.0) || !(pose_spacing > 2.0 * pose_jitter)) {
            throw DomainError("pose_spacing must exceed twice the pose jitter");
        }
        if (!(aliasing_rate >= 0.0 && aliasing_rate <= 1.0)) throw DomainError("aliasing_rate must lie in [0, 1]");
        if (feature_channels < 1 || feature_height < 1 || feature_width < 1) {
            throw DomainError("feature shape must be positive");
        }
        if (!(noise_std >= 0.0)) throw DomainError("noise_std must be non-negative");
        if (!(gt_threshold > 0.0)) throw DomainError("gt_threshold must be positive");
        double sum = 0.0;
        for (double f : split_fractions) {
            if (!(f >= 0.0)) throw DomainError("split fractions must be non-negative");
            sum += f;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw DomainError("split fractions must sum to 1");
    }
};

enum class Split { Train, Database, Query };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Database: return "db";
        case Split::Query: return "query";
    }
    return "train";
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "db") return Split::Database;
    if (s == "query") return Split::Query;
    throw DomainError("unknown split '" + s + "'");
}

struct SynthDataset {
    SceneConfig config;
    PrototypeSet prototypes;
    DescriptorBank bank;  ///< every image; true_kappa filled
    std::vector<FeatureMap> features;
    std::vector<double> ambiguity;
    std::vector<Split> split;
    std::vector<std::pair<int, int>> aliased_pairs;  ///< (source, target): target took source's prototype

    std::vector<std::size_t> rows(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < split.size(); ++i)
            if (split[i] == s) out.push_back(i);
        return out;
    }

    DescriptorBank part(Split s) const { return bank.subset(rows(s)); }

    std::vector<FeatureMap> features_of(Split s) const {
        std::vector<FeatureMap> out;
        for (std::size_t r : rows(s)) out.push_back(features[r]);
        return out;
    }
};

namespace detail {

inline int grid_columns(int num_classes) {
    return static_cast<int>(std::ceil(std::sqrt(static_cast<double>(num_classes))));
}

inline Pose class_center(int label, const SceneConfig& cfg) {
    const int cols = grid_columns(cfg.num_classes);
    return {(label % cols) * cfg.pose_spacing, (label / cols) * cfg.pose_spacing};
}

inline constexpr double kChannelShareLow = 0.05;
inline constexpr double kChannelShareHigh = 0.9;

/// Channel-0 level for ambiguity a. Chosen so that after per-location L2 normalization
/// against nuisance channels of typical energy (c - 1)(1 + noise^2), channel 0's share is
/// affine in 1 - a, i.e. affine in kappa*.
inline double ambiguity_embedding(double a, const SceneConfig& cfg) {
    const double share = kChannelShareLow + (kChannelShareHigh - kChannelShareLow) * (1.0 - a);
    if (cfg.feature_channels == 1) return share;
    const double rest = (cfg.feature_channels - 1) * (1.0 + cfg.noise_std * cfg.noise_std);
    return share * std::sqrt(rest / (1.0 - share * share));
}

inline FeatureMap make_feature_map(double ambiguity, const SceneConfig& cfg, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    FeatureMap fm(cfg.feature_channels, cfg.feature_height, cfg.feature_width);
    const double level = ambiguity_embedding(ambiguity, cfg);
    for (int s = 0; s < fm.spatial(); ++s) {
        fm(0, s) = std::max(0.0, level * (1.0 + 0.25 * cfg.noise_std * normal(rng)));
        for (int c = 1; c < fm.channels(); ++c) fm(c, s) = std::max(0.0, 1.0 + cfg.noise_std * normal(rng));
    }
    return fm;
}

inline std::vector<UnitDescriptor> sample_prototypes(int count, int dim, Rng& rng) {
    constexpr double kMaxAbsCos = 0.5;
    constexpr int kMaxAttempts = 100000;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<UnitDescriptor> out;
    int attempts = 0;
    while (static_cast<int>(out.size()) < count) {
        if (++attempts > kMaxAttempts) throw DomainError("could not separate prototypes; increase descriptor_dim");
        Vector v(dim);
        for (int i = 0; i < dim; ++i) v(i) = normal(rng);
        const UnitDescriptor cand = UnitDescriptor::normalize(v);
        const bool separated = std::all_of(out.begin(), out.end(),
                                           [&](const UnitDescriptor& w) { return std::abs(w.dot(cand)) < kMaxAbsCos; });
        if (separated) out.push_back(cand);
    }
    return out;
}

inline constexpr std::uint64_t kAliasStream = 0xA11A5ED5EEDULL;
inline constexpr std::uint64_t kSplitStream = 0x5B1175EEDULL;

}  // namespace detail

/// Copies one class's prototype onto a geographically distant class for round(rate * C)
/// classes (rate * C / 2 pairs), then redraws the target classes' descriptors from the
/// shared direction with their original concentrations.
inline SynthDataset inject_aliasing(SynthDataset ds, double rate, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw DomainError("aliasing rate must lie in [0, 1]");
    const int num_classes = ds.prototypes.num_classes();
    const long involved = std::lround(rate * num_classes);
    if (involved == 0) return ds;
    if (involved % 2 != 0) {
        throw DomainError("aliasing rate " + std::to_string(rate) + " involves an odd number of classes (" +
                          std::to_string(involved) + "); cannot pair them");
    }
    Rng rng(seed);
    std::vector<int> classes(static_cast<std::size_t>(num_classes));
    std::iota(classes.begin(), classes.end(), 0);
    std::shuffle(classes.begin(), classes.end(), rng);
    std::vector<int> pool(classes.begin(), classes.begin() + involved);

    std::vector<std::pair<int, int>> pairs;
    while (!pool.empty()) {
        const int a = pool.front();
        pool.erase(pool.begin());
        auto far = std::max_element(pool.begin(), pool.end(), [&](int x, int y) {
            return distance(detail::class_center(a, ds.config), detail::class_center(x, ds.config)) <
                   distance(detail::class_center(a, ds.config), detail::class_center(y, ds.config));
        });
        const int b = *far;
        pool.erase(far);
        if (distance(detail::class_center(a, ds.config), detail::class_center(b, ds.config)) <=
            ds.config.gt_threshold + 2.0 * ds.config.pose_jitter) {
            throw DomainError("aliased classes are not geographically separated");
        }
        pairs.emplace_back(a, b);
    }
    std::sort(pairs.begin(), pairs.end());

    for (const auto& [src, dst] : pairs) {
        const UnitDescriptor w = ds.prototypes.at(src);
        ds.prototypes.set(dst, w);
        for (std::size_t i = 0; i < ds.bank.size(); ++i) {
            if (ds.bank.labels[i] != dst) continue;
            const auto z = sample_vmf(VmfParams(w, (*ds.bank.true_kappa)[i]), 1, rng);
            ds.bank.descriptors.row(static_cast<Eigen::Index>(i)) = z.front().values().transpose();
        }
        ds.aliased_pairs.emplace_back(src, dst);
    }
    return ds;
}

/// Class-stratified split into (train, database, query) by the given fractions.
inline SynthDataset split(SynthDataset ds, const std::array<double, 3>& fractions, std::uint64_t seed) {
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw DomainError("split fractions must be non-negative");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw DomainError("split fractions must sum to 1");
    Rng rng(seed);
    ds.split.assign(ds.bank.size(), Split::Train);
    for (int label = 0; label < ds.prototypes.num_classes(); ++label) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < ds.bank.size(); ++i)
            if (ds.bank.labels[i] == label) members.push_back(i);
        std::shuffle(members.begin(), members.end(), rng);
        const long n = static_cast<long>(members.size());
        const long n_train = std::lround(fractions[0] * n);
        const long n_db = std::lround(fractions[1] * n);
        const long n_query = n - n_train - n_db;
        if (n_query < 0 || (fractions[1] > 0.0 && n_db < 1) || (fractions[2] > 0.0 && n_query < 1) ||
            (fractions[0] > 0.0 && n_train < 1)) {
            throw DomainError("class " + std::to_string(label) + " has too few images to stratify");
        }
        for (long t = 0; t < n; ++t) {
            const Split s = t < n_train ? Split::Train : (t < n_train + n_db ? Split::Database : Split::Query);
            ds.split[members[static_cast<std::size_t>(t)]] = s;
        }
    }
    return ds;
}

inline SynthDataset generate_scene(const SceneConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    SynthDataset ds;
    ds.config = cfg;
    ds.prototypes = PrototypeSet(detail::sample_prototypes(cfg.num_classes, cfg.descriptor_dim, rng));

    const std::size_t n = static_cast<std::size_t>(cfg.num_classes) * static_cast<std::size_t>(cfg.images_per_class);
    ds.bank.descriptors.resize(static_cast<Eigen::Index>(n), cfg.descriptor_dim);
    ds.bank.poses.emplace();
    ds.bank.true_kappa.emplace();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::size_t row = 0;
    for (int label = 0; label < cfg.num_classes; ++label) {
        const Pose center = detail::class_center(label, cfg);
        const UnitDescriptor w = ds.prototypes.at(label);
        for (int t = 0; t < cfg.images_per_class; ++t, ++row) {
            // pose uniform in a disc of radius pose_jitter around the class center
            const double radius = cfg.pose_jitter * std::sqrt(unit(rng));
            const double angle = 2.0 * std::numbers::pi * unit(rng);
            const double a = unit(rng);
            const double kappa = cfg.kappa_min + (cfg.kappa_max - cfg.kappa_min) * (1.0 - a);
            const auto z = sample_vmf(VmfParams(w, kappa), 1, rng);
            ds.bank.descriptors.row(static_cast<Eigen::Index>(row)) = z.front().values().transpose();
            ds.bank.ids.push_back(static_cast<ImageId>(row));
            ds.bank.labels.push_back(label);
            ds.bank.poses->push_back({center.x + radius * std::cos(angle), center.y + radius * std::sin(angle)});
            ds.bank.true_kappa->push_back(kappa);
            ds.ambiguity.push_back(a);
            ds.features.push_back(detail::make_feature_map(a, cfg, rng));
        }
    }
    if (cfg.aliasing_rate > 0.0) ds = inject_aliasing(std::move(ds), cfg.aliasing_rate, cfg.seed ^ detail::kAliasStream);
    return split(std::move(ds), cfg.split_fractions, cfg.seed ^ detail::kSplitStream);
}

}  // namespace kappa_sphere
