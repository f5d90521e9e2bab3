#pragma once

// Forward-latency harness. The descriptor path stands in for a backbone:
//   raw input -> dense layer + ReLU -> feature map -> GeM per channel -> dense -> unit descriptor
// The kappa path runs the same forward and then the concentration head on the shared feature map.

#include <chrono>
#include <string>

#include "kappa_sphere/kappa_head.hpp"

namespace kappa_sphere {

struct BenchConfig {
    int raw_dim = 1024;
    int channels = 64;
    int height = 7;
    int width = 7;
    int descriptor_dim = 64;
    int hidden = 64;
    HeadVariant variant = HeadVariant::Aggregation;
    int warmup_runs = 20;
    int timed_runs = 200;
    std::uint64_t seed = 0;

    void validate() const {
        if (raw_dim < 1 || channels < 1 || height < 1 || width < 1 || descriptor_dim < 1 || hidden < 1) {
            throw DomainError("bench shapes must be positive");
        }
        if (warmup_runs < 0 || timed_runs < 1) throw DomainError("bench needs at least one timed run");
    }
};

struct BenchResult {
    double descriptor_ms = 0.0;
    double kappa_ms = 0.0;
    int timed_runs = 0;

    double overhead() const { return (kappa_ms - descriptor_ms) / descriptor_ms; }
};

class BenchModel {
public:
    explicit BenchModel(const BenchConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        Rng rng(cfg.seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        const Eigen::Index fm_size = static_cast<Eigen::Index>(cfg.channels) * cfg.height * cfg.width;
        dense_ = Matrix(fm_size, cfg.raw_dim);
        for (Eigen::Index i = 0; i < dense_.size(); ++i) dense_.data()[i] = normal(rng) / std::sqrt(cfg.raw_dim);
        out_ = Matrix(cfg.descriptor_dim, cfg.channels);
        for (Eigen::Index i = 0; i < out_.size(); ++i) out_.data()[i] = normal(rng) / std::sqrt(cfg.channels);
        head_ = HeadParams::initialize(cfg.variant, cfg.channels, cfg.height, cfg.width, cfg.hidden, 10.0, rng);
        head_.kappa_weights = Vector::NullaryExpr(head_.kappa_weights.size(), [&] { return 0.1 * normal(rng); });
        input_ = Vector::NullaryExpr(cfg.raw_dim, [&] { return normal(rng); });
    }

    FeatureMap feature_map(const Vector& raw) const {
        const Vector flat = (dense_ * raw).cwiseMax(0.0);
        const int s = cfg_.height * cfg_.width;
        Matrix values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            flat.data(), cfg_.channels, s);
        return FeatureMap(cfg_.channels, cfg_.height, cfg_.width, std::move(values));
    }

    Vector descriptor(const FeatureMap& fm) const {
        Vector d = out_ * gem_pool(fm, 3.0);
        const double n = d.norm();
        return n > 0.0 ? Vector(d / n) : d;
    }

    /// Returns a checksum so the optimizer cannot drop the work.
    double descriptor_path() const {
        const FeatureMap fm = feature_map(input_);
        return descriptor(fm)(0);
    }

    double kappa_path() const {
        const FeatureMap fm = feature_map(input_);
        return descriptor(fm)(0) + head_forward(fm, head_);
    }

private:
    BenchConfig cfg_;
    Matrix dense_;
    Matrix out_;
    HeadParams head_;
    Vector input_;
};

namespace detail {

template <typename F>
double mean_latency_ms(F&& f, int warmup, int timed, double& sink) {
    for (int i = 0; i < warmup; ++i) sink += f();
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < timed; ++i) sink += f();
    const auto stop = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(stop - start).count() / timed;
}

}  // namespace detail

/// Mean latency per forward after warmup. The two paths are measured in alternating
/// rounds and the per-path minimum over rounds is kept, which damps scheduler noise.
inline BenchResult run_bench(const BenchConfig& cfg, int rounds = 3) {
    const BenchModel model(cfg);
    double sink = 0.0;
    BenchResult r;
    r.timed_runs = cfg.timed_runs;
    r.descriptor_ms = std::numeric_limits<double>::infinity();
    r.kappa_ms = std::numeric_limits<double>::infinity();
    for (int round = 0; round < std::max(1, rounds); ++round) {
        r.descriptor_ms = std::min(r.descriptor_ms, detail::mean_latency_ms([&] { return model.descriptor_path(); },
                                                                            cfg.warmup_runs, cfg.timed_runs, sink));
        r.kappa_ms = std::min(r.kappa_ms, detail::mean_latency_ms([&] { return model.kappa_path(); },
                                                                  cfg.warmup_runs, cfg.timed_runs, sink));
    }
    if (!std::isfinite(sink)) throw DegenerateError("bench forward produced a non-finite value");
    return r;
}

}  // namespace kappa_sphere
