#pragma once

// Post-training of the kappa head, joint training of encoder + prototypes + head,
// and the Gaussian-NLL ablation, with ECE@1 / Recall@1 early stopping.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kappa_sphere/anchoring.hpp"
#include "kappa_sphere/calibration.hpp"
#include "kappa_sphere/kappa_head.hpp"
#include "kappa_sphere/losses.hpp"
#include "kappa_sphere/optim.hpp"
#include "kappa_sphere/retrieval.hpp"
#include "kappa_sphere/scores.hpp"
#include "kappa_sphere/synth.hpp"

namespace kappa_sphere {

enum class TrainMode { PostTraining, JointTraining, GnllVariant };
enum class AnchorMode { ClassPrototype, BatchCentroid };

inline std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::PostTraining: return "post";
        case TrainMode::JointTraining: return "joint";
        case TrainMode::GnllVariant: return "gnll";
    }
    return "post";
}

inline TrainMode train_mode_from_string(const std::string& s) {
    if (s == "post") return TrainMode::PostTraining;
    if (s == "joint") return TrainMode::JointTraining;
    if (s == "gnll") return TrainMode::GnllVariant;
    throw DomainError("unknown training mode '" + s + "'");
}

inline std::string to_string(AnchorMode m) { return m == AnchorMode::ClassPrototype ? "prototype" : "centroid"; }

inline AnchorMode anchor_mode_from_string(const std::string& s) {
    if (s == "prototype") return AnchorMode::ClassPrototype;
    if (s == "centroid") return AnchorMode::BatchCentroid;
    throw DomainError("unknown anchor mode '" + s + "'");
}

struct TrainConfig {
    TrainMode mode = TrainMode::PostTraining;
    double lambda = 0.01;
    double lr = 1e-3;          ///< head
    double encoder_lr = 1e-4;  ///< encoder and prototypes (joint mode)
    int batch_size = 32;
    int patience = 15;
    int max_epochs = 200;
    std::uint64_t seed = 0;
    AnchorMode anchor_mode = AnchorMode::ClassPrototype;
    int samples_per_class = 4;  ///< K of the P x K batches used with centroid anchors
    bool centroid_includes_query = false;  ///< centroid anchors: the sample joins its own positives
    bool include_vmf = true;    ///< joint mode: false trains the classification loss alone
    double validation_fraction = 0.1;
    AdamConfig adam;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw DomainError("lambda must be >= 0");
        if (!(lr >= 0.0) || !(encoder_lr >= 0.0)) throw DomainError("learning rates must be >= 0");
        if (batch_size < 1) throw DomainError("batch_size must be positive");
        if (patience < 1) throw DomainError("patience must be positive");
        if (max_epochs < 0) throw DomainError("max_epochs must be >= 0");
        if (samples_per_class < 2) throw DomainError("samples_per_class must be at least 2");
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
            throw DomainError("validation_fraction must lie in [0, 1)");
        }
    }
};

/// One side of a training problem: descriptors with labels, feature maps for the head and,
/// for joint training, the raw encoder inputs (one row per sample).
struct TrainSamples {
    DescriptorBank bank;
    std::vector<FeatureMap> features;
    Matrix raw;

    std::size_t size() const noexcept { return bank.size(); }

    void validate(bool need_raw) const {
        bank.validate();
        if (features.size() != bank.size()) throw DomainError("feature maps and descriptors differ in count");
        if (need_raw && static_cast<std::size_t>(raw.rows()) != bank.size()) {
            throw DomainError("raw features missing for joint training");
        }
    }
};

struct TrainingData {
    TrainSamples train;
    TrainSamples database;
};

/// Train and database splits of a synthetic scene. Raw encoder inputs are the descriptors.
inline TrainingData training_data(const SynthDataset& ds) {
    TrainingData td;
    td.train.bank = ds.part(Split::Train);
    td.train.features = ds.features_of(Split::Train);
    td.train.raw = td.train.bank.descriptors;
    td.database.bank = ds.part(Split::Database);
    td.database.features = ds.features_of(Split::Database);
    td.database.raw = td.database.bank.descriptors;
    return td;
}

struct EpochRecord {
    int epoch = 0;  ///< 0 = before any update
    int phase = 1;
    double loss_cls = 0.0;
    double loss_vmf = 0.0;  ///< vMF NLL, or Gaussian NLL in the GNLL variant
    double loss_total = 0.0;
    double recall1 = 0.0;
    double ece1 = 0.0;
    double mean_output = 0.0;  ///< mean head output (kappa or sigma^2) over training samples
    bool improved = false;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    std::optional<int> phase2_start;  ///< first epoch trained in phase 2
    bool stopped_early = false;

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "epoch,phase,loss_cls,loss_vmf,loss_total,recall1,ece1,mean_output,improved\n";
        for (const auto& e : epochs) {
            os << e.epoch << ',' << e.phase << ',' << e.loss_cls << ',' << e.loss_vmf << ',' << e.loss_total << ','
               << e.recall1 << ',' << e.ece1 << ',' << e.mean_output << ',' << (e.improved ? 1 : 0) << '\n';
        }
        return os.str();
    }
};

using EvalHook = std::function<void(const EpochRecord&)>;

struct PostTrainResult {
    HeadParams head;
    AdamState optimizer;
    TrainHistory history;
};

struct JointTrainResult {
    LinearEncoder encoder;
    PrototypeSet prototypes;
    HeadParams head;
    AdamState encoder_optimizer;
    AdamState prototype_optimizer;
    AdamState head_optimizer;
    TrainHistory history;
};

/// Head outputs for every sample.
inline std::vector<double> predict_outputs(const std::vector<FeatureMap>& features, const HeadParams& head) {
    std::vector<double> out(features.size());
    parallel_for(features.size(), [&](std::size_t i) { out[i] = head_forward(features[i], head); });
    return out;
}

namespace detail {

inline constexpr std::uint64_t kValidationStream = 0x7A11DA7E5EEDULL;

struct HoldOut {
    std::vector<std::size_t> fit;
    std::vector<std::size_t> validation;
};

inline HoldOut hold_out(std::size_t n, double fraction, std::uint64_t seed) {
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Rng rng(seed ^ kValidationStream);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    HoldOut h;
    h.validation.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_val));
    h.fit.assign(rows.begin() + static_cast<std::ptrdiff_t>(n_val), rows.end());
    std::sort(h.validation.begin(), h.validation.end());
    std::sort(h.fit.begin(), h.fit.end());
    return h;
}

/// Plain shuffled batches.
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::vector<std::size_t> rows, int batch_size, Rng& rng) {
    std::shuffle(rows.begin(), rows.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < rows.size(); i += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(rows.size(), i + static_cast<std::size_t>(batch_size));
        out.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(i), rows.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

/// P x K batches: each class contributes groups of K same-label rows so every sample
/// has in-batch positives. A leftover singleton joins the previous group of its class.
inline std::vector<std::vector<std::size_t>> pk_batches(const std::vector<std::size_t>& rows,
                                                        const std::vector<int>& labels, int batch_size, int per_class,
                                                        Rng& rng) {
    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t r : rows) by_label[labels[r]].push_back(r);
    std::vector<std::vector<std::size_t>> groups;
    for (auto& [label, members] : by_label) {
        if (members.size() < 2) continue;
        std::shuffle(members.begin(), members.end(), rng);
        std::vector<std::vector<std::size_t>> own;
        for (std::size_t i = 0; i < members.size(); i += static_cast<std::size_t>(per_class)) {
            const auto end = std::min(members.size(), i + static_cast<std::size_t>(per_class));
            own.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(i),
                             members.begin() + static_cast<std::ptrdiff_t>(end));
        }
        if (own.size() > 1 && own.back().size() == 1) {
            own[own.size() - 2].push_back(own.back().front());
            own.pop_back();
        }
        for (auto& g : own) groups.push_back(std::move(g));
    }
    std::shuffle(groups.begin(), groups.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> current;
    for (auto& g : groups) {
        current.insert(current.end(), g.begin(), g.end());
        if (static_cast<int>(current.size()) >= batch_size) {
            out.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) out.push_back(std::move(current));
    return out;
}

/// vMF mean direction for batch position `pos`.
inline UnitDescriptor resolve_anchor(AnchorMode mode, const PrototypeSet& prototypes,
                                     const std::vector<UnitDescriptor>& batch_embeddings,
                                     const std::vector<int>& batch_labels, std::size_t pos,
                                     CentroidOptions options = {}) {
    if (mode == AnchorMode::ClassPrototype) return class_anchor(prototypes, batch_labels[pos]);
    std::vector<UnitDescriptor> positives;
    for (std::size_t j = 0; j < batch_embeddings.size(); ++j)
        if (j != pos && batch_labels[j] == batch_labels[pos]) positives.push_back(batch_embeddings[j]);
    if (positives.empty()) throw LookupError("no in-batch positive to anchor sample");
    return batch_centroid_anchor(batch_embeddings[pos], positives, options);
}

/// Validation evaluation against the database: Recall@1 and ECE@1 of the head's score.
struct ValidationScore {
    double recall1 = 0.0;
    double ece1 = 0.0;
};

inline ValidationScore evaluate_validation(const std::vector<RetrievalResult>& results, const DescriptorBank& queries,
                                           const DescriptorBank& database, const std::vector<bool>& hits,
                                           bool gnll) {
    ValidationScore v;
    std::size_t n_hit = 0;
    for (bool h : hits) n_hit += h ? 1 : 0;
    v.recall1 = static_cast<double>(n_hit) / static_cast<double>(hits.size());
    const Method method = gnll ? Method::GNLL : Method::KappaPlace;
    ScoreInputs in;
    in.results = &results;
    in.queries = &queries;
    in.references = &database;
    const auto scored = score_queries(method, in);
    BinningConfig cfg;
    cfg.clamp = default_clamp(method);
    v.ece1 = ece_at_k(scored, hits, 1, cfg).ece;
    return v;
}

/// Top-1 hit flags under label ground truth.
inline std::vector<bool> label_hits(const std::vector<RetrievalResult>& results, const DescriptorBank& queries,
                                    const DescriptorBank& database) {
    std::vector<bool> hits(results.size());
    for (std::size_t i = 0; i < results.size(); ++i)
        hits[i] = queries.labels[i] == database.labels[results[i].ref_rows.front()];
    return hits;
}

}  // namespace detail

/// Concentration that maximizes the likelihood of all training descriptors around their
/// class prototypes under one shared kappa (Banerjee approximation), floored at 1.
inline double estimate_initial_kappa(const DescriptorBank& bank, const PrototypeSet& prototypes) {
    if (bank.size() == 0) throw DomainError("empty training set");
    double mean_cos = 0.0;
    for (std::size_t i = 0; i < bank.size(); ++i) mean_cos += bank.row(i).dot(prototypes.at(bank.labels[i]));
    mean_cos /= static_cast<double>(bank.size());
    const double r = std::clamp(mean_cos, 0.0, 1.0 - 1e-9);
    return std::max(kKappaFloor, mle_kappa_from_resultant(r, bank.dim()));
}

/// Gaussian variance maximizing the likelihood of descriptors around their prototypes.
inline double estimate_initial_sigma_sq(const DescriptorBank& bank, const PrototypeSet& prototypes) {
    if (bank.size() == 0) throw DomainError("empty training set");
    double sq = 0.0;
    for (std::size_t i = 0; i < bank.size(); ++i)
        sq += (bank.row(i).values() - prototypes.at(bank.labels[i]).values()).squaredNorm();
    return std::max(1e-8, sq / (static_cast<double>(bank.size()) * bank.dim()));
}

/// Head whose constant starting output is the data-level estimate for the training mode.
/// Starting from the shared optimum leaves only the per-sample slope to learn.
inline HeadParams initialize_head(const TrainSamples& train, const PrototypeSet& prototypes, TrainMode mode,
                                  HeadVariant variant, int hidden, std::uint64_t seed) {
    if (train.features.empty()) throw DomainError("empty training set");
    const FeatureMap& f = train.features.front();
    const double start = mode == TrainMode::GnllVariant ? estimate_initial_sigma_sq(train.bank, prototypes)
                                                        : estimate_initial_kappa(train.bank, prototypes);
    Rng rng(seed);
    return HeadParams::initialize(variant, f.channels(), f.height(), f.width(), hidden, start, rng);
}

/// Validation counts a top-1 retrieval as correct when it shares the query's place label.
/// Head-only training with the vMF NLL (or Gaussian NLL in GnllVariant) against frozen
/// descriptors. The checkpoint with the lowest validation ECE@1 is returned.
inline PostTrainResult train_post(const TrainingData& data, const PrototypeSet& prototypes, HeadParams head,
                                  const TrainConfig& cfg, const EvalHook& hook = {}) {
    cfg.validate();
    if (cfg.mode == TrainMode::JointTraining) throw DomainError("train_post does not run joint training");
    const bool gnll = cfg.mode == TrainMode::GnllVariant;
    if (data.train.size() == 0) throw DomainError("empty training set");
    data.train.validate(false);
    head.validate();
    const TrainSamples& tr = data.train;
    const int d = tr.bank.dim();
    const BesselOrder order = BesselOrder::for_dimension(d);
    for (int label : tr.bank.labels) (void)prototypes.at(label);
    if (cfg.anchor_mode == AnchorMode::ClassPrototype && prototypes.dim() != d) {
        throw DomainError("prototype and descriptor dimensions differ");
    }

    const detail::HoldOut split = detail::hold_out(tr.size(), cfg.validation_fraction, cfg.seed);
    const bool has_validation = !split.validation.empty() && data.database.size() > 0;

    // Frozen descriptors: retrieval for validation queries is computed once.
    DescriptorBank val_bank;
    std::vector<FeatureMap> val_features;
    std::vector<RetrievalResult> val_results;
    std::vector<bool> val_hits;
    DescriptorBank db_bank;
    if (has_validation) {
        data.database.validate(false);
        val_bank = tr.bank.subset(split.validation);
        for (std::size_t r : split.validation) val_features.push_back(tr.features[r]);
        db_bank = data.database.bank;
        val_results = knn_all(val_bank, db_bank, 1);
        val_hits = detail::label_hits(val_results, val_bank, db_bank);
    }
    const std::vector<UnitDescriptor> embeddings = [&] {
        std::vector<UnitDescriptor> e;
        e.reserve(tr.size());
        for (std::size_t i = 0; i < tr.size(); ++i) e.push_back(tr.bank.row(i));
        return e;
    }();

    auto validate_head = [&](const HeadParams& h) {
        if (!has_validation) return detail::ValidationScore{};
        val_bank.kappas = predict_outputs(val_features, h);
        db_bank.kappas = predict_outputs(data.database.features, h);
        return detail::evaluate_validation(val_results, val_bank, db_bank, val_hits, gnll);
    };

    PostTrainResult best{head, AdamState::zeros(head.pack_size()), {}};
    AdamState state = AdamState::zeros(head.pack_size());
    Rng rng(cfg.seed);
    TrainHistory history;

    EpochRecord rec0;
    {
        const auto v = validate_head(head);
        rec0.recall1 = v.recall1;
        rec0.ece1 = v.ece1;
        const auto outs = predict_outputs(tr.features, head);
        rec0.mean_output = std::accumulate(outs.begin(), outs.end(), 0.0) / static_cast<double>(outs.size());
    }
    history.epochs.push_back(rec0);
    if (hook) hook(rec0);
    // the untrained head is logged but not a candidate checkpoint
    double best_ece = std::numeric_limits<double>::infinity();
    int since_best = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto batches = cfg.anchor_mode == AnchorMode::BatchCentroid
                                 ? detail::pk_batches(split.fit, tr.bank.labels, cfg.batch_size,
                                                      cfg.samples_per_class, rng)
                                 : detail::shuffled_batches(split.fit, cfg.batch_size, rng);
        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (const auto& batch : batches) {
            std::vector<UnitDescriptor> be;
            std::vector<int> bl;
            for (std::size_t r : batch) {
                be.push_back(embeddings[r]);
                bl.push_back(tr.bank.labels[r]);
            }
            Vector grad = Vector::Zero(head.pack_size());
            double batch_loss = 0.0;
            for (std::size_t pos = 0; pos < batch.size(); ++pos) {
                const std::size_t r = batch[pos];
                const UnitDescriptor mu = detail::resolve_anchor(cfg.anchor_mode, prototypes, be, bl, pos,
                                                                     {cfg.centroid_includes_query});
                const HeadTrace t = head_trace(tr.features[r], head);
                double upstream = 0.0;
                if (gnll) {
                    const GnllResult g = gnll_loss(embeddings[r], mu, t.kappa, d);
                    batch_loss += g.loss;
                    upstream = g.grad_sigma_sq;
                } else {
                    batch_loss += vmf_nll(embeddings[r], mu, t.kappa, order);
                    upstream = vmf_nll_grad_kappa(embeddings[r], mu, t.kappa, order);
                }
                grad += head_backward(t, head, upstream).pack(head.train_gem_p);
            }
            grad /= static_cast<double>(batch.size());
            Vector flat = head.pack();
            adam_step(flat, grad, state, cfg.lr, cfg.adam);
            head.unpack(flat);
            loss_sum += batch_loss;
            loss_count += batch.size();
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss_vmf = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
        rec.loss_total = rec.loss_vmf;
        const auto v = validate_head(head);
        rec.recall1 = v.recall1;
        rec.ece1 = v.ece1;
        const auto outs = predict_outputs(tr.features, head);
        rec.mean_output = std::accumulate(outs.begin(), outs.end(), 0.0) / static_cast<double>(outs.size());
        if (!has_validation || rec.ece1 < best_ece) {
            best_ece = rec.ece1;
            since_best = 0;
            rec.improved = true;
            best.head = head;
            best.optimizer = state;
            history.best_epoch = epoch;
        } else {
            ++since_best;
        }
        history.epochs.push_back(rec);
        if (hook) hook(rec);
        if (has_validation && since_best >= cfg.patience) {
            history.stopped_early = true;
            break;
        }
    }
    best.history = std::move(history);
    return best;
}

namespace detail {

struct JointState {
    LinearEncoder encoder;
    PrototypeSet prototypes;
    HeadParams head;
    AdamState enc_opt;
    AdamState proto_opt;
    AdamState head_opt;
};

inline DescriptorBank encode_bank(const TrainSamples& s, const std::vector<std::size_t>& rows,
                                  const LinearEncoder& enc) {
    DescriptorBank b = s.bank.subset(rows);
    parallel_for(rows.size(), [&](std::size_t k) {
        const Vector raw = s.raw.row(static_cast<Eigen::Index>(rows[k])).transpose();
        b.descriptors.row(static_cast<Eigen::Index>(k)) = enc.encode(raw).values().transpose();
    });
    return b;
}

inline Vector flatten_matrix(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline Matrix unflatten_matrix(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

}  // namespace detail

inline constexpr std::uint64_t kJointInitStream = 0x10147A1257A27ULL;

/// Starting point for joint training: random well-separated prototypes and an identity
/// encoder over the raw inputs.
inline PrototypeSet joint_initial_prototypes(int num_classes, int dim, std::uint64_t seed) {
    Rng rng(seed ^ kJointInitStream);
    return PrototypeSet(detail::sample_prototypes(num_classes, dim, rng));
}

/// Classification (large margin cosine) loss plus lambda times the vMF NLL, optimizing the
/// encoder, the prototypes and the head together. Early stopping is phased: Recall@1 with
/// patience, then a restart from the best recall checkpoint tracking ECE@1 with fresh patience.
/// Database descriptors are re-encoded at every evaluation.
inline JointTrainResult train_joint(const TrainingData& data, LinearEncoder encoder, PrototypeSet prototypes,
                                    HeadParams head, const TrainConfig& cfg, const LmclConfig& lmcl,
                                    const EvalHook& hook = {}) {
    cfg.validate();
    lmcl.validate();
    if (data.train.size() == 0) throw DomainError("empty training set");
    data.train.validate(true);
    head.validate();
    const TrainSamples& tr = data.train;
    if (encoder.input_dim() != tr.raw.cols()) throw DomainError("encoder input width does not match raw features");
    const int d = encoder.output_dim();
    if (prototypes.dim() != d) throw DomainError("prototype and encoder dimensions differ");
    for (int label : tr.bank.labels) (void)prototypes.at(label);
    const BesselOrder order = BesselOrder::for_dimension(d);

    const detail::HoldOut split = detail::hold_out(tr.size(), cfg.validation_fraction, cfg.seed);
    const bool has_validation = !split.validation.empty() && data.database.size() > 0;
    if (has_validation) data.database.validate(true);
    std::vector<FeatureMap> val_features;
    for (std::size_t r : split.validation) val_features.push_back(tr.features[r]);
    std::vector<std::size_t> db_rows(data.database.size());
    std::iota(db_rows.begin(), db_rows.end(), std::size_t{0});

    detail::JointState st{std::move(encoder), std::move(prototypes), std::move(head), {}, {}, {}};
    st.enc_opt = AdamState::zeros(st.encoder.weights().size());
    st.proto_opt = AdamState::zeros(st.prototypes.weights().size());
    st.head_opt = AdamState::zeros(st.head.pack_size());

    auto evaluate = [&](const detail::JointState& s) {
        if (!has_validation) return detail::ValidationScore{};
        DescriptorBank q = detail::encode_bank(tr, split.validation, s.encoder);
        DescriptorBank db = detail::encode_bank(data.database, db_rows, s.encoder);
        q.kappas = predict_outputs(val_features, s.head);
        db.kappas = predict_outputs(data.database.features, s.head);
        const auto results = knn_all(q, db, 1);
        return detail::evaluate_validation(results, q, db, detail::label_hits(results, q, db), false);
    };

    Rng rng(cfg.seed);
    TrainHistory history;
    EpochRecord rec0;
    {
        const auto v = evaluate(st);
        rec0.recall1 = v.recall1;
        rec0.ece1 = v.ece1;
        rec0.improved = true;
    }
    history.epochs.push_back(rec0);
    if (hook) hook(rec0);

    int phase = 1;
    detail::JointState best = st;
    double best_recall = rec0.recall1;
    double best_recall_ece = rec0.ece1;
    double best_ece = 0.0;
    int since_best = 0;

    const Eigen::Index enc_rows = st.encoder.weights().rows();
    const Eigen::Index enc_cols = st.encoder.weights().cols();
    const Eigen::Index num_classes = st.prototypes.num_classes();

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto batches = cfg.anchor_mode == AnchorMode::BatchCentroid
                                 ? detail::pk_batches(split.fit, tr.bank.labels, cfg.batch_size,
                                                      cfg.samples_per_class, rng)
                                 : detail::shuffled_batches(split.fit, cfg.batch_size, rng);
        double cls_sum = 0.0;
        double vmf_sum = 0.0;
        std::size_t count = 0;
        for (const auto& batch : batches) {
            std::vector<Vector> raws;
            std::vector<UnitDescriptor> be;
            std::vector<int> bl;
            for (std::size_t r : batch) {
                raws.push_back(tr.raw.row(static_cast<Eigen::Index>(r)).transpose());
                be.push_back(st.encoder.encode(raws.back()));
                bl.push_back(tr.bank.labels[r]);
            }
            Matrix g_enc = Matrix::Zero(enc_rows, enc_cols);
            Matrix g_proto = Matrix::Zero(d, num_classes);
            Vector g_head = Vector::Zero(st.head.pack_size());
            for (std::size_t pos = 0; pos < batch.size(); ++pos) {
                const LmclResult c = lmcl_loss(be[pos], st.prototypes, bl[pos], lmcl);
                cls_sum += c.loss;
                Vector g_e = c.grad_embedding;
                g_proto += c.grad_prototypes;
                if (cfg.include_vmf) {
                    const UnitDescriptor mu = detail::resolve_anchor(cfg.anchor_mode, st.prototypes, be, bl, pos,
                                                                         {cfg.centroid_includes_query});
                    const HeadTrace t = head_trace(tr.features[batch[pos]], st.head);
                    vmf_sum += vmf_nll(be[pos], mu, t.kappa, order);
                    // a zero weight contributes nothing, keeping lambda = 0 identical to classification alone
                    if (cfg.lambda != 0.0) {
                        g_head += head_backward(t, st.head, cfg.lambda * vmf_nll_grad_kappa(be[pos], mu, t.kappa, order))
                                      .pack(st.head.train_gem_p);
                        g_e -= cfg.lambda * t.kappa * mu.values();
                        if (cfg.anchor_mode == AnchorMode::ClassPrototype) {
                            g_proto.col(bl[pos]) -= cfg.lambda * t.kappa * be[pos].values();
                        }
                    }
                }
                g_enc += st.encoder.backward(raws[pos], g_e);
                ++count;
            }
            const double inv = 1.0 / static_cast<double>(batch.size());
            Vector enc_flat = detail::flatten_matrix(st.encoder.weights());
            adam_step(enc_flat, detail::flatten_matrix(g_enc) * inv, st.enc_opt, cfg.encoder_lr, cfg.adam);
            st.encoder.weights() = detail::unflatten_matrix(enc_flat, enc_rows, enc_cols);

            const Vector proto_before = detail::flatten_matrix(st.prototypes.weights());
            Vector proto_flat = proto_before;
            adam_step(proto_flat, detail::flatten_matrix(g_proto) * inv, st.proto_opt, cfg.encoder_lr, cfg.adam);
            st.prototypes.step_and_renormalize(detail::unflatten_matrix(proto_flat - proto_before, d, num_classes));

            Vector head_flat = st.head.pack();
            adam_step(head_flat, g_head * inv, st.head_opt, cfg.lr, cfg.adam);
            st.head.unpack(head_flat);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.phase = phase;
        rec.loss_cls = count ? cls_sum / static_cast<double>(count) : 0.0;
        rec.loss_vmf = count ? vmf_sum / static_cast<double>(count) : 0.0;
        rec.loss_total = rec.loss_cls + cfg.lambda * rec.loss_vmf;
        const auto v = evaluate(st);
        rec.recall1 = v.recall1;
        rec.ece1 = v.ece1;
        const auto outs = predict_outputs(tr.features, st.head);
        rec.mean_output = std::accumulate(outs.begin(), outs.end(), 0.0) / static_cast<double>(outs.size());

        bool stop = false;
        if (!has_validation) {
            best = st;
            rec.improved = true;
            history.best_epoch = epoch;
        } else if (phase == 1) {
            if (rec.recall1 > best_recall) {
                best_recall = rec.recall1;
                best_recall_ece = rec.ece1;
                best = st;
                since_best = 0;
                rec.improved = true;
                history.best_epoch = epoch;
            } else if (++since_best >= cfg.patience) {
                st = best;
                phase = 2;
                best_ece = best_recall_ece;
                since_best = 0;
                history.phase2_start = epoch + 1;
            }
        } else {
            if (rec.ece1 < best_ece) {
                best_ece = rec.ece1;
                best = st;
                since_best = 0;
                rec.improved = true;
                history.best_epoch = epoch;
            } else if (++since_best >= cfg.patience) {
                stop = true;
            }
        }
        history.epochs.push_back(rec);
        if (hook) hook(rec);
        if (stop) {
            history.stopped_early = true;
            break;
        }
    }

    JointTrainResult out;
    out.encoder = std::move(best.encoder);
    out.prototypes = std::move(best.prototypes);
    out.head = std::move(best.head);
    out.encoder_optimizer = std::move(best.enc_opt);
    out.prototype_optimizer = std::move(best.proto_opt);
    out.head_optimizer = std::move(best.head_opt);
    out.history = std::move(history);
    return out;
}

}  // namespace kappa_sphere
