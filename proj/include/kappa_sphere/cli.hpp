#pragma once

// Command-line surface: gen | fit | train | eval | match-eval | report | bench.
// Every command works inside one directory (--out) holding the artifacts of a run:
//
//   config.json     resolved configuration (written by gen)
//   bank.kpb        descriptors          manifest.json   ids, labels, poses, kappas, split
//   features.kpf    head inputs          prototypes.kpb  class prototypes
//   model.json      trained head (+ encoder and prototypes after train)
//   report.json / bins.csv, match_report.json / match_bins.csv, bench.json

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kappa_sphere/bench.hpp"
#include "kappa_sphere/io.hpp"

namespace kappa_sphere {

struct CliOptions {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::filesystem::path out = ".";
    std::string ks;
    int bins = 0;
    std::string binning;
    std::string methods;
    bool svg = false;
};

namespace cli {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

/// Defaults, then the config file (--config, else <out>/config.json), then flags.
inline RunConfig resolve_config(const CliOptions& o) {
    RunConfig c;
    const std::filesystem::path stored = o.out / "config.json";
    if (!o.config.empty()) {
        c = read_config(o.config);
    } else if (std::filesystem::exists(stored)) {
        c = read_config(stored);
    }
    if (o.seed_set) c.apply_seed(o.seed);
    if (!o.ks.empty()) {
        c.eval.ks.clear();
        for (const auto& k : split_list(o.ks)) {
            std::size_t pos = 0;
            long v = -1;
            try {
                v = std::stol(k, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != k.size() || v < 1) throw DomainError("--k expects positive integers, got '" + k + "'");
            c.eval.ks.push_back(static_cast<std::size_t>(v));
        }
    }
    if (o.bins != 0) c.eval.num_bins = o.bins;
    if (!o.binning.empty()) c.eval.strategy = binning_from_string(o.binning);
    if (!o.methods.empty()) {
        c.eval.methods.clear();
        for (const auto& m : split_list(o.methods)) c.eval.methods.push_back(method_from_string(m));
    }
    c.validate();
    return c;
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

inline TrainSamples samples(const StoredDataset& ds, Split s) {
    TrainSamples t;
    t.bank = ds.bank(s);
    t.features = ds.features_of(s);
    t.raw = t.bank.descriptors;
    return t;
}

inline TrainingData training_data(const StoredDataset& ds) {
    if (ds.features.empty()) throw DomainError("training needs a feature file next to the bank");
    return {samples(ds, Split::Train), samples(ds, Split::Database)};
}

inline void store_predictions(const DatasetPaths& paths, StoredDataset& ds, const HeadParams& head) {
    ds.manifest.kappas = predict_outputs(ds.features, head);
    write_manifest(paths.manifest, ds.manifest);
}

inline int cmd_gen(const CliOptions& o, std::ostream& out) {
    const RunConfig cfg = resolve_config(o);
    const SynthDataset ds = generate_scene(cfg.scene);
    const auto paths = DatasetPaths::in(o.out);
    write_dataset(paths, stored_from_synth(ds));
    write_prototypes(paths.prototypes, ds.prototypes);
    atomic_write(o.out / "config.json", dump(config_json(cfg)));
    out << "generated " << ds.bank.size() << " images, " << cfg.scene.num_classes << " classes, d="
        << cfg.scene.descriptor_dim << ", " << ds.aliased_pairs.size() << " aliased pairs -> " << o.out.string()
        << '\n';
    return 0;
}

inline int cmd_fit(const CliOptions& o, std::ostream& out) {
    RunConfig cfg = resolve_config(o);
    if (cfg.train.mode == TrainMode::JointTraining) cfg.train.mode = TrainMode::PostTraining;
    const auto paths = DatasetPaths::in(o.out);
    StoredDataset ds = read_dataset(paths);
    const PrototypeSet prototypes = read_prototypes(paths.prototypes);
    const TrainingData td = training_data(ds);
    HeadParams head = initialize_head(td.train, prototypes, cfg.train.mode, cfg.head.variant, cfg.head.hidden, cfg.seed);
    const PostTrainResult r = train_post(td, prototypes, std::move(head), cfg.train);

    ModelState m;
    m.head = r.head;
    m.head_outputs_variance = cfg.train.mode == TrainMode::GnllVariant;
    m.head_optimizer = r.optimizer;
    write_model(o.out / "model.json", m);
    atomic_write(o.out / "history.csv", r.history.to_csv());
    store_predictions(paths, ds, r.head);
    out << "fit (" << to_string(cfg.train.mode) << "): " << r.history.epochs.size() - 1 << " epochs, best epoch "
        << r.history.best_epoch << ", validation ECE@1 " << r.history.epochs[static_cast<std::size_t>(r.history.best_epoch)].ece1
        << '\n';
    return 0;
}

inline int cmd_train(const CliOptions& o, std::ostream& out) {
    RunConfig cfg = resolve_config(o);
    cfg.train.mode = TrainMode::JointTraining;
    const auto paths = DatasetPaths::in(o.out);
    StoredDataset ds = read_dataset(paths);
    const TrainingData td = training_data(ds);
    const int d = static_cast<int>(ds.descriptors.cols());
    const int classes = *std::max_element(ds.manifest.labels.begin(), ds.manifest.labels.end()) + 1;
    PrototypeSet prototypes = joint_initial_prototypes(classes, d, cfg.seed);
    HeadParams head = initialize_head(td.train, prototypes, cfg.train.mode, cfg.head.variant, cfg.head.hidden, cfg.seed);
    const JointTrainResult r =
        train_joint(td, LinearEncoder::identity(d), std::move(prototypes), std::move(head), cfg.train, cfg.lmcl);

    ModelState m;
    m.encoder = r.encoder;
    m.prototypes = r.prototypes;
    m.head = r.head;
    m.head_optimizer = r.head_optimizer;
    m.encoder_optimizer = r.encoder_optimizer;
    m.prototype_optimizer = r.prototype_optimizer;
    write_model(o.out / "model.json", m);
    atomic_write(o.out / "history.csv", r.history.to_csv());
    store_predictions(paths, ds, r.head);
    const auto& best = r.history.epochs[static_cast<std::size_t>(r.history.best_epoch)];
    out << "train (joint, lambda=" << cfg.train.lambda << "): " << r.history.epochs.size() - 1 << " epochs, best epoch "
        << r.history.best_epoch << ", validation R@1 " << best.recall1 << ", ECE@1 " << best.ece1 << '\n';
    return 0;
}

/// Query and database banks as evaluated: re-encoded when the model carries an encoder.
struct EvalInputs {
    DescriptorBank queries;
    DescriptorBank database;
    GroundTruth gt;
    std::string gt_name;
    bool variance_output = false;
};

inline EvalInputs eval_inputs(const CliOptions& o, const RunConfig& cfg) {
    const auto paths = DatasetPaths::in(o.out);
    const StoredDataset ds = read_dataset(paths);
    std::optional<ModelState> model;
    if (std::filesystem::exists(o.out / "model.json")) model = read_model(o.out / "model.json");

    EvalInputs in;
    in.queries = ds.bank(Split::Query);
    in.database = ds.bank(Split::Database);
    if (model && model->encoder) {
        for (DescriptorBank* b : {&in.queries, &in.database}) {
            for (Eigen::Index i = 0; i < b->descriptors.rows(); ++i) {
                b->descriptors.row(i) = model->encoder->encode(b->descriptors.row(i).transpose()).values().transpose();
            }
        }
    }
    in.variance_output = model && model->head_outputs_variance;
    if (in.queries.poses && in.database.poses) {
        in.gt = GroundTruth::distance_threshold(cfg.scene.gt_threshold, in.queries, in.database);
        std::ostringstream os;
        os << "distance<=" << cfg.scene.gt_threshold;
        in.gt_name = os.str();
    } else {
        in.gt = GroundTruth::from_labels(in.queries, in.database);
        in.gt_name = "label";
    }
    return in;
}

/// A head trained with the Gaussian NLL predicts sigma^2: kappa-based methods are marked
/// unsupported and the variance is scored directly.
inline EvalReport run_eval(const EvalInputs& in, const EvalOptions& opts, bool match_level) {
    if (!in.variance_output) {
        return match_level ? evaluate_matches(in.queries, in.database, in.gt, opts)
                           : evaluate_queries(in.queries, in.database, in.gt, opts);
    }
    EvalOptions o = opts;
    o.methods.clear();
    for (Method m : opts.methods)
        if (m != Method::KappaPlace && m != Method::InverseKappa) o.methods.push_back(m);
    if (!match_level && std::find(o.methods.begin(), o.methods.end(), Method::GNLL) == o.methods.end()) {
        o.methods.push_back(Method::GNLL);
    }
    DescriptorBank db = in.database;
    db.kappas.reset();
    EvalReport rep = match_level ? evaluate_matches(in.queries, db, in.gt, o) : evaluate_queries(in.queries, db, in.gt, o);
    for (Method m : opts.methods) {
        if (m != Method::KappaPlace && m != Method::InverseKappa) continue;
        MethodReport mr;
        mr.method = m;
        mr.unsupported = "model predicts sigma^2, not kappa";
        rep.methods.push_back(std::move(mr));
    }
    return rep;
}

inline void write_svgs(const std::filesystem::path& dir, const EvalReport& rep, std::ostream& out) {
    for (const auto& m : rep.methods) {
        for (const auto& cr : m.per_k) {
            const auto name = dir / ("reliability_" + rep.level + "_" + to_string(m.method) + "_k" +
                                     std::to_string(cr.k) + ".svg");
            atomic_write(name, reliability_svg(cr, rep.level + " " + to_string(m.method)));
            out << "wrote " << name.string() << '\n';
        }
    }
}

inline int cmd_eval(const CliOptions& o, std::ostream& out, bool match_level) {
    const RunConfig cfg = resolve_config(o);
    const EvalInputs in = eval_inputs(o, cfg);
    const EvalReport rep = run_eval(in, cfg.eval, match_level);
    const std::string stem = match_level ? "match_" : "";
    atomic_write(o.out / (stem + "report.json"),
                 dump(report_json(rep, match_level ? "match-eval" : "eval", cfg, in.gt_name)));
    atomic_write(o.out / (stem + "bins.csv"), bins_csv(rep));
    out << report_table(rep);
    if (match_level && !in.variance_output) {
        const std::size_t k = rep.ks.back();
        auto results = knn_all(in.queries, in.database, k);
        ScoreInputs si;
        si.results = &results;
        si.queries = &in.queries;
        si.references = &in.database;
        si.cap = cfg.eval.cap;
        try {
            const auto strata = stratify_by_similarity(score_pairs(Method::KappaPlace, si, k, in.gt));
            out << "match uncertainty by similarity decile (K=" << k << "): sim range, positive mean, negative mean\n";
            char buf[128];
            for (const auto& s : strata) {
                std::snprintf(buf, sizeof buf, "  [%.4f, %.4f]  %10.6f (%zu)  %10.6f (%zu)\n", s.sim_low, s.sim_high,
                              s.mean_positive, s.positives, s.mean_negative, s.negatives);
                out << buf;
            }
        } catch (const UnsupportedError&) {
            // no kappas yet: the report already lists kappaplace as unsupported
        }
    }
    if (o.svg) write_svgs(o.out, rep, out);
    return 0;
}

inline int cmd_report(const CliOptions& o, std::ostream& out) {
    bool any = false;
    for (const char* name : {"report.json", "match_report.json"}) {
        const auto path = o.out / name;
        if (!std::filesystem::exists(path)) continue;
        any = true;
        const EvalReport rep = read_report(path);
        out << report_table(rep);
        if (o.svg) write_svgs(o.out, rep, out);
    }
    if (!any) throw LookupError("no report.json or match_report.json in " + o.out.string());
    return 0;
}

inline int cmd_bench(const CliOptions& o, std::ostream& out) {
    const RunConfig cfg = resolve_config(o);
    BenchConfig b;
    b.hidden = cfg.head.hidden;
    b.variant = cfg.head.variant;
    b.seed = cfg.seed;
    const BenchResult r = run_bench(b);
    char buf[160];
    out << "Inference Latency (ms), mean of " << r.timed_runs << " runs after " << b.warmup_runs << " warmup\n";
    std::snprintf(buf, sizeof buf, "  descriptor path   %8.4f\n  descriptor+kappa  %8.4f\n  overhead          %7.2f%%\n",
                  r.descriptor_ms, r.kappa_ms, 100.0 * r.overhead());
    out << buf;
    Json j;
    j["warmup_runs"] = b.warmup_runs;
    j["timed_runs"] = r.timed_runs;
    j["descriptor_ms"] = r.descriptor_ms;
    j["kappa_ms"] = r.kappa_ms;
    j["overhead"] = r.overhead();
    j["shape"] = {{"raw_dim", b.raw_dim}, {"channels", b.channels}, {"height", b.height}, {"width", b.width},
                  {"descriptor_dim", b.descriptor_dim}, {"hidden", b.hidden}, {"variant", head_variant_name(b.variant)}};
    atomic_write(o.out / "bench.json", dump(j));
    return 0;
}

}  // namespace cli

/// Entry point shared by the executable and the tests. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Hyperspherical uncertainty for place recognition"};
    app.require_subcommand(1);
    CliOptions o;
    std::string out_dir = ".";

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "run configuration JSON");
        sub->add_option("--seed", o.seed, "random seed (overrides the config)")->each([&](const std::string&) {
            o.seed_set = true;
        });
        sub->add_option("--out", out_dir, "run directory");
    };
    auto eval_flags = [&](CLI::App* sub) {
        sub->add_option("--k", o.ks, "comma-separated K values, e.g. 1,5,10");
        sub->add_option("--bins", o.bins, "number of bins M");
        sub->add_option("--binning", o.binning, "equal-width or quantile");
        sub->add_option("--method", o.methods, "comma-separated methods");
        sub->add_flag("--svg", o.svg, "write reliability diagrams");
    };

    std::vector<std::pair<CLI::App*, std::function<int()>>> commands;
    auto add = [&](const char* name, const char* help, std::function<int()> fn, bool with_eval) {
        CLI::App* sub = app.add_subcommand(name, help);
        common(sub);
        if (with_eval) eval_flags(sub);
        commands.emplace_back(sub, std::move(fn));
    };
    add("gen", "generate a synthetic scene", [&] { return cli::cmd_gen(o, out); }, false);
    add("fit", "post-train the concentration head on frozen descriptors", [&] { return cli::cmd_fit(o, out); }, false);
    add("train", "joint training of encoder, prototypes and head", [&] { return cli::cmd_train(o, out); }, false);
    add("eval", "query-level Recall@K and ECE@K per method", [&] { return cli::cmd_eval(o, out, false); }, true);
    add("match-eval", "match-level ECE@K", [&] { return cli::cmd_eval(o, out, true); }, true);
    add("report", "print stored reports", [&] { return cli::cmd_report(o, out); }, true);
    add("bench", "forward latency of the descriptor and kappa paths", [&] { return cli::cmd_bench(o, out); }, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }
    o.out = out_dir;
    try {
        for (auto& [sub, fn] : commands)
            if (sub->parsed()) return fn();
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

}  // namespace kappa_sphere
