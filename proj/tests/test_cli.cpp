#include <gtest/gtest.h>

#include <sstream>

#include "kappa_sphere/cli.hpp"
#include "oracles.hpp"

using namespace kappa_sphere;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    args.insert(args.begin(), "kappa-sphere");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

// small scene so every command finishes in well under a second
fs::path small_config(const fs::path& dir) {
    RunConfig c;
    c.scene.num_classes = 8;
    c.scene.images_per_class = 30;
    c.scene.descriptor_dim = 16;
    c.scene.feature_channels = 8;
    c.train.max_epochs = 8;
    c.train.lr = 0.01;
    c.head.hidden = 8;
    fs::create_directories(dir);
    atomic_write(dir / "small.json", config_json(c).dump(2));
    return dir / "small.json";
}

}  // namespace

TEST(Cli, GenEvalIsDeterministic) {
    const auto base = oracle::scratch("cli_det");
    const auto cfg = small_config(base);
    std::string reports[2];
    for (int i = 0; i < 2; ++i) {
        const auto dir = base / ("run" + std::to_string(i));
        ASSERT_EQ(run({"gen", "--config", cfg.string(), "--seed", "7", "--out", dir.string()}).code, 0);
        const auto r = run({"eval", "--out", dir.string()});
        ASSERT_EQ(r.code, 0) << r.err;
        reports[i] = read_text(dir / "report.json");
        EXPECT_TRUE(fs::exists(dir / "bins.csv"));
    }
    EXPECT_EQ(reports[0], reports[1]);
    const Json j = Json::parse(reports[0]);
    EXPECT_EQ(j["seed"], 7);
    EXPECT_EQ(j["ground_truth"], "distance<=25");
}

TEST(Cli, FitEvalMatchEvalReport) {
    const auto base = oracle::scratch("cli_fit");
    const auto dir = base / "run";
    ASSERT_EQ(run({"gen", "--config", small_config(base).string(), "--out", dir.string()}).code, 0);
    auto r = run({"fit", "--out", dir.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "model.json"));
    EXPECT_TRUE(fs::exists(dir / "history.csv"));
    EXPECT_TRUE(read_manifest(dir / "manifest.json").kappas);

    r = run({"eval", "--out", dir.string(), "--k", "1,5", "--bins", "5", "--binning", "quantile", "--svg"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rep = read_report(dir / "report.json");
    EXPECT_EQ(rep.ks, (std::vector<std::size_t>{1, 5}));
    EXPECT_FALSE(rep.method(Method::KappaPlace).unsupported);
    EXPECT_EQ(rep.method(Method::L2).per_k[0].num_bins, 5);
    EXPECT_TRUE(fs::exists(dir / "reliability_query_kappaplace_k1.svg"));

    r = run({"match-eval", "--out", dir.string(), "--k", "1,5"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("similarity decile"), std::string::npos);
    EXPECT_EQ(read_report(dir / "match_report.json").level, "match");

    r = run({"report", "--out", dir.string()});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("kappaplace"), std::string::npos);
}

TEST(Cli, GnllModelMarksKappaMethodsUnsupported) {
    const auto base = oracle::scratch("cli_gnll");
    const auto dir = base / "run";
    ASSERT_EQ(run({"gen", "--config", small_config(base).string(), "--out", dir.string()}).code, 0);
    Json cfg = Json::parse(read_text(dir / "config.json"));
    cfg["train"]["mode"] = "gnll";
    atomic_write(dir / "config.json", cfg.dump(2));
    ASSERT_EQ(run({"fit", "--out", dir.string()}).code, 0);
    ASSERT_EQ(run({"eval", "--out", dir.string()}).code, 0);
    const auto rep = read_report(dir / "report.json");
    EXPECT_TRUE(rep.method(Method::KappaPlace).unsupported);
    EXPECT_FALSE(rep.method(Method::GNLL).unsupported);
}

TEST(Cli, JointTrainWritesEncoder) {
    const auto base = oracle::scratch("cli_train");
    const auto dir = base / "run";
    ASSERT_EQ(run({"gen", "--config", small_config(base).string(), "--out", dir.string()}).code, 0);
    const auto r = run({"train", "--out", dir.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = read_model(dir / "model.json");
    EXPECT_TRUE(m.encoder);
    EXPECT_TRUE(m.prototypes);
    EXPECT_EQ(run({"eval", "--out", dir.string()}).code, 0);
}

TEST(Cli, MissingPosesSkipsSueOnly) {
    const auto base = oracle::scratch("cli_noposes");
    const auto dir = base / "run";
    ASSERT_EQ(run({"gen", "--config", small_config(base).string(), "--out", dir.string()}).code, 0);
    Manifest m = read_manifest(dir / "manifest.json");
    m.poses.reset();
    write_manifest(dir / "manifest.json", m);
    const auto r = run({"eval", "--out", dir.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const Json j = Json::parse(read_text(dir / "report.json"));
    EXPECT_EQ(j["ground_truth"], "label");
    const auto rep = read_report(dir / "report.json");
    EXPECT_TRUE(rep.method(Method::SUE).unsupported);
    EXPECT_FALSE(rep.method(Method::L2).unsupported);
    EXPECT_FALSE(rep.method(Method::PA).unsupported);
}

TEST(Cli, ErrorsGiveNonzeroExit) {
    const auto base = oracle::scratch("cli_errors");
    const auto cfg = small_config(base);
    EXPECT_EQ(run({"eval", "--out", (base / "absent").string()}).code, 1);
    EXPECT_EQ(run({"report", "--out", (base / "absent").string()}).code, 1);

    Json bad = Json::parse(read_text(cfg));
    bad["train"]["lamda"] = 0.1;
    atomic_write(base / "bad.json", bad.dump());
    const auto r = run({"gen", "--config", (base / "bad.json").string(), "--out", (base / "x").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("$.train.lamda"), std::string::npos) << r.err;

    const auto dir = base / "run";
    ASSERT_EQ(run({"gen", "--config", cfg.string(), "--out", dir.string()}).code, 0);
    EXPECT_NE(run({"eval", "--out", dir.string(), "--method", "nope"}).code, 0);
    EXPECT_NE(run({"eval", "--out", dir.string(), "--binning", "log"}).code, 0);
    EXPECT_NE(run({"frobnicate"}).code, 0);
    EXPECT_NE(run({}).code, 0);
}

TEST(Cli, BenchWritesTimings) {
    const auto dir = oracle::scratch("cli_bench");
    const auto r = run({"bench", "--out", dir.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const Json j = Json::parse(read_text(dir / "bench.json"));
    EXPECT_GT(j["descriptor_ms"].get<double>(), 0.0);
    EXPECT_GT(j["kappa_ms"].get<double>(), j["descriptor_ms"].get<double>() * 0.5);
    EXPECT_NE(r.out.find("Inference Latency"), std::string::npos);
}
