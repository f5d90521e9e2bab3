#include <gtest/gtest.h>

#include "kappa_sphere/scores.hpp"
#include "oracles.hpp"

using namespace kappa_sphere;

namespace {

RetrievalResult result_with(std::vector<double> sims) {
    RetrievalResult r;
    for (std::size_t i = 0; i < sims.size(); ++i) {
        r.ref_ids.push_back(static_cast<ImageId>(i));
        r.ref_rows.push_back(i);
    }
    r.similarities = std::move(sims);
    return r;
}

}  // namespace

TEST(Floor, KappaBelowOneIsRaised) {
    EXPECT_EQ(floor_kappa(0.2), 1.0);
    EXPECT_EQ(floor_kappa(3.0), 3.0);
    EXPECT_EQ(query_uncertainty_inverse_kappa(0.5), 1.0);
    EXPECT_EQ(query_uncertainty_inverse_kappa(4.0), 0.25);
    // floored before the resultant is formed
    EXPECT_DOUBLE_EQ(query_uncertainty(0.1, 0.3, 0.0).value, 1.0 / std::sqrt(2.0));
    EXPECT_DOUBLE_EQ(match_uncertainty(0.1, 3.0, 1.0).value, 0.25);
}

TEST(Baselines, L2AndPa) {
    EXPECT_DOUBLE_EQ(l2_from_cos(1.0), 0.0);
    EXPECT_DOUBLE_EQ(l2_from_cos(-1.0), 2.0);
    EXPECT_DOUBLE_EQ(l2_from_cos(0.0), std::sqrt(2.0));
    EXPECT_DOUBLE_EQ(l2_from_cos(1.5), 0.0);
    const auto r = result_with({0.9, 0.5, 0.1});
    EXPECT_DOUBLE_EQ(baseline_l2(r), std::sqrt(0.2));
    EXPECT_DOUBLE_EQ(baseline_pa(r), std::sqrt(0.2) / std::sqrt(1.0));
    EXPECT_DOUBLE_EQ(baseline_pa(result_with({1.0, 1.0})), 1.0);
    EXPECT_THROW(baseline_pa(result_with({0.3})), DomainError);
    EXPECT_THROW(baseline_l2(result_with({})), DomainError);
}

TEST(Baselines, PaIsWithinUnitInterval) {
    Rng rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        double a = u(rng), b = u(rng);
        if (a < b) std::swap(a, b);
        const double pa = baseline_pa(result_with({a, b}));
        EXPECT_GE(pa, 0.0);
        EXPECT_LE(pa, 1.0);
    }
}

TEST(Baselines, SueMatchesWeightedCovarianceTrace) {
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 50.0);
    std::uniform_real_distribution<double> s(0.0, 1.0);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> sims;
        for (int i = 0; i < 6; ++i) sims.push_back(s(rng));
        std::sort(sims.rbegin(), sims.rend());
        std::vector<Pose> poses;
        for (int i = 0; i < 6; ++i) poses.push_back({u(rng), u(rng)});
        const std::size_t k = 2 + static_cast<std::size_t>(t % 5);
        // oracle: softmax weights, weighted covariance, trace
        Eigen::VectorXd w(static_cast<Eigen::Index>(k));
        for (std::size_t i = 0; i < k; ++i) w(static_cast<Eigen::Index>(i)) = std::exp(sims[i]);
        w /= w.sum();
        Eigen::MatrixXd p(static_cast<Eigen::Index>(k), 2);
        for (std::size_t i = 0; i < k; ++i) p.row(static_cast<Eigen::Index>(i)) << poses[i].x, poses[i].y;
        const Eigen::RowVector2d mean = w.transpose() * p;
        const Eigen::MatrixXd centered = p.rowwise() - mean;
        const Eigen::Matrix2d cov = centered.transpose() * w.asDiagonal() * centered;
        EXPECT_NEAR(baseline_sue(result_with(sims), poses, k), cov.trace(), 1e-9 * std::max(1.0, cov.trace()));
    }
}

TEST(Baselines, SueContracts) {
    const auto r = result_with({0.9, 0.8, 0.7});
    const std::vector<Pose> same{{1, 1}, {1, 1}, {1, 1}};
    EXPECT_DOUBLE_EQ(baseline_sue(r, same, 3), 0.0);
    EXPECT_THROW(baseline_sue(r, std::nullopt, 3), UnsupportedError);
    EXPECT_THROW(baseline_sue(r, same, 1), DomainError);
    EXPECT_THROW(baseline_sue(r, same, 4), DomainError);
    EXPECT_DOUBLE_EQ(sue_log(std::exp(1.0) - 1.0), 1.0);
}

TEST(ScoreQueries, KappaPlaceUsesTopOneReference) {
    DescriptorBank q;
    q.ids = {10, 11};
    q.kappas = std::vector<double>{5.0, 0.5};
    DescriptorBank refs;
    refs.ids = {0, 1, 2};
    refs.kappas = std::vector<double>{7.0, 100.0, 2.0};
    std::vector<RetrievalResult> results(2);
    results[0] = result_with({0.8, 0.3});
    results[0].ref_rows = {2, 1};
    results[0].query_id = 10;
    results[1] = result_with({0.1, 0.0});
    results[1].ref_rows = {0, 2};
    results[1].query_id = 11;
    ScoreInputs in{&results, &q, &refs};
    const auto s = score_queries(Method::KappaPlace, in);
    EXPECT_DOUBLE_EQ(s[0].score, 1.0 / std::sqrt(25.0 + 4.0 + 2.0 * 5.0 * 2.0 * 0.8));
    EXPECT_DOUBLE_EQ(s[1].score, 1.0 / std::sqrt(1.0 + 49.0 + 2.0 * 1.0 * 7.0 * 0.1));
    EXPECT_EQ(s[1].query_id, 11);
    const auto inv = score_queries(Method::InverseKappa, in);
    EXPECT_DOUBLE_EQ(inv[0].score, 0.2);
    EXPECT_DOUBLE_EQ(inv[1].score, 1.0);
}

TEST(ScoreQueries, MissingInputsAreUnsupported) {
    DescriptorBank q;
    q.ids = {0};
    DescriptorBank refs;
    refs.ids = {0, 1};
    std::vector<RetrievalResult> results{result_with({0.5, 0.4})};
    ScoreInputs in{&results, &q, &refs};
    EXPECT_THROW(score_queries(Method::KappaPlace, in), UnsupportedError);
    EXPECT_THROW(score_queries(Method::InverseKappa, in), UnsupportedError);
    EXPECT_THROW(score_queries(Method::SUE, in), UnsupportedError);
    EXPECT_THROW(score_queries(Method::SUELog, in), UnsupportedError);
    EXPECT_NO_THROW(score_queries(Method::L2, in));
    EXPECT_NO_THROW(score_queries(Method::PA, in));
    q.kappas = std::vector<double>{3.0};
    EXPECT_THROW(score_queries(Method::KappaPlace, in), UnsupportedError);
    EXPECT_NO_THROW(score_queries(Method::InverseKappa, in));
}

TEST(ScorePairs, QueryMajorRankMinor) {
    DescriptorBank q;
    q.ids = {100, 101};
    q.kappas = std::vector<double>{2.0, 3.0};
    DescriptorBank refs;
    refs.ids = {0, 1, 2};
    refs.kappas = std::vector<double>{1.0, 4.0, 9.0};
    std::vector<RetrievalResult> results(2);
    results[0] = result_with({0.9, 0.2, 0.1});
    results[0].query_id = 100;
    results[1] = result_with({0.5, 0.4, 0.3});
    results[1].ref_rows = {2, 0, 1};
    results[1].ref_ids = {2, 0, 1};
    results[1].query_id = 101;
    GroundTruth::PositiveMap pm{{100, {1}}, {101, {2, 1}}};
    const auto gt = GroundTruth::explicit_positives(pm);
    ScoreInputs in{&results, &q, &refs};
    const auto pairs = score_pairs(Method::KappaPlace, in, 2, gt);
    ASSERT_EQ(pairs.size(), 4u);
    EXPECT_EQ(pairs[0].rank, 1u);
    EXPECT_EQ(pairs[1].rank, 2u);
    EXPECT_FALSE(pairs[0].is_positive);
    EXPECT_TRUE(pairs[1].is_positive);
    EXPECT_TRUE(pairs[2].is_positive);
    EXPECT_FALSE(pairs[3].is_positive);
    EXPECT_DOUBLE_EQ(pairs[2].score, match_uncertainty(3.0, 9.0, 0.5).value);
    EXPECT_DOUBLE_EQ(pairs[3].similarity, 0.4);
    const auto l2 = score_pairs(Method::L2, in, 2, gt);
    EXPECT_DOUBLE_EQ(l2[1].score, l2_from_cos(0.2));
    EXPECT_THROW(score_pairs(Method::PA, in, 2, gt), UnsupportedError);
    EXPECT_THROW(score_pairs(Method::L2, in, 4, gt), DomainError);
}

TEST(Methods, NamesRoundTrip) {
    for (auto m : {Method::KappaPlace, Method::InverseKappa, Method::L2, Method::PA, Method::SUE, Method::SUELog, Method::GNLL})
        EXPECT_EQ(method_from_string(to_string(m)), m);
    EXPECT_THROW(method_from_string("nope"), DomainError);
}
