#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "collabres/metrics.hpp"
#include "support.hpp"

using namespace collabres;
using namespace collabres::metrics;

namespace {

PredictionBatch toy() {
    PredictionBatch b;
    b.scores = DenseMatrix::from_rows({{0.9f, 0.5f, 0.2f}});
    b.truth = SparseBinaryMatrix(3, {{0, 2}});
    b.principal = {0};
    b.threshold = 0.5;
    return b;
}

PredictionBatch single(std::vector<float> scores, std::vector<std::uint32_t> truth) {
    PredictionBatch b;
    b.scores = DenseMatrix::from_rows({scores});
    b.truth = SparseBinaryMatrix(scores.size(), {truth});
    return b;
}

}  // namespace

TEST(Toy, AllMetrics) {
    auto b = toy();
    EXPECT_DOUBLE_EQ(lrap(b), 5.0 / 6.0);
    EXPECT_DOUBLE_EQ(coverage_error(b), 3.0);
    EXPECT_DOUBLE_EQ(ranking_loss(b), 0.5);
    auto s = set_metrics(b);
    EXPECT_DOUBLE_EQ(s.jaccard, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(s.sample_f1, 0.5);
    EXPECT_EQ(s.over_coding, 1u);
    EXPECT_EQ(s.under_coding, 1u);
    EXPECT_DOUBLE_EQ(primary_accuracy(b), 1.0);
}

TEST(Ranking, PerfectOrdering) {
    auto b = single({0.9f, 0.8f, 0.1f, 0.05f}, {0, 1});
    EXPECT_DOUBLE_EQ(lrap(b), 1.0);
    EXPECT_DOUBLE_EQ(coverage_error(b), 2.0);
    EXPECT_DOUBLE_EQ(ranking_loss(b), 0.0);
    EXPECT_DOUBLE_EQ(coverage_error(single({0.9f, 0.3f, 0.2f}, {0})), 1.0);
}

TEST(Ranking, AllTiedIsWorstCase) {
    auto b = single({0.4f, 0.4f, 0.4f, 0.4f}, {1, 3});
    EXPECT_DOUBLE_EQ(ranking_loss(b), 1.0);
    EXPECT_DOUBLE_EQ(coverage_error(b), 4.0);
    EXPECT_DOUBLE_EQ(lrap(b), 0.5);
}

TEST(Ranking, DegenerateSamplesExcluded) {
    PredictionBatch b;
    b.scores = DenseMatrix::from_rows({{0.9f, 0.5f, 0.2f}, {0.1f, 0.2f, 0.3f}, {0.3f, 0.2f, 0.1f}});
    b.truth = SparseBinaryMatrix(3, {{0, 2}, {}, {0, 1, 2}});
    EXPECT_DOUBLE_EQ(lrap(b), 5.0 / 6.0);
    auto rep = full_report(b);
    EXPECT_EQ(rep.n_degenerate, 2u);
    EXPECT_EQ(rep.n_ranking_evaluable, 1u);

    PredictionBatch all_bad;
    all_bad.scores = DenseMatrix(2, 2);
    all_bad.truth = SparseBinaryMatrix(2, {{}, {0, 1}});
    try {
        lrap(all_bad);
        FAIL();
    } catch (const std::domain_error& e) {
        EXPECT_STREQ(e.what(), "no evaluable samples");
    }
    EXPECT_THROW(coverage_error(all_bad), std::domain_error);
    EXPECT_THROW(ranking_loss(all_bad), std::domain_error);
    EXPECT_FALSE(full_report(all_bad).lrap.has_value());
}

TEST(Ranking, OracleEquivalenceOnRandomBatches) {
    SeededRng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        auto b = oracle::random_prediction_batch(rng, 1 + rng.uniform_index(50), 2 + rng.uniform_index(7));
        auto o = oracle::brute_ranking(b);
        if (o.evaluated == 0) {
            EXPECT_THROW(lrap(b), std::domain_error);
            continue;
        }
        ASSERT_EQ(lrap(b), o.lrap) << trial;
        ASSERT_EQ(coverage_error(b), o.coverage) << trial;
        ASSERT_EQ(ranking_loss(b), o.ranking_loss) << trial;
    }
}

TEST(Ranking, MonotoneTransformInvariance) {
    SeededRng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        auto b = oracle::random_prediction_batch(rng, 1 + rng.uniform_index(20), 2 + rng.uniform_index(7));
        for (std::size_t r = 0; r < b.size(); ++r) {
            auto t = b.truth.row(r);
            if (!t.empty()) b.principal.push_back(t[0]);
        }
        if (b.principal.size() != b.size()) b.principal.clear();
        auto c = b;
        for (auto& v : c.scores.values()) v = std::exp(3.0f * v) - 7.0f;  // strictly increasing in float for v in [0,1]
        if (oracle::brute_ranking(b).evaluated == 0) continue;
        EXPECT_NEAR(lrap(b), lrap(c), 1e-12);
        EXPECT_NEAR(coverage_error(b), coverage_error(c), 1e-12);
        EXPECT_NEAR(ranking_loss(b), ranking_loss(c), 1e-12);
        if (b.has_principal()) EXPECT_EQ(primary_accuracy(b), primary_accuracy(c));
    }
}

TEST(Ranking, LabelPermutationInvariance) {
    SeededRng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t L = 2 + rng.uniform_index(7);
        auto b = oracle::random_prediction_batch(rng, 1 + rng.uniform_index(20), L);
        if (oracle::brute_ranking(b).evaluated == 0) continue;
        std::vector<std::uint32_t> perm(L);
        std::iota(perm.begin(), perm.end(), 0u);
        rng.shuffle(perm.begin(), perm.end());
        PredictionBatch c;
        c.scores = DenseMatrix(b.size(), L);
        c.truth = SparseBinaryMatrix(L);
        for (std::size_t r = 0; r < b.size(); ++r) {
            for (std::size_t j = 0; j < L; ++j) c.scores(r, perm[j]) = b.scores(r, j);
            std::vector<std::uint32_t> t;
            for (auto j : b.truth.row(r)) t.push_back(perm[j]);
            c.truth.push_row(t);
        }
        EXPECT_NEAR(lrap(b), lrap(c), 1e-12);
        EXPECT_NEAR(coverage_error(b), coverage_error(c), 1e-12);
        EXPECT_NEAR(ranking_loss(b), ranking_loss(c), 1e-12);
        auto sb = set_metrics(b), sc = set_metrics(c);
        EXPECT_EQ(sb.sample_f1, sc.sample_f1);
        EXPECT_EQ(sb.jaccard, sc.jaccard);
    }
}

TEST(Ranking, BoundsOnRandomInputs) {
    SeededRng rng(9);
    for (int trial = 0; trial < 300; ++trial) {
        auto b = oracle::random_prediction_batch(rng, 1 + rng.uniform_index(30), 2 + rng.uniform_index(7));
        auto rep = full_report(b);
        if (rep.lrap) {
            EXPECT_GE(*rep.lrap, 0.0);
            EXPECT_LE(*rep.lrap, 1.0);
            EXPECT_GE(*rep.ranking_loss, 0.0);
            EXPECT_LE(*rep.ranking_loss, 1.0);
            EXPECT_GE(*rep.coverage_error, 1.0);
            EXPECT_LE(*rep.coverage_error, double(b.labels()));
        }
        for (double v : {rep.sample_f1, rep.jaccard, rep.micro_f1, rep.macro_f1}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(SetMetrics, EdgeCases) {
    auto same = single({0.9f, 0.1f, 0.7f}, {0, 2});
    auto s = set_metrics(same);
    EXPECT_DOUBLE_EQ(s.jaccard, 1.0);
    EXPECT_DOUBLE_EQ(s.sample_f1, 1.0);
    EXPECT_EQ(s.over_coding + s.under_coding, 0u);

    auto none = single({0.1f, 0.1f, 0.2f}, {0, 2});
    s = set_metrics(none);
    EXPECT_DOUBLE_EQ(s.jaccard, 0.0);
    EXPECT_DOUBLE_EQ(s.sample_f1, 0.0);
    EXPECT_EQ(s.under_coding, 2u);

    auto both_empty = single({0.1f, 0.2f}, {});
    s = set_metrics(both_empty);
    EXPECT_DOUBLE_EQ(s.jaccard, 1.0);
    EXPECT_DOUBLE_EQ(s.sample_f1, 1.0);
}

TEST(SetMetrics, ThresholdIsInclusive) {
    auto b = single({0.5f, 0.49f}, {0});
    EXPECT_DOUBLE_EQ(set_metrics(b).sample_f1, 1.0);
}

TEST(SetMetrics, MicroAndMacro) {
    PredictionBatch b;
    b.scores = DenseMatrix::from_rows({{0.9f, 0.9f, 0.1f}, {0.1f, 0.9f, 0.1f}});
    b.truth = SparseBinaryMatrix(3, {{0}, {1, 2}});
    auto s = set_metrics(b);
    // tp 2, predicted 3, true 3
    EXPECT_DOUBLE_EQ(s.micro_f1, 4.0 / 6.0);
    // label 0: 2*1/(1+1)=1; label 1: 2*1/(2+1); label 2: 0
    EXPECT_DOUBLE_EQ(s.macro_f1, (1.0 + 2.0 / 3.0 + 0.0) / 3.0);
}

TEST(Validation, RejectsBadBatches) {
    auto b = toy();
    b.threshold = 1.0;
    EXPECT_THROW(set_metrics(b), std::invalid_argument);
    b = toy();
    b.principal = {1};
    EXPECT_THROW(primary_accuracy(b), std::invalid_argument);
    b = toy();
    b.scores(0, 1) = std::nanf("");
    EXPECT_THROW(lrap(b), std::invalid_argument);
    b = toy();
    b.principal.clear();
    EXPECT_THROW(primary_accuracy(b), std::invalid_argument);
}

TEST(PrimaryAccuracy, TieBreakAndMiss) {
    auto b = single({0.3f, 0.3f, 0.3f}, {0, 1});
    b.principal = {0};
    EXPECT_DOUBLE_EQ(primary_accuracy(b), 1.0);
    b.principal = {1};
    EXPECT_DOUBLE_EQ(primary_accuracy(b), 0.0);
    auto low = single({0.9f, 0.5f, 0.1f}, {2});
    low.principal = {2};
    EXPECT_DOUBLE_EQ(primary_accuracy(low), 0.0);
}

TEST(Grouped, SingleGroupEqualsGlobal) {
    SeededRng rng(10);
    auto b = oracle::random_prediction_batch(rng, 30, 6);
    auto rep = grouped_report(b, std::vector<std::string>(30, "all"));
    ASSERT_EQ(rep.groups.size(), 1u);
    EXPECT_EQ(rep.groups[0].report.lrap, rep.lrap);
    EXPECT_EQ(rep.groups[0].report.sample_f1, rep.sample_f1);
    EXPECT_EQ(rep.groups[0].report.n_samples, 30u);
}

TEST(Grouped, PartitionConsistency) {
    SeededRng rng(11);
    auto b = oracle::random_prediction_batch(rng, 40, 5);
    std::vector<std::string> keys;
    std::vector<std::int64_t> principal;
    for (std::size_t r = 0; r < 40; ++r) {
        auto t = b.truth.row(r);
        if (t.empty()) {
            b.truth = [&] {
                auto rows = b.truth.row_lists();
                rows[r] = {static_cast<std::uint32_t>(r % 5)};
                return SparseBinaryMatrix(5, rows);
            }();
        }
        principal.push_back(b.truth.row(r)[0]);
        keys.push_back("ch" + std::to_string(b.truth.row(r)[0] % 3));
    }
    b.principal = principal;
    auto rep = grouped_report(b, keys);
    std::size_t total = 0;
    double prev = 2.0;
    for (const auto& g : rep.groups) {
        total += g.report.n_samples;
        std::size_t correct = 0, n = 0;
        for (std::size_t r = 0; r < 40; ++r) {
            if (keys[r] != g.key) continue;
            ++n;
            if (static_cast<std::int64_t>(top_label(b.scores, r)) == b.principal[r]) ++correct;
        }
        EXPECT_DOUBLE_EQ(*g.report.primary_accuracy, double(correct) / double(n));
        EXPECT_LE(*g.report.primary_accuracy, prev);
        prev = *g.report.primary_accuracy;
    }
    EXPECT_EQ(total, 40u);
}

TEST(Report, HeaderColumnsAreStable) {
    std::ostringstream os;
    write_metrics_header(os);
    write_metrics_row(os, "toy", full_report(toy()));
    EXPECT_EQ(os.str(),
              "model\taverage_precision\tranking_loss\tcoverage_error\tjaccard\tf1\taccuracy_primary\tn_samples\t"
              "n_ranking_evaluable\tover_coding\tunder_coding\n"
              "toy\t0.8333\t0.5000\t3.0000\t0.3333\t0.5000\t1.0000\t1\t1\t1\t1\n");
}
