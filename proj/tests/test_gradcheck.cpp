#include <gtest/gtest.h>

#include "collabres/nn.hpp"
#include "support.hpp"

using namespace collabres;
using namespace collabres::nn;

namespace {

ModelSpec micro_collabres() {
    CollabResConfig cfg;
    cfg.branches = 2;
    cfg.branch_hidden = {8};
    cfg.branch_out = {6};
    cfg.dropout_rates = {0.0};
    cfg.fusion_width = 8;
    std::vector<std::string> warnings;
    return build_collabres(20, 10, cfg, &warnings);
}

void expect_gradients_match(const ModelSpec& spec, std::uint64_t seed) {
    auto r = oracle::gradient_check(spec, seed, 120);
    EXPECT_GE(r.checked, 100u) << spec.name << " kinks " << r.kinks;
    EXPECT_EQ(r.failures, 0u) << spec.name << " worst: " << r.worst;
    EXPECT_LT(r.max_rel_error, 1e-4) << spec.name;
}

}  // namespace

TEST(GradCheck, CollabResMicro) { expect_gradients_match(micro_collabres(), 1); }

TEST(GradCheck, CollabResMicroWithDropout) {
    // Masks are replayed by reseeding, so dropout paths are checked too.
    CollabResConfig cfg;
    cfg.branches = 2;
    cfg.branch_hidden = {8};
    cfg.branch_out = {6};
    cfg.dropout_rates = {0.2, 0.4};
    cfg.fusion_width = 8;
    expect_gradients_match(build_collabres(20, 10, cfg), 2);
}

class BaselineGradCheck : public ::testing::TestWithParam<BaselineId> {};

TEST_P(BaselineGradCheck, FiftiethScale) { expect_gradients_match(build_baseline(GetParam(), 20, 10, 50), 3); }

INSTANTIATE_TEST_SUITE_P(AllBaselines, BaselineGradCheck,
                         ::testing::Values(BaselineId::M1, BaselineId::M2, BaselineId::M3, BaselineId::M4, BaselineId::M5,
                                           BaselineId::M6, BaselineId::M7, BaselineId::M8),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(GradCheck, NoSkipVariant) { expect_gradients_match(without_skips(micro_collabres()), 4); }

// The float path must agree with the double path up to float rounding.
TEST(GradCheck, FloatMatchesDouble) {
    auto spec = micro_collabres();
    SeededRng rng(5);
    auto p = init_params(spec, rng);
    auto x = oracle::random_sparse(rng, 6, 20, 0.3);
    SeededRng r1(0), r2(0);
    auto f = model_forward(spec, p, x, Mode::Train, r1);
    auto d = model_forward(spec, p.cast<double>(), x, Mode::Train, r2);
    auto gf = model_backward(spec, p, f.trace, f.scores);
    auto gd = model_backward(spec, p.cast<double>(), d.trace, d.scores);
    for (const auto& [name, m] : gf)
        for (std::size_t i = 0; i < m.size(); ++i)
            EXPECT_NEAR(m.values()[i], gd.at(name).values()[i], 1e-4 + 1e-3 * std::abs(gd.at(name).values()[i])) << name;
}
