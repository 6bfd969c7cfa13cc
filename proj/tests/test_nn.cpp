#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "collabres/nn.hpp"
#include "support.hpp"

using namespace collabres;
using namespace collabres::nn;

TEST(Dense, HandArithmetic) {
    auto w = DenseMatrix::from_rows({{1, 2}, {3, 4}});
    auto b = DenseMatrix::from_rows({{0.5f, -0.5f}});
    EXPECT_EQ(dense_forward(DenseMatrix::from_rows({{1, 1}}), w, b), DenseMatrix::from_rows({{3.5f, 6.5f}}));
}

TEST(Dense, IdentityAndZeroRow) {
    SeededRng rng(1);
    auto x = oracle::random_dense<float>(rng, 3, 4);
    EXPECT_EQ(dense_forward(x, DenseMatrix::identity(4), DenseMatrix(1, 4)), x);
    auto w = oracle::random_dense<float>(rng, 2, 4);
    auto b = DenseMatrix::from_rows({{0.25f, -3.0f}});
    EXPECT_EQ(dense_forward(DenseMatrix(1, 4), w, b), b);
    EXPECT_THROW(dense_forward(DenseMatrix(1, 3), w, b), ShapeError);
}

TEST(Relu, Examples) {
    EXPECT_EQ(relu(DenseMatrix::from_rows({{-1, 0, 2}})), DenseMatrix::from_rows({{0, 0, 2}}));
    auto pos = DenseMatrix::from_rows({{0, 1, 5}});
    EXPECT_EQ(relu(pos), pos);
    SeededRng rng(2);
    auto x = oracle::random_dense<float>(rng, 5, 5);
    EXPECT_EQ(relu(relu(x)), relu(x));
}

TEST(Dropout, RateZeroAndInferAreIdentity) {
    SeededRng rng(3);
    auto x = oracle::random_dense<float>(rng, 4, 6);
    for (auto mode : {Mode::Train, Mode::Infer}) {
        auto r = dropout_forward(x, 0.0, mode, rng);
        EXPECT_EQ(r.y, x);
        EXPECT_TRUE(r.mask.empty());
    }
    auto r = dropout_forward(x, 0.35, Mode::Infer, rng);
    EXPECT_EQ(r.y, x);
    EXPECT_TRUE(r.mask.empty());
}

TEST(Dropout, InferConsumesNoRandomness) {
    SeededRng a(4), b(4);
    dropout_forward(DenseMatrix(3, 3, 1.0f), 0.5, Mode::Infer, a);
    EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Dropout, ExpectationPreserved) {
    SeededRng rng(5);
    auto r = dropout_forward(DenseMatrix(1, 100000, 1.0f), 0.5, Mode::Train, rng);
    double mean = 0;
    for (auto v : r.y.values()) mean += v;
    mean /= 100000;
    EXPECT_GE(mean, 0.98);
    EXPECT_LE(mean, 1.02);
    for (auto v : r.mask.values()) EXPECT_TRUE(v == 0.0f || v == 2.0f);
}

TEST(Dropout, PerUnitExpectationOverManyDraws) {
    SeededRng rng(6);
    const DenseMatrix x = DenseMatrix::from_rows({{0.5f, 1.0f, 2.0f, 4.0f}});
    std::vector<double> sum(4);
    for (int t = 0; t < 10000; ++t) {
        auto r = dropout_forward(x, 0.35, Mode::Train, rng);
        for (int j = 0; j < 4; ++j) sum[j] += r.y(0, j);
    }
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(sum[j] / 10000, x(0, j), 0.02 * x(0, j));
}

TEST(Dropout, RateOutOfRange) {
    SeededRng rng(7);
    EXPECT_THROW(dropout_forward(DenseMatrix(1, 1), 1.0, Mode::Train, rng), std::invalid_argument);
    EXPECT_THROW(dropout_forward(DenseMatrix(1, 1), -0.1, Mode::Train, rng), std::invalid_argument);
}

namespace {
ResidualBlockParams<float> identity_block(float main_scale) {
    ResidualBlockParams<float> p;
    p.w1 = DenseMatrix::identity(2);
    p.b1 = DenseMatrix(1, 2);
    p.w2 = DenseMatrix::identity(2);
    for (auto& v : p.w2.values()) v *= main_scale;
    for (auto& v : p.w1.values()) v *= main_scale;
    p.b2 = DenseMatrix(1, 2);
    p.w_skip = DenseMatrix::identity(2);
    return p;
}
}  // namespace

TEST(ResidualBlock, PureSkip) {
    SeededRng rng(8);
    auto y = residual_block_forward(DenseMatrix::from_rows({{1, 0}}), identity_block(0.0f), 0.0, Mode::Infer, rng);
    EXPECT_EQ(y, DenseMatrix::from_rows({{1, 0}}));
}

TEST(ResidualBlock, IdentityMainPlusSkip) {
    SeededRng rng(9);
    auto y = residual_block_forward(DenseMatrix::from_rows({{1, 0}}), identity_block(1.0f), 0.0, Mode::Infer, rng);
    EXPECT_EQ(y, DenseMatrix::from_rows({{2, 0}}));
}

TEST(ResidualBlock, ZeroSkipIsPlainStack) {
    SeededRng rng(10);
    ResidualBlockParams<float> p;
    p.w1 = oracle::random_dense<float>(rng, 5, 3);
    p.b1 = oracle::random_dense<float>(rng, 1, 5);
    p.w2 = oracle::random_dense<float>(rng, 4, 5);
    p.b2 = oracle::random_dense<float>(rng, 1, 4);
    p.w_skip = DenseMatrix(4, 3);
    auto x = oracle::random_dense<float>(rng, 6, 3);
    auto expected = relu(dense_forward(relu(dense_forward(x, p.w1, p.b1)), p.w2, p.b2));
    EXPECT_EQ(residual_block_forward(x, p, 0.0, Mode::Infer, rng), expected);
    p.w_skip = DenseMatrix(4, 2);
    EXPECT_THROW(residual_block_forward(x, p, 0.0, Mode::Infer, rng), ShapeError);
}

TEST(Concat, Examples) {
    EXPECT_EQ(concat_forward<float>({DenseMatrix::from_rows({{1, 2}}), DenseMatrix::from_rows({{3}})}),
              DenseMatrix::from_rows({{1, 2, 3}}));
    auto one = DenseMatrix::from_rows({{4, 5}});
    EXPECT_EQ(concat_forward<float>({one}), one);
    EXPECT_THROW(concat_forward<float>({DenseMatrix(1, 2), DenseMatrix(2, 2)}), ShapeError);
}

TEST(SigmoidBce, ClosedForms) {
    auto r = sigmoid_bce(DenseMatrix::from_rows({{0.0f}}), DenseMatrix::from_rows({{1.0f}}));
    EXPECT_NEAR(r.loss, std::log(2.0), 1e-7);
    EXPECT_FLOAT_EQ(r.dlogits(0, 0), -0.5f);
    auto z = sigmoid_bce(DenseMatrix::from_rows({{0.0f}}), DenseMatrix::from_rows({{0.0f}}));
    EXPECT_NEAR(z.loss, std::log(2.0), 1e-7);
    auto big = sigmoid_bce(DenseMatrix::from_rows({{50.0f}}), DenseMatrix::from_rows({{1.0f}}));
    EXPECT_LT(big.loss, 1e-6);
    auto wrong = sigmoid_bce(DenseMatrix::from_rows({{50.0f}}), DenseMatrix::from_rows({{0.0f}}));
    EXPECT_NEAR(wrong.loss, -std::log(1e-7), 1e-3);  // clamped
}

TEST(SigmoidBce, MeanOverCells) {
    auto r = sigmoid_bce(DenseMatrix(2, 2), DenseMatrix::from_rows({{1, 0}, {0, 1}}));
    EXPECT_FLOAT_EQ(r.dlogits(0, 0), -0.125f);
    EXPECT_FLOAT_EQ(r.dlogits(0, 1), 0.125f);
}

TEST(Baselines, TableTopologies) {
    auto m1 = build_baseline(BaselineId::M1, 30, 5);
    ASSERT_EQ(m1.nodes.size(), 4u);
    EXPECT_EQ(m1.nodes[1].layer.kind, LayerKind::Dense);
    EXPECT_EQ(m1.nodes[1].layer.out_dim, 600u);
    EXPECT_EQ(m1.nodes[2].layer.kind, LayerKind::ReLU);
    EXPECT_EQ(m1.nodes[3].layer.kind, LayerKind::SigmoidHead);

    auto m7 = build_baseline(BaselineId::M7, 30, 5);
    std::vector<std::size_t> widths;
    std::size_t dropouts = 0;
    for (const auto& n : m7.nodes) {
        if (n.layer.kind == LayerKind::Dense) widths.push_back(n.layer.out_dim);
        if (n.layer.kind == LayerKind::Dropout) {
            ++dropouts;
            EXPECT_DOUBLE_EQ(n.layer.dropout_rate, 0.35);
        }
    }
    EXPECT_EQ(widths, (std::vector<std::size_t>{600, 400, 250, 200, 150}));
    EXPECT_EQ(dropouts, 1u);

    auto m8 = build_baseline(BaselineId::M8, 30, 5);
    ASSERT_EQ(m8.nodes.size(), 3u);
    EXPECT_EQ(m8.nodes[1].layer.kind, LayerKind::ResidualBlock);
    EXPECT_EQ(m8.nodes[1].layer.hidden_dim, 600u);
    EXPECT_EQ(m8.nodes[1].layer.out_dim, 400u);
    EXPECT_DOUBLE_EQ(m8.nodes[1].layer.dropout_rate, 0.35);

    for (auto id : {BaselineId::M2, BaselineId::M4, BaselineId::M6}) {
        auto s = build_baseline(id, 30, 5);
        EXPECT_EQ(s.nodes[s.nodes.size() - 2].layer.kind, LayerKind::Dropout) << to_string(id);
    }
    for (auto id : {BaselineId::M1, BaselineId::M3, BaselineId::M5})
        for (const auto& n : build_baseline(id, 30, 5).nodes) EXPECT_NE(n.layer.kind, LayerKind::Dropout);
}

TEST(Baselines, ParseIds) {
    EXPECT_EQ(parse_baseline("m3"), BaselineId::M3);
    EXPECT_THROW(parse_baseline("M9"), std::invalid_argument);
    EXPECT_THROW(parse_baseline("collabres"), std::invalid_argument);
}

TEST(Baselines, ScaledWidths) {
    auto m7 = build_baseline(BaselineId::M7, 30, 5, 50);
    std::vector<std::size_t> widths;
    for (const auto& n : m7.nodes)
        if (n.layer.kind == LayerKind::Dense) widths.push_back(n.layer.out_dim);
    EXPECT_EQ(widths, (std::vector<std::size_t>{12, 8, 5, 4, 3}));
}

TEST(CollabRes, DefaultTopology) {
    std::vector<std::string> warnings;
    auto s = build_collabres(300, 50, {}, &warnings);
    EXPECT_TRUE(warnings.empty());
    std::size_t blocks = 0;
    std::set<double> rates;
    for (const auto& n : s.nodes) {
        if (n.layer.kind == LayerKind::ResidualBlock && n.branch >= 0) {
            ++blocks;
            EXPECT_EQ(n.layer.in_dim, 300u);
            EXPECT_EQ(n.layer.hidden_dim, 600u);
            EXPECT_EQ(n.layer.out_dim, 400u);
            rates.insert(n.layer.dropout_rate);
        }
    }
    EXPECT_EQ(blocks, 4u);
    EXPECT_EQ(rates, (std::set<double>{0.1, 0.2, 0.3, 0.4}));
    const auto& concat = s.nodes[5];
    ASSERT_EQ(concat.layer.kind, LayerKind::Concat);
    EXPECT_EQ(s.width(5), 1600u);
    const auto& fusion = s.nodes[6];
    EXPECT_EQ(fusion.layer.kind, LayerKind::ResidualBlock);
    EXPECT_EQ(fusion.layer.in_dim, 1600u);
    EXPECT_EQ(fusion.layer.out_dim, 600u);
    EXPECT_EQ(s.skip_source(6), 0u);
    EXPECT_EQ(s.nodes.back().layer.kind, LayerKind::SigmoidHead);

    bool found_skip = false;
    for (const auto& p : s.parameter_shapes())
        if (p.name == "l2.skip") {
            found_skip = true;
            EXPECT_EQ(p.rows, 600u);
            EXPECT_EQ(p.cols, 300u);
        }
    EXPECT_TRUE(found_skip);
}

TEST(CollabRes, DuplicateRatesWarn) {
    std::vector<std::string> warnings;
    CollabResConfig cfg;
    cfg.dropout_rates = {0.2, 0.2, 0.3, 0.4};
    build_collabres(10, 3, cfg, &warnings);
    EXPECT_EQ(warnings.size(), 1u);
}

TEST(CollabRes, InvalidWidthsThrow) {
    CollabResConfig cfg;
    cfg.branch_hidden = {0};
    EXPECT_THROW(build_collabres(10, 3, cfg), std::invalid_argument);
    cfg = {};
    cfg.dropout_rates = {0.1, 0.2};
    EXPECT_THROW(build_collabres(10, 3, cfg), std::invalid_argument);
}

TEST(CollabRes, SingleBranchIsM8WithoutDropoutPlusFusion) {
    CollabResConfig cfg;
    cfg.branches = 1;
    cfg.dropout_rates = {0.0};
    auto s = build_collabres(30, 5, cfg);
    auto m8 = build_baseline(BaselineId::M8, 30, 5);
    auto block = m8.nodes[1].layer;
    block.dropout_rate = 0.0;
    EXPECT_EQ(s.nodes[1].layer, block);
    EXPECT_EQ(s.nodes[2].layer.kind, LayerKind::Concat);
    EXPECT_EQ(s.nodes[3].layer.kind, LayerKind::ResidualBlock);
    EXPECT_EQ(s.nodes[4].layer.kind, LayerKind::SigmoidHead);
}

TEST(CollabRes, NamesAreAPureFunctionOfSpec) {
    auto a = build_collabres(20, 4, {}).parameter_shapes();
    auto b = build_collabres(20, 4, {}).parameter_shapes();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end(), [](auto& x, auto& y) { return x.name < y.name; }));
}

TEST(Spec, ParameterCountMatchesTensors) {
    SeededRng rng(11);
    for (auto id : {BaselineId::M1, BaselineId::M4, BaselineId::M7, BaselineId::M8}) {
        auto s = build_baseline(id, 40, 7, 10);
        EXPECT_EQ(init_params(s, rng).element_count(), s.parameter_count());
    }
    auto c = build_collabres(40, 7, {});
    EXPECT_EQ(init_params(c, rng).element_count(), c.parameter_count());
    // 4 * (40*600 + 600 + 600*400 + 400 + 40*400) + (1600*600 + 600 + 40*600) + (600*7 + 7)
    EXPECT_EQ(c.parameter_count(), 4u * (24000 + 600 + 240000 + 400 + 16000) + (960000 + 600 + 24000) + 4207);
}

TEST(Spec, ValidateRejectsBrokenGraphs) {
    auto s = build_baseline(BaselineId::M3, 10, 2);
    auto bad = s;
    bad.nodes[3].layer.in_dim = 7;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = s;
    bad.nodes.pop_back();
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = s;
    bad.nodes[2].inputs = {4};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Init, HeScaleAndZeroBias) {
    ModelSpec s = build_baseline(BaselineId::M1, 10000, 2);
    s.nodes[1].layer.out_dim = 100;
    s.nodes.back().layer.in_dim = 100;
    SeededRng a(12), b(12);
    auto p = init_params(s, a);
    EXPECT_EQ(p, init_params(s, b));
    for (const auto& [name, m] : p)
        if (name.find("bias") != std::string::npos)
            for (auto v : m.values()) EXPECT_EQ(v, 0.0f);
    const auto& w = p.at("l0.main");
    double sq = 0;
    for (auto v : w.values()) sq += double(v) * v;
    const double sd = std::sqrt(sq / w.size());
    EXPECT_NEAR(sd, std::sqrt(2.0 / 10000), 0.05 * std::sqrt(2.0 / 10000));
}

TEST(Forward, ZeroWeightsGiveSigmoidOfBias) {
    auto s = build_collabres(12, 3, {}, nullptr);
    auto p = Parameters::zeros_like(s);
    p.at("l3.bias") = DenseMatrix::from_rows({{0.0f, 2.0f, -1.0f}});
    SeededRng rng(13);
    auto r = model_forward(s, p, oracle::random_sparse(rng, 4, 12, 0.3), Mode::Infer, rng);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_FLOAT_EQ(r.scores(i, 0), 0.5f);
        EXPECT_FLOAT_EQ(r.scores(i, 1), static_cast<float>(1.0 / (1.0 + std::exp(-2.0))));
        EXPECT_FLOAT_EQ(r.scores(i, 2), static_cast<float>(1.0 / (1.0 + std::exp(1.0))));
    }
}

TEST(Forward, InferIsPureAndRepeatable) {
    auto s = build_baseline(BaselineId::M4, 15, 4, 20);
    SeededRng rng(14);
    auto p = init_params(s, rng);
    auto x = oracle::random_sparse(rng, 6, 15, 0.3);
    SeededRng r1(1), r2(99);
    auto a = model_forward(s, p, x, Mode::Infer, r1);
    auto b = model_forward(s, p, x, Mode::Infer, r2);
    EXPECT_EQ(a.scores, b.scores);
    SeededRng untouched(1);
    EXPECT_EQ(r1.next_u64(), untouched.next_u64());
    for (const auto& c : a.trace.nodes) EXPECT_TRUE(c.mask.empty());
}

TEST(Forward, OneLayerByHand) {
    ModelSpec s;
    s.name = "toy";
    s.input_dim = 3;
    s.output_dim = 2;
    s.nodes.push_back(Node{LayerSpec{LayerKind::Input}, {}, std::nullopt, -1, 0});
    s.nodes.push_back(Node{LayerSpec{LayerKind::SigmoidHead, 3, 0, 2}, {0}, std::nullopt, -1, 0});
    Parameters p;
    p.set("l0.main", DenseMatrix::from_rows({{1, -1, 0.5f}, {0, 2, -2}}));
    p.set("l0.bias", DenseMatrix::from_rows({{0.1f, -0.2f}}));
    SparseBinaryMatrix x(3, {{0, 2}, {1}});
    SeededRng rng(15);
    auto r = model_forward(s, p, x, Mode::Infer, rng);
    auto logits = dense_forward(x.densify<float>(), p.at("l0.main"), p.at("l0.bias"));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            EXPECT_FLOAT_EQ(r.scores(i, j), static_cast<float>(1.0 / (1.0 + std::exp(-double(logits(i, j))))));
}

TEST(Forward, RejectsMismatchedParams) {
    auto s = build_baseline(BaselineId::M1, 5, 2, 100);
    SeededRng rng(16);
    auto p = init_params(s, rng);
    p.set("l0.main", DenseMatrix(3, 5));
    EXPECT_THROW(model_forward(s, p, SparseBinaryMatrix(5, {{1}}), Mode::Infer, rng), std::invalid_argument);
    EXPECT_THROW(model_forward(s, init_params(s, rng), SparseBinaryMatrix(4, {{1}}), Mode::Infer, rng), ShapeError);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    auto s = build_collabres(10, 3, {}, nullptr);
    SeededRng rng(17);
    auto p = init_params(s, rng);
    auto f = model_forward(s, p, oracle::random_sparse(rng, 3, 10, 0.4), Mode::Train, rng);
    auto g = model_backward(s, p, f.trace, DenseMatrix(3, 3));
    for (const auto& [name, m] : g)
        for (auto v : m.values()) ASSERT_EQ(v, 0.0f) << name;
}

TEST(Backward, SingleDenseByHand) {
    // logits = x W^T + b with x = [1,1] (sparse), W 2x2; dL/dW = dlogits^T x.
    ModelSpec s;
    s.name = "toy";
    s.input_dim = 2;
    s.output_dim = 2;
    s.nodes.push_back(Node{LayerSpec{LayerKind::Input}, {}, std::nullopt, -1, 0});
    s.nodes.push_back(Node{LayerSpec{LayerKind::SigmoidHead, 2, 0, 2}, {0}, std::nullopt, -1, 0});
    Parameters p;
    p.set("l0.main", DenseMatrix::from_rows({{1, 2}, {3, 4}}));
    p.set("l0.bias", DenseMatrix(1, 2));
    SeededRng rng(18);
    auto f = model_forward(s, p, SparseBinaryMatrix(2, {{0, 1}}), Mode::Train, rng);
    auto g = model_backward(s, p, f.trace, DenseMatrix::from_rows({{0.5f, -1.0f}}));
    EXPECT_EQ(g.at("l0.main"), DenseMatrix::from_rows({{0.5f, 0.5f}, {-1.0f, -1.0f}}));
    EXPECT_EQ(g.at("l0.bias"), DenseMatrix::from_rows({{0.5f, -1.0f}}));
}

TEST(Degeneracy, ZeroSkipMatchesSkipFreeBitwise) {
    SeededRng rng(19);
    for (int trial = 0; trial < 10; ++trial) {
        CollabResConfig cfg;
        cfg.branches = 2 + rng.uniform_index(2);
        cfg.branch_hidden = {3 + rng.uniform_index(6)};
        cfg.branch_out = {2 + rng.uniform_index(6)};
        cfg.dropout_rates = {0.0};
        cfg.fusion_width = 3 + rng.uniform_index(5);
        std::vector<std::string> w;
        const std::size_t in = 8 + rng.uniform_index(10), out = 2 + rng.uniform_index(6);
        auto with = build_collabres(in, out, cfg, &w);
        auto without = without_skips(with);
        auto p = init_params(with, rng);
        Parameters q;
        for (auto& [name, m] : p.tensors()) {
            if (name.ends_with(".skip"))
                m = DenseMatrix(m.rows(), m.cols());
            else
                q.set(name, m);
        }
        auto x = oracle::random_sparse(rng, 7, in, 0.3);
        SeededRng r1(trial), r2(trial);
        EXPECT_EQ(model_forward(with, p, x, Mode::Infer, r1).scores, model_forward(without, q, x, Mode::Infer, r2).scores);
    }
}
