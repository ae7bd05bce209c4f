#include <gtest/gtest.h>

#include <cmath>

#include "cashewmap/nn_ops.hpp"
#include "cashewmap/params.hpp"
#include "cashewmap/tensor.hpp"
#include "testutil.hpp"

using namespace cashewmap;

TEST(Tensor, ConstructionAndValidation) {
    Tensor z = Tensor::zeros({2, 3});
    EXPECT_EQ(z.size(), 6u);
    EXPECT_FALSE(z.requires_grad());
    EXPECT_THROW(Tensor::from_values({2, 3}, {1.0f, 2.0f}), Error);
    Tensor v = Tensor::from_values({2}, {1.0f, 2.0f});
    EXPECT_EQ(v.data()[1], 2.0f);
    EXPECT_THROW(v.item(), Error);
    EXPECT_EQ(Tensor::from_values({1}, {7.0f}).item(), 7.0f);
}

TEST(Tensor, BackwardRequiresScalarRoot) {
    Tensor v = Tensor::from_values({2}, {1.0f, 2.0f}, true);
    EXPECT_THROW(v.backward(), Error);
}

TEST(Tensor, BackwardOnConstantIsNoop) {
    Tensor a = Tensor::from_values({2}, {1.0f, 2.0f}, false);
    Tensor loss = weighted_sum(a, {1.0f, 1.0f});
    EXPECT_FALSE(loss.requires_grad());
    EXPECT_NO_THROW(loss.backward());
    EXPECT_TRUE(a.grad().empty());
}

TEST(Tensor, SharedNodeAccumulatesBothPaths) {
    // y = x * x, so dy/dx = 2x even though both parents are the same node
    ParameterSet ps(1);
    Param& p = ps.add_zeros("x", {3});
    (*p.values) = {1.5f, -2.0f, 0.5f};
    TapeCtx ctx(ps);
    Tensor x = ctx.param("x");
    Tensor loss = weighted_sum(mul(x, x), {1.0f, 1.0f, 1.0f});
    loss.backward();
    EXPECT_FLOAT_EQ(x.grad()[0], 3.0f);
    EXPECT_FLOAT_EQ(x.grad()[1], -4.0f);
    EXPECT_FLOAT_EQ(x.grad()[2], 1.0f);
}

TEST(Tensor, DiamondGraphSumsBranchGradients) {
    // s = a + b; y = s*c + s*d, so ds = c + d
    ParameterSet ps(1);
    (*ps.add_zeros("a", {1}).values) = {2.0f};
    (*ps.add_zeros("b", {1}).values) = {3.0f};
    (*ps.add_zeros("c", {1}).values) = {5.0f};
    (*ps.add_zeros("d", {1}).values) = {7.0f};
    TapeCtx ctx(ps);
    Tensor s = add(ctx.param("a"), ctx.param("b"));
    Tensor y = add(mul(s, ctx.param("c")), mul(s, ctx.param("d")));
    weighted_sum(y, {1.0f}).backward();
    EXPECT_FLOAT_EQ(ctx.param("a").grad()[0], 12.0f);  // c + d
    EXPECT_FLOAT_EQ(ctx.param("c").grad()[0], 5.0f);   // s
    EXPECT_FLOAT_EQ(ctx.param("d").grad()[0], 5.0f);
}

TEST(Tensor, LeafSharesParameterStorage) {
    ParameterSet ps(1);
    Param& p = ps.add_zeros("x", {2});
    TapeCtx ctx(ps);
    Tensor t = ctx.param("x");
    (*p.values)[0] = 42.0f;
    EXPECT_EQ(t.data()[0], 42.0f);
    EXPECT_EQ(t.data(), p.values->data());
}

TEST(Tensor, GradsAccumulateAcrossGraphsInOneContext) {
    ParameterSet ps(1);
    (*ps.add_zeros("x", {2}).values) = {1.0f, 1.0f};
    TapeCtx ctx(ps);
    weighted_sum(ctx.param("x"), {1.0f, 2.0f}).backward();
    weighted_sum(ctx.param("x"), {10.0f, 20.0f}).backward();
    EXPECT_FLOAT_EQ(ctx.param("x").grad()[0], 11.0f);
    EXPECT_FLOAT_EQ(ctx.param("x").grad()[1], 22.0f);
}

TEST(Tensor, ContextsIsolateGradients) {
    ParameterSet ps(1);
    (*ps.add_zeros("x", {1}).values) = {1.0f};
    TapeCtx a(ps);
    TapeCtx b(ps);
    weighted_sum(a.param("x"), {3.0f}).backward();
    EXPECT_FLOAT_EQ(a.param("x").grad()[0], 3.0f);
    EXPECT_TRUE(b.param("x").grad().empty());
    EXPECT_NE(a.param("x").node(), b.param("x").node());
    EXPECT_EQ(a.param("x").data(), b.param("x").data());  // storage still shared
}

TEST(Tensor, DeepChainBackwardDoesNotRecurse) {
    ParameterSet ps(1);
    (*ps.add_zeros("x", {1}).values) = {1.0f};
    TapeCtx ctx(ps);
    Tensor y = ctx.param("x");
    for (int i = 0; i < 20000; ++i) y = scale(y, 1.0f);
    weighted_sum(y, {1.0f}).backward();
    EXPECT_FLOAT_EQ(ctx.param("x").grad()[0], 1.0f);
}

TEST(Tensor, ScalarReductionsKeepFloat64) {
    Tensor x = Tensor::from_values({3}, {0.1f, 0.2f, 0.3f});
    Tensor s = weighted_sum(x, {1.0f, 1.0f, 1.0f});
    const double f64 = s.item_f64();
    EXPECT_NEAR(f64, 0.6, 1e-7);
    EXPECT_NE(f64, static_cast<double>(s.item()));  // more digits than the f32 copy
}

TEST(Tensor, MatmulMatchesHandComputation) {
    Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_values({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 2}));
    EXPECT_FLOAT_EQ(c.data()[0], 58.0f);
    EXPECT_FLOAT_EQ(c.data()[1], 64.0f);
    EXPECT_FLOAT_EQ(c.data()[2], 139.0f);
    EXPECT_FLOAT_EQ(c.data()[3], 154.0f);
    EXPECT_THROW(matmul(a, a), Error);
}

TEST(Adam, NoGradientLeavesParametersUnchanged) {
    ParameterSet ps(1);
    (*ps.add_zeros("x", {2}).values) = {1.0f, -2.0f};
    TapeCtx ctx(ps);
    ps.adam_step(ctx, AdamConfig{});
    EXPECT_FLOAT_EQ((*ps.at("x").values)[0], 1.0f);
    EXPECT_FLOAT_EQ((*ps.at("x").values)[1], -2.0f);
    EXPECT_EQ(ps.step(), 1);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
    ParameterSet ps(1);
    (*ps.add_zeros("x", {1}).values) = {0.25f};
    TapeCtx ctx(ps);
    weighted_sum(ctx.param("x"), {3.0f}).backward();
    AdamConfig cfg;
    cfg.lr = 0.0;
    ps.adam_step(ctx, cfg);
    EXPECT_FLOAT_EQ((*ps.at("x").values)[0], 0.25f);
}

TEST(Adam, MatchesScalarRecurrence) {
    // drive a single scalar through three steps with known gradients and
    // replay the moment recurrence by hand
    ParameterSet ps(1);
    (*ps.add_zeros("x", {1}).values) = {0.5f};
    AdamConfig cfg;
    cfg.lr = 0.1;
    const double grads[3] = {0.3, -0.5, 0.2};

    float xv = 0.5f, m = 0.0f, v = 0.0f;
    for (int step = 1; step <= 3; ++step) {
        const double g = grads[step - 1];
        {
            TapeCtx ctx(ps);
            weighted_sum(ctx.param("x"), {static_cast<float>(g)}).backward();
            ps.adam_step(ctx, cfg);
        }
        const double mi = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        const double vi = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        m = static_cast<float>(mi);
        v = static_cast<float>(vi);
        const double bc1 = 1.0 - std::pow(cfg.beta1, step);
        const double bc2 = 1.0 - std::pow(cfg.beta2, step);
        xv = static_cast<float>(static_cast<double>(xv) -
                                cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
        ASSERT_FLOAT_EQ((*ps.at("x").values)[0], xv) << "step " << step;
    }
}

TEST(Adam, GradScaleDividesBatchGradient) {
    ParameterSet a(1), b(1);
    (*a.add_zeros("x", {1}).values) = {1.0f};
    (*b.add_zeros("x", {1}).values) = {1.0f};
    {
        TapeCtx ctx(a);
        weighted_sum(ctx.param("x"), {4.0f}).backward();
        a.adam_step(ctx, AdamConfig{}, 0.5);
    }
    {
        TapeCtx ctx(b);
        weighted_sum(ctx.param("x"), {2.0f}).backward();
        b.adam_step(ctx, AdamConfig{}, 1.0);
    }
    EXPECT_FLOAT_EQ((*a.at("x").values)[0], (*b.at("x").values)[0]);
}

TEST(Adam, NonFiniteGradientRaisesNumericError) {
    ParameterSet ps(1);
    (*ps.add_zeros("x", {1}).values) = {1.0f};
    TapeCtx ctx(ps);
    Tensor t = ctx.param("x");
    t.node()->ensure_grad();
    t.node()->grad[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        ps.adam_step(ctx, AdamConfig{});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
    }
}

TEST(Params, InitIsDeterministicPerSeedAndName) {
    ParameterSet a(7), b(7), c(8);
    a.add_weight("w", {4, 4}, 4);
    b.add_weight("w", {4, 4}, 4);
    c.add_weight("w", {4, 4}, 4);
    EXPECT_EQ(*a.at("w").values, *b.at("w").values);
    EXPECT_NE(*a.at("w").values, *c.at("w").values);
    EXPECT_THROW(a.add_weight("w", {2}, 2), Error);  // duplicate name
    EXPECT_THROW(a.add_weight("w2", {2}, 0), Error);
}

TEST(Params, CheckpointRoundTripIsExact) {
    ParameterSet ps(11);
    ps.add_weight("layer.w", {3, 5}, 3);
    ps.add_const("layer.b", {5}, 0.25f);
    ps.meta()["model"] = {{"depth", 2}};
    {
        Rng rng(3);
        TapeCtx ctx(ps);
        weighted_sum(ctx.param("layer.w"), testutil::rand_signed(rng, 15)).backward();
        ps.adam_step(ctx, AdamConfig{});
    }
    const std::string path = ::testing::TempDir() + "ckpt_roundtrip.bin";
    ps.save(path);
    ParameterSet back = ParameterSet::load(path);
    EXPECT_EQ(back.seed(), ps.seed());
    EXPECT_EQ(back.step(), 1);
    EXPECT_EQ(back.meta()["model"]["depth"], 2);
    EXPECT_EQ(*back.at("layer.w").values, *ps.at("layer.w").values);
    EXPECT_EQ(back.at("layer.w").m, ps.at("layer.w").m);
    EXPECT_EQ(back.at("layer.w").v, ps.at("layer.w").v);
    EXPECT_EQ(back.content_hash(), ps.content_hash());
    EXPECT_THROW(ParameterSet::load(path + ".missing"), InputError);
}

TEST(Params, ContentHashTracksValues) {
    ParameterSet a(1), b(1);
    (*a.add_zeros("x", {2}).values) = {1.0f, 2.0f};
    (*b.add_zeros("x", {2}).values) = {1.0f, 2.0f};
    EXPECT_EQ(a.content_hash(), b.content_hash());
    (*b.at("x").values)[1] = 2.5f;
    EXPECT_NE(a.content_hash(), b.content_hash());
}
