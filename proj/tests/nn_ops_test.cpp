#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cashewmap/nn_ops.hpp"
#include "cashewmap/params.hpp"
#include "gradcheck_cases.hpp"
#include "testutil.hpp"

using namespace cashewmap;

namespace {

// Quadruple-loop same-padding convolution in double precision.
std::vector<float> conv_oracle(const std::vector<float>& in, int ic, int h, int w,
                               const std::vector<float>& wt, int oc, int k,
                               const std::vector<float>* bias) {
    const int pad = k / 2;
    std::vector<float> out(static_cast<std::size_t>(oc) * h * w, 0.0f);
    for (int o = 0; o < oc; ++o)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
                for (int c = 0; c < ic; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int sy = y + ky - pad, sx = x + kx - pad;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            acc += static_cast<double>(
                                       wt[((static_cast<std::size_t>(o) * ic + c) * k + ky) * k + kx]) *
                                   in[(static_cast<std::size_t>(c) * h + sy) * w + sx];
                        }
                out[(static_cast<std::size_t>(o) * h + y) * w + x] = static_cast<float>(acc);
            }
    return out;
}

std::vector<float> tconv_oracle(const std::vector<float>& in, int ic, int h, int w,
                                const std::vector<float>& wt, int oc,
                                const std::vector<float>* bias) {
    const int oh = 2 * h, ow = 2 * w;
    std::vector<float> out(static_cast<std::size_t>(oc) * oh * ow, 0.0f);
    if (bias)
        for (int o = 0; o < oc; ++o)
            std::fill(out.begin() + static_cast<std::size_t>(o) * oh * ow,
                      out.begin() + static_cast<std::size_t>(o + 1) * oh * ow, (*bias)[o]);
    for (int c = 0; c < ic; ++c)
        for (int o = 0; o < oc; ++o)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int ky = 0; ky < 2; ++ky)
                        for (int kx = 0; kx < 2; ++kx)
                            out[(static_cast<std::size_t>(o) * oh + 2 * y + ky) * ow + 2 * x + kx] +=
                                wt[((static_cast<std::size_t>(c) * oc + o) * 2 + ky) * 2 + kx] *
                                in[(static_cast<std::size_t>(c) * h + y) * w + x];
    return out;
}

double ce_oracle(const std::vector<float>& logits, int k, std::size_t npx,
                 const std::vector<std::uint8_t>& labels) {
    double total = 0.0;
    std::int64_t valid = 0;
    for (std::size_t i = 0; i < npx; ++i) {
        if (labels[i] == 255) continue;
        float mx = logits[i];
        for (int c = 1; c < k; ++c) mx = std::max(mx, logits[static_cast<std::size_t>(c) * npx + i]);
        double sum = 0.0;
        for (int c = 0; c < k; ++c)
            sum += std::exp(static_cast<double>(logits[static_cast<std::size_t>(c) * npx + i]) - mx);
        total += std::log(sum) + mx - logits[static_cast<std::size_t>(labels[i]) * npx + i];
        ++valid;
    }
    return total / static_cast<double>(valid);
}

}  // namespace

TEST(GradCheck, AllKernelsMatchFiniteDifferences) {
    for (const auto& gc : gradcheck::cases()) {
        for (std::uint64_t seed : {11ull, 42ull, 314ull}) {
            testutil::FdReport rep = gc.run(seed);
            ASSERT_GT(rep.checked, 0u) << gc.name;
            EXPECT_LE(rep.max_rel, gradcheck::kTol)
                << gc.name << " seed " << seed << " worst " << rep.worst;
        }
    }
}

TEST(Conv2d, MatchesNaiveOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const int ic = 1 + static_cast<int>(rng.below(3));
        const int oc = 1 + static_cast<int>(rng.below(3));
        const int h = 3 + static_cast<int>(rng.below(6));
        const int w = 3 + static_cast<int>(rng.below(6));
        const int k = rng.below(2) == 0 ? 1 : 3;
        std::vector<float> in = testutil::rand_vec(rng, static_cast<std::size_t>(ic) * h * w, -1, 1);
        std::vector<float> wt =
            testutil::rand_vec(rng, static_cast<std::size_t>(oc) * ic * k * k, -1, 1);
        std::vector<float> bias = testutil::rand_vec(rng, static_cast<std::size_t>(oc), -1, 1);

        Tensor out = conv2d(Tensor::from_values({ic, h, w}, in),
                            Tensor::from_values({oc, ic, k, k}, wt), Tensor::from_values({oc}, bias));
        std::vector<float> want = conv_oracle(in, ic, h, w, wt, oc, k, &bias);
        ASSERT_EQ(out.size(), want.size());
        for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(out.data()[i], want[i], 1e-4);
    }
}

TEST(Conv2d, CenterOneKernelIsIdentity) {
    Rng rng(9);
    std::vector<float> in = testutil::rand_vec(rng, 2 * 5 * 7, -2, 2);
    std::vector<float> wt(2 * 2 * 3 * 3, 0.0f);
    // each output channel copies its own input channel through the center tap
    wt[((0 * 2 + 0) * 3 + 1) * 3 + 1] = 1.0f;
    wt[((1 * 2 + 1) * 3 + 1) * 3 + 1] = 1.0f;
    Tensor out = conv2d(Tensor::from_values({2, 5, 7}, in), Tensor::from_values({2, 2, 3, 3}, wt),
                        Tensor());
    for (std::size_t i = 0; i < in.size(); ++i) ASSERT_EQ(out.data()[i], in[i]);
}

TEST(Conv2d, ZeroWeightsGiveBiasPlanes) {
    Rng rng(10);
    std::vector<float> in = testutil::rand_vec(rng, 3 * 4 * 4, -1, 1);
    Tensor out = conv2d(Tensor::from_values({3, 4, 4}, in),
                        Tensor::zeros({2, 3, 3, 3}), Tensor::from_values({2}, {1.5f, -0.25f}));
    for (int i = 0; i < 16; ++i) {
        ASSERT_EQ(out.data()[i], 1.5f);
        ASSERT_EQ(out.data()[16 + i], -0.25f);
    }
}

TEST(Conv2d, RejectsBadShapes) {
    Tensor x = Tensor::zeros({2, 4, 4});
    EXPECT_THROW(conv2d(x, Tensor::zeros({3, 2, 2, 2}), Tensor()), Error);  // even kernel
    EXPECT_THROW(conv2d(x, Tensor::zeros({3, 1, 3, 3}), Tensor()), Error);  // channel mismatch
    EXPECT_THROW(conv2d(x, Tensor::zeros({3, 2, 3, 3}), Tensor::zeros({2})), Error);
}

TEST(Maxpool2, BlockMaximaAndConstants) {
    Tensor c = maxpool2(Tensor::from_values({1, 2, 2}, {3.0f, 3.0f, 3.0f, 3.0f}));
    EXPECT_EQ(c.data()[0], 3.0f);

    // one channel, 4x4, explicit block maxima
    std::vector<float> vals = {1, 2, 5, 6,
                               3, 4, 7, 8,
                               9, 1, 0, -1,
                               2, 6, -2, -3};
    Tensor out = maxpool2(Tensor::from_values({1, 4, 4}, vals));
    ASSERT_EQ(out.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(out.data()[0], 4.0f);
    EXPECT_EQ(out.data()[1], 8.0f);
    EXPECT_EQ(out.data()[2], 9.0f);
    EXPECT_EQ(out.data()[3], 0.0f);
    EXPECT_THROW(maxpool2(Tensor::zeros({1, 3, 4})), InputError);
}

TEST(Maxpool2, GradientRoutesToFirstArgmaxOnTies) {
    ParameterSet ps(1);
    Param& p = ps.add_const("x", {1, 2, 2}, 2.0f);  // all four tie
    TapeCtx ctx(ps);
    Tensor out = maxpool2(ctx.param("x"));
    weighted_sum(out, {1.0f}).backward();
    const auto& g = ctx.param("x").grad();
    EXPECT_FLOAT_EQ(g[0], 1.0f);  // top-left wins the tie
    EXPECT_FLOAT_EQ(g[1], 0.0f);
    EXPECT_FLOAT_EQ(g[2], 0.0f);
    EXPECT_FLOAT_EQ(g[3], 0.0f);
    (void)p;
}

TEST(TransposedConv2, MatchesOracleAndDoublesExtent) {
    Rng rng(6);
    const int ic = 2, oc = 3, h = 3, w = 4;
    std::vector<float> in = testutil::rand_vec(rng, static_cast<std::size_t>(ic) * h * w, -1, 1);
    std::vector<float> wt = testutil::rand_vec(rng, static_cast<std::size_t>(ic) * oc * 4, -1, 1);
    std::vector<float> bias = testutil::rand_vec(rng, oc, -1, 1);
    Tensor out = transposed_conv2(Tensor::from_values({ic, h, w}, in),
                                  Tensor::from_values({ic, oc, 2, 2}, wt),
                                  Tensor::from_values({oc}, bias));
    ASSERT_EQ(out.shape(), (Shape{oc, 2 * h, 2 * w}));
    std::vector<float> want = tconv_oracle(in, ic, h, w, wt, oc, &bias);
    for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(out.data()[i], want[i], 1e-5);
}

TEST(TransposedConv2, SinglePixelSpreadsKernel) {
    Tensor out = transposed_conv2(Tensor::from_values({1, 1, 1}, {2.0f}),
                                  Tensor::from_values({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}),
                                  Tensor());
    EXPECT_EQ(out.data()[0], 2.0f);
    EXPECT_EQ(out.data()[1], 4.0f);
    EXPECT_EQ(out.data()[2], 6.0f);
    EXPECT_EQ(out.data()[3], 8.0f);
}

TEST(Dropout, OffAndZeroProbabilityAreIdentity) {
    Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(dropout(x, 0.3, DropoutMode::Off, 1).node(), x.node());
    EXPECT_EQ(dropout(x, 0.0, DropoutMode::Train, 1).node(), x.node());
    EXPECT_THROW(dropout(x, 1.0, DropoutMode::Train, 1), ConfigError);
    EXPECT_THROW(dropout(x, -0.1, DropoutMode::Train, 1), ConfigError);
}

TEST(Dropout, MaskIsDeterministicPerSeed) {
    Tensor x = Tensor::from_values({4, 8}, std::vector<float>(32, 1.0f));
    Tensor a = dropout(x, 0.4, DropoutMode::Mc, 77);
    Tensor b = dropout(x, 0.4, DropoutMode::Mc, 77);
    Tensor c = dropout(x, 0.4, DropoutMode::Mc, 78);
    EXPECT_EQ(std::vector<float>(a.data(), a.data() + 32), std::vector<float>(b.data(), b.data() + 32));
    EXPECT_NE(std::vector<float>(a.data(), a.data() + 32), std::vector<float>(c.data(), c.data() + 32));
}

TEST(Dropout, InvertedScalingIsUnbiased) {
    // mean over many masks approaches the input because kept values scale by
    // 1/(1-p); drop fraction approaches p
    Tensor x = Tensor::from_values({10, 10}, std::vector<float>(100, 1.0f));
    double sum = 0.0;
    std::size_t zeros = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Tensor out = dropout(x, 0.3, DropoutMode::Mc, seed);
        for (std::size_t i = 0; i < out.size(); ++i) {
            sum += out.data()[i];
            zeros += out.data()[i] == 0.0f;
            ++total;
        }
    }
    EXPECT_NEAR(sum / static_cast<double>(total), 1.0, 0.02);
    EXPECT_NEAR(static_cast<double>(zeros) / static_cast<double>(total), 0.3, 0.02);
}

TEST(SoftmaxRows, RowsSumToOneAndShiftInvariant) {
    Rng rng(12);
    std::vector<float> vals = testutil::rand_vec(rng, 6 * 5, -4, 4);
    Tensor a = softmax_rows(Tensor::from_values({6, 5}, vals));
    for (int i = 0; i < 6; ++i) {
        double s = 0.0;
        for (int j = 0; j < 5; ++j) s += a.data()[i * 5 + j];
        EXPECT_NEAR(s, 1.0, 1e-5);
    }
    std::vector<float> shifted = vals;
    for (auto& v : shifted) v += 1000.0f;  // stability under large offsets
    Tensor b = softmax_rows(Tensor::from_values({6, 5}, shifted));
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_TRUE(std::isfinite(b.data()[i]));
        ASSERT_NEAR(a.data()[i], b.data()[i], 1e-4);  // float32 exp under a shifted max
    }
}

TEST(CrossEntropy, PerfectPredictionNearZero) {
    std::vector<float> logits(4, 0.0f);  // [4,1,1]
    logits[2] = 30.0f;
    Tensor loss = softmax_cross_entropy(Tensor::from_values({4, 1, 1}, logits), {2});
    EXPECT_LT(loss.item_f64(), 1e-9);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    Tensor loss = softmax_cross_entropy(Tensor::from_values({4, 2, 2}, std::vector<float>(16, 0.7f)),
                                        {0, 1, 2, 3});
    EXPECT_NEAR(loss.item_f64(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        const int k = 2 + static_cast<int>(rng.below(4));
        const std::size_t npx = 12;
        std::vector<float> logits =
            testutil::rand_vec(rng, static_cast<std::size_t>(k) * npx, -5, 5);
        std::vector<std::uint8_t> labels(npx);
        for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(static_cast<std::size_t>(k)));
        labels[rng.below(npx)] = 255;
        Tensor loss = softmax_cross_entropy(Tensor::from_values({k, 3, 4}, logits), labels);
        EXPECT_NEAR(loss.item_f64(), ce_oracle(logits, k, npx, labels), 1e-12);
    }
}

TEST(CrossEntropy, RejectsDegenerateLabels) {
    Tensor logits = Tensor::zeros({4, 2, 2});
    EXPECT_THROW(softmax_cross_entropy(logits, {255, 255, 255, 255}), InputError);
    EXPECT_THROW(softmax_cross_entropy(logits, {0, 1, 4, 0}), Error);  // label out of range
    EXPECT_THROW(softmax_cross_entropy(logits, {0, 1}), Error);        // size mismatch
}

TEST(Losses, MseAndWeightedSumOracles) {
    Tensor pred = Tensor::from_values({3}, {1.0f, 2.0f, 3.0f});
    Tensor mse = mse_loss(pred, {1.5f, 2.0f, 1.0f});
    EXPECT_NEAR(mse.item_f64(), (0.25 + 0.0 + 4.0) / 3.0, 1e-12);
    EXPECT_THROW(mse_loss(pred, {1.0f}), Error);

    Tensor ws = weighted_sum(pred, {2.0f, -1.0f, 0.5f});
    EXPECT_NEAR(ws.item_f64(), 2.0 - 2.0 + 1.5, 1e-12);
    EXPECT_THROW(weighted_sum(pred, {1.0f}), Error);
}
