#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>

#include "cashewmap/synth.hpp"

using namespace cashewmap;

namespace {

SynthConfig small_cfg() {
    SynthConfig cfg;
    cfg.height = 64;
    cfg.width = 64;
    cfg.timesteps = 3;
    return cfg;
}

}  // namespace

TEST(Synth, SameSeedBitIdentical) {
    SynthScene a = synth_scene(small_cfg(), 99);
    SynthScene b = synth_scene(small_cfg(), 99);
    EXPECT_EQ(a.stack.values, b.stack.values);
    EXPECT_EQ(a.labels.codes, b.labels.codes);
    EXPECT_EQ(a.density_truth.codes, b.density_truth.codes);
    EXPECT_EQ(a.crown_centers, b.crown_centers);
}

TEST(Synth, DifferentSeedsDiffer) {
    SynthScene a = synth_scene(small_cfg(), 1);
    SynthScene b = synth_scene(small_cfg(), 2);
    EXPECT_NE(a.stack.values, b.stack.values);
}

TEST(Synth, PureCroplandMixture) {
    SynthConfig cfg = small_cfg();
    cfg.w_mixed = cfg.w_cashew = cfg.w_builtup = 0.0;
    cfg.w_cropland = 1.0;
    SynthScene scene = synth_scene(cfg, 5);
    for (auto c : scene.labels.codes) EXPECT_EQ(c, kCropland);
    for (auto c : scene.density_truth.codes) EXPECT_EQ(c, kNoData);
    EXPECT_TRUE(scene.crown_centers.empty());
}

TEST(Synth, ClassPriorsMatchMixture) {
    SynthConfig cfg;  // defaults, 256x256
    SynthScene scene = synth_scene(cfg, 11);
    const double n = 256.0 * 256.0;
    double share[4] = {0, 0, 0, 0};
    for (auto c : scene.labels.codes) share[c] += 1.0 / n;
    EXPECT_NEAR(share[kMixedTrees], cfg.w_mixed, 0.03);
    EXPECT_NEAR(share[kCashew], cfg.w_cashew, 0.03);
    EXPECT_NEAR(share[kBuiltUp], cfg.w_builtup, 0.03);
    EXPECT_NEAR(share[kCropland], cfg.w_cropland, 0.03);
}

TEST(Synth, DoublingCrownSpacingHalvesCount) {
    SynthConfig cfg = small_cfg();
    cfg.height = 128;
    cfg.width = 128;
    cfg.density_high_fraction = 1.0;  // one regime, one spacing
    cfg.crown_spacing_high = 16.0;
    const std::size_t dense = synth_scene(cfg, 7).crown_centers.size();
    cfg.crown_spacing_high = 32.0;
    const std::size_t sparse = synth_scene(cfg, 7).crown_centers.size();
    ASSERT_GT(sparse, 0u);
    const double ratio = static_cast<double>(dense) / static_cast<double>(sparse);
    EXPECT_GE(ratio, 1.6);
    EXPECT_LE(ratio, 2.4);
}

TEST(Synth, DensityTruthAlignsWithLabels) {
    SynthScene scene = synth_scene(small_cfg(), 13);
    std::size_t cashew = 0, high = 0;
    for (std::size_t i = 0; i < scene.labels.codes.size(); ++i) {
        const auto d = scene.density_truth.codes[i];
        if (scene.labels.codes[i] == kCashew) {
            ASSERT_TRUE(d == 0 || d == 1);
            ++cashew;
            high += d;
        } else {
            ASSERT_EQ(d, kNoData);
        }
    }
    ASSERT_GT(cashew, 0u);
    EXPECT_EQ(high, static_cast<std::size_t>(std::llround(0.5 * static_cast<double>(cashew))));
}

TEST(Synth, CrownCentersLieInsideCashew) {
    SynthScene scene = synth_scene(small_cfg(), 17);
    ASSERT_FALSE(scene.crown_centers.empty());
    for (auto [y, x] : scene.crown_centers) EXPECT_EQ(scene.labels.at(y, x), kCashew);
}

TEST(Synth, ValuesStayInUnitInterval) {
    SynthScene scene = synth_scene(small_cfg(), 19);
    EXPECT_EQ(scene.stack.timesteps, 3);
    EXPECT_EQ(scene.stack.bands, 4);
    for (float v : scene.stack.values) {
        ASSERT_TRUE(std::isfinite(v));
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
}

TEST(Synth, ClassesAreSpectrallySeparated) {
    // per-class mean over (t, band) should differ between every class pair
    SynthConfig cfg = small_cfg();
    cfg.noise_sd = 0.0;
    SynthScene scene = synth_scene(cfg, 23);
    double mean[4][12] = {};
    double count[4] = {};
    for (int t = 0; t < 3; ++t)
        for (int b = 0; b < 4; ++b)
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x) {
                    const auto c = scene.labels.at(y, x);
                    mean[c][t * 4 + b] += scene.stack.at(t, b, y, x);
                    if (t == 0 && b == 0) count[c] += 1.0;
                }
    for (int c = 0; c < 4; ++c) {
        ASSERT_GT(count[c], 0.0);
        for (int k = 0; k < 12; ++k) mean[c][k] /= count[c];
    }
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) {
            double gap = 0.0;
            for (int k = 0; k < 12; ++k) gap = std::max(gap, std::abs(mean[a][k] - mean[b][k]));
            EXPECT_GT(gap, 0.02) << "classes " << a << " and " << b;
        }
}

TEST(Synth, RejectsBadConfig) {
    SynthConfig cfg = small_cfg();
    cfg.w_cashew = -0.1;
    EXPECT_THROW(synth_scene(cfg, 1), ConfigError);
    cfg = small_cfg();
    cfg.w_mixed = cfg.w_cashew = cfg.w_builtup = cfg.w_cropland = 0.0;
    EXPECT_THROW(synth_scene(cfg, 1), ConfigError);
    cfg = small_cfg();
    cfg.crown_spacing_low = 0.0;
    EXPECT_THROW(synth_scene(cfg, 1), ConfigError);
    cfg = small_cfg();
    cfg.bands = 3;
    EXPECT_THROW(synth_scene(cfg, 1), ConfigError);
    cfg = small_cfg();
    cfg.height = 4;
    EXPECT_THROW(synth_scene(cfg, 1), ConfigError);
}
