#include <gtest/gtest.h>

#include <deque>
#include <limits>
#include <vector>

#include "cashewmap/postprocess.hpp"
#include "cashewmap/rng.hpp"
#include "testutil.hpp"

using namespace cashewmap;

namespace {

// Independent oracle: breadth-first flood from every seed pixel (p >= hi)
// across the p >= lo region.
std::vector<std::uint8_t> grow_oracle(const std::vector<float>& p, int h, int w, double lo, double hi,
                                      int conn) {
    std::vector<std::uint8_t> out(p.size(), 0);
    std::deque<std::size_t> queue;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] >= static_cast<float>(hi)) {
            out[i] = 1;
            queue.push_back(i);
        }
    const int dy8[] = {-1, -1, -1, 0, 0, 1, 1, 1};
    const int dx8[] = {-1, 0, 1, -1, 1, -1, 0, 1};
    const int dy4[] = {-1, 0, 0, 1};
    const int dx4[] = {0, -1, 1, 0};
    const int* dy = conn == 8 ? dy8 : dy4;
    const int* dx = conn == 8 ? dx8 : dx4;
    while (!queue.empty()) {
        const std::size_t i = queue.front();
        queue.pop_front();
        const int y = static_cast<int>(i) / w;
        const int x = static_cast<int>(i) % w;
        for (int d = 0; d < conn; ++d) {
            const int ny = y + dy[d], nx = x + dx[d];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
            if (!out[ni] && p[ni] >= static_cast<float>(lo)) {
                out[ni] = 1;
                queue.push_back(ni);
            }
        }
    }
    return out;
}

ProbabilityField make_field(int h, int w, int classes) {
    ProbabilityField f;
    f.height = h;
    f.width = w;
    f.classes = classes;
    f.probs.assign(static_cast<std::size_t>(classes) * h * w, 0.0f);
    f.unc.assign(static_cast<std::size_t>(h) * w, 0.0f);
    return f;
}

ClassMap make_map(int h, int w, std::vector<std::uint8_t> codes) {
    ClassMap m;
    m.mask.height = h;
    m.mask.width = w;
    m.mask.codes = std::move(codes);
    return m;
}

}  // namespace

TEST(RegionGrow, UniformPlanes) {
    GrowThresholds th;
    std::vector<float> high(12 * 12, 0.9f);
    for (auto v : region_grow(high, 12, 12, th)) EXPECT_EQ(v, 1);
    std::vector<float> mid(12 * 12, 0.5f);  // above the join band, below any seed
    for (auto v : region_grow(mid, 12, 12, th)) EXPECT_EQ(v, 0);
}

TEST(RegionGrow, ThresholdsAreClosedAtSeedAndLowerBound) {
    GrowThresholds th;
    // 0.8 seeds its component; 0.4 joins it; 0.39 does not
    std::vector<float> p = {0.8f, 0.4f, 0.39f};
    std::vector<std::uint8_t> got = region_grow(p, 1, 3, th);
    EXPECT_EQ(got, (std::vector<std::uint8_t>{1, 1, 0}));
}

TEST(RegionGrow, ComponentWithoutSeedIsDropped) {
    GrowThresholds th;
    // two plateaus separated by a low pixel: only the seeded one survives
    std::vector<float> p = {0.9f, 0.5f, 0.0f, 0.5f, 0.6f};
    std::vector<std::uint8_t> got = region_grow(p, 1, 5, th);
    EXPECT_EQ(got, (std::vector<std::uint8_t>{1, 1, 0, 0, 0}));
}

TEST(RegionGrow, MatchesFloodFillOracle) {
    const float levels[] = {0.0f, 0.3f, 0.4f, 0.5f, 0.79f, 0.8f, 0.9f, 1.0f};
    for (int conn : {4, 8}) {
        GrowThresholds th;
        th.connectivity = conn;
        Rng rng(conn == 4 ? 101 : 202);
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<float> p(12 * 12);
            for (auto& v : p) v = levels[rng.below(8)];
            ASSERT_EQ(region_grow(p, 12, 12, th),
                      grow_oracle(p, 12, 12, th.neighbor_low, th.seed_threshold, conn))
                << "connectivity " << conn << " trial " << trial;
        }
    }
}

TEST(RegionGrow, IdempotentOnItsOwnOutput) {
    GrowThresholds th;
    Rng rng(7);
    std::vector<float> p(10 * 10);
    for (auto& v : p) v = static_cast<float>(rng.uniform());
    std::vector<std::uint8_t> once = region_grow(p, 10, 10, th);
    std::vector<float> indicator(once.begin(), once.end());
    EXPECT_EQ(region_grow(indicator, 10, 10, th), once);
}

TEST(RegionGrow, OutputBracketsThresholdSets) {
    GrowThresholds th;
    Rng rng(8);
    std::vector<float> p(10 * 10);
    for (auto& v : p) v = static_cast<float>(rng.uniform());
    std::vector<std::uint8_t> mask = region_grow(p, 10, 10, th);
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (mask[i]) EXPECT_GE(p[i], 0.4f);   // never below the join band
        if (p[i] >= 0.8f) EXPECT_EQ(mask[i], 1);  // seeds always kept
    }
}

TEST(RegionGrow, RejectsBadThresholdsAndSizes) {
    std::vector<float> p(4, 0.5f);
    GrowThresholds th;
    th.neighbor_low = 0.9;  // above seed threshold
    try {
        region_grow(p, 2, 2, th);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("neighbor_low < seed_threshold"), std::string::npos);
    }
    th = GrowThresholds{};
    th.connectivity = 6;
    EXPECT_THROW(region_grow(p, 2, 2, th), ConfigError);
    th = GrowThresholds{};
    th.seed_threshold = 1.2;
    EXPECT_THROW(region_grow(p, 2, 2, th), ConfigError);
    EXPECT_THROW(region_grow(p, 3, 2, GrowThresholds{}), InputError);
}

TEST(ClassMap, AssemblyPicksHighestProbabilityAmongGrownClasses) {
    // 1x4 scene: pixel 0 cashew only, pixel 1 contested between two grown
    // classes, pixel 3 has sub-seed probability but joins the cashew
    // component through the band
    ProbabilityField f = make_field(1, 4, 4);
    auto set = [&](int c, int x, float v) { f.probs[static_cast<std::size_t>(c) * 4 + x] = v; };
    set(kCashew, 0, 0.9f);
    set(kCashew, 1, 0.9f);
    set(kMixedTrees, 1, 0.95f);  // wins the contested pixel
    set(kMixedTrees, 0, 0.3f);   // below the band, mixed does not cover pixel 0
    set(kCashew, 2, 0.85f);
    set(kCashew, 3, 0.5f);
    ClassMap map = assemble_classmap(f, GrowThresholds{});
    EXPECT_EQ(map.mask.at(0, 0), kCashew);
    EXPECT_EQ(map.mask.at(0, 1), kMixedTrees);
    EXPECT_EQ(map.mask.at(0, 2), kCashew);
    EXPECT_EQ(map.mask.at(0, 3), kCashew);
    ASSERT_EQ(map.provenance.size(), 1u);
    EXPECT_EQ(map.provenance[0]["op"], "assemble_classmap");
}

TEST(ClassMap, UncoveredPixelsDefaultToCropland) {
    ProbabilityField f = make_field(2, 2, 4);
    ClassMap map = assemble_classmap(f, GrowThresholds{});
    for (auto c : map.mask.codes) EXPECT_EQ(c, kCropland);
}

TEST(Persistence, CumulativeOrOracle) {
    Rng rng(9);
    const int h = 6, w = 7;
    std::vector<ClassMap> years;
    for (int y = 0; y < 4; ++y) {
        std::vector<std::uint8_t> codes(static_cast<std::size_t>(h) * w);
        for (auto& c : codes) c = static_cast<std::uint8_t>(rng.below(4));
        years.push_back(make_map(h, w, std::move(codes)));
    }
    std::vector<ClassMap> out = temporal_persistence(years);

    std::vector<std::uint8_t> seen(static_cast<std::size_t>(h) * w, 0);
    std::size_t prev_count = 0;
    for (std::size_t y = 0; y < 4; ++y) {
        std::size_t count = 0;
        for (std::size_t i = 0; i < seen.size(); ++i) {
            if (years[y].mask.codes[i] == kCashew) seen[i] = 1;
            const std::uint8_t want = seen[i] ? kCashew : years[y].mask.codes[i];
            ASSERT_EQ(out[y].mask.codes[i], want) << "year " << y << " pixel " << i;
            count += out[y].mask.codes[i] == kCashew;
        }
        EXPECT_GE(count, prev_count);  // cashew extent never shrinks
        prev_count = count;
    }
    EXPECT_EQ(out[0].mask.codes, years[0].mask.codes);  // first year unchanged
}

TEST(Persistence, RejectsShortOrMismatchedSeries) {
    std::vector<ClassMap> one = {make_map(2, 2, {0, 1, 2, 3})};
    EXPECT_THROW(temporal_persistence(one), InputError);
    std::vector<ClassMap> bad = {make_map(2, 2, {0, 1, 2, 3}), make_map(2, 3, {0, 1, 2, 3, 0, 1})};
    EXPECT_THROW(temporal_persistence(bad), InputError);
}

TEST(ExternalMask, OverridesFlaggedPixels) {
    ClassMap map = make_map(2, 2, {kCashew, kCropland, kMixedTrees, kBuiltUp});
    LabelMask flags(2, 2, 0);
    flags.codes = {1, 0, kNoData, 1};
    ClassMap out = apply_external_mask(map, flags);
    EXPECT_EQ(out.mask.codes, (std::vector<std::uint8_t>{kBuiltUp, kCropland, kMixedTrees, kBuiltUp}));
    EXPECT_EQ(out.provenance.size(), 1u);

    LabelMask wrong(2, 3, 0);
    EXPECT_THROW(apply_external_mask(map, wrong), InputError);
}

TEST(UncertaintyFilter, ThresholdIsExclusiveUpperBound) {
    ClassMap map = make_map(1, 4, {kCashew, kCashew, kCropland, kMixedTrees});
    std::vector<float> unc = {0.05f, 0.06f, 0.061f, 0.2f};
    ClassMap out = uncertainty_filter(map, unc, 0.06);
    EXPECT_EQ(out.mask.codes, (std::vector<std::uint8_t>{kCashew, kCashew, kNoData, kNoData}));
}

TEST(UncertaintyFilter, ExtremesAndErrors) {
    ClassMap map = make_map(2, 2, {0, 1, 2, 3});
    std::vector<float> unc = {0.1f, 0.2f, 0.3f, 0.4f};
    ClassMap same = uncertainty_filter(map, unc, std::numeric_limits<float>::infinity());
    EXPECT_EQ(same.mask.codes, map.mask.codes);
    ClassMap none = uncertainty_filter(map, unc, 0.0);
    for (auto c : none.mask.codes) EXPECT_EQ(c, kNoData);
    EXPECT_THROW(uncertainty_filter(map, unc, -0.1), ConfigError);
    EXPECT_THROW(uncertainty_filter(map, {0.1f}, 0.5), InputError);
}
