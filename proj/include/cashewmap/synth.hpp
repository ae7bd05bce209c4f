#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cashewmap/common.hpp"
#include "cashewmap/rng.hpp"
#include "cashewmap/rstk.hpp"

namespace cashewmap {

// Deterministic synthetic scene used in place of satellite imagery.
//
// Land cover is laid out by cutting a smooth random field at the exact
// quantiles of the requested class mixture, so emitted class priors match the
// mixture up to pixel rounding. Each class gets a distinct temporal/spectral
// signature; cashew regions additionally carry a dotted crown texture whose
// spacing encodes planting density.
struct SynthConfig {
    int height = 256;
    int width = 256;
    int timesteps = 7;  // dry-season months
    int bands = 4;      // R, G, B, NIR analog

    // Class mixture; normalized internally.
    double w_mixed = 0.25;
    double w_cashew = 0.35;
    double w_builtup = 0.10;
    double w_cropland = 0.30;

    // Expected area (pixels) allotted to one tree crown; crowns per region
    // ~= region_area / spacing, so doubling the spacing halves the count.
    double crown_spacing_high = 16.0;
    double crown_spacing_low = 48.0;

    // Fraction of the cashew region assigned to the high-density regime.
    double density_high_fraction = 0.5;

    double noise_sd = 0.012;
    int field_bumps = 9;
};

// In the density truth mask: 1 = high-density cashew, 0 = low-density cashew,
// 255 = outside cashew.
struct SynthScene {
    RasterStack stack;
    LabelMask labels;
    LabelMask density_truth;
    std::vector<std::pair<int, int>> crown_centers;
};

namespace detail {

// Sum of seeded Gaussian bumps plus a tiny tie-breaking dither.
inline std::vector<double> smooth_field(int height, int width, int bumps, Rng rng) {
    std::vector<double> field(static_cast<std::size_t>(height) * width, 0.0);
    struct Bump {
        double cy, cx, inv2s2, amp;
    };
    std::vector<Bump> parts;
    parts.reserve(static_cast<std::size_t>(bumps));
    const double dim = static_cast<double>(std::max(height, width));
    for (int k = 0; k < bumps; ++k) {
        Bump b;
        b.cy = rng.uniform(0.0, height);
        b.cx = rng.uniform(0.0, width);
        const double s = rng.uniform(dim / 8.0, dim / 3.0);
        b.inv2s2 = 1.0 / (2.0 * s * s);
        b.amp = rng.uniform(0.4, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        parts.push_back(b);
    }
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double v = 0.0;
            for (const Bump& b : parts) {
                const double dy = y - b.cy;
                const double dx = x - b.cx;
                v += b.amp * std::exp(-(dy * dy + dx * dx) * b.inv2s2);
            }
            field[static_cast<std::size_t>(y) * width + x] = v + 1e-7 * rng.uniform();
        }
    return field;
}

// Band values for one (class, timestep); phase runs 0..1 over the season.
// Cashew is split into soil background and crown canopy.
inline void class_signature(std::uint8_t cls, bool crown, double phase, float out[4]) {
    const double s = std::sin(3.14159265358979323846 * phase);
    const double swing = s * s;
    switch (cls) {
        case kCropland:
            out[0] = static_cast<float>(0.36 - 0.20 * swing);
            out[1] = static_cast<float>(0.26 + 0.06 * swing);
            out[2] = static_cast<float>(0.20 - 0.05 * swing);
            out[3] = static_cast<float>(0.14 + 0.50 * swing);
            break;
        case kMixedTrees:
            out[0] = static_cast<float>(0.22 - 0.04 * swing);
            out[1] = static_cast<float>(0.26 + 0.05 * swing);
            out[2] = 0.18f;
            out[3] = static_cast<float>(0.32 + 0.12 * swing);
            break;
        case kBuiltUp:
            out[0] = 0.56f;
            out[1] = 0.54f;
            out[2] = 0.50f;
            out[3] = 0.30f;
            break;
        case kCashew:
        default:
            if (crown) {
                out[0] = 0.12f;
                out[1] = 0.30f;
                out[2] = 0.10f;
                out[3] = static_cast<float>(0.52 + 0.03 * std::cos(2.0 * 3.14159265358979323846 * phase));
            } else {
                out[0] = 0.30f;
                out[1] = 0.25f;
                out[2] = 0.20f;
                out[3] = static_cast<float>(0.21 + 0.02 * std::cos(2.0 * 3.14159265358979323846 * phase));
            }
            break;
    }
}

}  // namespace detail

inline SynthScene synth_scene(const SynthConfig& cfg, std::uint64_t seed) {
    if (cfg.height < 8 || cfg.width < 8) throw ConfigError("synth_scene: scene too small");
    if (cfg.bands != 4) throw ConfigError("synth_scene: generator expects 4 bands");
    const double weights[4] = {cfg.w_mixed, cfg.w_cashew, cfg.w_builtup, cfg.w_cropland};
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0 || !std::isfinite(w)) throw ConfigError("synth_scene: invalid mixture weights");
        wsum += w;
    }
    if (wsum <= 0.0) throw ConfigError("synth_scene: invalid mixture weights");
    if (cfg.crown_spacing_high <= 0.0 || cfg.crown_spacing_low <= 0.0)
        throw ConfigError("synth_scene: crown spacing must be positive");

    const Rng root(seed);
    const int h = cfg.height;
    const int w = cfg.width;
    const std::size_t npx = static_cast<std::size_t>(h) * w;

    SynthScene scene;
    scene.labels = LabelMask(h, w, kCropland);
    scene.density_truth = LabelMask(h, w, kNoData);

    // Class layout: quantile cut of a smooth field. Cropland occupies the
    // lowest field values, then mixed trees, cashew, and built-up peaks.
    {
        const std::vector<double> field = detail::smooth_field(h, w, cfg.field_bumps, root.substream("field"));
        std::vector<std::size_t> order(npx);
        for (std::size_t i = 0; i < npx; ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return field[a] < field[b]; });
        const std::uint8_t cut_order[4] = {kCropland, kMixedTrees, kCashew, kBuiltUp};
        const double cut_w[4] = {cfg.w_cropland, cfg.w_mixed, cfg.w_cashew, cfg.w_builtup};
        std::size_t pos = 0;
        double cum = 0.0;
        for (int c = 0; c < 4; ++c) {
            cum += cut_w[c] / wsum;
            std::size_t end = c == 3 ? npx : static_cast<std::size_t>(std::llround(cum * static_cast<double>(npx)));
            if (end > npx) end = npx;
            for (; pos < end; ++pos) scene.labels.codes[order[pos]] = cut_order[c];
        }
    }

    // Density regimes inside cashew: cut a second field at the configured
    // fraction of cashew pixels.
    std::vector<std::size_t> cashew_px;
    for (std::size_t i = 0; i < npx; ++i)
        if (scene.labels.codes[i] == kCashew) cashew_px.push_back(i);
    if (!cashew_px.empty()) {
        const std::vector<double> field =
            detail::smooth_field(h, w, cfg.field_bumps, root.substream("density"));
        std::vector<std::size_t> order = cashew_px;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return field[a] < field[b]; });
        const auto n_high = static_cast<std::size_t>(
            std::llround(std::clamp(cfg.density_high_fraction, 0.0, 1.0) * static_cast<double>(order.size())));
        for (std::size_t i = 0; i < order.size(); ++i)
            scene.density_truth.codes[order[i]] = i < n_high ? 1 : 0;
    }

    // Crown centers: a seeded point process with expected count area/spacing
    // per regime. Crowns render as plus-shaped canopy dots.
    std::vector<std::uint8_t> crown(npx, 0);
    {
        Rng crng = root.substream("crowns");
        for (int regime = 0; regime < 2; ++regime) {
            std::vector<std::size_t> region;
            for (std::size_t i : cashew_px)
                if (scene.density_truth.codes[i] == (regime == 0 ? 1 : 0)) region.push_back(i);
            if (region.empty()) continue;
            const double spacing = regime == 0 ? cfg.crown_spacing_high : cfg.crown_spacing_low;
            const auto n_crowns = static_cast<std::size_t>(
                std::llround(static_cast<double>(region.size()) / spacing));
            for (std::size_t k = 0; k < n_crowns; ++k) {
                const std::size_t px = region[static_cast<std::size_t>(crng.below(region.size()))];
                const int cy = static_cast<int>(px / static_cast<std::size_t>(w));
                const int cx = static_cast<int>(px % static_cast<std::size_t>(w));
                scene.crown_centers.emplace_back(cy, cx);
                static const int dy[] = {0, -1, 1, 0, 0};
                static const int dx[] = {0, 0, 0, -1, 1};
                for (int d = 0; d < 5; ++d) {
                    const int ny = cy + dy[d];
                    const int nx = cx + dx[d];
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
                    if (scene.labels.codes[ni] == kCashew) crown[ni] = 1;
                }
            }
        }
    }

    // Render band values: signature lookup + seeded sensor noise. Signature
    // index 4 holds the crown variant of cashew.
    scene.stack = RasterStack(cfg.timesteps, cfg.bands, h, w);
    {
        Rng nrng = root.substream("noise");
        std::vector<float> noise(npx * static_cast<std::size_t>(cfg.timesteps) * cfg.bands);
        for (auto& v : noise) v = static_cast<float>(nrng.normal(0.0, cfg.noise_sd));

        std::vector<std::uint8_t> sig_id(npx);
        for (std::size_t i = 0; i < npx; ++i) {
            const std::uint8_t cls = scene.labels.codes[i];
            sig_id[i] = (cls == kCashew && crown[i]) ? 4 : cls;
        }
        std::size_t ni = 0;
        for (int t = 0; t < cfg.timesteps; ++t) {
            const double phase = cfg.timesteps > 1 ? static_cast<double>(t) / (cfg.timesteps - 1) : 0.0;
            float table[5][4];
            for (int s = 0; s < 5; ++s)
                detail::class_signature(s == 4 ? kCashew : static_cast<std::uint8_t>(s), s == 4, phase, table[s]);
            for (int b = 0; b < cfg.bands; ++b) {
                float* plane = &scene.stack.values[scene.stack.index(t, b, 0, 0)];
                for (std::size_t i = 0; i < npx; ++i)
                    plane[i] = std::clamp(table[sig_id[i]][b] + noise[ni++], 0.0f, 1.0f);
            }
        }
    }
    return scene;
}

}  // namespace cashewmap
