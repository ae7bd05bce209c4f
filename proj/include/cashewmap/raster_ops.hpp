#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cashewmap/common.hpp"
#include "cashewmap/rstk.hpp"

namespace cashewmap {

// ---------------------------------------------------------------------------
// Percentile normalization. One parameter set per (area, band); an "area" is
// one input file.
// ---------------------------------------------------------------------------

struct BandRange {
    float p_min = 0.0f;
    float p_max = 0.0f;
};

struct NormalizationParams {
    std::string area_id;
    int percentile_lo = 2;
    int percentile_hi = 98;
    std::vector<BandRange> bands;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["area_id"] = area_id;
        j["percentile_lo"] = percentile_lo;
        j["percentile_hi"] = percentile_hi;
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& b : bands) arr.push_back({{"p_min", b.p_min}, {"p_max", b.p_max}});
        j["bands"] = arr;
        return j;
    }

    static NormalizationParams from_json(const nlohmann::json& j) {
        NormalizationParams p;
        p.area_id = j.value("area_id", "");
        p.percentile_lo = j.value("percentile_lo", 2);
        p.percentile_hi = j.value("percentile_hi", 98);
        for (const auto& b : j.at("bands")) {
            p.bands.push_back({b.at("p_min").get<float>(), b.at("p_max").get<float>()});
        }
        return p;
    }
};

// Nearest-rank percentile over sorted values: rank ceil(q/100 * n), 1-based.
inline float nearest_rank_percentile(const std::vector<float>& sorted, double q) {
    if (sorted.empty()) throw InputError("percentile of empty set");
    const auto n = static_cast<double>(sorted.size());
    auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * n));
    if (rank < 1) rank = 1;
    if (rank > sorted.size()) rank = sorted.size();
    return sorted[rank - 1];
}

// Trimmed min/max per band over all timesteps of one area.
inline NormalizationParams compute_normalization(const RasterStack& stack, const std::string& area_id) {
    NormalizationParams params;
    params.area_id = area_id;
    params.bands.resize(static_cast<std::size_t>(stack.bands));
    std::vector<float> vals;
    for (int b = 0; b < stack.bands; ++b) {
        vals.clear();
        for (int t = 0; t < stack.timesteps; ++t) {
            const float* plane = &stack.values[stack.index(t, b, 0, 0)];
            for (std::size_t i = 0; i < stack.pixel_count(); ++i)
                if (!stack.is_nodata(plane[i])) vals.push_back(plane[i]);
        }
        if (vals.empty()) throw InputError("compute_normalization: band " + std::to_string(b) + " is all nodata");
        std::sort(vals.begin(), vals.end());
        BandRange r;
        r.p_min = nearest_rank_percentile(vals, params.percentile_lo);
        r.p_max = nearest_rank_percentile(vals, params.percentile_hi);
        if (!(r.p_min < r.p_max))
            throw InputError("compute_normalization: degenerate band " + std::to_string(b));
        params.bands[static_cast<std::size_t>(b)] = r;
    }
    return params;
}

// (P - P_min) / (P_max - P_min), clipped to [0,1]; nodata preserved.
inline RasterStack normalize(const RasterStack& stack, const NormalizationParams& params) {
    if (params.bands.size() != static_cast<std::size_t>(stack.bands))
        throw InputError("normalize: band mismatch between stack and params");
    RasterStack out = stack;
    for (int t = 0; t < stack.timesteps; ++t) {
        for (int b = 0; b < stack.bands; ++b) {
            const BandRange& r = params.bands[static_cast<std::size_t>(b)];
            const float scale = 1.0f / (r.p_max - r.p_min);
            float* plane = &out.values[out.index(t, b, 0, 0)];
            for (std::size_t i = 0; i < out.pixel_count(); ++i) {
                if (out.is_nodata(plane[i])) continue;
                plane[i] = std::clamp((plane[i] - r.p_min) * scale, 0.0f, 1.0f);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Connected components over an arbitrary pixel predicate. Shared by label
// hygiene, region growing oracles and density scoring.
// ---------------------------------------------------------------------------

struct ComponentLabels {
    int height = 0;
    int width = 0;
    std::vector<std::int32_t> label;  // -1 where predicate is false
    int count = 0;
};

template <typename Pred>
ComponentLabels connected_components(int height, int width, int connectivity, Pred&& inside) {
    if (connectivity != 4 && connectivity != 8)
        throw ConfigError("connected_components: connectivity must be 4 or 8");
    ComponentLabels out;
    out.height = height;
    out.width = width;
    out.label.assign(static_cast<std::size_t>(height) * width, -1);
    static const int dy8[] = {-1, -1, -1, 0, 0, 1, 1, 1};
    static const int dx8[] = {-1, 0, 1, -1, 1, -1, 0, 1};
    static const int dy4[] = {-1, 0, 0, 1};
    static const int dx4[] = {0, -1, 1, 0};
    const int* dy = connectivity == 8 ? dy8 : dy4;
    const int* dx = connectivity == 8 ? dx8 : dx4;
    const int ndir = connectivity;

    std::vector<std::size_t> stack;
    for (int y0 = 0; y0 < height; ++y0) {
        for (int x0 = 0; x0 < width; ++x0) {
            const std::size_t start = static_cast<std::size_t>(y0) * width + x0;
            if (out.label[start] != -1 || !inside(y0, x0)) continue;
            const std::int32_t id = out.count++;
            out.label[start] = id;
            stack.assign(1, start);
            while (!stack.empty()) {
                const std::size_t cur = stack.back();
                stack.pop_back();
                const int cy = static_cast<int>(cur / static_cast<std::size_t>(width));
                const int cx = static_cast<int>(cur % static_cast<std::size_t>(width));
                for (int d = 0; d < ndir; ++d) {
                    const int ny = cy + dy[d];
                    const int nx = cx + dx[d];
                    if (ny < 0 || ny >= height || nx < 0 || nx >= width) continue;
                    const std::size_t ni = static_cast<std::size_t>(ny) * width + nx;
                    if (out.label[ni] != -1 || !inside(ny, nx)) continue;
                    out.label[ni] = id;
                    stack.push_back(ni);
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Label hygiene: per-class morphological erosion followed by small-component
// removal. Eroded and removed pixels fall back to cropland/others.
// ---------------------------------------------------------------------------

inline LabelMask erode_labels(const LabelMask& mask, int radius = 2, int min_component = 30) {
    mask.validate();
    if (radius < 0) throw ConfigError("erode_labels: radius must be >= 0");
    LabelMask out = mask;

    // Erosion with a (2r+1)^2 square element; pixels outside the raster count
    // as background, so class regions shrink at the image border too.
    if (radius > 0) {
        for (int y = 0; y < mask.height; ++y) {
            for (int x = 0; x < mask.width; ++x) {
                const std::uint8_t c = mask.at(y, x);
                if (c == kNoData || c == kCropland) continue;
                bool keep = true;
                for (int wy = y - radius; keep && wy <= y + radius; ++wy) {
                    for (int wx = x - radius; wx <= x + radius; ++wx) {
                        if (wy < 0 || wy >= mask.height || wx < 0 || wx >= mask.width ||
                            mask.at(wy, wx) != c) {
                            keep = false;
                            break;
                        }
                    }
                }
                if (!keep) out.at(y, x) = kCropland;
            }
        }
    }

    // Per-class components (8-connectivity) below the size floor are dropped
    // as well. Removing a small cropland component would be a no-op, so only
    // the other classes are scanned.
    if (min_component > 1) {
        for (std::uint8_t cls : {kMixedTrees, kCashew, kBuiltUp}) {
            auto comps = connected_components(out.height, out.width, 8, [&](int y, int x) {
                return out.at(y, x) == cls;
            });
            std::vector<int> comp_size(static_cast<std::size_t>(comps.count), 0);
            for (std::int32_t id : comps.label)
                if (id >= 0) ++comp_size[static_cast<std::size_t>(id)];
            for (std::size_t i = 0; i < comps.label.size(); ++i) {
                const std::int32_t id = comps.label[i];
                if (id >= 0 && comp_size[static_cast<std::size_t>(id)] < min_component)
                    out.codes[i] = kCropland;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patch tiling. Deterministic row-major grid; trailing partial windows are
// shifted inward so the union of patches covers the raster exactly.
// ---------------------------------------------------------------------------

struct PatchSet {
    int size = 0;
    int stride = 0;
    int timesteps = 0;
    int bands = 0;
    std::vector<std::pair<int, int>> origins;       // (row, col)
    std::vector<std::vector<float>> patches;        // each T*B*S*S
    std::vector<std::vector<std::uint8_t>> labels;  // each S*S, empty if unlabeled

    bool labeled() const { return !labels.empty(); }
};

inline std::vector<int> tile_axis(int extent, int size, int stride) {
    std::vector<int> origins;
    for (int o = 0; o + size <= extent; o += stride) origins.push_back(o);
    if (origins.empty() || origins.back() + size < extent) origins.push_back(extent - size);
    return origins;
}

inline PatchSet tile_patches(const RasterStack& stack, const LabelMask* labels, int size, int stride) {
    if (size < 1 || stride < 1) throw ConfigError("tile_patches: size and stride must be >= 1");
    if (size > stack.height || size > stack.width)
        throw InputError("tile_patches: patch size exceeds raster extent");
    if (labels && (labels->height != stack.height || labels->width != stack.width))
        throw InputError("tile_patches: label extent mismatch");

    PatchSet set;
    set.size = size;
    set.stride = stride;
    set.timesteps = stack.timesteps;
    set.bands = stack.bands;
    const std::vector<int> rows = tile_axis(stack.height, size, stride);
    const std::vector<int> cols = tile_axis(stack.width, size, stride);
    for (int r : rows)
        for (int c : cols) set.origins.emplace_back(r, c);

    set.patches.reserve(set.origins.size());
    for (const auto& [r, c] : set.origins) {
        std::vector<float> patch(static_cast<std::size_t>(stack.timesteps) * stack.bands * size * size);
        std::size_t k = 0;
        for (int t = 0; t < stack.timesteps; ++t)
            for (int b = 0; b < stack.bands; ++b)
                for (int y = 0; y < size; ++y) {
                    const float* src = &stack.values[stack.index(t, b, r + y, c)];
                    std::copy(src, src + size, patch.begin() + static_cast<std::ptrdiff_t>(k));
                    k += static_cast<std::size_t>(size);
                }
        set.patches.push_back(std::move(patch));
        if (labels) {
            std::vector<std::uint8_t> lab(static_cast<std::size_t>(size) * size);
            for (int y = 0; y < size; ++y) {
                const std::uint8_t* src = &labels->codes[labels->index(r + y, c)];
                std::copy(src, src + size, lab.begin() + static_cast<std::ptrdiff_t>(y) * size);
            }
            set.labels.push_back(std::move(lab));
        }
    }
    return set;
}

}  // namespace cashewmap
