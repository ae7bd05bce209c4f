#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cashewmap/raster_ops.hpp"
#include "cashewmap/rstk.hpp"
#include "cashewmap/stca.hpp"

namespace cashewmap {

struct GrowThresholds {
    double seed_threshold = 0.8;
    double neighbor_low = 0.4;
    int connectivity = 8;

    void validate() const {
        if (!(0.0 <= neighbor_low && neighbor_low < seed_threshold && seed_threshold <= 1.0))
            throw ConfigError("invalid thresholds: need 0 <= neighbor_low < seed_threshold <= 1");
        if (connectivity != 4 && connectivity != 8)
            throw ConfigError("invalid thresholds: connectivity must be 4 or 8");
    }
};

// Class map plus an append-only record of the operations that produced it.
struct ClassMap {
    LabelMask mask;
    nlohmann::json provenance = nlohmann::json::array();

    void note(nlohmann::json entry) { provenance.push_back(std::move(entry)); }
};

// Keep a probability component only if it contains at least one seed pixel:
// connected regions of {p >= neighbor_low} that touch {p >= seed_threshold}.
inline std::vector<std::uint8_t> region_grow(const std::vector<float>& prob, int height, int width,
                                             const GrowThresholds& th) {
    th.validate();
    if (prob.size() != static_cast<std::size_t>(height) * width)
        throw InputError("region_grow: plane size mismatch");
    const float lo = static_cast<float>(th.neighbor_low);
    const float seed = static_cast<float>(th.seed_threshold);
    ComponentLabels comps = connected_components(height, width, th.connectivity, [&](int y, int x) {
        return prob[static_cast<std::size_t>(y) * width + x] >= lo;
    });
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(comps.count), 0);
    for (std::size_t i = 0; i < prob.size(); ++i)
        if (prob[i] >= seed) keep[static_cast<std::size_t>(comps.label[i])] = 1;
    std::vector<std::uint8_t> mask(prob.size(), 0);
    for (std::size_t i = 0; i < prob.size(); ++i)
        if (comps.label[i] >= 0 && keep[static_cast<std::size_t>(comps.label[i])]) mask[i] = 1;
    return mask;
}

// Grow every class, then resolve: covered pixels take the covering class of
// highest mean probability, uncovered pixels fall back to cropland/others.
inline ClassMap assemble_classmap(const ProbabilityField& field, const GrowThresholds& th) {
    field.validate();
    th.validate();
    const std::size_t plane = static_cast<std::size_t>(field.height) * field.width;
    std::vector<std::vector<std::uint8_t>> grown(field.classes);
    for (int c = 0; c < field.classes; ++c)
        grown[c] = region_grow(field.class_plane(c), field.height, field.width, th);

    ClassMap out;
    out.mask.height = field.height;
    out.mask.width = field.width;
    out.mask.codes.assign(plane, kCropland);
    for (std::size_t i = 0; i < plane; ++i) {
        int best = -1;
        float best_p = 0.0f;
        for (int c = 0; c < field.classes; ++c) {
            if (!grown[c][i]) continue;
            const float p = field.probs[static_cast<std::size_t>(c) * plane + i];
            if (best < 0 || p > best_p) {
                best = c;
                best_p = p;
            }
        }
        if (best >= 0) out.mask.codes[i] = static_cast<std::uint8_t>(best);
    }
    out.note({{"op", "assemble_classmap"},
              {"seed_threshold", th.seed_threshold},
              {"neighbor_low", th.neighbor_low},
              {"connectivity", th.connectivity},
              {"model_id", field.model_id},
              {"mc_runs", field.runs}});
    return out;
}

// Once a pixel is cashew it stays cashew in every later year.
inline std::vector<ClassMap> temporal_persistence(const std::vector<ClassMap>& by_year) {
    if (by_year.size() < 2) throw InputError("temporal_persistence: need at least 2 years");
    for (const auto& m : by_year) {
        m.mask.validate();
        if (m.mask.height != by_year[0].mask.height || m.mask.width != by_year[0].mask.width)
            throw InputError("temporal_persistence: extent mismatch");
    }
    std::vector<ClassMap> out = by_year;
    const std::size_t plane = out[0].mask.codes.size();
    std::vector<std::uint8_t> seen(plane, 0);
    for (std::size_t y = 0; y < out.size(); ++y) {
        for (std::size_t i = 0; i < plane; ++i) {
            if (seen[i]) out[y].mask.codes[i] = kCashew;
            else if (out[y].mask.codes[i] == kCashew) seen[i] = 1;
        }
        out[y].note({{"op", "temporal_persistence"}, {"year_index", y}});
    }
    return out;
}

inline ClassMap apply_external_mask(const ClassMap& map, const LabelMask& builtup) {
    map.mask.validate();
    if (builtup.height != map.mask.height || builtup.width != map.mask.width)
        throw InputError("apply_external_mask: extent mismatch");
    ClassMap out = map;
    for (std::size_t i = 0; i < out.mask.codes.size(); ++i)
        if (builtup.codes[i] != 0 && builtup.codes[i] != kNoData) out.mask.codes[i] = kBuiltUp;
    out.note({{"op", "apply_external_mask"}, {"target_class", static_cast<int>(kBuiltUp)}});
    return out;
}

inline ClassMap uncertainty_filter(const ClassMap& map, const std::vector<float>& unc, double threshold) {
    map.mask.validate();
    if (threshold < 0.0) throw ConfigError("uncertainty_filter: negative threshold");
    if (unc.size() != map.mask.codes.size()) throw InputError("uncertainty_filter: extent mismatch");
    ClassMap out = map;
    for (std::size_t i = 0; i < out.mask.codes.size(); ++i)
        if (unc[i] > threshold) out.mask.codes[i] = kNoData;
    out.note({{"op", "uncertainty_filter"}, {"threshold", threshold}});
    return out;
}

}  // namespace cashewmap
