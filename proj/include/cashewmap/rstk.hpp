#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cashewmap/common.hpp"

namespace cashewmap {

// Class codes used by every categorical raster in the pipeline.
enum ClassCode : std::uint8_t {
    kMixedTrees = 0,   // mixed trees / grassland
    kCashew = 1,       // cashew plantation
    kBuiltUp = 2,      // built-up land
    kCropland = 3,     // cropland / others
    kNoData = 255,
};

inline bool valid_class_code(std::uint8_t c) {
    return c <= 3 || c == kNoData;
}

constexpr int kNumClasses = 4;

// A T x B x H x W time series of band values. Sample order is
// timestep-major, then band, then row-major pixels.
struct RasterStack {
    int timesteps = 0;
    int bands = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values;
    float nodata = -9999.0f;
    std::optional<std::array<double, 6>> transform;
    std::vector<std::string> band_names;
    std::vector<std::string> timestep_labels;

    RasterStack() = default;
    RasterStack(int t, int b, int h, int w, float fill = 0.0f)
        : timesteps(t), bands(b), height(h), width(w),
          values(static_cast<std::size_t>(t) * b * h * w, fill) {}

    std::size_t index(int t, int b, int y, int x) const {
        return ((static_cast<std::size_t>(t) * bands + b) * height + y) * width + x;
    }
    float& at(int t, int b, int y, int x) { return values[index(t, b, y, x)]; }
    float at(int t, int b, int y, int x) const { return values[index(t, b, y, x)]; }

    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

    bool is_nodata(float v) const { return v == nodata; }

    void validate() const {
        if (timesteps < 1 || bands < 1) throw InputError("RasterStack: T and B must be >= 1");
        if (values.size() != static_cast<std::size_t>(timesteps) * bands * height * width)
            throw InputError("RasterStack: value array length does not match T*B*H*W");
        for (float v : values)
            if (!std::isfinite(v) && !is_nodata(v))
                throw InputError("RasterStack: non-finite value outside nodata");
    }
};

// Per-pixel class codes; 255 marks nodata.
struct LabelMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> codes;
    std::optional<std::array<double, 6>> transform;

    LabelMask() = default;
    LabelMask(int h, int w, std::uint8_t fill = kCropland)
        : height(h), width(w), codes(static_cast<std::size_t>(h) * w, fill) {}

    std::size_t index(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
    std::uint8_t& at(int y, int x) { return codes[index(y, x)]; }
    std::uint8_t at(int y, int x) const { return codes[index(y, x)]; }

    void validate() const {
        if (codes.size() != static_cast<std::size_t>(height) * width)
            throw InputError("LabelMask: code array length does not match H*W");
        for (std::uint8_t c : codes)
            if (!valid_class_code(c)) throw InputError("LabelMask: invalid class code " + std::to_string(c));
    }
};

// ---------------------------------------------------------------------------
// RSTK v1 container: one JSON header line (newline-terminated) followed by
// raw little-endian samples in T -> band -> row -> col order.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json rstk_header(int t, int b, int h, int w, const char* dtype, double nodata,
                                  const std::optional<std::array<double, 6>>& transform,
                                  const std::vector<std::string>& band_names,
                                  const std::vector<std::string>& timestep_labels) {
    nlohmann::json j;
    j["magic"] = "RSTK1";
    j["T"] = t;
    j["B"] = b;
    j["H"] = h;
    j["W"] = w;
    j["dtype"] = dtype;
    j["nodata"] = nodata;
    if (transform) j["transform"] = *transform;
    if (!band_names.empty()) j["band_names"] = band_names;
    if (!timestep_labels.empty()) j["timestep_labels"] = timestep_labels;
    return j;
}

inline nlohmann::json read_rstk_header(std::istream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line)) throw InputError("RSTK: cannot read header from " + path);
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || j.value("magic", "") != "RSTK1")
        throw InputError("RSTK: bad magic in " + path);
    return j;
}

}  // namespace detail

inline void write_rstk(const std::string& path, const RasterStack& stack) {
    stack.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("RSTK: cannot open for write: " + path);
    nlohmann::json j = detail::rstk_header(stack.timesteps, stack.bands, stack.height, stack.width,
                                           "f32le", stack.nodata, stack.transform,
                                           stack.band_names, stack.timestep_labels);
    out << j.dump() << "\n";
    out.write(reinterpret_cast<const char*>(stack.values.data()),
              static_cast<std::streamsize>(stack.values.size() * sizeof(float)));
    if (!out) throw InputError("RSTK: short write: " + path);
}

inline RasterStack read_rstk(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("RSTK: cannot open: " + path);
    nlohmann::json j = detail::read_rstk_header(in, path);
    if (j.value("dtype", "") != "f32le") throw InputError("RSTK: expected dtype f32le in " + path);
    RasterStack stack(j.at("T").get<int>(), j.at("B").get<int>(), j.at("H").get<int>(), j.at("W").get<int>());
    stack.nodata = j.value("nodata", -9999.0);
    if (j.contains("transform")) {
        std::array<double, 6> tr{};
        for (int i = 0; i < 6; ++i) tr[static_cast<std::size_t>(i)] = j["transform"].at(i).get<double>();
        stack.transform = tr;
    }
    if (j.contains("band_names")) stack.band_names = j["band_names"].get<std::vector<std::string>>();
    if (j.contains("timestep_labels"))
        stack.timestep_labels = j["timestep_labels"].get<std::vector<std::string>>();
    in.read(reinterpret_cast<char*>(stack.values.data()),
            static_cast<std::streamsize>(stack.values.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(stack.values.size() * sizeof(float)))
        throw InputError("RSTK: truncated payload in " + path);
    stack.validate();
    return stack;
}

inline void write_rstk(const std::string& path, const LabelMask& mask) {
    mask.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("RSTK: cannot open for write: " + path);
    nlohmann::json j = detail::rstk_header(1, 1, mask.height, mask.width, "u8",
                                           static_cast<double>(kNoData), mask.transform, {}, {});
    out << j.dump() << "\n";
    out.write(reinterpret_cast<const char*>(mask.codes.data()),
              static_cast<std::streamsize>(mask.codes.size()));
    if (!out) throw InputError("RSTK: short write: " + path);
}

inline LabelMask read_rstk_mask(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("RSTK: cannot open: " + path);
    nlohmann::json j = detail::read_rstk_header(in, path);
    if (j.value("dtype", "") != "u8") throw InputError("RSTK: expected dtype u8 in " + path);
    if (j.at("T").get<int>() != 1 || j.at("B").get<int>() != 1)
        throw InputError("RSTK: label mask must have T=1, B=1: " + path);
    LabelMask mask(j.at("H").get<int>(), j.at("W").get<int>());
    if (j.contains("transform")) {
        std::array<double, 6> tr{};
        for (int i = 0; i < 6; ++i) tr[static_cast<std::size_t>(i)] = j["transform"].at(i).get<double>();
        mask.transform = tr;
    }
    in.read(reinterpret_cast<char*>(mask.codes.data()),
            static_cast<std::streamsize>(mask.codes.size()));
    if (in.gcount() != static_cast<std::streamsize>(mask.codes.size()))
        throw InputError("RSTK: truncated payload in " + path);
    mask.validate();
    return mask;
}

}  // namespace cashewmap
