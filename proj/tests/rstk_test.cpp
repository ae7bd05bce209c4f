#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cashewmap/rng.hpp"
#include "cashewmap/rstk.hpp"

using namespace cashewmap;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    const fs::path dir = fs::temp_directory_path() / "rstk_test";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST(Rstk, StackRoundTrip) {
    RasterStack stack(3, 2, 5, 7);
    Rng rng(1);
    for (auto& v : stack.values) v = rng.uniform_f(0.0f, 1.0f);
    stack.transform = {{10.0, 0.5, 0.0, 20.0, 0.0, -0.5}};
    stack.band_names = {"red", "nir"};
    stack.timestep_labels = {"t0", "t1", "t2"};

    const std::string path = (temp_dir() / "stack.rstk").string();
    write_rstk(path, stack);
    RasterStack back = read_rstk(path);

    EXPECT_EQ(back.timesteps, 3);
    EXPECT_EQ(back.bands, 2);
    EXPECT_EQ(back.height, 5);
    EXPECT_EQ(back.width, 7);
    EXPECT_EQ(back.values, stack.values);
    ASSERT_TRUE(back.transform.has_value());
    EXPECT_EQ(*back.transform, *stack.transform);
    EXPECT_EQ(back.band_names, stack.band_names);
    EXPECT_EQ(back.timestep_labels, stack.timestep_labels);
}

TEST(Rstk, SampleOrderIsTimestepBandRowCol) {
    RasterStack stack(2, 2, 2, 2);
    for (std::size_t i = 0; i < stack.values.size(); ++i) stack.values[i] = static_cast<float>(i);
    // index(t,b,y,x) must walk t-major, then band, then row-major pixels
    EXPECT_EQ(stack.at(0, 0, 0, 1), 1.0f);
    EXPECT_EQ(stack.at(0, 1, 0, 0), 4.0f);
    EXPECT_EQ(stack.at(1, 0, 0, 0), 8.0f);
    EXPECT_EQ(stack.at(1, 1, 1, 1), 15.0f);

    const std::string path = (temp_dir() / "order.rstk").string();
    write_rstk(path, stack);
    // payload bytes after the header line are the raw little-endian floats
    std::ifstream in(path, std::ios::binary);
    std::string header;
    std::getline(in, header);
    float first = -1.0f;
    in.read(reinterpret_cast<char*>(&first), sizeof(first));
    EXPECT_EQ(first, 0.0f);
}

TEST(Rstk, MaskRoundTrip) {
    LabelMask mask(4, 6, kCropland);
    mask.at(0, 0) = kCashew;
    mask.at(3, 5) = kNoData;
    mask.at(2, 2) = kBuiltUp;

    const std::string path = (temp_dir() / "mask.rstk").string();
    write_rstk(path, mask);
    LabelMask back = read_rstk_mask(path);
    EXPECT_EQ(back.height, 4);
    EXPECT_EQ(back.width, 6);
    EXPECT_EQ(back.codes, mask.codes);
}

TEST(Rstk, RejectsBadMagic) {
    const std::string path = (temp_dir() / "bad.rstk").string();
    std::ofstream out(path, std::ios::binary);
    out << "{\"magic\":\"NOPE\"}\n";
    out.close();
    EXPECT_THROW(read_rstk(path), InputError);
}

TEST(Rstk, RejectsTruncatedPayload) {
    RasterStack stack(1, 1, 4, 4, 0.5f);
    const std::string path = (temp_dir() / "trunc.rstk").string();
    write_rstk(path, stack);
    fs::resize_file(path, fs::file_size(path) - 8);
    EXPECT_THROW(read_rstk(path), InputError);
}

TEST(Rstk, RejectsWrongDtype) {
    LabelMask mask(2, 2);
    const std::string path = (temp_dir() / "u8.rstk").string();
    write_rstk(path, mask);
    EXPECT_THROW(read_rstk(path), InputError);  // f32 reader on u8 payload
}

TEST(Rstk, MissingFile) {
    EXPECT_THROW(read_rstk((temp_dir() / "nope.rstk").string()), InputError);
    EXPECT_THROW(read_rstk_mask((temp_dir() / "nope.rstk").string()), InputError);
}

TEST(Rstk, ValidateCatchesBadCodesAndNonFinite) {
    LabelMask mask(2, 2);
    mask.codes[1] = 7;
    EXPECT_THROW(mask.validate(), InputError);

    RasterStack stack(1, 1, 2, 2, 0.0f);
    stack.values[0] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(stack.validate(), InputError);
    stack.values[0] = stack.nodata;  // sentinel is allowed
    EXPECT_NO_THROW(stack.validate());
}

TEST(Rstk, ClassCodes) {
    EXPECT_EQ(kMixedTrees, 0);
    EXPECT_EQ(kCashew, 1);
    EXPECT_EQ(kBuiltUp, 2);
    EXPECT_EQ(kCropland, 3);
    EXPECT_EQ(kNoData, 255);
    EXPECT_TRUE(valid_class_code(3));
    EXPECT_FALSE(valid_class_code(4));
    EXPECT_TRUE(valid_class_code(255));
}
