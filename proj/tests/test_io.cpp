#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "vstain/io.hpp"

using namespace vstain;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("vstain_io_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

RasterImage random_raster(std::size_t w, std::size_t h, std::size_t channels, int depth, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, depth == 16 ? 65535 : 255);
  RasterImage r{w, h, channels, depth, {}};
  r.samples.resize(w * h * channels);
  for (auto& s : r.samples) s = static_cast<std::uint16_t>(u(rng));
  return r;
}

}  // namespace

TEST(ImageIo, PngRoundTripsBitExactly) {
  auto dir = temp_dir("png");
  for (auto [channels, depth] : {std::pair<std::size_t, int>{3, 8}, {1, 8}, {1, 16}}) {
    auto r = random_raster(37, 23, channels, depth, channels * 100 + depth);
    const auto p = dir / ("img_" + std::to_string(channels) + "_" + std::to_string(depth) + ".png");
    write_image(p, r);
    EXPECT_EQ(read_image(p), r) << channels << "x" << depth;
  }
}

TEST(ImageIo, TiffSixteenBitRoundTrip) {
  auto dir = temp_dir("tiff");
  auto r = random_raster(64, 31, 1, 16, 7);
  write_image(dir / "a.tif", r);
  EXPECT_EQ(read_image(dir / "a.tif"), r);
  write_image(dir / "b.TIFF", r);
  EXPECT_EQ(read_image(dir / "b.TIFF"), r);
  EXPECT_THROW(write_tiff(dir / "c.tif", random_raster(4, 4, 3, 8, 1)), InvalidArgument);
}

TEST(ImageIo, UnreadableInputsAreDataErrors) {
  auto dir = temp_dir("bad");
  std::ofstream(dir / "junk.png") << "not an image";
  std::ofstream(dir / "junk.tif") << "not an image";
  EXPECT_THROW(read_image(dir / "junk.png"), DataError);
  EXPECT_THROW(read_image(dir / "junk.tif"), DataError);
  EXPECT_THROW(read_image(dir / "missing.png"), DataError);
  std::ofstream(dir / "x.bmp") << "x";
  EXPECT_THROW(read_image(dir / "x.bmp"), DataError);
}

TEST(ImageIo, TensorConversions) {
  auto r = random_raster(5, 4, 3, 8, 9);
  auto planes = to_rgb_planes(r);
  ASSERT_EQ(planes.shape(), (Shape{3, 4, 5}));
  EXPECT_EQ(planes[20 + 3], r.samples[3 * 3 + 1]);
  EXPECT_EQ(from_planes(planes), r);
  auto gray = to_gray(r);
  EXPECT_FLOAT_EQ(gray[2], (r.samples[6] + r.samples[7] + r.samples[8]) / 3.0f);

  Image clamp({2, 2}, 0.0f);
  clamp[0] = -4.0f;
  clamp[1] = 300.4f;
  clamp[2] = 70000.0f;
  clamp[3] = 12.5f;
  auto g8 = from_planes(clamp);
  EXPECT_EQ(g8.samples, (std::vector<std::uint16_t>{0, 255, 255, 13}));
  EXPECT_EQ(from_planes(clamp, 16).samples[2], 65535);
}
