#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "nvrc/common.hpp"
#include "nvrc/video.hpp"

using namespace nvrc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

double mean_abs_diff(const std::vector<float>& v, size_t a, size_t b, size_t n,
                     size_t stride_a, size_t stride_b) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i)
    acc += std::fabs(static_cast<double>(v[a + i * stride_a]) -
                     static_cast<double>(v[b + i * stride_b]));
  return acc / static_cast<double>(n);
}

}  // namespace

TEST_CASE("synthetic video is deterministic and correlated") {
  const VideoBuffer v = synthetic_video(42, 8, 32, 32);
  CHECK(v.t == 8);
  CHECK(v.h == 32);
  CHECK(v.w == 32);
  CHECK(v.color == ColorMode::kRgb);
  validate_video(v);
  for (const float s : v.planes) {
    CHECK(s >= 0.0f);
    CHECK(s <= 1.0f);
  }

  const VideoBuffer again = synthetic_video(42, 8, 32, 32);
  CHECK(v.planes == again.planes);
  const VideoBuffer other = synthetic_video(43, 8, 32, 32);
  CHECK(v.planes != other.planes);

  // Neighboring samples are far closer than the plane's overall spread.
  const size_t hw = 32 * 32;
  double near = 0.0, far = 0.0;
  for (size_t y = 0; y < 32; ++y) {
    near += mean_abs_diff(v.planes, y * 32, y * 32 + 1, 31, 1, 1);
    far += mean_abs_diff(v.planes, y * 32, ((y + 16) % 32) * 32 + 11, 31, 1, 1);
  }
  CHECK(near < 0.5 * far);

  // Adjacent frames resemble each other more than distant ones.
  const double dt1 = mean_abs_diff(v.planes, 0, hw, hw, 1, 1);
  const double dt7 = mean_abs_diff(v.planes, 0, 7 * hw, hw, 1, 1);
  CHECK(dt1 < dt7);

  CHECK_THROWS_AS(synthetic_video(1, 0, 4, 4), UsageError);
}

TEST_CASE("color conversion round trips") {
  VideoBuffer px;
  px.t = 1;
  px.h = 1;
  px.w = 2;
  // Channel-major planes: pixel 0 is red, pixel 1 is white.
  px.planes = {1.0f, 1.0f, 0.0f, 1.0f, 0.0f, 1.0f};
  const VideoBuffer yuv = to_yuv444(px);
  CHECK(yuv.planes[1] == doctest::Approx(1.0).epsilon(1e-6));    // white luma
  CHECK(yuv.planes[3] == doctest::Approx(0.5).epsilon(1e-6));    // white U
  CHECK(yuv.planes[5] == doctest::Approx(0.5).epsilon(1e-6));    // white V
  CHECK(yuv.planes[0] == doctest::Approx(0.299).epsilon(1e-6));  // red luma
  CHECK(yuv.planes[4] == doctest::Approx(1.0).epsilon(1e-6));    // red V

  const VideoBuffer v = synthetic_video(5, 2, 8, 8);
  const VideoBuffer back = to_rgb(to_yuv444(v));
  REQUIRE(back.planes.size() == v.planes.size());
  for (size_t i = 0; i < v.planes.size(); ++i)
    CHECK(std::fabs(back.planes[i] - v.planes[i]) < 1e-6f);

  // Converting twice in the same direction is a no-op.
  CHECK(to_yuv444(yuv).planes == yuv.planes);
}

TEST_CASE("video validation rejects malformed buffers") {
  VideoBuffer v = synthetic_video(3, 1, 4, 4);
  v.planes[5] = std::nanf("");
  CHECK_THROWS_AS(validate_video(v), UsageError);
  v = synthetic_video(3, 1, 4, 4);
  v.planes.pop_back();
  CHECK_THROWS_AS(validate_video(v), UsageError);
  v = synthetic_video(3, 1, 4, 4);
  v.fps_den = 0;
  CHECK_THROWS_AS(validate_video(v), UsageError);
}

TEST_CASE("y4m golden bytes parse exactly") {
  const fs::path dir = fresh_dir("nvrc_test_y4m");
  const fs::path file = dir / "tiny.y4m";
  std::string data = "YUV4MPEG2 W2 H2 F30:1 Ip A1:1 C444\nFRAME\n";
  // Frame bytes include 0x0A to prove frames are read by size, not by line.
  const uint8_t samples[12] = {0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60};
  data.append(reinterpret_cast<const char*>(samples), 12);
  write_bytes(file, data);

  const VideoBuffer v = read_y4m(file.string());
  CHECK(v.t == 1);
  CHECK(v.h == 2);
  CHECK(v.w == 2);
  CHECK(v.fps_num == 30);
  CHECK(v.fps_den == 1);
  CHECK(v.color == ColorMode::kYuv444);
  REQUIRE(v.planes.size() == 12);
  for (size_t i = 0; i < 12; ++i)
    CHECK(v.planes[i] == static_cast<float>(samples[i]) / 255.0f);
}

TEST_CASE("y4m rejects unsupported streams") {
  const fs::path dir = fresh_dir("nvrc_test_y4m_bad");
  const std::string frame420(4 * 4 + 2 * (2 * 2), 'x');

  write_bytes(dir / "c420.y4m", "YUV4MPEG2 W4 H4 F25:1 C420jpeg\nFRAME\n" + frame420);
  CHECK_THROWS_AS(read_y4m((dir / "c420.y4m").string()), UsageError);

  write_bytes(dir / "default.y4m", "YUV4MPEG2 W4 H4 F25:1\nFRAME\n" + frame420);
  CHECK_THROWS_AS(read_y4m((dir / "default.y4m").string()), UsageError);

  write_bytes(dir / "c422.y4m", "YUV4MPEG2 W4 H4 F25:1 C422\nFRAME\n");
  CHECK_THROWS_AS(read_y4m((dir / "c422.y4m").string()), UsageError);

  write_bytes(dir / "nosig.y4m", "RIFF1234");
  CHECK_THROWS_AS(read_y4m((dir / "nosig.y4m").string()), UsageError);

  write_bytes(dir / "noext.y4m", "YUV4MPEG2 C444\nFRAME\n");
  CHECK_THROWS_AS(read_y4m((dir / "noext.y4m").string()), UsageError);

  write_bytes(dir / "short.y4m",
              "YUV4MPEG2 W4 H4 F25:1 C444\nFRAME\n" + std::string(10, 'x'));
  CHECK_THROWS_AS(read_y4m((dir / "short.y4m").string()), UsageError);

  write_bytes(dir / "marker.y4m",
              "YUV4MPEG2 W2 H2 F25:1 C444\nBADMARK\n" + std::string(12, 'x'));
  CHECK_THROWS_AS(read_y4m((dir / "marker.y4m").string()), UsageError);

  write_bytes(dir / "empty.y4m", "YUV4MPEG2 W2 H2 F25:1 C444\n");
  CHECK_THROWS_AS(read_y4m((dir / "empty.y4m").string()), UsageError);

  CHECK_THROWS_AS(read_y4m((dir / "missing.y4m").string()), UsageError);
}

TEST_CASE("y4m write and read round trip exactly") {
  const fs::path dir = fresh_dir("nvrc_test_y4m_rt");
  const VideoBuffer v = quantize_8bit(to_yuv444(synthetic_video(7, 3, 16, 16)));
  const fs::path a = dir / "a.y4m", b = dir / "b.y4m";
  write_y4m(v, a.string());
  write_y4m(v, b.string());
  CHECK(read_bytes(a) == read_bytes(b));

  const VideoBuffer r = read_y4m(a.string());
  CHECK(r.t == v.t);
  CHECK(r.h == v.h);
  CHECK(r.w == v.w);
  CHECK(r.fps_num == v.fps_num);
  CHECK(r.planes == v.planes);

  // Writing an RGB buffer converts; reading it back matches the quantized
  // YUV image of the original.
  const VideoBuffer rgb = synthetic_video(8, 2, 8, 8);
  write_y4m(rgb, a.string());
  const VideoBuffer rr = read_y4m(a.string());
  CHECK(rr.planes == quantize_8bit(to_yuv444(rgb)).planes);
}

TEST_CASE("png frame directory round trips") {
  const fs::path dir = fresh_dir("nvrc_test_png");
  const VideoBuffer v = quantize_8bit(synthetic_video(9, 2, 8, 12));
  write_png_frames(v, dir.string());
  CHECK(fs::exists(dir / "frame_0000.png"));
  CHECK(fs::exists(dir / "frame_0001.png"));

  const VideoBuffer r = read_png_dir(dir.string());
  CHECK(r.t == 2);
  CHECK(r.h == 8);
  CHECK(r.w == 12);
  CHECK(r.color == ColorMode::kRgb);
  CHECK(r.planes == v.planes);

  const fs::path empty = fresh_dir("nvrc_test_png_empty");
  CHECK_THROWS_AS(read_png_dir(empty.string()), UsageError);
}

TEST_CASE("tensor bridge preserves layout") {
  const VideoBuffer v = synthetic_video(11, 2, 4, 5);
  const Tensor<float> x = video_tensor(v);
  REQUIRE(x.shape() == std::vector<int64_t>({3, 2, 4, 5}));
  CHECK(x.values() == v.planes);
  const VideoBuffer back = video_from_tensor(x, ColorMode::kRgb, 30, 1);
  CHECK(back.planes == v.planes);
  CHECK(back.fps_num == 30);
  CHECK_THROWS_AS(video_from_tensor(Tensor<float>({2, 2, 4, 5}), ColorMode::kRgb),
                  UsageError);
}
