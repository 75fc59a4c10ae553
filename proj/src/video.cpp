#include "nvrc/video.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "nvrc/common.hpp"
#include "nvrc/rng.hpp"

namespace nvrc {
namespace {

constexpr double kU = 1.772;  // 2*(1 - 0.114)
constexpr double kV = 1.402;  // 2*(1 - 0.299)

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

float to_unit(uint8_t b) { return static_cast<float>(b) / 255.0f; }

uint8_t to_byte(float v) {
  const float s = std::round(v * 255.0f);
  return static_cast<uint8_t>(std::clamp(s, 0.0f, 255.0f));
}

}  // namespace

void validate_video(const VideoBuffer& v) {
  if (v.t <= 0 || v.h <= 0 || v.w <= 0) throw UsageError("video extents must be positive");
  if (v.fps_num <= 0 || v.fps_den <= 0) throw UsageError("video frame rate must be positive");
  if (static_cast<int64_t>(v.planes.size()) != 3 * v.plane_size())
    throw UsageError("video sample count does not match the extents");
  for (const float s : v.planes)
    if (!std::isfinite(s)) throw UsageError("video contains non-finite samples");
}

VideoBuffer to_yuv444(const VideoBuffer& v) {
  validate_video(v);
  if (v.color == ColorMode::kYuv444) return v;
  VideoBuffer out = v;
  out.color = ColorMode::kYuv444;
  const int64_t n = v.plane_size();
  for (int64_t i = 0; i < n; ++i) {
    const double r = v.planes[static_cast<size_t>(i)];
    const double g = v.planes[static_cast<size_t>(n + i)];
    const double b = v.planes[static_cast<size_t>(2 * n + i)];
    const double y = luma(r, g, b);
    out.planes[static_cast<size_t>(i)] = static_cast<float>(y);
    out.planes[static_cast<size_t>(n + i)] = static_cast<float>((b - y) / kU + 0.5);
    out.planes[static_cast<size_t>(2 * n + i)] = static_cast<float>((r - y) / kV + 0.5);
  }
  return out;
}

VideoBuffer to_rgb(const VideoBuffer& v) {
  validate_video(v);
  if (v.color == ColorMode::kRgb) return v;
  VideoBuffer out = v;
  out.color = ColorMode::kRgb;
  const int64_t n = v.plane_size();
  for (int64_t i = 0; i < n; ++i) {
    const double y = v.planes[static_cast<size_t>(i)];
    const double u = v.planes[static_cast<size_t>(n + i)];
    const double vv = v.planes[static_cast<size_t>(2 * n + i)];
    const double b = y + kU * (u - 0.5);
    const double r = y + kV * (vv - 0.5);
    const double g = (y - 0.299 * r - 0.114 * b) / 0.587;
    out.planes[static_cast<size_t>(i)] = static_cast<float>(r);
    out.planes[static_cast<size_t>(n + i)] = static_cast<float>(g);
    out.planes[static_cast<size_t>(2 * n + i)] = static_cast<float>(b);
  }
  return out;
}

VideoBuffer quantize_8bit(const VideoBuffer& v) {
  validate_video(v);
  VideoBuffer out = v;
  for (float& s : out.planes) s = to_unit(to_byte(s));
  return out;
}

namespace {

// One whitespace-separated Y4M header token, e.g. "W352" or "C444".
bool next_token(const std::string& line, size_t& pos, std::string& tok) {
  while (pos < line.size() && line[pos] == ' ') ++pos;
  if (pos >= line.size()) return false;
  const size_t start = pos;
  while (pos < line.size() && line[pos] != ' ') ++pos;
  tok = line.substr(start, pos - start);
  return true;
}

int64_t parse_i64(const std::string& s, const char* what) {
  try {
    size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("bad y4m ") + what + " field");
  }
}

}  // namespace

VideoBuffer read_y4m(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw UsageError("missing y4m signature");
  if (line.rfind("YUV4MPEG2", 0) != 0) throw UsageError("missing y4m signature");

  VideoBuffer v;
  v.color = ColorMode::kYuv444;
  std::string chroma;  // y4m defaults to 4:2:0 when absent
  size_t pos = 9;
  std::string tok;
  while (next_token(line, pos, tok)) {
    switch (tok[0]) {
      case 'W': v.w = parse_i64(tok.substr(1), "width"); break;
      case 'H': v.h = parse_i64(tok.substr(1), "height"); break;
      case 'F': {
        const size_t colon = tok.find(':');
        if (colon == std::string::npos) throw UsageError("bad y4m frame rate");
        v.fps_num = parse_i64(tok.substr(1, colon - 1), "frame rate");
        v.fps_den = parse_i64(tok.substr(colon + 1), "frame rate");
        break;
      }
      case 'C': chroma = tok.substr(1); break;
      case 'I':
      case 'A':
      case 'X': break;  // interlacing, aspect and comments ride along
      default: throw UsageError("unknown y4m header field " + tok);
    }
  }
  if (v.w <= 0 || v.h <= 0) throw UsageError("y4m header lacks frame extents");
  if (chroma != "444")
    throw UsageError("only 4:4:4 y4m input is supported, got C" +
                     (chroma.empty() ? std::string("420 (default)") : chroma));

  const int64_t frame_bytes = 3 * v.h * v.w;
  std::vector<uint8_t> raw;
  std::vector<uint8_t> frame(static_cast<size_t>(frame_bytes));
  while (std::getline(f, line)) {
    if (line.rfind("FRAME", 0) != 0) throw UsageError("bad y4m frame marker");
    if (!f.read(reinterpret_cast<char*>(frame.data()), frame_bytes))
      throw UsageError("truncated y4m frame");
    raw.insert(raw.end(), frame.begin(), frame.end());
    ++v.t;
  }
  if (v.t == 0) throw UsageError("y4m stream has no frames");

  // File order is frame-major (Y,U,V per frame); planes are channel-major.
  const int64_t n = v.plane_size();
  v.planes.resize(static_cast<size_t>(3 * n));
  const int64_t hw = v.h * v.w;
  for (int64_t t = 0; t < v.t; ++t)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < hw; ++i)
        v.planes[static_cast<size_t>(c * n + t * hw + i)] =
            to_unit(raw[static_cast<size_t>(t * frame_bytes + c * hw + i)]);
  return v;
}

void write_y4m(const VideoBuffer& v, const std::string& path) {
  const VideoBuffer yuv = to_yuv444(v);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot write " + path);
  char head[96];
  std::snprintf(head, sizeof(head), "YUV4MPEG2 W%lld H%lld F%lld:%lld Ip A1:1 C444\n",
                static_cast<long long>(yuv.w), static_cast<long long>(yuv.h),
                static_cast<long long>(yuv.fps_num), static_cast<long long>(yuv.fps_den));
  f << head;
  const int64_t n = yuv.plane_size();
  const int64_t hw = yuv.h * yuv.w;
  std::vector<uint8_t> frame(static_cast<size_t>(3 * hw));
  for (int64_t t = 0; t < yuv.t; ++t) {
    f << "FRAME\n";
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < hw; ++i)
        frame[static_cast<size_t>(c * hw + i)] =
            to_byte(yuv.planes[static_cast<size_t>(c * n + t * hw + i)]);
    f.write(reinterpret_cast<const char*>(frame.data()),
            static_cast<std::streamsize>(frame.size()));
  }
  if (!f) throw UsageError("failed writing " + path);
}

VideoBuffer read_png_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  std::error_code ec;
  for (const fs::directory_entry& e : fs::directory_iterator(dir, ec))
    if (e.is_regular_file() && e.path().extension() == ".png")
      files.push_back(e.path().string());
  if (ec) throw UsageError("cannot list " + dir);
  if (files.empty()) throw UsageError("no png frames in " + dir);
  std::sort(files.begin(), files.end());

  VideoBuffer v;
  v.color = ColorMode::kRgb;
  v.t = static_cast<int64_t>(files.size());
  std::vector<uint8_t> rgb;
  for (int64_t t = 0; t < v.t; ++t) {
    png_image im;
    std::memset(&im, 0, sizeof(im));
    im.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&im, files[static_cast<size_t>(t)].c_str()))
      throw UsageError("cannot read " + files[static_cast<size_t>(t)] + ": " + im.message);
    im.format = PNG_FORMAT_RGB;
    const int64_t fh = im.height, fw = im.width;
    rgb.resize(static_cast<size_t>(PNG_IMAGE_SIZE(im)));
    if (!png_image_finish_read(&im, nullptr, rgb.data(), 0, nullptr))
      throw UsageError("cannot read " + files[static_cast<size_t>(t)] + ": " + im.message);
    if (t == 0) {
      v.h = fh;
      v.w = fw;
      v.planes.resize(static_cast<size_t>(3 * v.t * v.h * v.w));
    } else if (fh != v.h || fw != v.w) {
      throw UsageError("png frames disagree in extents under " + dir);
    }
    const int64_t n = v.plane_size(), hw = v.h * v.w;
    for (int64_t i = 0; i < hw; ++i)
      for (int64_t c = 0; c < 3; ++c)
        v.planes[static_cast<size_t>(c * n + t * hw + i)] =
            to_unit(rgb[static_cast<size_t>(3 * i + c)]);
  }
  return v;
}

void write_png_frames(const VideoBuffer& v, const std::string& dir) {
  const VideoBuffer rgb = to_rgb(v);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create " + dir);
  const int64_t n = rgb.plane_size(), hw = rgb.h * rgb.w;
  std::vector<uint8_t> row(static_cast<size_t>(3 * hw));
  for (int64_t t = 0; t < rgb.t; ++t) {
    for (int64_t i = 0; i < hw; ++i)
      for (int64_t c = 0; c < 3; ++c)
        row[static_cast<size_t>(3 * i + c)] =
            to_byte(rgb.planes[static_cast<size_t>(c * n + t * hw + i)]);
    png_image im;
    std::memset(&im, 0, sizeof(im));
    im.version = PNG_IMAGE_VERSION;
    im.width = static_cast<png_uint_32>(rgb.w);
    im.height = static_cast<png_uint_32>(rgb.h);
    im.format = PNG_FORMAT_RGB;
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04lld.png", static_cast<long long>(t));
    const std::string path = (fs::path(dir) / name).string();
    if (!png_image_write_to_file(&im, path.c_str(), 0, row.data(), 0, nullptr))
      throw UsageError("cannot write " + path + ": " + im.message);
  }
}

VideoBuffer synthetic_video(uint64_t seed, int64_t t, int64_t h, int64_t w) {
  if (t <= 0 || h <= 0 || w <= 0) throw UsageError("video extents must be positive");
  Rng rng(seed);
  struct Blob {
    double cx, cy, vx, vy, r2;
    double amp[3];
  };
  const int blobs = 6;
  std::vector<Blob> bs(blobs);
  const double scale = static_cast<double>(std::min(h, w));
  for (Blob& b : bs) {
    b.cx = rng.next_double() * static_cast<double>(w);
    b.cy = rng.next_double() * static_cast<double>(h);
    b.vx = (rng.next_double() - 0.5) * 0.06 * scale;
    b.vy = (rng.next_double() - 0.5) * 0.06 * scale;
    const double r = (0.10 + 0.15 * rng.next_double()) * scale;
    b.r2 = r * r;
    for (double& a : b.amp) a = 0.15 + 0.75 * rng.next_double();
  }
  double base[3], grad_y[3], grad_x[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.1 + 0.3 * rng.next_double();
    grad_y[c] = (rng.next_double() - 0.5) * 0.3;
    grad_x[c] = (rng.next_double() - 0.5) * 0.3;
  }
  const double gx = (rng.next_double() - 0.5) * 0.04 * scale;
  const double gy = (rng.next_double() - 0.5) * 0.04 * scale;

  VideoBuffer v;
  v.t = t;
  v.h = h;
  v.w = w;
  v.color = ColorMode::kRgb;
  v.planes.resize(static_cast<size_t>(3 * t * h * w));
  const int64_t n = v.plane_size(), hw = h * w;
  for (int64_t f = 0; f < t; ++f) {
    const double ft = static_cast<double>(f);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        // The whole scene slides by the global motion; blobs drift on top.
        const double px = static_cast<double>(x) - gx * ft;
        const double py = static_cast<double>(y) - gy * ft;
        double acc[3];
        for (int c = 0; c < 3; ++c)
          acc[c] = base[c] + grad_y[c] * py / static_cast<double>(h) +
                   grad_x[c] * px / static_cast<double>(w);
        for (const Blob& b : bs) {
          const double dx = px - (b.cx + b.vx * ft);
          const double dy = py - (b.cy + b.vy * ft);
          const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * b.r2));
          for (int c = 0; c < 3; ++c) acc[c] += b.amp[c] * g;
        }
        for (int64_t c = 0; c < 3; ++c)
          v.planes[static_cast<size_t>(c * n + f * hw + y * w + x)] =
              static_cast<float>(std::clamp(acc[c], 0.0, 1.0));
      }
  }
  return v;
}

Tensor<float> video_tensor(const VideoBuffer& v) {
  validate_video(v);
  return Tensor<float>({3, v.t, v.h, v.w}, v.planes);
}

VideoBuffer video_from_tensor(const Tensor<float>& x, ColorMode color,
                              int64_t fps_num, int64_t fps_den) {
  if (!x.defined() || x.dim() != 4 || x.shape()[0] != 3)
    throw UsageError("video tensor must be (3, T, H, W)");
  VideoBuffer v;
  v.t = x.shape()[1];
  v.h = x.shape()[2];
  v.w = x.shape()[3];
  v.color = color;
  v.fps_num = fps_num;
  v.fps_den = fps_den;
  v.planes = x.values();
  validate_video(v);
  return v;
}

}  // namespace nvrc
