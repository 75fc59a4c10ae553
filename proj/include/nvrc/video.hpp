#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nvrc/hierarchy.hpp"
#include "nvrc/tensor.hpp"

namespace nvrc {

// Planar (3, T, H, W) float samples in [0, 1]. Three channels always; the
// color mode says whether the planes are R/G/B or Y/U/V (4:4:4, chroma
// offset by +0.5).
struct VideoBuffer {
  int64_t t = 0, h = 0, w = 0;
  ColorMode color = ColorMode::kRgb;
  int64_t fps_num = 25, fps_den = 1;
  std::vector<float> planes;

  int64_t plane_size() const { return t * h * w; }
};

void validate_video(const VideoBuffer& v);  // extents, size, finite samples

// Full-range BT.601 conversions; no-ops when already in the target mode.
VideoBuffer to_rgb(const VideoBuffer& v);
VideoBuffer to_yuv444(const VideoBuffer& v);

// Round-to-nearest 8-bit quantization of every sample, returned as floats
// k/255 so file round trips compare exactly.
VideoBuffer quantize_8bit(const VideoBuffer& v);

// Uncompressed YUV4MPEG2 restricted to 8-bit 4:4:4; anything else (including
// the default 4:2:0) is rejected. Reading yields kYuv444; writing converts
// to it first and quantizes.
VideoBuffer read_y4m(const std::string& path);
void write_y4m(const VideoBuffer& v, const std::string& path);

// A directory of 8-bit PNG frames, lexicographic order, equal extents.
// Writing emits frame_0000.png ... in RGB.
VideoBuffer read_png_dir(const std::string& dir);
void write_png_frames(const VideoBuffer& v, const std::string& dir);

// Seeded synthetic content: a smooth background gradient plus drifting
// Gaussian blobs under a global translation. Spatially and temporally
// correlated, deterministic in (seed, extents).
VideoBuffer synthetic_video(uint64_t seed, int64_t t, int64_t h, int64_t w);

// (3, T, H, W) tensor view of the samples and back.
Tensor<float> video_tensor(const VideoBuffer& v);
VideoBuffer video_from_tensor(const Tensor<float>& x, ColorMode color,
                              int64_t fps_num = 25, int64_t fps_den = 1);

}  // namespace nvrc
