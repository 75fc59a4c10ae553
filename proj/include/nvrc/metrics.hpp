#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nvrc/tensor.hpp"

namespace nvrc {

inline constexpr double kPsnrCap = 100.0;  // reported for zero-error inputs

struct PsnrResult {
  double db = 0.0;
  bool capped = false;  // true when the error was exactly zero
};

// Mean squared error over equal-length buffers. Throws UsageError on length
// mismatch or empty input.
double mse(std::span<const float> a, std::span<const float> b);

// 10*log10(peak^2 / MSE), capped at kPsnrCap when MSE is zero.
PsnrResult psnr(std::span<const float> a, std::span<const float> b, double peak);

// Planar (3, n) Y/U/V buffers; PSNR of the 6:1:1-weighted MSE
// (6*mse_y + mse_u + mse_v) / 8.
PsnrResult psnr_yuv_611(std::span<const float> a, std::span<const float> b,
                        double peak = 1.0);

struct MsSsimResult {
  double value = 0.0;
  int64_t scales = 0;  // scales actually used (up to 5, fewer on small inputs)
};

// Multi-scale SSIM over `planes` independent h x w images (values in [0, 1]),
// averaged across planes. Gaussian window (sigma 1.5) on the valid region,
// 2x2 mean downsampling between scales, standard five-scale exponents
// renormalized when fewer scales fit. Throws UsageError if even one scale
// does not fit or the window is invalid.
MsSsimResult ms_ssim(std::span<const float> a, std::span<const float> b, int64_t planes,
                     int64_t h, int64_t w, int64_t window = 11);

// Differentiable variant for training on (C, T, H, W) tensors: identical
// scale rule, but per-scale statistics pool over all planes and the
// per-scale means are floored at 1e-6 so fractional powers keep finite
// gradients. Returns a scalar tensor.
template <typename S>
Tensor<S> ms_ssim_train(const Tensor<S>& a, const Tensor<S>& b, int64_t window = 5);

struct RdPoint {
  double bpp = 0.0;
  double quality = 0.0;
};

struct RdCurve {
  std::vector<RdPoint> points;
  std::string metric;  // quality metric tag, e.g. "psnr"
};

// Least-squares cubic of log10(bpp) against quality, in coordinates centered
// at x0 for conditioning: log10(bpp) ~ sum_k coef[k] * (quality - x0)^k.
// Requires >= 4 points with positive bpp.
struct LogRateFit {
  std::array<double, 4> coef{};
  double x0 = 0.0;
  double q_lo = 0.0, q_hi = 0.0;  // quality extent of the fitted points
};
LogRateFit fit_log_rate(const RdCurve& c);
double eval_log_rate(const LogRateFit& f, double quality);

// Average rate difference of b against a in percent over the overlapping
// quality range: positive means b spends more bits at equal quality.
// Throws UsageError when the ranges do not overlap.
double bd_rate(const RdCurve& a, const RdCurve& b);

// CSV with a header row; locale-independent formatting.
std::string rd_curve_csv(const RdCurve& c);
std::string bd_rate_table_csv(const std::vector<std::string>& names,
                              const std::vector<std::vector<double>>& percent);

}  // namespace nvrc
