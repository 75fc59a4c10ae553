#include "nvrc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "nvrc/common.hpp"

namespace nvrc {
namespace {

constexpr double kSsimK1 = 0.01;
constexpr double kSsimK2 = 0.03;
constexpr double kSsimRange = 1.0;
constexpr double kWindowSigma = 1.5;
constexpr int64_t kMaxScales = 5;
constexpr std::array<double, 5> kScaleExponents = {0.0448, 0.2856, 0.3001, 0.2363,
                                                   0.1333};
// Per-scale means are floored before fractional powers in the training path so
// the pow gradient stays finite; the evaluation path floors at zero instead.
constexpr double kTrainCsFloor = 1e-6;

std::vector<double> gaussian_window(int64_t window) {
  if (window < 2) throw UsageError("ms-ssim window must be at least 2");
  std::vector<double> g(static_cast<size_t>(window));
  const double c = (static_cast<double>(window) - 1.0) / 2.0;
  double sum = 0.0;
  for (int64_t i = 0; i < window; ++i) {
    const double d = static_cast<double>(i) - c;
    g[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
    sum += g[static_cast<size_t>(i)];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Scale s sees extents floored s-1 times by the 2x2 pool; a scale is usable
// only if the window still fits.
int64_t usable_scales(int64_t h, int64_t w, int64_t window) {
  int64_t scales = 0;
  while (scales < kMaxScales && h >= window && w >= window) {
    ++scales;
    h /= 2;
    w /= 2;
  }
  if (scales == 0) throw UsageError("ms-ssim input smaller than the window");
  return scales;
}

// The published five-scale exponents are used as-is when all scales fit;
// truncated sets are renormalized so the result keeps its magnitude.
std::array<double, 5> scale_weights(int64_t scales) {
  std::array<double, 5> w{};
  if (scales == kMaxScales) return kScaleExponents;
  double sum = 0.0;
  for (int64_t j = 0; j < scales; ++j) sum += kScaleExponents[static_cast<size_t>(j)];
  for (int64_t j = 0; j < scales; ++j)
    w[static_cast<size_t>(j)] = kScaleExponents[static_cast<size_t>(j)] / sum;
  return w;
}

// Separable valid-region filter: rows then columns. dst is (h-k+1, w-k+1).
void filter_valid(const std::vector<double>& src, int64_t h, int64_t w,
                  const std::vector<double>& k, std::vector<double>& tmp,
                  std::vector<double>& dst) {
  const int64_t n = static_cast<int64_t>(k.size());
  const int64_t ow = w - n + 1;
  const int64_t oh = h - n + 1;
  tmp.assign(static_cast<size_t>(h * ow), 0.0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i)
        acc += k[static_cast<size_t>(i)] * src[static_cast<size_t>(y * w + x + i)];
      tmp[static_cast<size_t>(y * ow + x)] = acc;
    }
  dst.assign(static_cast<size_t>(oh * ow), 0.0);
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i)
        acc += k[static_cast<size_t>(i)] * tmp[static_cast<size_t>((y + i) * ow + x)];
      dst[static_cast<size_t>(y * ow + x)] = acc;
    }
}

// 2x2 mean pool matching the tensor op: floor extents, drop a trailing odd
// row or column.
void pool2(std::vector<double>& p, int64_t& h, int64_t& w) {
  const int64_t oh = h / 2, ow = w / 2;
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      const int64_t s = 2 * y * w + 2 * x;
      out[static_cast<size_t>(y * ow + x)] =
          0.25 * (p[static_cast<size_t>(s)] + p[static_cast<size_t>(s + 1)] +
                  p[static_cast<size_t>(s + w)] + p[static_cast<size_t>(s + w + 1)]);
    }
  p = std::move(out);
  h = oh;
  w = ow;
}

// One plane's MS-SSIM: Wang's construction with contrast-structure means at
// every scale and the full per-pixel SSIM mean at the coarsest.
double ms_ssim_plane(std::vector<double> pa, std::vector<double> pb, int64_t h,
                     int64_t w, int64_t window, int64_t scales,
                     const std::array<double, 5>& weights) {
  const std::vector<double> kern = gaussian_window(window);
  const double c1 = kSsimK1 * kSsimRange * kSsimK1 * kSsimRange;
  const double c2 = kSsimK2 * kSsimRange * kSsimK2 * kSsimRange;
  std::vector<double> tmp, mu_a, mu_b, m_aa, m_bb, m_ab, sq(pa.size());
  double value = 1.0;
  for (int64_t j = 0; j < scales; ++j) {
    const size_t sz = static_cast<size_t>(h * w);
    filter_valid(pa, h, w, kern, tmp, mu_a);
    filter_valid(pb, h, w, kern, tmp, mu_b);
    for (size_t i = 0; i < sz; ++i) sq[i] = pa[i] * pa[i];
    filter_valid(sq, h, w, kern, tmp, m_aa);
    for (size_t i = 0; i < sz; ++i) sq[i] = pb[i] * pb[i];
    filter_valid(sq, h, w, kern, tmp, m_bb);
    for (size_t i = 0; i < sz; ++i) sq[i] = pa[i] * pb[i];
    filter_valid(sq, h, w, kern, tmp, m_ab);
    const bool coarsest = j == scales - 1;
    double acc = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
      const double va = m_aa[i] - mu_a[i] * mu_a[i];
      const double vb = m_bb[i] - mu_b[i] * mu_b[i];
      const double vab = m_ab[i] - mu_a[i] * mu_b[i];
      const double cs = (2.0 * vab + c2) / (va + vb + c2);
      if (coarsest) {
        const double lum = (2.0 * mu_a[i] * mu_b[i] + c1) /
                           (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
        acc += lum * cs;
      } else {
        acc += cs;
      }
    }
    acc /= static_cast<double>(mu_a.size());
    value *= std::pow(std::max(acc, 0.0), weights[static_cast<size_t>(j)]);
    if (!coarsest) {
      int64_t hb = h, wb = w;
      pool2(pa, h, w);
      pool2(pb, hb, wb);
      sq.resize(pa.size());
    }
  }
  return value;
}

// Solves the 4x4 normal equations for a centered cubic least-squares fit.
std::array<double, 4> solve_cubic(const std::vector<double>& x,
                                  const std::vector<double>& y) {
  double a[4][5] = {};
  for (size_t i = 0; i < x.size(); ++i) {
    double px[7] = {1, 0, 0, 0, 0, 0, 0};
    for (int k = 1; k < 7; ++k) px[k] = px[k - 1] * x[i];
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) a[r][c] += px[r + c];
      a[r][4] += px[r] * y[i];
    }
  }
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    for (int c = 0; c < 5; ++c) std::swap(a[col][c], a[piv][c]);
    if (a[col][col] == 0.0) throw UsageError("rd curve fit is degenerate");
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (int c = col; c < 5; ++c) a[r][c] -= f * a[col][c];
    }
  }
  std::array<double, 4> coef{};
  for (int r = 0; r < 4; ++r) coef[static_cast<size_t>(r)] = a[r][4] / a[r][r];
  return coef;
}

// Antiderivative of the centered cubic evaluated at x.
double integral_at(const LogRateFit& f, double x) {
  const double t = x - f.x0;
  double acc = 0.0, p = t;
  for (int k = 0; k < 4; ++k) {
    acc += f.coef[static_cast<size_t>(k)] * p / (static_cast<double>(k) + 1.0);
    p *= t;
  }
  return acc;
}

void append_num(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  out += buf;
}

}  // namespace

double mse(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw UsageError("mse inputs differ in length");
  if (a.empty()) throw UsageError("mse inputs are empty");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

namespace {

PsnrResult psnr_from_mse(double m, double peak) {
  if (!(peak > 0.0)) throw UsageError("psnr peak must be positive");
  if (m <= 0.0) return {kPsnrCap, true};
  return {std::min(10.0 * std::log10(peak * peak / m), kPsnrCap), false};
}

}  // namespace

PsnrResult psnr(std::span<const float> a, std::span<const float> b, double peak) {
  return psnr_from_mse(mse(a, b), peak);
}

PsnrResult psnr_yuv_611(std::span<const float> a, std::span<const float> b,
                        double peak) {
  if (a.size() != b.size()) throw UsageError("psnr inputs differ in length");
  if (a.empty() || a.size() % 3 != 0)
    throw UsageError("yuv psnr needs three equal planes");
  const size_t n = a.size() / 3;
  const double my = mse(a.subspan(0, n), b.subspan(0, n));
  const double mu = mse(a.subspan(n, n), b.subspan(n, n));
  const double mv = mse(a.subspan(2 * n, n), b.subspan(2 * n, n));
  return psnr_from_mse((6.0 * my + mu + mv) / 8.0, peak);
}

MsSsimResult ms_ssim(std::span<const float> a, std::span<const float> b,
                     int64_t planes, int64_t h, int64_t w, int64_t window) {
  if (planes <= 0 || h <= 0 || w <= 0) throw UsageError("ms-ssim extents must be positive");
  const size_t need = static_cast<size_t>(planes) * static_cast<size_t>(h) *
                      static_cast<size_t>(w);
  if (a.size() != need || b.size() != need)
    throw UsageError("ms-ssim inputs do not match the stated extents");
  const int64_t scales = usable_scales(h, w, window);
  const std::array<double, 5> weights = scale_weights(scales);
  const size_t plane_sz = static_cast<size_t>(h) * static_cast<size_t>(w);
  double acc = 0.0;
  for (int64_t p = 0; p < planes; ++p) {
    std::vector<double> pa(plane_sz), pb(plane_sz);
    for (size_t i = 0; i < plane_sz; ++i) {
      pa[i] = static_cast<double>(a[static_cast<size_t>(p) * plane_sz + i]);
      pb[i] = static_cast<double>(b[static_cast<size_t>(p) * plane_sz + i]);
    }
    acc += ms_ssim_plane(std::move(pa), std::move(pb), h, w, window, scales, weights);
  }
  return {acc / static_cast<double>(planes), scales};
}

template <typename S>
Tensor<S> ms_ssim_train(const Tensor<S>& a, const Tensor<S>& b, int64_t window) {
  if (!a.defined() || !b.defined() || a.dim() != 4 || a.shape() != b.shape())
    throw UsageError("ms-ssim training inputs must share a (C,T,H,W) shape");
  const int64_t ch = a.shape()[0];
  const int64_t scales = usable_scales(a.shape()[2], a.shape()[3], window);
  const std::array<double, 5> weights = scale_weights(scales);
  const double c1 = kSsimK1 * kSsimRange * kSsimK1 * kSsimRange;
  const double c2 = kSsimK2 * kSsimRange * kSsimK2 * kSsimRange;
  const std::vector<double> g = gaussian_window(window);
  std::vector<S> kv(static_cast<size_t>(ch * window * window));
  for (int64_t c = 0; c < ch; ++c)
    for (int64_t y = 0; y < window; ++y)
      for (int64_t x = 0; x < window; ++x)
        kv[static_cast<size_t>((c * window + y) * window + x)] = static_cast<S>(
            g[static_cast<size_t>(y)] * g[static_cast<size_t>(x)]);
  const Tensor<S> kern({ch, 1, 1, window, window}, std::move(kv));
  const std::array<int64_t, 3> valid = {0, 0, 0};

  Tensor<S> xa = a, xb = b, value;
  for (int64_t j = 0; j < scales; ++j) {
    const Tensor<S> mu_a = conv3d(xa, kern, valid, ch);
    const Tensor<S> mu_b = conv3d(xb, kern, valid, ch);
    const Tensor<S> va = sub(conv3d(mul(xa, xa), kern, valid, ch), mul(mu_a, mu_a));
    const Tensor<S> vb = sub(conv3d(mul(xb, xb), kern, valid, ch), mul(mu_b, mu_b));
    const Tensor<S> vab = sub(conv3d(mul(xa, xb), kern, valid, ch), mul(mu_a, mu_b));
    const Tensor<S> cs =
        divide(add_scalar(mul_scalar(vab, 2.0), c2), add_scalar(add(va, vb), c2));
    Tensor<S> map = cs;
    if (j == scales - 1) {
      const Tensor<S> lum =
          divide(add_scalar(mul_scalar(mul(mu_a, mu_b), 2.0), c1),
                 add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1));
      map = mul(lum, cs);
    }
    const Tensor<S> term = pow_scalar(clamp(mean_all(map), kTrainCsFloor, 1.0),
                                      weights[static_cast<size_t>(j)]);
    value = value.defined() ? mul(value, term) : term;
    if (j != scales - 1) {
      xa = avgpool2x2_hw(xa);
      xb = avgpool2x2_hw(xb);
    }
  }
  return value;
}

template Tensor<float> ms_ssim_train(const Tensor<float>&, const Tensor<float>&,
                                     int64_t);
template Tensor<double> ms_ssim_train(const Tensor<double>&, const Tensor<double>&,
                                      int64_t);

LogRateFit fit_log_rate(const RdCurve& c) {
  if (c.points.size() < 4) throw UsageError("rd curve needs at least 4 points");
  LogRateFit fit;
  std::vector<double> x, y;
  x.reserve(c.points.size());
  y.reserve(c.points.size());
  double mean_q = 0.0;
  for (const RdPoint& p : c.points) {
    if (!(p.bpp > 0.0)) throw UsageError("rd curve rates must be positive");
    mean_q += p.quality;
  }
  mean_q /= static_cast<double>(c.points.size());
  fit.x0 = mean_q;
  fit.q_lo = c.points[0].quality;
  fit.q_hi = c.points[0].quality;
  for (const RdPoint& p : c.points) {
    x.push_back(p.quality - mean_q);
    y.push_back(std::log10(p.bpp));
    fit.q_lo = std::min(fit.q_lo, p.quality);
    fit.q_hi = std::max(fit.q_hi, p.quality);
  }
  fit.coef = solve_cubic(x, y);
  return fit;
}

double eval_log_rate(const LogRateFit& f, double quality) {
  const double t = quality - f.x0;
  return ((f.coef[3] * t + f.coef[2]) * t + f.coef[1]) * t + f.coef[0];
}

double bd_rate(const RdCurve& a, const RdCurve& b) {
  const LogRateFit fa = fit_log_rate(a);
  const LogRateFit fb = fit_log_rate(b);
  const double lo = std::max(fa.q_lo, fb.q_lo);
  const double hi = std::min(fa.q_hi, fb.q_hi);
  if (!(hi > lo)) throw UsageError("rd curves have no overlapping quality range");
  const double ib = integral_at(fb, hi) - integral_at(fb, lo);
  const double ia = integral_at(fa, hi) - integral_at(fa, lo);
  const double avg = (ib - ia) / (hi - lo);
  return (std::pow(10.0, avg) - 1.0) * 100.0;
}

std::string rd_curve_csv(const RdCurve& c) {
  std::string out = "bpp," + (c.metric.empty() ? std::string("quality") : c.metric) +
                    "\n";
  for (const RdPoint& p : c.points) {
    append_num(out, p.bpp);
    out += ',';
    append_num(out, p.quality);
    out += '\n';
  }
  return out;
}

std::string bd_rate_table_csv(const std::vector<std::string>& names,
                              const std::vector<std::vector<double>>& percent) {
  if (percent.size() != names.size())
    throw UsageError("bd-rate table rows do not match the names");
  std::string out = "codec";
  for (const std::string& n : names) {
    out += ',';
    out += n;
  }
  out += '\n';
  for (size_t r = 0; r < names.size(); ++r) {
    if (percent[r].size() != names.size())
      throw UsageError("bd-rate table is not square");
    out += names[r];
    for (double v : percent[r]) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), ",%.4f", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace nvrc
