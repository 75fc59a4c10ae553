#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "doctest.h"
#include "nvrc/common.hpp"
#include "nvrc/metrics.hpp"
#include "nvrc/rng.hpp"
#include "nvrc/tensor.hpp"

using namespace nvrc;

namespace {

// Direct multi-scale SSIM reference: 2D window built in one pass, plain
// per-pixel window loops, no separability, no shared code with the library.
namespace oracle {

std::vector<double> window2d(int n) {
  std::vector<double> g(static_cast<size_t>(n * n));
  const double c = (n - 1) / 2.0;
  double sum = 0.0;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double d2 = (y - c) * (y - c) + (x - c) * (x - c);
      g[static_cast<size_t>(y * n + x)] = std::exp(-d2 / (2.0 * 1.5 * 1.5));
      sum += g[static_cast<size_t>(y * n + x)];
    }
  for (double& v : g) v /= sum;
  return g;
}

std::vector<double> half(const std::vector<double>& p, int h, int w) {
  const int oh = h / 2, ow = w / 2;
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      out[static_cast<size_t>(y * ow + x)] =
          (p[static_cast<size_t>(2 * y * w + 2 * x)] +
           p[static_cast<size_t>(2 * y * w + 2 * x + 1)] +
           p[static_cast<size_t>((2 * y + 1) * w + 2 * x)] +
           p[static_cast<size_t>((2 * y + 1) * w + 2 * x + 1)]) /
          4.0;
  return out;
}

double msssim(std::vector<double> a, std::vector<double> b, int h, int w, int win) {
  const double exps[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  int scales = 0;
  for (int hh = h, ww = w; scales < 5 && hh >= win && ww >= win; hh /= 2, ww /= 2)
    ++scales;
  REQUIRE(scales >= 1);
  double wsum = 0.0;
  for (int j = 0; j < scales; ++j) wsum += exps[j];
  const std::vector<double> g = window2d(win);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double value = 1.0;
  for (int j = 0; j < scales; ++j) {
    const int oh = h - win + 1, ow = w - win + 1;
    double acc = 0.0;
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double wa = 0, wb = 0, waa = 0, wbb = 0, wab = 0;
        for (int i = 0; i < win; ++i)
          for (int k = 0; k < win; ++k) {
            const double wt = g[static_cast<size_t>(i * win + k)];
            const double pa = a[static_cast<size_t>((y + i) * w + x + k)];
            const double pb = b[static_cast<size_t>((y + i) * w + x + k)];
            wa += wt * pa;
            wb += wt * pb;
            waa += wt * pa * pa;
            wbb += wt * pb * pb;
            wab += wt * pa * pb;
          }
        const double cs =
            (2.0 * (wab - wa * wb) + c2) / ((waa - wa * wa) + (wbb - wb * wb) + c2);
        if (j == scales - 1)
          acc += cs * (2.0 * wa * wb + c1) / (wa * wa + wb * wb + c1);
        else
          acc += cs;
      }
    acc /= static_cast<double>(oh) * static_cast<double>(ow);
    const double e = scales == 5 ? exps[j] : exps[j] / wsum;
    value *= std::pow(std::max(acc, 0.0), e);
    if (j != scales - 1) {
      a = half(a, h, w);
      b = half(b, h, w);
      h /= 2;
      w /= 2;
    }
  }
  return value;
}

}  // namespace oracle

std::vector<float> random_plane(Rng& rng, size_t n, float lo, float hi) {
  std::vector<float> v(n);
  for (float& x : v)
    x = lo + static_cast<float>(rng.next_double()) * (hi - lo);
  return v;
}

std::vector<float> add_noise(const std::vector<float>& base, Rng& rng, float amp) {
  std::vector<float> v(base.size());
  for (size_t i = 0; i < v.size(); ++i) {
    const float d = (static_cast<float>(rng.next_double()) - 0.5f) * 2.0f * amp;
    v[i] = std::clamp(base[i] + d, 0.0f, 1.0f);
  }
  return v;
}

}  // namespace

TEST_CASE("mse and psnr formulas") {
  std::vector<float> a(64, 0.0f), b(64, 1.0f);
  CHECK(mse(a, b) == doctest::Approx(1.0).epsilon(1e-12));
  const PsnrResult p = psnr(a, b, 255.0);
  CHECK(p.db == doctest::Approx(48.1308036086791).epsilon(1e-12));
  CHECK_FALSE(p.capped);

  const PsnrResult same = psnr(a, a, 255.0);
  CHECK(same.db == 100.0);
  CHECK(same.capped);

  const std::vector<float> c = {0.0f, 0.5f};
  const std::vector<float> d = {0.1f, 0.25f};
  CHECK(psnr(c, d, 1.0).db == doctest::Approx(14.406919890929878).epsilon(1e-6));

  CHECK_THROWS_AS(mse(a, std::vector<float>(63, 0.0f)), UsageError);
  CHECK_THROWS_AS(mse(std::vector<float>{}, std::vector<float>{}), UsageError);
  CHECK_THROWS_AS(psnr(a, b, 0.0), UsageError);
  CHECK_THROWS_AS(psnr(a, b, -1.0), UsageError);
}

TEST_CASE("yuv psnr weights planes six one one") {
  // Per-plane mean squared errors 0.01, 0.04, 0.02 over four samples each.
  std::vector<float> a(12, 0.5f), b(12, 0.5f);
  for (int i = 0; i < 4; ++i) b[static_cast<size_t>(i)] += 0.1f;
  for (int i = 4; i < 8; ++i) b[static_cast<size_t>(i)] -= 0.2f;
  for (int i = 8; i < 12; ++i)
    b[static_cast<size_t>(i)] += (i % 2 == 0) ? 0.1f : -0.1732050808f;
  const double mv = mse(std::span<const float>(b).subspan(8, 4),
                        std::span<const float>(a).subspan(8, 4));
  CHECK(mv == doctest::Approx(0.02).epsilon(1e-6));
  CHECK(psnr_yuv_611(a, b).db == doctest::Approx(18.23908740944319).epsilon(1e-5));

  // Equal plane errors collapse onto the single-plane value.
  Rng rng(7001);
  std::vector<float> ya = random_plane(rng, 48, 0.1f, 0.9f);
  std::vector<float> yb = add_noise(ya, rng, 0.05f);
  std::vector<float> fa, fb;
  for (int p = 0; p < 3; ++p) {
    fa.insert(fa.end(), ya.begin(), ya.end());
    fb.insert(fb.end(), yb.begin(), yb.end());
  }
  CHECK(psnr_yuv_611(fa, fb).db ==
        doctest::Approx(psnr(ya, yb, 1.0).db).epsilon(1e-9));

  CHECK_THROWS_AS(psnr_yuv_611(std::vector<float>(4, 0.0f), std::vector<float>(4, 0.0f)),
                  UsageError);
}

TEST_CASE("psnr decreases as noise grows") {
  Rng rng(7002);
  const std::vector<float> base = random_plane(rng, 1024, 0.2f, 0.8f);
  std::vector<float> unit(base.size());
  for (float& x : unit) x = static_cast<float>(rng.next_double()) - 0.5f;
  double prev = 1e9;
  for (const float amp : {0.01f, 0.02f, 0.04f, 0.08f}) {
    std::vector<float> noisy(base.size());
    for (size_t i = 0; i < base.size(); ++i) noisy[i] = base[i] + amp * unit[i];
    const double db = psnr(base, noisy, 1.0).db;
    CHECK(db < prev);
    prev = db;
  }
}

TEST_CASE("ms-ssim identity scales and bounds") {
  Rng rng(7003);
  const std::vector<float> a = random_plane(rng, 64 * 64, 0.0f, 1.0f);
  const MsSsimResult same = ms_ssim(a, a, 1, 64, 64);
  CHECK(same.value == 1.0);
  CHECK(same.scales == 3);

  const std::vector<float> big = random_plane(rng, 256 * 256, 0.0f, 1.0f);
  CHECK(ms_ssim(big, big, 1, 256, 256).scales == 5);
  const std::vector<float> tiny = random_plane(rng, 16 * 16, 0.0f, 1.0f);
  CHECK(ms_ssim(tiny, tiny, 1, 16, 16).scales == 1);

  const std::vector<float> b = add_noise(a, rng, 0.1f);
  const MsSsimResult noisy = ms_ssim(a, b, 1, 64, 64);
  CHECK(noisy.value > 0.0);
  CHECK(noisy.value < 1.0);

  CHECK_THROWS_AS(ms_ssim(tiny, tiny, 1, 10, 10), UsageError);
  CHECK_THROWS_AS(ms_ssim(a, a, 1, 64, 63), UsageError);
  CHECK_THROWS_AS(ms_ssim(a, a, 1, 64, 64, 1), UsageError);
}

TEST_CASE("ms-ssim matches a direct reference") {
  Rng rng(7004);
  for (int trial = 0; trial < 10; ++trial) {
    const float amp = 0.02f + 0.03f * static_cast<float>(trial % 4);
    const std::vector<float> a = random_plane(rng, 256 * 256, 0.0f, 1.0f);
    const std::vector<float> b = add_noise(a, rng, amp);
    std::vector<double> da(a.begin(), a.end()), db(b.begin(), b.end());
    const double want = oracle::msssim(da, db, 256, 256, 11);
    const MsSsimResult got = ms_ssim(a, b, 1, 256, 256);
    CHECK(got.scales == 5);
    CHECK(std::fabs(got.value - want) < 1e-4);
  }
}

TEST_CASE("ms-ssim ignores a shared constant shift") {
  Rng rng(7005);
  const std::vector<float> a = random_plane(rng, 64 * 64, 0.2f, 0.7f);
  const std::vector<float> b = add_noise(a, rng, 0.002f);
  std::vector<float> as(a), bs(b);
  for (float& x : as) x += 0.05f;
  for (float& x : bs) x += 0.05f;
  const double v0 = ms_ssim(a, b, 1, 64, 64).value;
  const double v1 = ms_ssim(as, bs, 1, 64, 64).value;
  CHECK(std::fabs(v0 - v1) < 1e-6);
}

TEST_CASE("ms-ssim averages planes") {
  Rng rng(7006);
  const std::vector<float> p0 = random_plane(rng, 32 * 32, 0.0f, 1.0f);
  const std::vector<float> q0 = add_noise(p0, rng, 0.08f);
  const std::vector<float> p1 = random_plane(rng, 32 * 32, 0.0f, 1.0f);
  const std::vector<float> q1 = add_noise(p1, rng, 0.02f);
  std::vector<float> pa(p0), pb(q0);
  pa.insert(pa.end(), p1.begin(), p1.end());
  pb.insert(pb.end(), q1.begin(), q1.end());
  const double v0 = ms_ssim(p0, q0, 1, 32, 32).value;
  const double v1 = ms_ssim(p1, q1, 1, 32, 32).value;
  const double both = ms_ssim(pa, pb, 2, 32, 32).value;
  CHECK(both == doctest::Approx((v0 + v1) / 2.0).epsilon(1e-12));
}

TEST_CASE("training ms-ssim tracks the evaluation path") {
  Rng rng(7007);
  const int64_t h = 64, w = 64;
  std::vector<float> af = random_plane(rng, static_cast<size_t>(h * w), 0.0f, 1.0f);
  std::vector<float> bf = add_noise(af, rng, 0.05f);
  std::vector<double> av(af.begin(), af.end()), bv(bf.begin(), bf.end());
  const Tensor<double> ta({1, 1, h, w}, av);
  const Tensor<double> tb({1, 1, h, w}, bv);
  const double trained = ms_ssim_train(ta, tb, 5).item();
  const double eval = ms_ssim(af, bf, 1, h, w, 5).value;
  CHECK(std::fabs(trained - eval) < 1e-6);
  CHECK(ms_ssim(af, bf, 1, h, w, 5).scales == 4);

  // Identical inputs are exactly one on a patch-sized pair.
  const Tensor<double> tp({1, 1, 32, 32}, std::vector<double>(1024, 0.25));
  CHECK(ms_ssim_train(tp, tp, 5).item() == 1.0);
}

TEST_CASE("training ms-ssim gradient matches finite differences") {
  Rng rng(7008);
  const int64_t h = 8, w = 8;
  std::vector<double> av(static_cast<size_t>(h * w)), bv(av.size());
  for (double& x : av) x = 0.2 + 0.6 * rng.next_double();
  for (size_t i = 0; i < bv.size(); ++i)
    bv[i] = std::clamp(av[i] + 0.1 * (rng.next_double() - 0.5), 0.0, 1.0);

  std::vector<double> grad;
  {
    Tensor<double> ta({1, 1, h, w}, av);
    const Tensor<double> tb({1, 1, h, w}, bv);
    Tape<double> tape;
    tape.watch(ta);
    const Tensor<double> v = ms_ssim_train(ta, tb, 5);
    tape.backward(v);
    const auto g = tape.grad(ta);
    grad.assign(g.begin(), g.end());
  }
  REQUIRE(grad.size() == av.size());

  const double step = 1e-6;
  for (const size_t idx : {size_t{0}, size_t{9}, size_t{27}, size_t{40}, size_t{63}}) {
    std::vector<double> lo(av), hi(av);
    lo[idx] -= step;
    hi[idx] += step;
    const Tensor<double> tb({1, 1, h, w}, bv);
    const double flo = ms_ssim_train(Tensor<double>({1, 1, h, w}, lo), tb, 5).item();
    const double fhi = ms_ssim_train(Tensor<double>({1, 1, h, w}, hi), tb, 5).item();
    const double fd = (fhi - flo) / (2.0 * step);
    CHECK(std::fabs(grad[idx] - fd) <= 1e-6 + 1e-4 * std::fabs(fd));
  }
}

TEST_CASE("training ms-ssim pools planes jointly") {
  Rng rng(7009);
  std::vector<double> av(2 * 8 * 8), bv(av.size());
  for (double& x : av) x = rng.next_double();
  for (size_t i = 0; i < bv.size(); ++i)
    bv[i] = std::clamp(av[i] + 0.2 * (rng.next_double() - 0.5), 0.0, 1.0);
  const Tensor<double> ta({2, 1, 8, 8}, av);
  const Tensor<double> tb({2, 1, 8, 8}, bv);
  const double v = ms_ssim_train(ta, tb, 5).item();
  CHECK(v > 0.0);
  CHECK(v <= 1.0);
  CHECK_THROWS_AS(ms_ssim_train(ta, Tensor<double>({2, 1, 8, 9}), 5), UsageError);
}

namespace {

RdCurve curve_of(std::vector<RdPoint> pts) {
  RdCurve c;
  c.points = std::move(pts);
  c.metric = "psnr";
  return c;
}

}  // namespace

TEST_CASE("bd-rate fixed points") {
  const RdCurve a = curve_of({{0.10, 30.0}, {0.22, 33.0}, {0.45, 36.0}, {0.90, 39.0}});

  SUBCASE("identical curves cost nothing") {
    CHECK(std::fabs(bd_rate(a, a)) < 1e-9);
  }

  SUBCASE("doubling every rate costs one hundred percent") {
    RdCurve b = a;
    for (RdPoint& p : b.points) p.bpp *= 2.0;
    CHECK(std::fabs(bd_rate(a, b) - 100.0) < 0.01);
    CHECK(std::fabs(bd_rate(b, a) + 50.0) < 0.01);
  }

  SUBCASE("swapping the arguments inverts the ratio") {
    const RdCurve b =
        curve_of({{0.12, 30.5}, {0.20, 32.5}, {0.50, 36.5}, {0.80, 38.5}});
    const double ab = bd_rate(a, b);
    const double ba = bd_rate(b, a);
    CHECK(std::fabs((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0) < 0.01);
  }

  SUBCASE("invalid curves are rejected") {
    const RdCurve three = curve_of({{0.1, 30.0}, {0.2, 33.0}, {0.4, 36.0}});
    CHECK_THROWS_AS(bd_rate(three, a), UsageError);
    RdCurve zero = a;
    zero.points[1].bpp = 0.0;
    CHECK_THROWS_AS(bd_rate(a, zero), UsageError);
    const RdCurve apart =
        curve_of({{0.1, 50.0}, {0.2, 53.0}, {0.4, 56.0}, {0.8, 59.0}});
    CHECK_THROWS_AS(bd_rate(a, apart), UsageError);
  }
}

TEST_CASE("bd-rate agrees with trapezoid integration of the fits") {
  const RdCurve a = curve_of(
      {{0.11, 29.8}, {0.24, 33.1}, {0.43, 35.6}, {0.88, 38.9}, {1.60, 41.2}});
  const RdCurve b = curve_of(
      {{0.09, 30.2}, {0.21, 32.9}, {0.40, 35.9}, {0.75, 38.3}, {1.40, 40.8}});
  const LogRateFit fa = fit_log_rate(a);
  const LogRateFit fb = fit_log_rate(b);
  const double lo = std::max(fa.q_lo, fb.q_lo);
  const double hi = std::min(fa.q_hi, fb.q_hi);
  REQUIRE(hi > lo);
  const int steps = 4096;
  double acc = 0.0;
  for (int i = 0; i <= steps; ++i) {
    const double q = lo + (hi - lo) * static_cast<double>(i) / steps;
    const double d = eval_log_rate(fb, q) - eval_log_rate(fa, q);
    acc += (i == 0 || i == steps) ? 0.5 * d : d;
  }
  const double avg = acc / steps;
  const double trap = (std::pow(10.0, avg) - 1.0) * 100.0;
  const double analytic = bd_rate(a, b);
  CHECK(std::fabs(analytic - trap) < 0.1);

  // The fit reproduces the anchor points closely on a smooth curve.
  for (const RdPoint& p : a.points)
    CHECK(std::fabs(eval_log_rate(fa, p.quality) - std::log10(p.bpp)) < 0.05);
}

TEST_CASE("csv emission") {
  const RdCurve a = curve_of({{0.25, 31.5}, {0.5, 34.0}, {1.0, 36.5}, {2.0, 39.0}});
  const std::string csv = rd_curve_csv(a);
  CHECK(csv == "bpp,psnr\n0.25,31.5\n0.5,34\n1,36.5\n2,39\n");

  const std::string table = bd_rate_table_csv(
      {"base", "fast"}, {{0.0, 12.3456}, {-10.9876, 0.0}});
  CHECK(table ==
        "codec,base,fast\nbase,0.0000,12.3456\nfast,-10.9876,0.0000\n");
  CHECK_THROWS_AS(bd_rate_table_csv({"x"}, {{0.0, 1.0}}), UsageError);
}
