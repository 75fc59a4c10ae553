#include <cmath>
#include <vector>

#include "doctest.h"
#include "nvrc/common.hpp"
#include "nvrc/detmath.hpp"
#include "nvrc/entropy.hpp"
#include "nvrc/gradcheck.hpp"
#include "nvrc/quant.hpp"
#include "nvrc/rng.hpp"

using namespace nvrc;
using T64 = Tensor<double>;

namespace {
double erf_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }
}  // namespace

TEST_CASE("det_exp tracks libm exp to within 1e-13 relative") {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    const double x = (rng.next_double() - 0.5) * 80.0;
    const double want = std::exp(x);
    const double got = det_exp(x);
    CHECK(std::abs(got - want) <= 1e-13 * want);
  }
  CHECK(det_exp(0.0) == 1.0);
  CHECK(det_exp(-800.0) == 0.0);
  CHECK(std::isinf(det_exp(800.0)));
}

TEST_CASE("det_normal_cdf tracks the erf-based CDF within its fit error") {
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    const double x = (rng.next_double() - 0.5) * 16.0;
    CHECK(std::abs(det_normal_cdf(x) - erf_cdf(x)) < 1e-7);
  }
  CHECK(det_normal_cdf(0.0) == doctest::Approx(0.5).epsilon(1e-7));
  // symmetry holds exactly by construction
  for (double x : {0.3, 1.7, 5.0}) {
    CHECK(det_normal_cdf(-x) == 1.0 - det_normal_cdf(x));
  }
  // monotone nondecreasing on a grid
  double prev = -1.0;
  for (int i = -600; i <= 600; ++i) {
    const double v = det_normal_cdf(i * 0.01);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("symbol support covers eight sigma with slack and clamps") {
  auto r = symbol_support(0.0, 1.0);
  CHECK(r.lo == -9);
  CHECK(r.hi == 9);
  auto r2 = symbol_support(100.25, 0.11);
  CHECK(r2.lo == std::floor(100.25 - 0.88) - 1);
  CHECK(r2.hi == std::ceil(100.25 + 0.88) + 1);
  auto r3 = symbol_support(-40000.0, 1.0);
  CHECK(r3.lo == -32768);
  CHECK(r3.hi == -32768);  // saturated: degenerate single-symbol support
  auto r4 = symbol_support(32760.0, 5.0);
  CHECK(r4.hi == 32767);
}

TEST_CASE("discretized pmf matches the error-function oracle at the center") {
  auto r = symbol_support(0.0, 1.0);
  const double want = erf_cdf(0.5) - erf_cdf(-0.5);  // 0.38292...
  CHECK(discretized_pmf(0, 0.0, 1.0, r) == doctest::Approx(want).epsilon(1e-6));
  CHECK(discretized_pmf(0, 0.0, 1.0, r) == doctest::Approx(0.38292).epsilon(1e-4));
}

TEST_CASE("discretized pmf is symmetric and sums to one with folded tails") {
  for (double sigma : {0.11, 0.7, 1.0, 13.5}) {
    for (double mu : {0.0, -2.25, 7.9}) {
      const auto r = symbol_support(mu, sigma);
      double total = 0.0;
      for (int64_t k = r.lo; k <= r.hi; ++k) {
        const double p = discretized_pmf(k, mu, sigma, r);
        CHECK(p >= 0.0);
        total += p;
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  const auto r = symbol_support(0.0, 2.0);
  for (int64_t k = 1; k <= 5; ++k)
    CHECK(discretized_pmf(k, 0.0, 2.0, r) ==
          doctest::Approx(discretized_pmf(-k, 0.0, 2.0, r)).epsilon(1e-12));
}

TEST_CASE("combine_dual_axis reproduces the closed-form examples") {
  auto [mu, sigma] = combine_dual_axis(T64({1}, {1.0}), T64({1}, {3.0}),
                                       T64({1}, {std::log(2.0)}), T64({1}, {std::log(2.0)}));
  CHECK(mu.values()[0] == doctest::Approx(1.0 * 2.0 + 3.0));  // mu_out*sigma_in + mu_in
  CHECK(sigma.values()[0] == doctest::Approx(4.0));

  auto [mu2, sigma2] = combine_dual_axis(T64({1}, {2.0}), T64({1}, {0.0}),
                                         T64({1}, {std::log(2.0)}), T64({1}, {std::log(3.0)}));
  CHECK(sigma2.values()[0] == doctest::Approx(6.0));
  CHECK(mu2.values()[0] == doctest::Approx(6.0));

  // mu_out = 0 -> columns constant at mu_in
  auto [mu3, s3] = combine_dual_axis(T64({2}, {0.0, 0.0}), T64({3}, {1.0, 2.0, 3.0}),
                                     T64({2}, {0.1, -0.4}), T64({3}, {0.0, 0.2, -0.2}));
  CHECK(mu3.shape() == std::vector<int64_t>({2, 3}));
  for (int j = 0; j < 3; ++j)
    CHECK(mu3.values()[j] == doctest::Approx(mu3.values()[3 + j]));
  (void)s3;

  // sigma_in = 1, mu_in = 0 reduces to a per-row model
  auto [mu4, s4] = combine_dual_axis(T64({2}, {1.5, -2.0}), T64({3}, {0.0, 0.0, 0.0}),
                                     T64({2}, {0.7, -0.3}), T64({3}, {0.0, 0.0, 0.0}));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      CHECK(mu4.values()[i * 3 + j] == doctest::Approx(i == 0 ? 1.5 : -2.0));
      CHECK(s4.values()[i * 3 + j] == doctest::Approx(std::exp(i == 0 ? 0.7 : -0.3)));
    }
}

TEST_CASE("rate_bits: eight quarter-probability symbols cost sixteen bits") {
  // Find sigma with pmf(0) = 1/4 by bisection against the erf oracle.
  auto pmf0 = [](double sigma) { return erf_cdf(0.5 / sigma) - erf_cdf(-0.5 / sigma); };
  double lo = 0.2, hi = 10.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (pmf0(mid) > 0.25 ? lo : hi) = mid;
  }
  const double sigma_q = 0.5 * (lo + hi);

  T64 sym({8}, 0.0);
  auto bits = rate_bits(sym, T64({1}, {0.0}), T64({1}, {sigma_q}), T64({1}, {1.0}));
  CHECK(bits.item() == doctest::Approx(16.0).epsilon(1e-4));
}

TEST_CASE("rate_bits is invariant to joint positive rescaling") {
  Rng rng(3);
  std::vector<double> sy(32), mu(32), sg(32), dl(32);
  for (auto& v : sy) v = std::floor((rng.next_double() - 0.5) * 10.0);
  for (auto& v : mu) v = (rng.next_double() - 0.5) * 4.0;
  for (auto& v : sg) v = 0.5 + rng.next_double();
  for (auto& v : dl) v = 0.1 + rng.next_double();
  auto base = rate_bits(T64({32}, sy), T64({32}, mu), T64({32}, sg), T64({32}, dl)).item();
  const double c = 3.7;
  std::vector<double> mu2(mu), sg2(sg), dl2(dl);
  for (auto& v : mu2) v *= c;
  for (auto& v : sg2) v *= c;
  for (auto& v : dl2) v *= c;
  auto scaled = rate_bits(T64({32}, sy), T64({32}, mu2), T64({32}, sg2), T64({32}, dl2)).item();
  CHECK(scaled == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("rate_bits gradients match finite differences") {
  Rng rng(4);
  std::vector<double> sy(10), mu(10), ls(10), ld(10);
  for (auto& v : sy) v = (rng.next_double() - 0.5) * 6.0;  // relaxed symbols
  for (auto& v : mu) v = (rng.next_double() - 0.5) * 2.0;
  for (auto& v : ls) v = -0.5 + rng.next_double();
  for (auto& v : ld) v = -1.0 + rng.next_double();
  auto rep = gradcheck(
      [](std::vector<T64>& in) {
        return rate_bits(in[0], in[1], exp(in[2]), exp(in[3]));
      },
      {T64({10}, sy), T64({10}, mu), T64({10}, ls), T64({10}, ld)}, 1e-6);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("causal masks partition the kernel") {
  auto a = causal_mask<double>(3, false);
  auto b = causal_mask<double>(3, true);
  double ca = 0, cb = 0;
  for (double v : a.values()) ca += v;
  for (double v : b.values()) cb += v;
  CHECK(ca == 13.0);  // strictly-before half of 27
  CHECK(cb == 14.0);  // plus the center
  // center element: index (1,1,1)
  CHECK(a.values()[(1 * 3 + 1) * 3 + 1] == 0.0);
  CHECK(b.values()[(1 * 3 + 1) * 3 + 1] == 1.0);
  // a raster-later offset stays masked in both
  CHECK(a.values()[(1 * 3 + 1) * 3 + 2] == 0.0);
  CHECK(b.values()[(1 * 3 + 1) * 3 + 2] == 0.0);
  // earlier-in-t offset passes even with later h,w
  CHECK(a.values()[(0 * 3 + 2) * 3 + 2] == 1.0);
}

TEST_CASE("context weights: deterministic init, canonical order, shapes") {
  ContextConfig cfg{3, 4, true};
  Rng r1(10), r2(10);
  auto wa = init_context_weights<double>(cfg, 2, r1);
  auto wb = init_context_weights<double>(cfg, 2, r2);
  CHECK(wa.w1.values() == wb.w1.values());
  CHECK(wa.w3.values() == wb.w3.values());
  CHECK(wa.w1.shape() == std::vector<int64_t>({4, 1, 3, 3, 3}));
  CHECK(wa.w2.shape() == std::vector<int64_t>({4, 4, 3, 3, 3}));
  CHECK(wa.w3.shape() == std::vector<int64_t>({2, 4, 3, 3, 3}));
  auto list = context_weight_list(wa);
  CHECK(list.size() == 10);
  CHECK(list[0] == &wa.w1);
  CHECK(list[9] == &wa.b3);

  ContextConfig unshared{3, 4, false};
  Rng r3(10);
  auto wu = init_context_weights<double>(unshared, 3, r3);
  CHECK(wu.w1.shape() == std::vector<int64_t>({12, 1, 3, 3, 3}));
  CHECK(wu.w3.shape() == std::vector<int64_t>({6, 4, 3, 3, 3}));
}

TEST_CASE("context predictions are strictly causal: exhaustive 6x6x6") {
  ContextConfig cfg{3, 2, true};
  Rng rng(20);
  auto w = init_context_weights<double>(cfg, 1, rng);
  std::vector<double> vals(216);
  for (auto& v : vals) v = (rng.next_double() - 0.5) * 4.0;
  T64 z({1, 6, 6, 6}, vals);
  auto full = context_predict(z, 0, w, cfg);

  for (int64_t p = 0; p < 216; ++p) {
    auto zeroed = vals;
    for (int64_t q = p; q < 216; ++q) zeroed[q] = 0.0;
    auto pred = context_predict(T64({1, 6, 6, 6}, zeroed), 0, w, cfg);
    // Masked taps contribute exactly zero either way, so equality is bitwise.
    CHECK(pred.mu.values()[p] == full.mu.values()[p]);
    CHECK(pred.log_sigma.values()[p] == full.log_sigma.values()[p]);
  }
}

TEST_CASE("all-zero input yields a constant bias pathway away from padding") {
  ContextConfig cfg{3, 4, true};
  Rng rng(21);
  auto w = init_context_weights<double>(cfg, 1, rng);
  for (auto* t : context_weight_list(w)) {
    for (auto& v : t->mutable_values()) v += 0.3 * (rng.next_double() - 0.5);
  }
  T64 z({1, 8, 8, 8}, 0.0);
  auto pred = context_predict(z, 0, w, cfg);
  // Interior margin of three kernel radii in every influenced direction.
  double ref = 0.0;
  bool first = true;
  for (int64_t t = 3; t < 8; ++t)
    for (int64_t h = 3; h <= 4; ++h)
      for (int64_t x = 3; x <= 4; ++x) {
        const double v = pred.mu.values()[(t * 8 + h) * 8 + x];
        if (first) {
          ref = v;
          first = false;
        } else {
          CHECK(v == doctest::Approx(ref).epsilon(1e-10));
        }
      }
}

TEST_CASE("identical inputs give identical predictions across blocks") {
  ContextConfig cfg{3, 2, true};
  Rng rng(22);
  auto w = init_context_weights<double>(cfg, 1, rng);
  std::vector<double> vals(64);
  for (auto& v : vals) v = rng.next_double();
  T64 a({1, 4, 4, 4}, vals);
  T64 b({1, 4, 4, 4}, vals);
  auto pa = context_predict(a, 0, w, cfg);
  auto pb = context_predict(b, 0, w, cfg);
  CHECK(pa.mu.values() == pb.mu.values());
  CHECK(pa.log_sigma.values() == pb.log_sigma.values());
}

TEST_CASE("unshared weights keep channels independent") {
  ContextConfig cfg{3, 2, false};
  Rng rng(23);
  auto w = init_context_weights<double>(cfg, 2, rng);
  std::vector<double> vals(2 * 27);
  for (auto& v : vals) v = rng.next_double();
  T64 z({2, 3, 3, 3}, vals);
  auto p0 = context_predict(z, 0, w, cfg);

  // perturb channel 1 wildly; channel 0 predictions must not move
  auto vals2 = vals;
  for (int64_t i = 27; i < 54; ++i) vals2[i] += 100.0;
  auto p0b = context_predict(T64({2, 3, 3, 3}, vals2), 0, w, cfg);
  CHECK(p0.mu.values() == p0b.mu.values());
}
