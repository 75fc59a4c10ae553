#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "nvrc/common.hpp"
#include "nvrc/gradcheck.hpp"
#include "nvrc/quant.hpp"
#include "nvrc/rng.hpp"

using namespace nvrc;
using T64 = Tensor<double>;

TEST_CASE("axis mode thresholds") {
  CHECK(choose_axis_mode(128, 128, 128) == AxisMode::kDual);
  CHECK(choose_axis_mode(127, 128, 128) == AxisMode::kSingleOut);
  CHECK(choose_axis_mode(128, 127, 128) == AxisMode::kPerTensor);
  CHECK(choose_axis_mode(8, 1, 16) == AxisMode::kPerTensor);    // bias column
  CHECK(choose_axis_mode(16, 72, 16) == AxisMode::kDual);       // desk conv weight
  CHECK(choose_axis_mode(3, 32, 16) == AxisMode::kSingleOut);   // narrow head
}

TEST_CASE("layer params flatten to output-major 2D views") {
  CHECK(layer_param_view({8, 4, 3, 3}).rows == 8);
  CHECK(layer_param_view({8, 4, 3, 3}).cols == 36);
  CHECK(layer_param_view({8}).rows == 8);
  CHECK(layer_param_view({8}).cols == 1);
  CHECK(layer_param_view({5, 2, 1, 3, 3}).cols == 18);
}

TEST_CASE("soft_round has the required fixed points") {
  T64 x({6}, {-2.0, -0.5, 0.0, 0.5, 3.0, 7.5});
  for (double temp : {0.5, 0.3, 0.05}) {
    auto y = soft_round(x, temp);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("soft_round approaches rounding as temperature vanishes") {
  T64 x({2}, {2.4, -3.6});
  auto y = soft_round(x, 0.01);
  CHECK(std::abs(y.values()[0] - 2.0) < 1e-3);
  CHECK(std::abs(y.values()[1] - (-4.0)) < 1e-3);
  // and stays monotone within a cell at operating temperatures
  auto lo = soft_round(T64({1}, {1.2}), 0.3).values()[0];
  auto hi = soft_round(T64({1}, {1.3}), 0.3).values()[0];
  CHECK(lo < hi);
}

TEST_CASE("kumaraswamy noise: uniform case and support") {
  Rng rng(42);
  auto u = kumaraswamy_noise<double>({100000}, 1.0, rng);
  double mean = 0.0;
  for (double v : u.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    mean += v;
  }
  mean /= static_cast<double>(u.numel());
  CHECK(std::abs(mean - 0.5) < 1e-2);
}

TEST_CASE("kumaraswamy noise: histogram mode sits at one half for a=2") {
  // Monte-Carlo oracle: the peak bin of a 1e6-draw histogram.
  Rng rng(43);
  auto u = kumaraswamy_noise<double>({1000000}, 2.0, rng);
  const int bins = 50;
  std::vector<int64_t> h(bins, 0);
  for (double v : u.values()) {
    int b = static_cast<int>(v * bins);
    if (b == bins) b = bins - 1;
    ++h[b];
  }
  int peak = 0;
  for (int b = 1; b < bins; ++b)
    if (h[b] > h[peak]) peak = b;
  const double center = (peak + 0.5) / bins;
  CHECK(std::abs(center - 0.5) <= 0.03);
}

TEST_CASE("kumaraswamy shape below one is rejected") {
  Rng rng(1);
  CHECK_THROWS_AS(kumaraswamy_noise<double>({4}, 0.5, rng), ConfigError);
  CHECK(kumaraswamy_b(2.0) == doctest::Approx(2.5));
  CHECK(kumaraswamy_b(1.0) == doctest::Approx(1.0));
}

TEST_CASE("hard quantization: examples, idempotence, residual bound, ties") {
  T64 z({4}, {1.3, 1.5, -1.5, 0.749});
  T64 d({4}, {0.5, 1.0, 1.0, 0.5});
  auto q = quantize(z, d, QuantView{});
  CHECK(q.symbols.values() == std::vector<double>({3.0, 2.0, -2.0, 1.0}));
  CHECK(q.dequant.values()[0] == doctest::Approx(1.5));

  // residual bound and idempotence
  Rng rng(7);
  std::vector<double> zs(64), ds(64);
  for (auto& v : zs) v = (rng.next_double() - 0.5) * 20.0;
  for (auto& v : ds) v = 0.05 + rng.next_double();
  T64 z2({64}, zs), d2({64}, ds);
  auto q2 = quantize(z2, d2, QuantView{});
  for (int i = 0; i < 64; ++i)
    CHECK(std::abs(q2.dequant.values()[i] - zs[i]) <= ds[i] / 2 + 1e-12);
  auto q3 = quantize(q2.dequant, d2, QuantView{});
  for (int i = 0; i < 64; ++i)
    CHECK(q3.dequant.values()[i] == doctest::Approx(q2.dequant.values()[i]).epsilon(1e-12));
}

TEST_CASE("nonpositive scales raise a numeric error") {
  T64 z({2}, {1.0, 2.0});
  CHECK_THROWS_AS(quantize(z, T64({2}, {1.0, 0.0}), QuantView{}), NumericError);
  CHECK_THROWS_AS(quantize(z, T64({2}, {1.0, -0.5}), QuantView{}), NumericError);
}

TEST_CASE("quant-noise collapses to hard at p=1 and identity at p=0") {
  Rng rng(9);
  std::vector<double> zs(128);
  for (auto& v : zs) v = (rng.next_double() - 0.5) * 8.0;
  T64 z({128}, zs);
  T64 d({1}, {0.25});

  QuantView hard_all{QuantMode::kQuantNoise, 0.3, 1.0, 1.0};
  Rng r1(100);
  auto qa = quantize(z, d, hard_all, &r1);
  auto qh = quantize(z, d, QuantView{});
  CHECK(qa.symbols.values() == qh.symbols.values());

  QuantView none{QuantMode::kQuantNoise, 0.3, 1.0, 0.0};
  Rng r2(100);
  auto qn = quantize(z, d, none, &r2);
  for (int i = 0; i < 128; ++i)
    CHECK(qn.dequant.values()[i] == doctest::Approx(zs[i]).epsilon(1e-12));
}

TEST_CASE("quant-noise mixes exactly the masked elements") {
  T64 z({6}, {0.6, 1.2, -0.4, 2.9, -1.6, 0.2});
  T64 d({1}, {1.0});
  QuantView half{QuantMode::kQuantNoise, 0.3, 1.0, 0.5};
  Rng r(5);
  auto q = quantize(z, d, half, &r);
  for (int i = 0; i < 6; ++i) {
    const double v = q.symbols.values()[i];
    const bool is_hard = v == round_away(z.values()[i]);
    const bool is_pass = v == doctest::Approx(z.values()[i]).epsilon(1e-12);
    CHECK((is_hard || is_pass));
  }
}

TEST_CASE("soft-noise pipeline gradients match finite differences") {
  // Noise is frozen by reseeding identically on every evaluation.
  Rng init(21);
  std::vector<double> zs(12), lds(12);
  for (auto& v : zs) v = (init.next_double() - 0.5) * 6.0;
  for (auto& v : lds) v = -1.5 + init.next_double();
  T64 z({12}, zs), log_delta({12}, lds);

  auto rep = gradcheck(
      [](std::vector<T64>& in) {
        Rng frozen(777);
        auto delta = exp(in[1]);
        QuantView soft{QuantMode::kSoftNoise, 0.42, 1.7, 1.0};
        auto q = quantize(in[0], delta, soft, &frozen);
        return sum_all(mul(q.dequant, q.dequant));
      },
      {z, log_delta}, 1e-6);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("expand_block_scales broadcasts exactly per block support") {
  // grid (2,5,4,4), blocks (2,2,2) -> block tensor (2,3,2,2)
  std::vector<int64_t> gshape{2, 5, 4, 4};
  Tensor<double> blk({2, 3, 2, 2}, 0.0);
  auto base = expand_block_scales(blk, gshape, {2, 2, 2});
  for (double v : base.values()) CHECK(v == doctest::Approx(1.0));

  // bump one block's log-scale; only its support changes
  auto bumped_vals = blk.values();
  const int64_t bt = 2, bh = 0, bw = 1, c = 1;  // tail t-block (covers t=4 only)
  bumped_vals[((c * 3 + bt) * 2 + bh) * 2 + bw] = std::log(3.0);
  Tensor<double> blk2({2, 3, 2, 2}, bumped_vals);
  auto d2 = expand_block_scales(blk2, gshape, {2, 2, 2});
  for (int64_t cc = 0; cc < 2; ++cc)
    for (int64_t t = 0; t < 5; ++t)
      for (int64_t h = 0; h < 4; ++h)
        for (int64_t w = 0; w < 4; ++w) {
          const double v = d2.values()[((cc * 5 + t) * 4 + h) * 4 + w];
          const bool inside = cc == c && t / 2 == bt && h / 2 == bh && w / 2 == bw;
          CHECK(v == doctest::Approx(inside ? 3.0 : 1.0));
        }
}

TEST_CASE("block index arithmetic matches ceiling division") {
  // 200 frames at block 16 -> 13 blocks; last frame maps to block 12.
  CHECK((200 + 15) / 16 == 13);
  CHECK(199 / 16 == 12);
  Tensor<double> blk({1, 13, 6, 10}, 0.25);
  auto d = expand_block_scales(blk, {1, 200, 45, 80}, {16, 8, 8});
  CHECK(d.numel() == 1 * 200 * 45 * 80);
}

TEST_CASE("combine_layer_scales is the exponentiated outer product") {
  T64 lo({1}, {std::log(2.0)});
  T64 li({1}, {std::log(3.0)});
  auto d = combine_layer_scales(lo, li);
  CHECK(d.shape() == std::vector<int64_t>({1, 1}));
  CHECK(d.values()[0] == doctest::Approx(6.0));

  T64 lo2({3}, {std::log(2.0), std::log(4.0), std::log(8.0)});
  T64 zeros({2}, {0.0, 0.0});
  auto rows = combine_layer_scales(lo2, zeros);
  CHECK(rows.shape() == std::vector<int64_t>({3, 2}));
  const std::vector<double> want = {2, 2, 4, 4, 8, 8};
  for (int i = 0; i < 6; ++i)
    CHECK(rows.values()[i] == doctest::Approx(want[i]).epsilon(1e-12));

  // gauge freedom: shifting out-logs by +c and in-logs by -c keeps the product
  T64 li2({2}, {0.3, -0.7});
  auto a = combine_layer_scales(lo2, li2);
  T64 lo3({3}, {std::log(2.0) + 0.9, std::log(4.0) + 0.9, std::log(8.0) + 0.9});
  T64 li3({2}, {0.3 - 0.9, -0.7 - 0.9});
  auto b = combine_layer_scales(lo3, li3);
  for (int i = 0; i < 6; ++i)
    CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-12));
}
