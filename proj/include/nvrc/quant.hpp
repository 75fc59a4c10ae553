#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "nvrc/rng.hpp"
#include "nvrc/tensor.hpp"

namespace nvrc {

// How a coded tensor's quantization scale (and Gaussian) is parameterized.
// A per-output-row vector pays off once rows are wide, so: dual needs both
// extents at the threshold, single-out needs wide rows (cols >= threshold),
// anything narrower gets one scalar.
enum class AxisMode { kPerTensor, kSingleOut, kDual };

AxisMode choose_axis_mode(int64_t rows, int64_t cols, int64_t threshold);

// 2D view of a layer parameter: output features first, everything else
// flattened into columns. Rank-1 tensors become a column vector.
struct Param2D {
  int64_t rows;
  int64_t cols;
};
Param2D layer_param_view(const std::vector<int64_t>& shape);

// b such that Kumaraswamy(a, b) has its mode at 1/2; a = 1 gives uniform.
double kumaraswamy_b(double a);

enum class QuantMode { kHard, kSoftNoise, kQuantNoise };

struct QuantView {
  QuantMode mode = QuantMode::kHard;
  double temperature = 0.3;  // soft-noise
  double noise_a = 1.0;      // soft-noise Kumaraswamy shape
  double hard_prob = 1.0;    // quant-noise probability of hard rounding
};

template <typename S>
struct Quantized {
  Tensor<S> symbols;  // symbol domain: z/delta, rounded or relaxed per view
  Tensor<S> dequant;  // symbols * delta
};

// y = floor(x) + tanh(d/T)/(2 tanh(1/(2T))) + 1/2, d = x - floor(x) - 1/2.
// Fixed points at integers and half-integers; approaches rounding as T -> 0.
template <typename S>
Tensor<S> soft_round(const Tensor<S>& x, double temperature);

// Inverse-CDF samples of Kumaraswamy(a, b(a)) on [0,1], untracked.
template <typename S>
Tensor<S> kumaraswamy_noise(const std::vector<int64_t>& shape, double a, Rng& rng);

// Hard: symbols = round(z/delta) half away from zero (no gradient).
// Soft-noise: symbols = s_T(s_T(z/delta) + u - 1/2), u ~ Kumaraswamy(a,b(a)).
// Quant-noise: each element is hard-rounded with probability hard_prob and
// passed through unrounded otherwise; rounded elements carry no gradient.
// rng may be null for hard mode only. Throws NumericError on delta <= 0.
template <typename S>
Quantized<S> quantize(const Tensor<S>& z, const Tensor<S>& delta, const QuantView& view,
                      Rng* rng = nullptr);

// delta_grid = exp(log_delta_blk broadcast blockwise over the grid shape).
// log_delta_blk: (C, ceil(T/bT), ceil(H/bH), ceil(W/bW)); grid (C,T,H,W).
template <typename S>
Tensor<S> expand_block_scales(const Tensor<S>& log_delta_blk,
                              const std::vector<int64_t>& grid_shape,
                              const std::array<int64_t, 3>& block);

// Outer product of exponentiated per-axis logs: delta[i,j] =
// exp(log_out[i]) * exp(log_in[j]). log_out: (M) or (M,1); log_in: (N) or (1,N).
template <typename S>
Tensor<S> combine_layer_scales(const Tensor<S>& log_delta_out, const Tensor<S>& log_delta_in);

}  // namespace nvrc
