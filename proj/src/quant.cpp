#include "nvrc/quant.hpp"

#include <cmath>

#include "nvrc/common.hpp"

namespace nvrc {

AxisMode choose_axis_mode(int64_t rows, int64_t cols, int64_t threshold) {
  if (rows >= threshold && cols >= threshold) return AxisMode::kDual;
  if (cols >= threshold) return AxisMode::kSingleOut;
  return AxisMode::kPerTensor;
}

Param2D layer_param_view(const std::vector<int64_t>& shape) {
  if (shape.empty()) return {1, 1};
  const int64_t rows = shape[0];
  return {rows, shape_numel(shape) / rows};
}

double kumaraswamy_b(double a) {
  if (a < 1.0) throw ConfigError("kumaraswamy shape must be >= 1");
  return ((a - 1.0) * std::pow(2.0, a) + 1.0) / a;
}

template <typename S>
Tensor<S> soft_round(const Tensor<S>& x, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("soft_round temperature must be positive");
  auto fl = floor(x);
  auto d = add_scalar(sub(x, fl), -0.5);
  const double gain = 0.5 / std::tanh(0.5 / temperature);
  return add(fl, add_scalar(mul_scalar(tanh(mul_scalar(d, 1.0 / temperature)), gain), 0.5));
}

template <typename S>
Tensor<S> kumaraswamy_noise(const std::vector<int64_t>& shape, double a, Rng& rng) {
  const double b = kumaraswamy_b(a);
  const int64_t n = shape_numel(shape);
  std::vector<S> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double u = rng.next_double();
    v[i] = static_cast<S>(std::pow(1.0 - std::pow(1.0 - u, 1.0 / b), 1.0 / a));
  }
  return Tensor<S>(shape, std::move(v));
}

namespace {

template <typename S>
void require_positive(const Tensor<S>& delta) {
  for (S d : delta.values()) {
    if (!(static_cast<double>(d) > 0.0))
      throw NumericError("quantization scale must be strictly positive");
  }
}

}  // namespace

template <typename S>
Quantized<S> quantize(const Tensor<S>& z, const Tensor<S>& delta, const QuantView& view,
                      Rng* rng) {
  require_positive(delta);
  auto scaled = divide(z, delta);
  Quantized<S> q;
  switch (view.mode) {
    case QuantMode::kHard: {
      q.symbols = round_half_away(scaled);
      break;
    }
    case QuantMode::kSoftNoise: {
      if (rng == nullptr) throw ConfigError("soft-noise quantization needs an rng");
      auto u = kumaraswamy_noise<S>(scaled.shape(), view.noise_a, *rng);
      auto inner = soft_round(scaled, view.temperature);
      q.symbols = soft_round(add(inner, add_scalar(u, -0.5)), view.temperature);
      break;
    }
    case QuantMode::kQuantNoise: {
      if (rng == nullptr) throw ConfigError("quant-noise quantization needs an rng");
      const int64_t n = scaled.numel();
      std::vector<S> m(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i)
        m[i] = rng->next_double() < view.hard_prob ? S(1) : S(0);
      Tensor<S> mask(scaled.shape(), std::move(m));
      auto hard = mul(round_half_away(scaled), mask);  // untracked branch
      auto soft = mul(scaled, add_scalar(mul_scalar(mask, -1.0), 1.0));
      q.symbols = add(hard, soft);
      break;
    }
  }
  q.dequant = mul(q.symbols, delta);
  return q;
}

template <typename S>
Tensor<S> expand_block_scales(const Tensor<S>& log_delta_blk,
                              const std::vector<int64_t>& grid_shape,
                              const std::array<int64_t, 3>& block) {
  if (grid_shape.size() != 4 || log_delta_blk.dim() != 4)
    throw ConfigError("expand_block_scales wants 4D (C,T,H,W) shapes");
  auto expanded = expand_blocks(log_delta_blk, grid_shape, {1, block[0], block[1], block[2]});
  return exp(expanded);
}

template <typename S>
Tensor<S> combine_layer_scales(const Tensor<S>& log_delta_out, const Tensor<S>& log_delta_in) {
  auto row = log_delta_out.dim() == 1
                 ? reshape(log_delta_out, {log_delta_out.numel(), 1})
                 : log_delta_out;
  auto col = log_delta_in.dim() == 1 ? reshape(log_delta_in, {1, log_delta_in.numel()})
                                     : log_delta_in;
  return mul(exp(row), exp(col));
}

#define NVRC_INSTANTIATE_QUANT(S)                                                         \
  template Tensor<S> soft_round<S>(const Tensor<S>&, double);                             \
  template Tensor<S> kumaraswamy_noise<S>(const std::vector<int64_t>&, double, Rng&);     \
  template Quantized<S> quantize<S>(const Tensor<S>&, const Tensor<S>&, const QuantView&, \
                                    Rng*);                                                \
  template Tensor<S> expand_block_scales<S>(const Tensor<S>&, const std::vector<int64_t>&, \
                                            const std::array<int64_t, 3>&);               \
  template Tensor<S> combine_layer_scales<S>(const Tensor<S>&, const Tensor<S>&);

NVRC_INSTANTIATE_QUANT(float)
NVRC_INSTANTIATE_QUANT(double)

#undef NVRC_INSTANTIATE_QUANT

}  // namespace nvrc
