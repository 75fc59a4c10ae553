#include "nvrc/entropy.hpp"

#include <cmath>
#include <limits>

#include "nvrc/common.hpp"
#include "nvrc/detmath.hpp"

namespace nvrc {

SymbolRange symbol_support(double mu_s, double sigma_s) {
  const double lo_f = std::floor(mu_s - 8.0 * sigma_s) - 1.0;
  const double hi_f = std::ceil(mu_s + 8.0 * sigma_s) + 1.0;
  SymbolRange r;
  const double lo_c = std::min(std::max(lo_f, static_cast<double>(kSymbolMin)),
                               static_cast<double>(kSymbolMax));
  const double hi_c = std::min(std::max(hi_f, static_cast<double>(kSymbolMin)),
                               static_cast<double>(kSymbolMax));
  r.lo = static_cast<int32_t>(lo_c);
  r.hi = static_cast<int32_t>(hi_c);
  if (r.lo > r.hi) r.lo = r.hi;
  return r;
}

double discretized_pmf(int64_t k, double mu_s, double sigma_s, const SymbolRange& range) {
  if (k < range.lo || k > range.hi) return 0.0;
  if (range.lo == range.hi) return 1.0;
  const double inv = 1.0 / sigma_s;
  const double up = k == range.hi
                        ? 1.0
                        : det_normal_cdf((static_cast<double>(k) + 0.5 - mu_s) * inv);
  const double dn = k == range.lo
                        ? 0.0
                        : det_normal_cdf((static_cast<double>(k) - 0.5 - mu_s) * inv);
  return up - dn;
}

template <typename S>
ContextWeights<S> init_context_weights(const ContextConfig& cfg, int64_t grid_channels,
                                       Rng& rng) {
  if (cfg.kernel < 1 || cfg.kernel % 2 == 0) throw ConfigError("context kernel must be odd");
  if (cfg.width < 2) throw ConfigError("context width must be at least 2");
  const int64_t G = cfg.shared_weights ? 1 : grid_channels;
  const int64_t k = cfg.kernel;
  auto randn = [&rng](std::vector<int64_t> shape, double std) {
    std::vector<S> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(rng.next_normal() * std);
    return Tensor<S>(std::move(shape), std::move(v));
  };
  ContextWeights<S> w;
  const double k3 = static_cast<double>(k * k * k);
  w.w1 = randn({G * cfg.width, 1, k, k, k}, 1.0 / std::sqrt(k3));
  w.b1 = Tensor<S>({G * cfg.width}, S(0));
  w.ln2_g = Tensor<S>({G * cfg.width}, S(1));
  w.ln2_b = Tensor<S>({G * cfg.width}, S(0));
  w.w2 = randn({G * cfg.width, cfg.width, k, k, k},
               1.0 / std::sqrt(static_cast<double>(cfg.width) * k3));
  w.b2 = Tensor<S>({G * cfg.width}, S(0));
  w.ln3_g = Tensor<S>({G * cfg.width}, S(1));
  w.ln3_b = Tensor<S>({G * cfg.width}, S(0));
  w.w3 = randn({G * 2, cfg.width, k, k, k},
               1.0 / std::sqrt(static_cast<double>(cfg.width) * k3));
  w.b3 = Tensor<S>({G * 2}, S(0));
  return w;
}

template <typename S>
std::vector<Tensor<S>*> context_weight_list(ContextWeights<S>& w) {
  return {&w.w1, &w.b1, &w.ln2_g, &w.ln2_b, &w.w2, &w.b2, &w.ln3_g, &w.ln3_b, &w.w3, &w.b3};
}

template <typename S>
Tensor<S> causal_mask(int64_t kernel, bool include_center) {
  const int64_t c = kernel / 2;
  std::vector<S> m(static_cast<size_t>(kernel * kernel * kernel));
  int64_t i = 0;
  for (int64_t dt = 0; dt < kernel; ++dt)
    for (int64_t dh = 0; dh < kernel; ++dh)
      for (int64_t dw = 0; dw < kernel; ++dw, ++i) {
        const bool before =
            dt < c || (dt == c && (dh < c || (dh == c && dw < c)));
        const bool center = dt == c && dh == c && dw == c;
        m[i] = (before || (include_center && center)) ? S(1) : S(0);
      }
  return Tensor<S>({1, 1, kernel, kernel, kernel}, std::move(m));
}

template <typename S>
ContextPrediction<S> context_predict(const Tensor<S>& zhat, int64_t channel,
                                     const ContextWeights<S>& w, const ContextConfig& cfg) {
  if (zhat.dim() != 4) throw ConfigError("context_predict wants a (C,T,H,W) grid");
  const int64_t C = zhat.shape()[0], T = zhat.shape()[1], H = zhat.shape()[2],
                W = zhat.shape()[3];
  if (channel < 0 || channel >= C) throw ConfigError("context_predict channel out of range");
  const int64_t k = cfg.kernel, wd = cfg.width, c = k / 2;
  const int64_t g = cfg.shared_weights ? 0 : channel;

  auto pick = [&](const Tensor<S>& t, int64_t row0, int64_t rows) {
    if (cfg.shared_weights) return t;
    std::vector<int64_t> start(t.shape().size(), 0);
    std::vector<int64_t> size = t.shape();
    start[0] = row0;
    size[0] = rows;
    return slice(t, start, size);
  };

  auto x = slice(zhat, {channel, 0, 0, 0}, {1, T, H, W});
  const std::array<int64_t, 3> pd{c, c, c};

  auto h1 = conv3d(x, mul(pick(w.w1, g * wd, wd), causal_mask<S>(k, false)), pd);
  h1 = gelu(add(h1, reshape(pick(w.b1, g * wd, wd), {wd, 1, 1, 1})));

  auto n2 = layernorm_channels(h1, pick(w.ln2_g, g * wd, wd), pick(w.ln2_b, g * wd, wd));
  auto h2 = conv3d(n2, mul(pick(w.w2, g * wd, wd), causal_mask<S>(k, true)), pd);
  h2 = gelu(add(h2, reshape(pick(w.b2, g * wd, wd), {wd, 1, 1, 1})));

  auto n3 = layernorm_channels(h2, pick(w.ln3_g, g * wd, wd), pick(w.ln3_b, g * wd, wd));
  auto out = conv3d(n3, mul(pick(w.w3, g * 2, 2), causal_mask<S>(k, true)), pd);
  out = add(out, reshape(pick(w.b3, g * 2, 2), {2, 1, 1, 1}));

  ContextPrediction<S> p;
  p.mu = slice(out, {0, 0, 0, 0}, {1, T, H, W});
  p.log_sigma = clamp(slice(out, {1, 0, 0, 0}, {1, T, H, W}), -20.0, 8.0);
  return p;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> combine_dual_axis(const Tensor<S>& mu_out,
                                                  const Tensor<S>& mu_in,
                                                  const Tensor<S>& log_sigma_out,
                                                  const Tensor<S>& log_sigma_in) {
  const int64_t M = mu_out.numel(), N = mu_in.numel();
  auto mo = reshape(mu_out, {M, 1});
  auto mi = reshape(mu_in, {1, N});
  auto so = exp(reshape(log_sigma_out, {M, 1}));
  auto si = exp(reshape(log_sigma_in, {1, N}));
  auto mu = add(mul(mo, si), mi);
  auto sigma = mul(so, si);
  return {mu, sigma};
}

template <typename S>
Tensor<S> rate_bits(const Tensor<S>& symbols, const Tensor<S>& mu, const Tensor<S>& sigma,
                    const Tensor<S>& delta) {
  const double inf = std::numeric_limits<double>::infinity();
  auto mu_s = divide(mu, delta);
  auto sigma_s = clamp(divide(sigma, delta), kSigmaFloor, inf);
  auto up = normal_cdf(divide(sub(add_scalar(symbols, 0.5), mu_s), sigma_s));
  auto dn = normal_cdf(divide(sub(add_scalar(symbols, -0.5), mu_s), sigma_s));
  auto p = clamp(sub(up, dn), 1e-12, 2.0);
  return mul_scalar(sum_all(log(p)), -1.4426950408889634074);
}

#define NVRC_INSTANTIATE_ENTROPY(S)                                                        \
  template ContextWeights<S> init_context_weights<S>(const ContextConfig&, int64_t, Rng&); \
  template std::vector<Tensor<S>*> context_weight_list<S>(ContextWeights<S>&);             \
  template Tensor<S> causal_mask<S>(int64_t, bool);                                        \
  template ContextPrediction<S> context_predict<S>(const Tensor<S>&, int64_t,              \
                                                   const ContextWeights<S>&,               \
                                                   const ContextConfig&);                  \
  template std::pair<Tensor<S>, Tensor<S>> combine_dual_axis<S>(                           \
      const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> rate_bits<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,    \
                                  const Tensor<S>&);

NVRC_INSTANTIATE_ENTROPY(float)
NVRC_INSTANTIATE_ENTROPY(double)

#undef NVRC_INSTANTIATE_ENTROPY

}  // namespace nvrc
