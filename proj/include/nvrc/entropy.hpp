#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "nvrc/rng.hpp"
#include "nvrc/tensor.hpp"

namespace nvrc {

inline constexpr double kSigmaFloor = 0.11;   // symbol-domain scale floor
inline constexpr int32_t kSymbolMin = -32768;  // global coded symbol range
inline constexpr int32_t kSymbolMax = 32767;

struct SymbolRange {
  int32_t lo = 0;
  int32_t hi = 0;
};

// Coding support: +-8 sigma around the mean with one symbol of slack each
// side, clamped to the global range. Always nonempty.
SymbolRange symbol_support(double mu_s, double sigma_s);

// Phi((k+1/2-mu)/sigma) - Phi((k-1/2-mu)/sigma) with the tails folded into
// the range ends, so the pmf sums to one over [range.lo, range.hi].
double discretized_pmf(int64_t k, double mu_s, double sigma_s, const SymbolRange& range);

struct ContextConfig {
  int64_t kernel = 5;  // odd
  int64_t width = 8;   // hidden channels per grid channel
  bool shared_weights = true;  // one stack reused by every grid channel
};

// Three masked-conv blocks per grid channel: causal conv -> GeLU, then twice
// (layernorm -> masked conv -> GeLU), the last conv emitting (mean, log
// scale) and skipping the GeLU. The first block sees one channel, where
// layer normalization would erase the input, so it has none.
template <typename S>
struct ContextWeights {
  Tensor<S> w1, b1;        // (G*width, 1, k,k,k), (G*width)
  Tensor<S> ln2_g, ln2_b;  // (G*width)
  Tensor<S> w2, b2;        // (G*width, width, k,k,k), (G*width)
  Tensor<S> ln3_g, ln3_b;  // (G*width)
  Tensor<S> w3, b3;        // (G*2, width, k,k,k), (G*2)
};

template <typename S>
ContextWeights<S> init_context_weights(const ContextConfig& cfg, int64_t grid_channels,
                                       Rng& rng);

// Canonical serialization order of the weight tensors.
template <typename S>
std::vector<Tensor<S>*> context_weight_list(ContextWeights<S>& w);

// (1,1,k,k,k) binary kernel mask. Offsets strictly before the center in
// (t,h,w) raster order pass; include_center additionally passes the center.
template <typename S>
Tensor<S> causal_mask(int64_t kernel, bool include_center);

template <typename S>
struct ContextPrediction {
  Tensor<S> mu;         // (1,T,H,W), dequantized domain
  Tensor<S> log_sigma;  // (1,T,H,W), clamped to [-20, 8]
};

// Causal prediction for one grid channel of the dequantized grid (C,T,H,W).
// Output at raster position p depends only on inputs strictly before p.
template <typename S>
ContextPrediction<S> context_predict(const Tensor<S>& zhat, int64_t channel,
                                     const ContextWeights<S>& w, const ContextConfig& cfg);

// mu[i,j] = mu_out[i]*sigma_in[j] + mu_in[j]; sigma[i,j] = sigma_out[i]*sigma_in[j],
// with sigma_* = exp(log_sigma_*). Inputs are length-M / length-N vectors.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> combine_dual_axis(const Tensor<S>& mu_out,
                                                  const Tensor<S>& mu_in,
                                                  const Tensor<S>& log_sigma_out,
                                                  const Tensor<S>& log_sigma_in);

// Differentiable total -log2 pmf of symbol-domain values under a Gaussian
// given in the dequantized domain: mu_s = mu/delta, sigma_s = max(sigma/delta,
// kSigmaFloor); pmf floored at 1e-12. All of mu, sigma, delta broadcast
// against symbols.
template <typename S>
Tensor<S> rate_bits(const Tensor<S>& symbols, const Tensor<S>& mu, const Tensor<S>& sigma,
                    const Tensor<S>& delta);

}  // namespace nvrc
