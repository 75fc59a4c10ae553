#pragma once

namespace nvrc {

// exp and the standard normal CDF evaluated with fixed operation order and
// no libm transcendentals, so coding tables come out identical on every
// platform. det_exp holds ~1e-14 relative error; det_normal_cdf follows the
// Abramowitz-Stegun 26.2.17 fit (|error| < 7.5e-8, plenty under the 2^-16
// cdf quantization step).
double det_exp(double x);
double det_normal_cdf(double x);

}  // namespace nvrc
