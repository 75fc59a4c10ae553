#include "nvrc/detmath.hpp"

#include <cmath>
#include <limits>

namespace nvrc {

double det_exp(double x) {
  if (x != x) return x;
  if (x < -745.0) return 0.0;
  if (x > 709.5) return std::numeric_limits<double>::infinity();
  // x = k ln2 + r, |r| <= ln2/2; ln2 split hi/lo keeps r exact to ~1 ulp.
  const double inv_ln2 = 1.4426950408889634074;
  const double ln2_hi = 6.93147180369123816490e-1;
  const double ln2_lo = 1.90821492927058770002e-10;
  const double kd = std::floor(std::fma(x, inv_ln2, 0.5));
  const int k = static_cast<int>(kd);
  const double r = std::fma(-kd, ln2_lo, std::fma(-kd, ln2_hi, x));
  // Taylor to r^11; tail below 1e-14 relative on the reduced range.
  double p = 1.0 / 39916800.0;
  p = std::fma(p, r, 1.0 / 3628800.0);
  p = std::fma(p, r, 1.0 / 362880.0);
  p = std::fma(p, r, 1.0 / 40320.0);
  p = std::fma(p, r, 1.0 / 5040.0);
  p = std::fma(p, r, 1.0 / 720.0);
  p = std::fma(p, r, 1.0 / 120.0);
  p = std::fma(p, r, 1.0 / 24.0);
  p = std::fma(p, r, 1.0 / 6.0);
  p = std::fma(p, r, 0.5);
  p = std::fma(p, r, 1.0);
  p = std::fma(p, r, 1.0);
  return std::ldexp(p, k);
}

double det_normal_cdf(double x) {
  const bool neg = x < 0.0;
  const double z = neg ? -x : x;
  if (z > 40.0) return neg ? 0.0 : 1.0;
  const double t = 1.0 / std::fma(0.2316419, z, 1.0);
  double poly = 1.330274429;
  poly = std::fma(poly, t, -1.821255978);
  poly = std::fma(poly, t, 1.781477937);
  poly = std::fma(poly, t, -0.356563782);
  poly = std::fma(poly, t, 0.319381530);
  poly *= t;
  const double pdf = 0.39894228040143267794 * det_exp(-0.5 * z * z);
  const double upper = 1.0 - pdf * poly;
  return neg ? 1.0 - upper : upper;
}

}  // namespace nvrc
