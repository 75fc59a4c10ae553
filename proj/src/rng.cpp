#include "nvrc/rng.hpp"

#include <cmath>

namespace nvrc {

double Rng::next_normal() {
  // Both uniforms are drawn unconditionally; u1 is kept away from zero.
  double u1 = next_double();
  double u2 = next_double();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

}  // namespace nvrc
