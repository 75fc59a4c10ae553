#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "nvrc/tensor.hpp"

namespace nvrc {

struct GradcheckReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

// Central-difference check of reverse-mode gradients, in double. The relative
// error of each element uses max(|analytic|, |numeric|, 1e-8) as denominator.
// f must be a pure function of the input values.
inline GradcheckReport gradcheck(
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double h = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    for (auto& t : inputs) tape.watch(t);
    Tensor<double> loss = f(inputs);
    tape.backward(loss);
    for (auto& t : inputs) {
      auto g = tape.grad(t);
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(static_cast<size_t>(t.numel()), 0.0);
    }
  }
  GradcheckReport rep;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& vals = inputs[ti].mutable_values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double fp = f(inputs).item();
      vals[i] = keep - h;
      const double fm = f(inputs).item();
      vals[i] = keep;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = analytic[ti][i];
      const double rel =
          std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace nvrc
