#pragma once

// Shared helpers for unit and acceptance tests.

#include <cmath>
#include <functional>
#include <vector>

#include "cbct/tape.hpp"
#include "cbct/tensor.hpp"

namespace testsup {

using cbct::TapeD;
using cbct::TensorD;

struct GradCheckResult {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Central finite differences in double against the tape's analytic gradient.
// build() must construct the loss from the given input refs alone.
template <class F>
GradCheckResult gradcheck(std::vector<TensorD> inputs, F&& build,
                          double h = 1e-5) {
  GradCheckResult res;

  TapeD tape;
  std::vector<TapeD::Ref> refs;
  refs.reserve(inputs.size());
  for (auto& in : inputs) refs.push_back(tape.input(in));
  TapeD::Ref loss = build(tape, refs);
  tape.backward(loss);
  std::vector<TensorD> analytic;
  for (auto r : refs) analytic.push_back(tape.grad(r));

  auto eval = [&](const std::vector<TensorD>& xs) {
    TapeD t2;
    std::vector<TapeD::Ref> rs;
    for (const auto& x : xs) rs.push_back(t2.constant(x));
    return t2.val(build(t2, rs)).item();
  };

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      auto xs = inputs;
      xs[k][i] += h;
      const double fp = eval(xs);
      xs[k][i] -= 2 * h;
      const double fm = eval(xs);
      const double num = (fp - fm) / (2 * h);
      const double ana = analytic[k][i];
      const double denom = std::max(1e-6, std::abs(num) + std::abs(ana));
      res.max_rel = std::max(res.max_rel, std::abs(num - ana) / denom);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace testsup
