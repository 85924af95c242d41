#include "sxda/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sxda {
namespace {

double evaluate(const GradFn& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  Var<double> y = f(tape, vars);
  if (y.size() != 1) throw ContractError("gradcheck: function must be scalar-valued");
  return y.value()[0];
}

}  // namespace

GradcheckResult gradcheck(const GradFn& f, std::span<const Tensor<double>> inputs,
                          GradcheckOptions opts) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
    Var<double> y = f(tape, vars);
    tape.backward(y);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  std::vector<Tensor<double>> probe(inputs.begin(), inputs.end());
  GradcheckResult res;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const std::size_t n = probe[k].size();
    std::size_t step = 1;
    if (opts.max_coords_per_input != 0 && n > opts.max_coords_per_input)
      step = (n + opts.max_coords_per_input - 1) / opts.max_coords_per_input;
    for (std::size_t i = 0; i < n; i += step) {
      const double orig = probe[k][i];
      probe[k][i] = orig + opts.eps;
      const double up = evaluate(f, probe);
      probe[k][i] = orig - opts.eps;
      const double down = evaluate(f, probe);
      probe[k][i] = orig;
      const double num = (up - down) / (2 * opts.eps);
      const double ana = analytic[k][i];
      const double denom = std::max({std::abs(ana), std::abs(num), 1e-12});
      const double err = std::abs(ana - num) / denom;
      ++res.coordinates;
      if (res.coordinates == 1 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.input = k;
        res.index = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace sxda
