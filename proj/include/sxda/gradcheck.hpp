#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "sxda/tape.hpp"

namespace sxda {

/// Scalar-valued function of one or more tensors, built on a fresh tape.
using GradFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct GradcheckResult {
  double max_rel_error = 0;
  std::size_t input = 0;  // location of the worst coordinate
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  std::size_t coordinates = 0;
};

struct GradcheckOptions {
  double eps = 1e-5;
  /// 0 checks every coordinate; otherwise at most this many per input,
  /// chosen evenly across the buffer.
  std::size_t max_coords_per_input = 0;
};

/// Compares tape gradients against central differences. The error of a
/// coordinate is |a - n| / max(|a|, |n|, 1e-12).
GradcheckResult gradcheck(const GradFn& f, std::span<const Tensor<double>> inputs,
                          GradcheckOptions opts = {});

inline GradcheckResult gradcheck(const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
                                 const Tensor<double>& x, double eps = 1e-5) {
  GradFn g = [&f](Tape<double>& t, std::span<const Var<double>> v) { return f(t, v[0]); };
  return gradcheck(g, std::span<const Tensor<double>>(&x, 1), GradcheckOptions{eps, 0});
}

}  // namespace sxda
