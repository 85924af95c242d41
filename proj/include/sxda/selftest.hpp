#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sxda/tensor.hpp"

namespace sxda {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// A row-wise softmax over the last axis of a 2-D tensor.
using SoftmaxImpl = std::function<Tensor<double>(const Tensor<double>&)>;

/// True when every row of impl(x) sums to 1 within 1e-12 for random x.
bool softmax_rows_sum_to_one(const SoftmaxImpl& impl, std::uint64_t seed, std::string* detail);

/// Normalizes over the wrong axis. Used as the suite's negative control.
Tensor<double> corrupted_softmax(const Tensor<double>& x);

/// Gradient checks, geometry roundtrips, the identical-frame collapse,
/// fusion convexity, metric closed forms and format roundtrips.
std::vector<PropertyResult> run_selftest(std::uint64_t seed);

}  // namespace sxda
