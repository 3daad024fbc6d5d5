#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mdt/tensor.h"

namespace mdt {

/// One scalar entry of a tensor to probe.
struct Probe {
  Tensor tensor;
  std::size_t index = 0;
  std::string label;
};

struct ProbeResult {
  std::string label;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<ProbeResult> probes;
};

/// Compares tape gradients of a scalar `loss` against central differences at
/// the probed entries. rel_error = |a − c| / (|a| + |c| + 1e-8).
///
/// `loss` must be deterministic: it is evaluated twice at the unperturbed
/// point and any difference raises ContractError. h must lie in [1e-5, 1e-2].
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss, const std::vector<Probe>& probes,
                                  double h);

/// Checks every coordinate of x for the scalar function f; returns the
/// maximum relative error.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h);

}  // namespace mdt
