#pragma once

#include <cstdint>
#include <vector>

#include "mdt/parameters.h"

namespace mdt {

struct AdamWOptions {
  double lr = 3e-5;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for AdamW, one pair per parameter in store order.
struct AdamWState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
  AdamWOptions options;
};

AdamWState make_adamw_state(const ParameterStore& params, const AdamWOptions& options);

/// One AdamW update from the gradient buffers held by `params`.
///
/// Weight decay is decoupled: p ← p·(1 − lr·wd) before the bias-corrected
/// Adam step. A parameter without a gradient buffer counts as zero gradient.
/// Updated values are rounded to float32, the parameter storage precision.
/// Throws NumericError naming the first parameter with a non-finite gradient;
/// no parameter is modified in that case.
void adamw_step(ParameterStore& params, AdamWState& state);

}  // namespace mdt
