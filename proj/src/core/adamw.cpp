#include "mdt/adamw.h"

#include <cmath>

namespace mdt {

AdamWState make_adamw_state(const ParameterStore& params, const AdamWOptions& options) {
  if (!(options.lr > 0.0)) throw ContractError("AdamW learning rate must be positive");
  if (options.weight_decay < 0.0) throw ContractError("AdamW weight decay must be nonnegative");
  AdamWState state;
  state.options = options;
  for (const auto& e : params.entries()) {
    state.first_moment.emplace_back(e.value.numel(), 0.0);
    state.second_moment.emplace_back(e.value.numel(), 0.0);
  }
  return state;
}

void adamw_step(ParameterStore& params, AdamWState& state) {
  auto& entries = params.entries();
  if (entries.size() != state.first_moment.size()) {
    throw ShapeError("AdamW state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, store has " + std::to_string(entries.size()));
  }
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& t = entries[p].value;
    if (state.first_moment[p].size() != t.numel()) {
      throw ShapeError("AdamW moment buffer does not match parameter " + entries[p].name);
    }
    if (!t.has_grad()) continue;
    for (real g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + entries[p].name);
    }
  }
  const auto& o = state.options;
  if (!(o.lr > 0.0)) throw ContractError("AdamW learning rate must be positive");
  ++state.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - o.lr * o.weight_decay;
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& t = entries[p].value;
    auto data = t.data();
    auto grad = t.grad();
    const bool has_grad = t.has_grad();
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
      double x = static_cast<double>(data[i]) * decay;
      x -= o.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + o.eps);
      data[i] = static_cast<real>(static_cast<float>(x));
    }
  }
}

}  // namespace mdt
