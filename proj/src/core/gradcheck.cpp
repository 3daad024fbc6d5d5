#include "mdt/gradcheck.h"

#include <cmath>

#include "mdt/autograd.h"

namespace mdt {
namespace {

double evaluate(const std::function<Tensor()>& loss) {
  NoGradScope no_grad;
  auto value = loss();
  if (value.numel() != 1) throw ShapeError("gradient check needs a scalar function");
  return value.item();
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss, const std::vector<Probe>& probes,
                                  double h) {
  if (!(h >= 1e-5 && h <= 1e-2)) throw ContractError("finite difference step must lie in [1e-5, 1e-2]");
  const double first = evaluate(loss);
  const double second = evaluate(loss);
  if (first != second) {
    throw ContractError("function under gradient check is not deterministic (is dropout active?)");
  }

  for (const auto& p : probes) p.tensor.impl().grad.clear();
  std::vector<bool> had_grad_flag;
  for (const auto& p : probes) {
    had_grad_flag.push_back(p.tensor.requires_grad());
    p.tensor.impl().requires_grad = true;
  }
  {
    Tape tape;
    TapeScope scope(tape);
    auto value = loss();
    if (value.numel() != 1) throw ShapeError("gradient check needs a scalar function");
    tape.backward(value);
  }

  GradCheckReport report;
  for (const auto& p : probes) {
    auto& impl = p.tensor.impl();
    if (p.index >= impl.data.size()) throw ShapeError("probe index out of range for " + p.label);
    const double analytic = impl.grad.empty() ? 0.0 : impl.grad[p.index];
    const real original = impl.data[p.index];
    impl.data[p.index] = static_cast<real>(original + h);
    const double up = evaluate(loss);
    impl.data[p.index] = static_cast<real>(original - h);
    const double down = evaluate(loss);
    impl.data[p.index] = original;
    // the step actually representable in storage precision
    const double step = static_cast<double>(static_cast<real>(original + h)) -
                        static_cast<double>(static_cast<real>(original - h));
    const double numeric = (up - down) / step;
    const double rel = std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-8);
    report.probes.push_back({p.label, analytic, numeric, rel});
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  for (std::size_t i = 0; i < probes.size(); ++i) {
    probes[i].tensor.impl().requires_grad = had_grad_flag[i];
    probes[i].tensor.impl().grad.clear();
  }
  return report;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  std::vector<Probe> probes;
  for (std::size_t i = 0; i < x.numel(); ++i) probes.push_back({x, i, "x[" + std::to_string(i) + "]"});
  return finite_diff_check([&] { return f(x); }, probes, h).max_rel_error;
}

}  // namespace mdt
