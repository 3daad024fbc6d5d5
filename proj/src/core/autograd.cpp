#include "mdt/autograd.h"

#include <atomic>

namespace mdt {
namespace {

thread_local Tape* current_tape = nullptr;
std::atomic<std::uint64_t> next_tape_id{1};

}  // namespace

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

void Tape::record(std::shared_ptr<TensorImpl> output, BackwardFn backward) {
  if (consumed_) throw ContractError("recording onto a tape that was already consumed by backward()");
  output->tape_id = id_;
  nodes_.push_back({std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss, const std::function<void(std::size_t)>& on_visit) {
  if (!loss.defined()) throw ContractError("backward() on an undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_to_string(loss.shape()));
  }
  if (consumed_) throw ContractError("backward() called twice on the same tape without reset()");
  auto& root = loss.impl();
  if (!root.requires_grad || root.tape_id != id_) {
    throw ContractError("loss is detached: it was not produced by ops recorded on this tape");
  }
  consumed_ = true;
  root.ensure_grad();
  root.grad[0] += 1.0f;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    auto& node = nodes_[i];
    if (node.output->grad.empty()) continue;  // not on a path to the loss
    if (on_visit) on_visit(i);
    node.backward(*node.output);
  }
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
  id_ = next_tape_id.fetch_add(1);
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(current_tape) { current_tape = nullptr; }
NoGradScope::~NoGradScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

void backward(const Tensor& loss) {
  auto* tape = active_tape();
  if (!tape) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

}  // namespace mdt
