#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mdt/tensor.h"

namespace mdt {

/// Records primitive applications for reverse-mode differentiation.
///
/// Ops record onto the tape that is active on the current thread (see
/// TapeScope) whenever at least one input requires a gradient. Nodes are
/// appended in execution order, which is a topological order, so backward
/// simply walks the list in reverse. A tape can be consumed by backward()
/// exactly once; call reset() before reusing it.
class Tape {
 public:
  using BackwardFn = std::function<void(TensorImpl& output)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<TensorImpl> output, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and replays the recorded rules in reverse.
  /// `on_visit` receives the index of each node as it is replayed.
  void backward(const Tensor& loss, const std::function<void(std::size_t)>& on_visit = {});

  void reset();
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t id() const { return id_; }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::uint64_t id_;
  bool consumed_ = false;
};

/// Makes `tape` the active tape of this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for the scope's lifetime (evaluation passes).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Convenience for a one-shot backward on the active tape.
void backward(const Tensor& loss);

}  // namespace mdt
