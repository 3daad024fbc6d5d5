#pragma once

#include <memory>
#include <string>

#include "mdt/attention_trace.h"
#include "mdt/parameters.h"
#include "mdt/random.h"
#include "mdt/tokenizers.h"

namespace mdt {

struct ForwardContext {
  bool training = false;
  /// Dropout stream; required when training with nonzero dropout.
  Rng* rng = nullptr;
  /// When set, blocks append their head-averaged attention weights.
  AttentionTrace* trace = nullptr;
};

/// A multi-label classifier over batches of patient records.
class Model {
 public:
  virtual ~Model() = default;

  /// Raw logits [B × classes].
  virtual Tensor forward(const Batch& batch, ForwardContext& ctx) = 0;

  /// Training objective; mean binary cross-entropy on the logits by default.
  virtual Tensor loss(const Batch& batch, ForwardContext& ctx);

  /// Per-class probabilities [B × classes] in evaluation mode.
  virtual Tensor predict(const Batch& batch);

  virtual std::string kind() const = 0;

  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

 protected:
  ParameterStore params_;
};

/// Small helpers shared by the transformer-style models.
struct LayerNormParams {
  Tensor gain, bias;
  LayerNormParams() = default;
  LayerNormParams(ParameterStore& store, const std::string& prefix, std::size_t dim);
  Tensor operator()(const Tensor& x) const;
};

struct LinearParams {
  Tensor weight, bias;
  LinearParams() = default;
  LinearParams(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

/// Two linear layers with a GELU between them; dropout after each layer.
struct MlpParams {
  LinearParams fc1, fc2;
  MlpParams() = default;
  MlpParams(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
            std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x, double dropout_rate, const ForwardContext& ctx) const;
};

/// Pre-norm transformer block: x + Attn(LN(x)), then h + MLP(LN(h)).
class SelfAttentionBlock {
 public:
  SelfAttentionBlock() = default;
  SelfAttentionBlock(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                     std::size_t mlp_hidden, double dropout, Rng& rng);

  /// `key_mask` is an optional [B × N] attend mask; `capture` receives the
  /// head-averaged weights.
  Tensor forward(const Tensor& x, const ForwardContext& ctx, std::span<const std::uint8_t> key_mask = {},
                 std::vector<real>* capture = nullptr) const;

  LayerNormParams norm1, norm2;
  LinearParams query, key, value, output;
  MlpParams mlp;

 private:
  std::size_t heads_ = 1;
  double dropout_ = 0.0;
};

}  // namespace mdt
