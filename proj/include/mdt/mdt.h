#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mdt/model.h"

namespace mdt {

enum class Pooling { average, cls };

struct MDTConfig {
  std::size_t dim = 768;
  std::size_t heads = 12;
  std::size_t bidirectional_blocks = 2;
  std::size_t self_blocks = 10;
  std::size_t mlp_ratio = 4;
  double dropout = 0.1;
  /// Weight of the cross-modal attention term.
  double lambda = 1.0;
  Pooling pooling = Pooling::average;
  /// Keep only the text-queries-image cross term.
  bool uni_directional = false;
  /// Add a residual around the attention sum as well as the MLP.
  bool standard_residual = false;
  /// Exclude padded chief-complaint positions from attention keys.
  bool mask_padding = false;
  bool use_image = true;
  bool use_cc = true;
  bool use_lab = true;
  bool tokenized_text = true;
  TaskLayout layout = TaskLayout::task1();

  std::size_t head_dim() const { return dim / heads; }
  void validate() const;
};

/// Layer norm followed by query/key/value projections.
struct QkvProjection {
  LayerNormParams norm;
  LinearParams query, key, value;

  QkvProjection() = default;
  QkvProjection(ParameterStore& store, const std::string& prefix, std::size_t dim, Rng& rng);

  /// Returns (Q, K, V), each [B × N × D]; heads are contiguous D/h slices.
  std::array<Tensor, 3> operator()(const Tensor& x) const;
};

/// Two-stream block: each stream attends to itself and, weighted by lambda,
/// to the other stream; one output projection per stream maps the sum, and
/// the update is X' = MLP(LN(sum)) + X.
class BidirectionalBlock {
 public:
  BidirectionalBlock() = default;
  BidirectionalBlock(ParameterStore& store, const std::string& prefix, const MDTConfig& config, bool has_image,
                     Rng& rng);

  /// Either stream may be undefined, in which case the other gets its
  /// intra-modal term only.
  std::pair<Tensor, Tensor> forward(const Tensor& image, const Tensor& text, const ForwardContext& ctx,
                                    std::size_t block_index, std::span<const std::uint8_t> text_mask = {}) const;

  struct Stream {
    QkvProjection qkv;
    LinearParams output;
    LayerNormParams norm;
    MlpParams mlp;
  };
  Stream image_stream, text_stream;

 private:
  Tensor update(const Stream& s, const Tensor& x, const Tensor& mixed, const ForwardContext& ctx) const;

  std::size_t heads_ = 1;
  double lambda_ = 1.0;
  double dropout_ = 0.0;
  bool uni_directional_ = false;
  bool standard_residual_ = false;
};

/// Mean of per-slice representations [B·S × D] → [B × D].
Tensor aggregate_slices(const Tensor& representations, std::size_t slices);
/// Elementwise mean of single representations, summed in list order.
Tensor aggregate_slices(const std::vector<Tensor>& representations);

/// The unified multimodal transformer.
class MDTModel : public Model {
 public:
  explicit MDTModel(const MDTConfig& config, std::uint64_t seed = 0);

  Tensor forward(const Batch& batch, ForwardContext& ctx) override;
  std::string kind() const override { return "irene"; }

  /// Pooled holistic representation per batch element, after slice
  /// averaging: [B × D].
  Tensor represent(const Batch& batch, ForwardContext& ctx);

  const MDTConfig& config() const { return config_; }
  /// Token count of the unified bag, including CLS when present.
  std::size_t unified_tokens() const;
  std::vector<Modality> unified_tags() const;

  ImageEmbedder image_embedder;
  TextEmbedder text_embedder;
  std::vector<BidirectionalBlock> bidirectional;
  std::vector<SelfAttentionBlock> self_attention;
  Tensor cls_token;
  LayerNormParams final_norm;
  MlpParams head;

 private:
  MDTConfig config_;
};

}  // namespace mdt
