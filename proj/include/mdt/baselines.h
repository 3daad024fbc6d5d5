#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mdt/mdt.h"

namespace mdt {

struct VitConfig {
  std::size_t dim = 768;
  std::size_t heads = 12;
  std::size_t blocks = 12;
  std::size_t mlp_hidden = 3072;
  double dropout = 0.3;
  TaskLayout layout = TaskLayout::task1();
};

/// Image-only transformer: patch tokens plus a learned CLS token through
/// standard self-attention blocks; the CLS output feeds a linear classifier.
class VitModel : public Model {
 public:
  explicit VitModel(const VitConfig& config, std::uint64_t seed = 0);
  /// Builds the encoder into an existing store under `prefix` (no head).
  VitModel(const VitConfig& config, ParameterStore& store, const std::string& prefix, Rng& rng);

  Tensor forward(const Batch& batch, ForwardContext& ctx) override;
  std::string kind() const override { return "image-only"; }

  /// CLS representation after the final norm, averaged over slices: [B × D].
  Tensor encode(const Batch& batch, ForwardContext& ctx) const;
  std::size_t token_count() const { return config_.layout.image_tokens() + 1; }

  ImageEmbedder embedder;
  Tensor cls_token;
  std::vector<SelfAttentionBlock> blocks;
  LayerNormParams final_norm;
  LinearParams classifier;

 private:
  void build(ParameterStore& store, const std::string& prefix, Rng& rng);
  VitConfig config_;
};

struct EarlyFusionConfig {
  VitConfig vit;
  /// Width of the chief-complaint word vectors.
  std::size_t word_dim = 768;
  std::size_t hidden = 1024;
  std::size_t branch_out = 512;
  std::size_t fusion_hidden = 1024;
  double dropout = 0.3;

  std::size_t fusion_input() const { return vit.dim + 3 * branch_out; }
};

/// Non-unified early fusion: a ViT image feature and three per-modality MLP
/// features (averaged chief-complaint words, labs, demographics) are
/// concatenated and classified by a fusion MLP.
class EarlyFusionModel : public Model {
 public:
  explicit EarlyFusionModel(const EarlyFusionConfig& config, std::uint64_t seed = 0);

  Tensor forward(const Batch& batch, ForwardContext& ctx) override;
  std::string kind() const override { return "early-fusion"; }

  /// Concatenated feature [B × fusion_input()].
  Tensor fused_features(const Batch& batch, ForwardContext& ctx) const;

  std::unique_ptr<VitModel> vit;
  Tensor word_table;
  struct Branch {
    LinearParams fc1, fc2;
  };
  Branch cc_branch, lab_branch, demo_branch;
  LinearParams fusion1, classifier;

 private:
  Tensor branch(const Branch& b, const Tensor& x, const ForwardContext& ctx) const;
  EarlyFusionConfig config_;
};

/// Late fusion: the mean of an image classifier's and a linear text
/// classifier's probabilities. Training sums the two BCE losses.
class LateFusionModel : public Model {
 public:
  explicit LateFusionModel(const EarlyFusionConfig& config, std::uint64_t seed = 0);

  /// Logit of the fused probability.
  Tensor forward(const Batch& batch, ForwardContext& ctx) override;
  Tensor loss(const Batch& batch, ForwardContext& ctx) override;
  Tensor predict(const Batch& batch) override;
  std::string kind() const override { return "late-fusion"; }

  Tensor image_logits(const Batch& batch, ForwardContext& ctx) const;
  Tensor text_logits(const Batch& batch) const;
  /// Width of the text classifier input: labs + sex + age + word vector.
  std::size_t text_input() const;

  std::unique_ptr<VitModel> vit;
  Tensor word_table;
  LinearParams text_classifier;

 private:
  EarlyFusionConfig config_;
};

/// Elementwise mean of two probability tensors; throws ContractError when an
/// entry leaves [0, 1].
Tensor late_fusion_average(const Tensor& image_probs, const Tensor& text_probs);

/// One row of the ablation matrix.
struct AblationSpec {
  std::size_t ha_blocks = 2;
  bool uni_direction = false;
  bool use_image = true;
  bool use_cc = true;
  bool use_lab = true;
  bool tokenized_text = true;
};

/// Names understood by the CLI: ha0, ha2, ha6, uni, no-cc, no-lab,
/// no-token, no-image.
AblationSpec ablation_by_name(const std::string& name);
const std::vector<std::string>& ablation_names();

/// Applies `spec` to `base`, keeping the total block count of `base`.
MDTConfig ablation_config(const AblationSpec& spec, const MDTConfig& base);
std::unique_ptr<MDTModel> build_ablation(const AblationSpec& spec, const MDTConfig& base, std::uint64_t seed = 0);

}  // namespace mdt
