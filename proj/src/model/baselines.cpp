#include "mdt/baselines.h"

#include <algorithm>
#include <cmath>

#include "mdt/autograd.h"
#include "mdt/ops.h"

namespace mdt {

VitModel::VitModel(const VitConfig& config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  build(params_, "vit", rng);
  classifier = LinearParams(params_, "vit.classifier", config.dim, config.layout.class_count, rng);
}

VitModel::VitModel(const VitConfig& config, ParameterStore& store, const std::string& prefix, Rng& rng)
    : config_(config) {
  build(store, prefix, rng);
}

void VitModel::build(ParameterStore& store, const std::string& prefix, Rng& rng) {
  config_.layout.validate();
  if (config_.heads == 0 || config_.dim % config_.heads != 0) {
    throw ContractError("ViT width must be divisible by the head count");
  }
  embedder = ImageEmbedder(store, prefix + ".embed", config_.layout, config_.dim, rng);
  cls_token = store.add_weight(prefix + ".cls", {1, config_.dim}, rng);
  for (std::size_t i = 0; i < config_.blocks; ++i) {
    blocks.emplace_back(store, prefix + ".block." + std::to_string(i), config_.dim, config_.heads,
                        config_.mlp_hidden, config_.dropout, rng);
  }
  final_norm = LayerNormParams(store, prefix + ".final_norm", config_.dim);
}

Tensor VitModel::encode(const Batch& batch, ForwardContext& ctx) const {
  if (!batch.patches.defined()) throw ContractError("image model needs image patches");
  Tensor tokens = embedder.embed(batch.patches, config_.dropout, ctx.training, ctx.rng).tokens;
  Tensor x = concat_tokens({broadcast_batch(cls_token, tokens.dim(0)), tokens});
  for (const auto& block : blocks) x = block.forward(x, ctx);
  return aggregate_slices(select_token(final_norm(x), 0), batch.slices);
}

Tensor VitModel::forward(const Batch& batch, ForwardContext& ctx) {
  if (!classifier.weight.defined()) throw ContractError("this ViT is an encoder without a classifier");
  return classifier(encode(batch, ctx));
}

namespace {

Tensor demographics(const Batch& batch) { return concat_features({batch.sex, batch.age}); }

// Averaged chief-complaint word vector, or the structured components.
Tensor complaint_features(const Batch& batch, const TaskLayout& layout, const Tensor& word_table) {
  if (layout.structured_cc) {
    if (!batch.cc_values.defined()) throw ContractError("batch lacks chief-complaint components");
    return batch.cc_values;
  }
  if (batch.cc_ids.size() != batch.size * layout.cc_count) throw ContractError("batch lacks chief-complaint ids");
  return masked_mean_embedding(word_table, batch.cc_ids, batch.size, layout.cc_count);
}

}  // namespace

EarlyFusionModel::EarlyFusionModel(const EarlyFusionConfig& config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  const auto& layout = config.vit.layout;
  vit = std::make_unique<VitModel>(config.vit, params_, "vit", rng);
  std::size_t cc_in = layout.cc_count;
  if (!layout.structured_cc) {
    word_table = params_.add_weight("words", {layout.vocab_size, config.word_dim}, rng);
    cc_in = config.word_dim;
  }
  cc_branch = {LinearParams(params_, "cc.fc1", cc_in, config.hidden, rng),
               LinearParams(params_, "cc.fc2", config.hidden, config.branch_out, rng)};
  lab_branch = {LinearParams(params_, "lab.fc1", layout.lab_count, config.hidden, rng),
                LinearParams(params_, "lab.fc2", config.hidden, config.branch_out, rng)};
  demo_branch = {LinearParams(params_, "demo.fc1", 2, config.branch_out, rng),
                 LinearParams(params_, "demo.fc2", config.branch_out, config.branch_out, rng)};
  fusion1 = LinearParams(params_, "fusion.fc1", config.fusion_input(), config.fusion_hidden, rng);
  classifier = LinearParams(params_, "fusion.classifier", config.fusion_hidden, layout.class_count, rng);
}

Tensor EarlyFusionModel::branch(const Branch& b, const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = dropout(relu(b.fc1(x)), config_.dropout, ctx.training, ctx.rng);
  return dropout(relu(b.fc2(h)), config_.dropout, ctx.training, ctx.rng);
}

Tensor EarlyFusionModel::fused_features(const Batch& batch, ForwardContext& ctx) const {
  if (!batch.patches.defined() || !batch.lab.defined() || !batch.sex.defined() || !batch.age.defined()) {
    throw ContractError("early fusion needs every modality");
  }
  Tensor image = vit->encode(batch, ctx);
  Tensor cc = branch(cc_branch, complaint_features(batch, config_.vit.layout, word_table), ctx);
  Tensor lab = branch(lab_branch, batch.lab, ctx);
  Tensor demo = branch(demo_branch, demographics(batch), ctx);
  return concat_features({image, cc, lab, demo});
}

Tensor EarlyFusionModel::forward(const Batch& batch, ForwardContext& ctx) {
  Tensor h = dropout(relu(fusion1(fused_features(batch, ctx))), config_.dropout, ctx.training, ctx.rng);
  return classifier(h);
}

LateFusionModel::LateFusionModel(const EarlyFusionConfig& config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  const auto& layout = config.vit.layout;
  vit = std::make_unique<VitModel>(config.vit, params_, "vit", rng);
  vit->classifier = LinearParams(params_, "vit.classifier", config.vit.dim, layout.class_count, rng);
  if (!layout.structured_cc) word_table = params_.add_weight("words", {layout.vocab_size, config.word_dim}, rng);
  text_classifier = LinearParams(params_, "text.classifier", text_input(), layout.class_count, rng);
}

std::size_t LateFusionModel::text_input() const {
  const auto& layout = config_.vit.layout;
  return layout.lab_count + 2 + (layout.structured_cc ? layout.cc_count : config_.word_dim);
}

Tensor LateFusionModel::image_logits(const Batch& batch, ForwardContext& ctx) const {
  return vit->classifier(vit->encode(batch, ctx));
}

Tensor LateFusionModel::text_logits(const Batch& batch) const {
  Tensor features = concat_features(
      {batch.lab, demographics(batch), complaint_features(batch, config_.vit.layout, word_table)});
  return text_classifier(features);
}

Tensor LateFusionModel::loss(const Batch& batch, ForwardContext& ctx) {
  return add(bce_with_logits(image_logits(batch, ctx), batch.labels),
             bce_with_logits(text_logits(batch), batch.labels));
}

Tensor LateFusionModel::predict(const Batch& batch) {
  NoGradScope no_grad;
  ForwardContext ctx;
  return late_fusion_average(sigmoid(image_logits(batch, ctx)), sigmoid(text_logits(batch)));
}

Tensor LateFusionModel::forward(const Batch& batch, ForwardContext& ctx) {
  NoGradScope no_grad;
  Tensor p = late_fusion_average(sigmoid(image_logits(batch, ctx)), sigmoid(text_logits(batch)));
  std::vector<real> logits(p.numel());
  auto pd = p.data();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double q = std::clamp(static_cast<double>(pd[i]), 1e-12, 1.0 - 1e-12);
    logits[i] = static_cast<real>(std::log(q / (1.0 - q)));
  }
  return Tensor::from(p.shape(), std::move(logits));
}

Tensor late_fusion_average(const Tensor& image_probs, const Tensor& text_probs) {
  if (image_probs.shape() != text_probs.shape()) {
    throw ShapeError("late fusion: " + shape_to_string(image_probs.shape()) + " vs " +
                     shape_to_string(text_probs.shape()));
  }
  Tensor avg = scale(add(image_probs, text_probs), static_cast<real>(0.5));
  for (real v : avg.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("late fusion produced a probability outside [0, 1]");
  }
  return avg;
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"ha0", "ha2", "ha6", "uni", "no-cc", "no-lab", "no-token", "no-image"};
  return names;
}

AblationSpec ablation_by_name(const std::string& name) {
  AblationSpec s;
  if (name == "ha0") {
    s.ha_blocks = 0;
  } else if (name == "ha2") {
  } else if (name == "ha6") {
    s.ha_blocks = 6;
  } else if (name == "uni") {
    s.uni_direction = true;
  } else if (name == "no-cc") {
    s.use_cc = false;
  } else if (name == "no-lab") {
    s.use_lab = false;
  } else if (name == "no-token") {
    s.tokenized_text = false;
  } else if (name == "no-image") {
    s.use_image = false;
  } else {
    throw ContractError("unknown ablation '" + name + "'");
  }
  return s;
}

MDTConfig ablation_config(const AblationSpec& spec, const MDTConfig& base) {
  const std::size_t total = base.bidirectional_blocks + base.self_blocks;
  if (spec.ha_blocks > total) {
    throw ContractError("ablation asks for " + std::to_string(spec.ha_blocks) + " bidirectional blocks but the model has " +
                        std::to_string(total) + " blocks in total");
  }
  if (spec.uni_direction && spec.ha_blocks == 0) {
    throw ContractError("uni-directional attention needs at least one bidirectional block");
  }
  if (spec.uni_direction && !spec.use_image) {
    throw ContractError("uni-directional attention needs the image stream");
  }
  MDTConfig c = base;
  c.bidirectional_blocks = spec.ha_blocks;
  c.self_blocks = total - spec.ha_blocks;
  c.uni_directional = spec.uni_direction;
  c.use_image = spec.use_image;
  c.use_cc = spec.use_cc;
  c.use_lab = spec.use_lab;
  c.tokenized_text = spec.tokenized_text;
  return c;
}

std::unique_ptr<MDTModel> build_ablation(const AblationSpec& spec, const MDTConfig& base, std::uint64_t seed) {
  return std::make_unique<MDTModel>(ablation_config(spec, base), seed);
}

}  // namespace mdt
