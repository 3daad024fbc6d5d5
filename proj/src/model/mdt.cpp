#include "mdt/mdt.h"

#include <cmath>

#include "mdt/ops.h"

namespace mdt {

namespace {

void record_attention(const ForwardContext& ctx, std::size_t block, AttentionKind kind, std::vector<real>&& weights,
                      std::size_t batch, std::size_t nq, std::size_t nk) {
  if (!ctx.trace) return;
  ctx.trace->records.push_back({block, kind, Tensor::from({batch, nq, nk}, std::move(weights))});
}

Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
              std::span<const std::uint8_t> key_mask, const ForwardContext& ctx, std::size_t block,
              AttentionKind kind) {
  AttentionOptions opt;
  opt.heads = heads;
  opt.scale = 1.0 / std::sqrt(static_cast<double>(q.dim(2) / heads));
  opt.key_mask = key_mask;
  std::vector<real> captured;
  if (ctx.trace) opt.capture = &captured;
  Tensor out = multi_head_attention(q, k, v, opt);
  record_attention(ctx, block, kind, std::move(captured), q.dim(0), q.dim(1), k.dim(1));
  return out;
}

}  // namespace

void MDTConfig::validate() const {
  layout.validate();
  if (heads == 0 || dim == 0 || dim % heads != 0) {
    throw ContractError("model width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                        " heads");
  }
  if (mlp_ratio == 0) throw ContractError("mlp ratio must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout must lie in [0, 1)");
  if (bidirectional_blocks + self_blocks == 0) throw ContractError("model needs at least one block");
}

QkvProjection::QkvProjection(ParameterStore& store, const std::string& prefix, std::size_t dim, Rng& rng)
    : norm(store, prefix + ".norm", dim),
      query(store, prefix + ".query", dim, dim, rng),
      key(store, prefix + ".key", dim, dim, rng),
      value(store, prefix + ".value", dim, dim, rng) {}

std::array<Tensor, 3> QkvProjection::operator()(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(2) != query.weight.dim(0)) {
    throw ShapeError("qkv projection expects width " + std::to_string(query.weight.dim(0)) + ", got " +
                     shape_to_string(x.shape()));
  }
  const Tensor h = norm(x);
  return {query(h), key(h), value(h)};
}

BidirectionalBlock::BidirectionalBlock(ParameterStore& store, const std::string& prefix, const MDTConfig& config,
                                       bool has_image, Rng& rng)
    : heads_(config.heads),
      lambda_(config.lambda),
      dropout_(config.dropout),
      uni_directional_(config.uni_directional),
      standard_residual_(config.standard_residual) {
  const std::size_t d = config.dim, hidden = config.mlp_ratio * config.dim;
  auto make_stream = [&](const std::string& name) {
    Stream s;
    s.qkv = QkvProjection(store, prefix + "." + name, d, rng);
    s.output = LinearParams(store, prefix + "." + name + ".output", d, d, rng);
    s.norm = LayerNormParams(store, prefix + "." + name + ".norm2", d);
    s.mlp = MlpParams(store, prefix + "." + name + ".mlp", d, hidden, d, rng);
    return s;
  };
  if (has_image) image_stream = make_stream("image");
  text_stream = make_stream("text");
}

Tensor BidirectionalBlock::update(const Stream& s, const Tensor& x, const Tensor& mixed,
                                  const ForwardContext& ctx) const {
  Tensor projected = dropout(s.output(mixed), dropout_, ctx.training, ctx.rng);
  if (standard_residual_) {
    Tensor h = add(x, projected);
    return add(h, s.mlp(s.norm(h), dropout_, ctx));
  }
  return add(x, s.mlp(s.norm(projected), dropout_, ctx));
}

std::pair<Tensor, Tensor> BidirectionalBlock::forward(const Tensor& image, const Tensor& text,
                                                      const ForwardContext& ctx, std::size_t block_index,
                                                      std::span<const std::uint8_t> text_mask) const {
  if (image.defined() && text.defined() &&
      (image.rank() != 3 || text.rank() != 3 || image.dim(2) != text.dim(2) || image.dim(0) != text.dim(0))) {
    throw ShapeError("bidirectional block streams disagree: image " + shape_to_string(image.shape()) + ", text " +
                     shape_to_string(text.shape()));
  }
  if (image.defined() && !image_stream.qkv.query.weight.defined()) {
    throw ContractError("bidirectional block was built without an image stream");
  }
  std::array<Tensor, 3> qi, qt;
  if (image.defined()) qi = image_stream.qkv(image);
  if (text.defined()) qt = text_stream.qkv(text);

  Tensor image_out, text_out;
  if (image.defined()) {
    Tensor mixed = attend(qi[0], qi[1], qi[2], heads_, {}, ctx, block_index, AttentionKind::image_self);
    if (text.defined() && !uni_directional_) {
      Tensor cross = attend(qi[0], qt[1], qt[2], heads_, text_mask, ctx, block_index, AttentionKind::image_to_text);
      mixed = add(mixed, scale(cross, static_cast<real>(lambda_)));
    }
    image_out = update(image_stream, image, mixed, ctx);
  }
  if (text.defined()) {
    Tensor mixed = attend(qt[0], qt[1], qt[2], heads_, text_mask, ctx, block_index, AttentionKind::text_self);
    if (image.defined()) {
      Tensor cross = attend(qt[0], qi[1], qi[2], heads_, {}, ctx, block_index, AttentionKind::text_to_image);
      mixed = add(mixed, scale(cross, static_cast<real>(lambda_)));
    }
    text_out = update(text_stream, text, mixed, ctx);
  }
  return {image_out, text_out};
}

Tensor aggregate_slices(const Tensor& representations, std::size_t slices) {
  if (slices == 0 || representations.rank() != 2 || representations.dim(0) % slices != 0) {
    throw ShapeError("cannot average " + shape_to_string(representations.shape()) + " over " +
                     std::to_string(slices) + " slices");
  }
  if (slices == 1) return representations;
  const std::size_t b = representations.dim(0) / slices, d = representations.dim(1);
  return mean_tokens(reshape(representations, {b, slices, d}));
}

Tensor aggregate_slices(const std::vector<Tensor>& representations) {
  if (representations.empty()) throw ShapeError("aggregate_slices: no representations");
  Tensor total = representations.front();
  for (std::size_t i = 1; i < representations.size(); ++i) total = add(total, representations[i]);
  return scale(total, static_cast<real>(1.0 / static_cast<double>(representations.size())));
}

MDTModel::MDTModel(const MDTConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config.dim;
  if (config.use_image) image_embedder = ImageEmbedder(params_, "image_embed", config.layout, d, rng);
  text_embedder = TextEmbedder(params_, "text_embed", config.layout, d,
                               {config.tokenized_text, config.use_cc, config.use_lab}, rng);
  for (std::size_t i = 0; i < config.bidirectional_blocks; ++i) {
    bidirectional.emplace_back(params_, "bidir." + std::to_string(i), config, config.use_image, rng);
  }
  for (std::size_t i = 0; i < config.self_blocks; ++i) {
    self_attention.emplace_back(params_, "self." + std::to_string(i), d, config.heads, config.mlp_ratio * d,
                                config.dropout, rng);
  }
  if (config.pooling == Pooling::cls) cls_token = params_.add_weight("cls", {1, d}, rng);
  final_norm = LayerNormParams(params_, "final_norm", d);
  head = MlpParams(params_, "head", d, d, config.layout.class_count, rng);
}

std::size_t MDTModel::unified_tokens() const { return unified_tags().size(); }

std::vector<Modality> MDTModel::unified_tags() const {
  std::vector<Modality> tags;
  if (config_.pooling == Pooling::cls) tags.push_back(Modality::cls);
  if (config_.use_image) tags.insert(tags.end(), config_.layout.image_tokens(), Modality::image);
  const std::size_t before = tags.size();
  const std::size_t text = text_embedder.token_count();
  tags.resize(before + text, Modality::cc);
  std::size_t pos = before;
  if (config_.use_cc) pos += config_.tokenized_text ? config_.layout.cc_count : 1;
  const std::size_t labs = config_.use_lab ? (config_.tokenized_text ? config_.layout.lab_count : 1) : 0;
  for (std::size_t i = 0; i < labs; ++i) tags[pos++] = Modality::lab;
  tags[pos++] = Modality::sex;
  tags[pos++] = Modality::age;
  return tags;
}

Tensor MDTModel::represent(const Batch& batch, ForwardContext& ctx) {
  const std::size_t b = batch.size, slices = batch.slices;
  const std::size_t rows = b * slices;

  Tensor image;
  if (config_.use_image) {
    if (!batch.patches.defined()) throw ContractError("model uses images but the batch has none");
    image = image_embedder.embed(batch.patches, config_.dropout, ctx.training, ctx.rng).tokens;
  }
  TokenSequence text_seq = text_embedder.embed(batch);
  Tensor text = dropout(text_seq.tokens, config_.dropout, ctx.training, ctx.rng);
  if (slices > 1) text = repeat_batch(text, slices);

  // Padded chief-complaint positions, only excluded when masking is on.
  std::vector<std::uint8_t> text_mask;
  const bool masking = config_.mask_padding && config_.use_cc && config_.tokenized_text && !config_.layout.structured_cc;
  const std::size_t nt = text.dim(1);
  if (masking) {
    text_mask.assign(rows * nt, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t rec = r / slices;
      for (std::size_t i = 0; i < config_.layout.cc_count; ++i) {
        if (batch.cc_ids[rec * config_.layout.cc_count + i] == kPadId) text_mask[r * nt + i] = 0;
      }
    }
  }

  if (ctx.trace) {
    ctx.trace->text_tags = text_seq.tags;
    ctx.trace->unified_tags = unified_tags();
    ctx.trace->cls_index = config_.pooling == Pooling::cls ? std::optional<std::size_t>(0) : std::nullopt;
    ctx.trace->grid_side = config_.use_image ? config_.layout.grid_side() : 0;
    ctx.trace->slices = slices;
  }

  for (std::size_t i = 0; i < bidirectional.size(); ++i) {
    std::tie(image, text) = bidirectional[i].forward(image, text, ctx, i, text_mask);
  }

  std::vector<Tensor> parts;
  std::size_t prefix = 0;
  if (config_.pooling == Pooling::cls) {
    parts.push_back(broadcast_batch(cls_token, rows));
    prefix += 1;
  }
  if (image.defined()) {
    parts.push_back(image);
    prefix += image.dim(1);
  }
  parts.push_back(text);
  Tensor x = concat_tokens(parts);

  std::vector<std::uint8_t> unified_mask;
  if (masking) {
    const std::size_t n = x.dim(1);
    unified_mask.assign(rows * n, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < nt; ++i) unified_mask[r * n + prefix + i] = text_mask[r * nt + i];
    }
  }

  const std::size_t offset = bidirectional.size();
  for (std::size_t i = 0; i < self_attention.size(); ++i) {
    std::vector<real> captured;
    x = self_attention[i].forward(x, ctx, unified_mask, ctx.trace ? &captured : nullptr);
    record_attention(ctx, offset + i, AttentionKind::unified, std::move(captured), rows, x.dim(1), x.dim(1));
  }
  x = final_norm(x);
  Tensor pooled = config_.pooling == Pooling::cls ? select_token(x, 0) : mean_tokens(x);
  return aggregate_slices(pooled, slices);
}

Tensor MDTModel::forward(const Batch& batch, ForwardContext& ctx) {
  return head(represent(batch, ctx), 0.0, ctx);
}

}  // namespace mdt
