#include "mdt/model.h"

#include <cmath>

#include "mdt/autograd.h"
#include "mdt/ops.h"

namespace mdt {

Tensor Model::loss(const Batch& batch, ForwardContext& ctx) { return bce_with_logits(forward(batch, ctx), batch.labels); }

Tensor Model::predict(const Batch& batch) {
  NoGradScope no_grad;
  ForwardContext ctx;
  return sigmoid(forward(batch, ctx));
}

LayerNormParams::LayerNormParams(ParameterStore& store, const std::string& prefix, std::size_t dim)
    : gain(store.add_ones(prefix + ".gain", {dim})), bias(store.add_zeros(prefix + ".bias", {dim})) {}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

LinearParams::LinearParams(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                           Rng& rng)
    : weight(store.add_weight(prefix + ".weight", {in, out}, rng)), bias(store.add_zeros(prefix + ".bias", {out})) {}

Tensor LinearParams::operator()(const Tensor& x) const { return linear(x, weight, bias); }

MlpParams::MlpParams(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
                     std::size_t out, Rng& rng)
    : fc1(store, prefix + ".fc1", dim, hidden, rng), fc2(store, prefix + ".fc2", hidden, out, rng) {}

Tensor MlpParams::operator()(const Tensor& x, double dropout_rate, const ForwardContext& ctx) const {
  Tensor h = dropout(gelu(fc1(x)), dropout_rate, ctx.training, ctx.rng);
  return dropout(fc2(h), dropout_rate, ctx.training, ctx.rng);
}

SelfAttentionBlock::SelfAttentionBlock(ParameterStore& store, const std::string& prefix, std::size_t dim,
                                       std::size_t heads, std::size_t mlp_hidden, double dropout, Rng& rng)
    : norm1(store, prefix + ".norm1", dim),
      norm2(store, prefix + ".norm2", dim),
      query(store, prefix + ".query", dim, dim, rng),
      key(store, prefix + ".key", dim, dim, rng),
      value(store, prefix + ".value", dim, dim, rng),
      output(store, prefix + ".output", dim, dim, rng),
      mlp(store, prefix + ".mlp", dim, mlp_hidden, dim, rng),
      heads_(heads),
      dropout_(dropout) {
  if (heads == 0 || dim % heads != 0) throw ContractError("model width must be divisible by the head count");
}

Tensor SelfAttentionBlock::forward(const Tensor& x, const ForwardContext& ctx, std::span<const std::uint8_t> key_mask,
                                   std::vector<real>* capture) const {
  if (x.rank() != 3 || x.dim(2) != query.weight.dim(0)) {
    throw ShapeError("self-attention block expects width " + std::to_string(query.weight.dim(0)) + ", got " +
                     shape_to_string(x.shape()));
  }
  const Tensor h = norm1(x);
  AttentionOptions opt;
  opt.heads = heads_;
  opt.scale = 1.0 / std::sqrt(static_cast<double>(x.dim(2) / heads_));
  opt.key_mask = key_mask;
  opt.capture = capture;
  Tensor attended = multi_head_attention(query(h), key(h), value(h), opt);
  Tensor x1 = add(x, dropout(output(attended), dropout_, ctx.training, ctx.rng));
  return add(x1, mlp(norm2(x1), dropout_, ctx));
}

}  // namespace mdt
