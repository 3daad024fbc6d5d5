#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mdt/random.h"
#include "mdt/tensor.h"

// Differentiable primitives. Every op records a backward rule on the active
// tape when one of its inputs requires a gradient. Reductions accumulate
// in double.

namespace mdt {

// -- linear algebra ---------------------------------------------------------

/// [m×k] · [k×n] → [m×n]
Tensor matmul(const Tensor& a, const Tensor& b);

/// Applies x·W + b over the last axis: [..., k] · [k×n] (+ [n]) → [..., n].
/// `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// -- elementwise --------------------------------------------------------------

/// a + b, where b has a's shape or a trailing suffix of it (broadcast over the
/// leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, real factor);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Inverted dropout. Identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool training, Rng* rng);

// -- reductions and layout ----------------------------------------------------

Tensor sum(const Tensor& x);
/// [B×N×D] → [B×D], mean over the middle axis.
Tensor mean_tokens(const Tensor& x);
/// [B×N×D] → [B×D], the row at `index` of each sequence.
Tensor select_token(const Tensor& x, std::size_t index);
Tensor reshape(const Tensor& x, Shape shape);
/// Concatenates rank-3 tensors [B×N_i×D] along the middle axis.
Tensor concat_tokens(const std::vector<Tensor>& parts);
/// Concatenates tensors along the last axis; leading axes must agree.
Tensor concat_features(const std::vector<Tensor>& parts);
/// [B×...] → [(B·times)×...]; each batch element is repeated contiguously.
Tensor repeat_batch(const Tensor& x, std::size_t times);
/// [N×D] → [B×N×D]
Tensor broadcast_batch(const Tensor& x, std::size_t batch);

// -- normalization ------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

// -- embeddings ---------------------------------------------------------------

/// Row lookup: table [V×D], ids laid out as [B×n] → [B×n×D].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, std::size_t batch,
                 std::size_t count);
/// Mean of the embedding rows of the non-`pad_id` ids per sequence: → [B×D].
/// A sequence of only padding maps to the zero vector.
Tensor masked_mean_embedding(const Tensor& table, std::span<const std::int32_t> ids,
                             std::size_t batch, std::size_t count, std::int32_t pad_id = 0);
/// Shared scalar→D projection: values [B×n], weight [D], bias [D] →
/// [B×n×D] with out[b,i] = values[b,i]·weight + bias.
Tensor scalar_tokens(const Tensor& values, const Tensor& weight, const Tensor& bias);

// -- attention ----------------------------------------------------------------

struct AttentionOptions {
  std::size_t heads = 1;
  /// Multiplies QKᵀ before the softmax; usually 1/sqrt(head_dim).
  double scale = 1.0;
  /// Optional [B×Nk] key mask, nonzero = attend. Empty = attend everywhere.
  std::span<const std::uint8_t> key_mask = {};
  /// When set, receives the head-averaged [B×Nq×Nk] attention weights.
  std::vector<real>* capture = nullptr;
};

/// softmax(Q·Kᵀ·scale)·V per head: q [B×Nq×D], k/v [B×Nk×D] → [B×Nq×D].
/// Heads occupy contiguous D/heads slices of the feature axis.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionOptions& options);

/// Single-head softmax(Q·Kᵀ/sqrt(d_k))·V on 2-D operands.
Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, double d_k,
                        std::vector<real>* capture = nullptr);

// -- losses -------------------------------------------------------------------

/// Mean binary cross-entropy on logits, in the overflow-free form
/// max(z,0) - z·y + log(1 + exp(-|z|)). Labels must be 0 or 1.
Tensor bce_with_logits(const Tensor& logits, const Tensor& labels);

/// Mean softmax cross-entropy over rows of logits [B×C] (or a single [C]).
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// Number of worker threads kernels may use (MDT_THREADS, default 1).
std::size_t kernel_threads();

/// Asks the C allocator to recycle large activation buffers instead of
/// mapping fresh pages for each one. No effect outside glibc.
void tune_allocator();

}  // namespace mdt
