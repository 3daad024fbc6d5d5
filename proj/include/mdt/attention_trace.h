#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "mdt/tensor.h"
#include "mdt/tokenizers.h"

namespace mdt {

enum class AttentionKind : std::uint8_t { image_self, text_self, image_to_text, text_to_image, unified };

std::string_view attention_kind_name(AttentionKind kind);

/// Head-averaged attention weights of one block and stream, [B × Nq × Nk].
struct AttentionRecord {
  std::size_t block = 0;
  AttentionKind kind = AttentionKind::unified;
  Tensor weights;
};

/// Attention weights captured during a forward pass, in execution order.
struct AttentionTrace {
  std::vector<AttentionRecord> records;
  /// Modality tags of the unified token bag.
  std::vector<Modality> unified_tags;
  /// Modality tags of the text stream entering the bidirectional blocks.
  std::vector<Modality> text_tags;
  std::optional<std::size_t> cls_index;
  std::size_t grid_side = 0;
  /// Records per input batch element (slices of one record share a text stream).
  std::size_t slices = 1;

  std::vector<const AttentionRecord*> of_kind(AttentionKind kind) const;
};

/// "ATTN" container: one entry per record named "<block>/<kind>", plus
/// "unified_tags", "text_tags", "cls_index" (−1 when absent), "grid_side"
/// and "slices".
std::vector<char> encode_trace(const AttentionTrace& trace);
AttentionTrace decode_trace(const std::vector<char>& bytes);

}  // namespace mdt
