#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "mdt/attention_trace.h"
#include "mdt/image.h"

namespace mdt {

/// Square N×N matrix in row-major double precision.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> values;

  static SquareMatrix identity(std::size_t n);
  double at(std::size_t r, std::size_t c) const { return values[r * n + c]; }
};

/// Per-token relevance with respect to CLS, with the bag's modality tags.
struct RelevanceMap {
  std::vector<double> relevance;
  std::vector<Modality> tags;
  std::size_t cls_index = 0;
  std::size_t grid_side = 0;
};

/// Square patch grid, row-major.
struct Grid {
  std::size_t side = 0;
  std::vector<double> values;
};

/// Product A′_L · … · A′_1 of row-normalized (A + I) matrices, first block
/// applied first. Throws ShapeError on non-square or mismatched matrices.
SquareMatrix rollout_matrix(std::span<const SquareMatrix> attention);

/// Head-averaged unified-stack matrices of one batch row, in block order.
std::vector<SquareMatrix> unified_attention(const AttentionTrace& trace, std::size_t row = 0);

/// Rollout over the self-attention stack; relevance of token j is R[CLS, j].
/// Throws ContractError when the trace has no CLS token.
RelevanceMap attention_rollout(const AttentionTrace& trace, std::size_t row = 0);

struct ModalityShares {
  double image = 0.0;
  double cc = 0.0;
  double lab = 0.0;
  double demographics = 0.0;
};

/// Relevance summed per modality group, CLS excluded, normalized to 1.
ModalityShares modality_shares(const RelevanceMap& map);

/// Relevance of each lab token, in lab order.
std::vector<double> lab_importance(const RelevanceMap& map);

/// Relevance of each chief-complaint token min-max normalized within the
/// group; a constant group maps to zeros.
std::vector<double> word_importance(const RelevanceMap& map);

/// Relevance of the image tokens on the patch grid.
Grid image_relevance_grid(const RelevanceMap& map);

/// Text-to-image cross-attention row of text token `word_index`, averaged
/// over the bidirectional blocks. `row` indexes the image-stream batch.
Grid cross_attention_map(const AttentionTrace& trace, std::size_t word_index, std::size_t row = 0);

/// Sum of the largest ⌈fraction·N⌉ values. Needs at least four values.
double top_quartile_mass(std::span<const double> values, double fraction = 0.25);
/// Same over the non-CLS tokens of a relevance map.
double top_quartile_mass(const RelevanceMap& map, double fraction = 0.25);

/// Min-max normalizes `grid` and upsamples it (nearest) to width × height.
/// A constant grid becomes all zeros.
Image heatmap_image(const Grid& grid, std::size_t width, std::size_t height);

/// Writes `<stem>.mimg` and `<stem>.svg` (cells plus a color bar) and
/// returns the raster. Throws IoError when the files cannot be written.
Image export_heatmap(const Grid& grid, const std::filesystem::path& stem, std::size_t width, std::size_t height);

}  // namespace mdt
