#include "mdt/interpret.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>

namespace mdt {

namespace {

SquareMatrix slice_row(const Tensor& weights, std::size_t row) {
  if (weights.rank() != 3 || weights.dim(1) != weights.dim(2)) {
    throw ShapeError("rollout needs square attention matrices, got " + shape_to_string(weights.shape()));
  }
  if (row >= weights.dim(0)) throw ContractError("batch row " + std::to_string(row) + " is out of range");
  const std::size_t n = weights.dim(1);
  SquareMatrix m{n, std::vector<double>(n * n)};
  auto d = weights.data();
  for (std::size_t i = 0; i < n * n; ++i) m.values[i] = d[row * n * n + i];
  return m;
}

std::vector<std::size_t> tagged(const RelevanceMap& map, Modality m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < map.tags.size(); ++i) {
    if (map.tags[i] == m) out.push_back(i);
  }
  return out;
}

// Piecewise-linear approximation of the viridis colormap.
std::array<int, 3> heat_color(double v) {
  static constexpr double stops[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  v = std::clamp(v, 0.0, 1.0) * 4.0;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(v), 3);
  const double t = v - static_cast<double>(i);
  std::array<int, 3> rgb{};
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<int>(std::lround(stops[i][c] + t * (stops[i + 1][c] - stops[i][c])));
  return rgb;
}

std::string hex_color(double v) {
  const auto rgb = heat_color(v);
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

}  // namespace

SquareMatrix SquareMatrix::identity(std::size_t n) {
  SquareMatrix m{n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) m.values[i * n + i] = 1.0;
  return m;
}

SquareMatrix rollout_matrix(std::span<const SquareMatrix> attention) {
  if (attention.empty()) throw ContractError("rollout needs at least one attention matrix");
  const std::size_t n = attention.front().n;
  SquareMatrix result = SquareMatrix::identity(n);
  std::vector<double> normalized(n * n), product(n * n);
  for (const auto& a : attention) {
    if (a.n != n || a.values.size() != n * n) throw ShapeError("rollout matrices must share one square shape");
    for (std::size_t r = 0; r < n; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        normalized[r * n + c] = a.values[r * n + c] + (r == c ? 1.0 : 0.0);
        sum += normalized[r * n + c];
      }
      for (std::size_t c = 0; c < n; ++c) normalized[r * n + c] /= sum;
    }
    // result ← A′ · result
    std::fill(product.begin(), product.end(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < n; ++k) {
        const double w = normalized[r * n + k];
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < n; ++c) product[r * n + c] += w * result.values[k * n + c];
      }
    }
    result.values.swap(product);
  }
  return result;
}

std::vector<SquareMatrix> unified_attention(const AttentionTrace& trace, std::size_t row) {
  std::vector<SquareMatrix> out;
  for (const auto* rec : trace.of_kind(AttentionKind::unified)) out.push_back(slice_row(rec->weights, row));
  return out;
}

RelevanceMap attention_rollout(const AttentionTrace& trace, std::size_t row) {
  if (!trace.cls_index) throw ContractError("attention rollout needs a model run with a CLS token");
  const auto matrices = unified_attention(trace, row);
  if (matrices.empty()) throw ContractError("trace has no self-attention matrices");
  const SquareMatrix r = rollout_matrix(matrices);
  const std::size_t cls = *trace.cls_index;
  if (cls >= r.n) throw ContractError("CLS index is outside the token bag");
  if (!trace.unified_tags.empty() && trace.unified_tags.size() != r.n) {
    throw ShapeError("trace has " + std::to_string(trace.unified_tags.size()) + " tags for " + std::to_string(r.n) +
                     " tokens");
  }
  RelevanceMap map;
  map.relevance.assign(r.values.begin() + static_cast<std::ptrdiff_t>(cls * r.n),
                       r.values.begin() + static_cast<std::ptrdiff_t>((cls + 1) * r.n));
  map.tags = trace.unified_tags;
  map.cls_index = cls;
  map.grid_side = trace.grid_side;
  return map;
}

ModalityShares modality_shares(const RelevanceMap& map) {
  if (map.tags.size() != map.relevance.size()) throw ShapeError("relevance map needs one tag per token");
  ModalityShares s;
  for (std::size_t i = 0; i < map.tags.size(); ++i) {
    const double v = map.relevance[i];
    switch (map.tags[i]) {
      case Modality::image: s.image += v; break;
      case Modality::cc: s.cc += v; break;
      case Modality::lab: s.lab += v; break;
      case Modality::sex:
      case Modality::age: s.demographics += v; break;
      case Modality::cls: break;
    }
  }
  const double total = s.image + s.cc + s.lab + s.demographics;
  if (!(total > 0.0)) throw ContractError("relevance is zero on every non-CLS token");
  s.image /= total;
  s.cc /= total;
  s.lab /= total;
  s.demographics /= total;
  return s;
}

std::vector<double> lab_importance(const RelevanceMap& map) {
  std::vector<double> out;
  for (std::size_t i : tagged(map, Modality::lab)) out.push_back(map.relevance[i]);
  return out;
}

std::vector<double> word_importance(const RelevanceMap& map) {
  std::vector<double> out;
  for (std::size_t i : tagged(map, Modality::cc)) out.push_back(map.relevance[i]);
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double min = *lo, range = *hi - *lo;
  for (double& v : out) v = range > 0.0 ? (v - min) / range : 0.0;
  return out;
}

Grid image_relevance_grid(const RelevanceMap& map) {
  const auto idx = tagged(map, Modality::image);
  if (idx.size() != map.grid_side * map.grid_side || idx.empty()) {
    throw ShapeError(std::to_string(idx.size()) + " image tokens do not fill a " + std::to_string(map.grid_side) +
                     "² grid");
  }
  Grid g{map.grid_side, {}};
  for (std::size_t i : idx) g.values.push_back(map.relevance[i]);
  return g;
}

Grid cross_attention_map(const AttentionTrace& trace, std::size_t word_index, std::size_t row) {
  const auto records = trace.of_kind(AttentionKind::text_to_image);
  if (records.empty()) throw ContractError("trace has no text-to-image cross attention");
  Grid g;
  for (const auto* rec : records) {
    const Tensor& w = rec->weights;
    if (word_index >= w.dim(1)) {
      throw ContractError("word index " + std::to_string(word_index) + " is out of range for " +
                          std::to_string(w.dim(1)) + " text tokens");
    }
    if (row >= w.dim(0)) throw ContractError("batch row " + std::to_string(row) + " is out of range");
    const std::size_t nk = w.dim(2);
    if (g.values.empty()) {
      g.side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(nk))));
      if (g.side * g.side != nk) throw ShapeError(std::to_string(nk) + " image tokens do not form a square grid");
      g.values.assign(nk, 0.0);
    } else if (g.values.size() != nk) {
      throw ShapeError("cross-attention blocks disagree on the image token count");
    }
    auto d = w.data();
    const std::size_t base = (row * w.dim(1) + word_index) * nk;
    for (std::size_t j = 0; j < nk; ++j) g.values[j] += d[base + j];
  }
  for (double& v : g.values) v /= static_cast<double>(records.size());
  return g;
}

double top_quartile_mass(std::span<const double> values, double fraction) {
  if (values.size() < 4) throw ContractError("top-quartile mass needs at least four tokens");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("fraction must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(values.size()) - 1e-9));
  std::vector<double> sorted(values.begin(), values.end());
  std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end(),
                    std::greater<>());
  return std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), 0.0);
}

double top_quartile_mass(const RelevanceMap& map, double fraction) {
  std::vector<double> v;
  for (std::size_t i = 0; i < map.relevance.size(); ++i) {
    if (i < map.tags.size() && map.tags[i] == Modality::cls) continue;
    v.push_back(map.relevance[i]);
  }
  return top_quartile_mass(v, fraction);
}

Image heatmap_image(const Grid& grid, std::size_t width, std::size_t height) {
  if (grid.side == 0 || grid.values.size() != grid.side * grid.side) throw ShapeError("heatmap grid is not square");
  if (width == 0 || height == 0) throw ContractError("heatmap size must be positive");
  for (double v : grid.values) {
    if (!std::isfinite(v)) throw NumericError("heatmap grid has a non-finite value");
  }
  const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
  const double min = *lo, range = *hi - *lo;
  Image img = Image::filled(width, height, 1, 0.0f);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t gy = y * grid.side / height;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t gx = x * grid.side / width;
      const double v = grid.values[gy * grid.side + gx];
      img.at(y, x) = range > 0.0 ? static_cast<float>((v - min) / range) : 0.0f;
    }
  }
  return img;
}

Image export_heatmap(const Grid& grid, const std::filesystem::path& stem, std::size_t width, std::size_t height) {
  Image img = heatmap_image(grid, width, height);
  auto mimg = stem;
  mimg += ".mimg";
  write_mimg(mimg, img);

  const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
  const double min = *lo, range = *hi - *lo;
  const double cell = 16.0;
  const double side = cell * static_cast<double>(grid.side);
  const double bar_x = side + 12.0;
  std::string svg;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" viewBox=\"0 0 %g %g\">\n",
                bar_x + 70.0, side, bar_x + 70.0, side);
  svg += buf;
  for (std::size_t gy = 0; gy < grid.side; ++gy) {
    for (std::size_t gx = 0; gx < grid.side; ++gx) {
      const double v = grid.values[gy * grid.side + gx];
      const double t = range > 0.0 ? (v - min) / range : 0.0;
      std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"%s\"/>\n",
                    cell * static_cast<double>(gx), cell * static_cast<double>(gy), cell, cell, hex_color(t).c_str());
      svg += buf;
    }
  }
  const int steps = 32;
  const double step_h = side / steps;
  for (int i = 0; i < steps; ++i) {
    const double t = 1.0 - (i + 0.5) / steps;
    std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"14\" height=\"%g\" fill=\"%s\"/>\n", bar_x,
                  step_h * i, step_h + 0.5, hex_color(t).c_str());
    svg += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"10\" font-size=\"9\" font-family=\"sans-serif\">%.3g</text>\n"
                "<text x=\"%g\" y=\"%g\" font-size=\"9\" font-family=\"sans-serif\">%.3g</text>\n",
                bar_x + 18.0, *hi, bar_x + 18.0, side - 2.0, *lo);
  svg += buf;
  svg += "</svg>\n";

  auto svg_path = stem;
  svg_path += ".svg";
  std::ofstream out(svg_path, std::ios::binary);
  if (!out) throw IoError("cannot write heatmap file: " + svg_path.string());
  out << svg;
  if (!out) throw IoError("cannot write heatmap file: " + svg_path.string());
  return img;
}

}  // namespace mdt
