#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "mdt/random.h"

namespace mdt {

/// Row-major H×W×C raster of float32 intensities.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<float> data;

  static Image filled(std::size_t width, std::size_t height, std::size_t channels, float value);

  float& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return data[(y * width + x) * channels + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

// "MIMG" raster file: magic, u32 width, u32 height, u32 channels, float32
// payload, all little-endian.
std::vector<char> encode_mimg(const Image& image);
Image decode_mimg(const std::vector<char>& bytes);
void write_mimg(const std::filesystem::path& path, const Image& image);
Image read_mimg(const std::filesystem::path& path);

/// Bilinear resampling with half-pixel centres: destination pixel i samples
/// source coordinate (i + 0.5)·(in/out) − 0.5, clamped to the valid range.
Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);
Image crop(const Image& image, std::size_t x0, std::size_t y0, std::size_t width, std::size_t height);
Image flip_horizontal(const Image& image);
Image center_crop(const Image& image, std::size_t size);

/// Square crop window inside a width×height source.
struct CropBox {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t size = 0;
};

/// Draws a square crop whose area is a uniform fraction in [min_area, 1] of
/// the source area, capped at the shorter side and placed uniformly.
CropBox sample_crop(std::size_t width, std::size_t height, Rng& rng, double min_area = 0.09);

/// Random-area square crop, bilinear resize to out_size², horizontal flip
/// with probability 1/2.
Image augment_train_image(const Image& image, std::size_t out_size, Rng& rng, double min_area = 0.09);

/// Resize to resize_size² then take the central crop_size² window.
Image preprocess_eval_image(const Image& image, std::size_t resize_size = 256, std::size_t crop_size = 224);

}  // namespace mdt
