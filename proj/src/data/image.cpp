#include "mdt/image.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>

#include "mdt/errors.h"
#include "mdt/parameters.h"

namespace mdt {

namespace {

constexpr char kImageMagic[4] = {'M', 'I', 'M', 'G'};

void put_u32(std::vector<char>& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.insert(out.end(), buf, buf + 4);
}

std::uint32_t get_u32(const std::vector<char>& bytes, std::size_t pos) {
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + pos, 4);
  return v;
}

void require_nonempty(const Image& image, const char* op) {
  if (image.width == 0 || image.height == 0 || image.channels == 0) {
    throw ShapeError(std::string(op) + ": empty image");
  }
}

}  // namespace

Image Image::filled(std::size_t width, std::size_t height, std::size_t channels, float value) {
  Image img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.data.assign(width * height * channels, value);
  return img;
}

std::vector<char> encode_mimg(const Image& image) {
  if (image.data.size() != image.width * image.height * image.channels) {
    throw ShapeError("image payload does not match its dimensions");
  }
  std::vector<char> out(kImageMagic, kImageMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(image.width));
  put_u32(out, static_cast<std::uint32_t>(image.height));
  put_u32(out, static_cast<std::uint32_t>(image.channels));
  const char* raw = reinterpret_cast<const char*>(image.data.data());
  out.insert(out.end(), raw, raw + image.data.size() * sizeof(float));
  return out;
}

Image decode_mimg(const std::vector<char>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kImageMagic, 4) != 0) {
    throw IoError("not an MIMG image");
  }
  Image img;
  img.width = get_u32(bytes, 4);
  img.height = get_u32(bytes, 8);
  img.channels = get_u32(bytes, 12);
  const std::size_t expected = img.width * img.height * img.channels * sizeof(float);
  if (bytes.size() - 16 != expected) {
    throw IoError("image payload size mismatch: expected " + std::to_string(expected) + " bytes, found " +
                  std::to_string(bytes.size() - 16));
  }
  img.data.resize(img.width * img.height * img.channels);
  std::memcpy(img.data.data(), bytes.data() + 16, expected);
  return img;
}

void write_mimg(const std::filesystem::path& path, const Image& image) { write_file(path, encode_mimg(image)); }

Image read_mimg(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing image file: " + path.string());
  try {
    return decode_mimg(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
  require_nonempty(image, "resize_bilinear");
  if (width == 0 || height == 0) throw ShapeError("resize_bilinear: empty target size");
  Image out = Image::filled(width, height, image.channels, 0.0f);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double max_x = static_cast<double>(image.width - 1);
  const double max_y = static_cast<double>(image.height - 1);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = (1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c);
        const double bottom = (1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c);
        out.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  return out;
}

Image crop(const Image& image, std::size_t x0, std::size_t y0, std::size_t width, std::size_t height) {
  if (x0 + width > image.width || y0 + height > image.height || width == 0 || height == 0) {
    throw ShapeError("crop window outside the image");
  }
  Image out = Image::filled(width, height, image.channels, 0.0f);
  for (std::size_t y = 0; y < height; ++y) {
    const float* src = &image.data[((y0 + y) * image.width + x0) * image.channels];
    std::copy(src, src + width * image.channels, &out.data[y * width * image.channels]);
  }
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(y, image.width - 1 - x, c);
    }
  }
  return out;
}

Image center_crop(const Image& image, std::size_t size) {
  if (image.width < size || image.height < size) throw ShapeError("center_crop: image smaller than crop");
  return crop(image, (image.width - size) / 2, (image.height - size) / 2, size, size);
}

CropBox sample_crop(std::size_t width, std::size_t height, Rng& rng, double min_area) {
  if (width == 0 || height == 0) throw ShapeError("sample_crop: empty image");
  if (!(min_area > 0.0 && min_area <= 1.0)) throw ContractError("sample_crop: min_area must lie in (0, 1]");
  const double area = rng.uniform(min_area, 1.0) * static_cast<double>(width * height);
  const std::size_t limit = std::min(width, height);
  auto side = static_cast<std::size_t>(std::lround(std::sqrt(area)));
  side = std::clamp<std::size_t>(side, 1, limit);
  CropBox box;
  box.size = side;
  box.x = static_cast<std::size_t>(rng.below(width - side + 1));
  box.y = static_cast<std::size_t>(rng.below(height - side + 1));
  return box;
}

Image augment_train_image(const Image& image, std::size_t out_size, Rng& rng, double min_area) {
  require_nonempty(image, "augment_train_image");
  if (image.width < out_size || image.height < out_size) {
    throw ShapeError("augment_train_image: source " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + " smaller than " + std::to_string(out_size));
  }
  const CropBox box = sample_crop(image.width, image.height, rng, min_area);
  Image out = resize_bilinear(crop(image, box.x, box.y, box.size, box.size), out_size, out_size);
  if (rng.bernoulli(0.5)) out = flip_horizontal(out);
  return out;
}

Image preprocess_eval_image(const Image& image, std::size_t resize_size, std::size_t crop_size) {
  require_nonempty(image, "preprocess_eval_image");
  if (resize_size < crop_size) throw ShapeError("preprocess_eval_image: crop larger than resized image");
  Image resized = (image.width == resize_size && image.height == resize_size)
                      ? image
                      : resize_bilinear(image, resize_size, resize_size);
  return center_crop(resized, crop_size);
}

}  // namespace mdt
