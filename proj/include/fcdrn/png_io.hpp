// 8-bit PNG read/write through libpng's simplified API.
#pragma once

#include <png.h>

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "fcdrn/tensor.hpp"

namespace fcdrn {

struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

inline Image8 read_png(const std::string& path, int channels) {
  if (channels != 1 && channels != 3) throw Error("read_png: channels must be 1 or 3");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&img, path.c_str()) == 0) {
    throw DataError("cannot read PNG " + path + ": " + img.message);
  }
  // Index images must keep their raw values; refuse colour-mapped or multi-channel label files.
  if (channels == 1 && (img.format & (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_COLORMAP)) != 0) {
    png_image_free(&img);
    throw DataError("label PNG " + path + " is not single-channel");
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out{static_cast<int>(img.height), static_cast<int>(img.width), channels, {}};
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr) == 0) {
    throw DataError("cannot decode PNG " + path + ": " + img.message);
  }
  return out;
}

inline void write_png(const std::string& path, const Image8& im) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (im.pixels.size() != static_cast<std::size_t>(im.width) * im.height * im.channels) {
    throw ShapeError("write_png: pixel buffer does not match " + std::to_string(im.height) + "x" +
                     std::to_string(im.width) + "x" + std::to_string(im.channels));
  }
  if (png_image_write_to_file(&img, path.c_str(), 0, im.pixels.data(), 0, nullptr) == 0) {
    throw DataError("cannot write PNG " + path + ": " + img.message);
  }
}

/// [1, 3, H, W] in [0, 1].
inline Tensor<float> rgb_to_tensor(const Image8& im) {
  Tensor<float> t({1, 3, im.height, im.width});
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        t.at(0, c, y, x) = static_cast<float>(im.pixels[(static_cast<std::size_t>(y) * im.width + x) * 3 + c]) / 255.0f;
      }
  return t;
}

inline Image8 tensor_to_rgb(const Tensor<float>& t) {
  Image8 im{t.h(), t.w(), 3, std::vector<std::uint8_t>(static_cast<std::size_t>(t.h()) * t.w() * 3)};
  for (int y = 0; y < t.h(); ++y)
    for (int x = 0; x < t.w(); ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::min(1.0f, std::max(0.0f, t.at(0, c, y, x)));
        im.pixels[(static_cast<std::size_t>(y) * t.w() + x) * 3 + c] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
      }
  return im;
}

inline Image8 labels_to_gray(const LabelMap& l) {
  Image8 im{l.h(), l.w(), 1, std::vector<std::uint8_t>(static_cast<std::size_t>(l.h()) * l.w())};
  for (std::size_t i = 0; i < im.pixels.size(); ++i) {
    if (l[i] < 0 || l[i] > 255) throw DataError("label " + std::to_string(l[i]) + " does not fit in 8 bits");
    im.pixels[i] = static_cast<std::uint8_t>(l[i]);
  }
  return im;
}

}  // namespace fcdrn
