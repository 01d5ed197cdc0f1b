#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mambastyle/checkpoint.hpp"
#include "mambastyle/errors.hpp"
#include "mambastyle/tensor.hpp"

namespace mambastyle::io {

/// 8-bit RGB PNG of a [3,H,W] image; values in [lo, hi] map to [0, 255].
inline void write_png(const std::string& path, const Tensor& img, double lo = -1.0, double hi = 1.0) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("write_png: expected [3,H,W], got " + shape_str(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> px(h * w * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < h * w; ++i) {
      const double v = (img[c * h * w + i] - lo) / (hi - lo) * 255.0;
      px[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(w);
  im.height = static_cast<png_uint_32>(h);
  im.format = PNG_FORMAT_RGB;
  if (png_image_write_to_file(&im, path.c_str(), 0, px.data(), 0, nullptr) == 0) {
    throw ConfigError("write_png: " + path + ": " + im.message);
  }
}

/// Reads any PNG as RGB into [3,H,W] with [0, 255] mapped to [lo, hi].
inline Tensor read_png(const std::string& path, double lo = -1.0, double hi = 1.0) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&im, path.c_str()) == 0) {
    throw ConfigError("read_png: " + path + ": " + im.message);
  }
  im.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(im));
  if (png_image_finish_read(&im, nullptr, px.data(), 0, nullptr) == 0) {
    throw CorruptionError("read_png: " + path + ": " + im.message);
  }
  const std::size_t h = im.height, w = im.width;
  Tensor t(Shape{3, h, w});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < h * w; ++i) {
      t[c * h * w + i] = static_cast<float>(lo + (hi - lo) * px[i * 3 + c] / 255.0);
    }
  }
  return t;
}

/// Lossless single-tensor file in the checkpoint format.
inline void write_blob(const std::string& path, const Tensor& t, const std::string& name = "tensor") {
  checkpoint::Checkpoint ck;
  ck.tensors.push_back({name, t});
  checkpoint::save(path, ck);
}

inline Tensor read_blob(const std::string& path) {
  const auto ck = checkpoint::load(path);
  if (ck.tensors.size() != 1) {
    throw CorruptionError("read_blob: " + path + " holds " + std::to_string(ck.tensors.size()) + " tensors");
  }
  return ck.tensors.front().value;
}

/// PNG or blob by extension.
inline Tensor read_image(const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0) return read_png(path);
  return read_blob(path);
}

}  // namespace mambastyle::io
