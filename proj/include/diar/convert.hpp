#pragma once

#include <algorithm>
#include <cmath>

#include "diar/image.hpp"
#include "diar/tensor.hpp"

namespace diar {

/// H×W×C interleaved image → C×H×W planar tensor.
template <typename T>
Tensor<T> image_to_chw(const Image& img) {
  const std::size_t h = img.height(), w = img.width(), c = img.channels();
  Tensor<T> out(Shape{c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out[(k * h + y) * w + x] = static_cast<T>(img.at(y, x, k));
  return out;
}

/// C×H×W tensor → image; values are clamped to [0, 1].
template <typename T>
Image chw_to_image(const Tensor<T>& t) {
  if (t.rank() != 3) throw ShapeError("chw_to_image: expected a C×H×W tensor, got " + shape_str(t.shape()));
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Image out(h, w, c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = static_cast<float>(t[(k * h + y) * w + x]);
  out.clamp();
  return out;
}

}  // namespace diar
