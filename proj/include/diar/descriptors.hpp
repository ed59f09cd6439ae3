#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diar/convert.hpp"
#include "diar/error.hpp"
#include "diar/geometry.hpp"
#include "diar/image.hpp"
#include "diar/optim.hpp"
#include "diar/rng.hpp"
#include "diar/tensor.hpp"

namespace diar {

using DescriptorMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense descriptor grid. Cell (i, j) sits at image coordinate
/// (j·scale_x + offset_x, i·scale_y + offset_y).
struct FeatureMap {
  std::size_t grid_h = 0, grid_w = 0, channels = 0;
  std::vector<float> data;  // grid_h × grid_w × channels
  double scale_x = 1.0, scale_y = 1.0;
  double offset_x = 0.0, offset_y = 0.0;

  const float* row(std::size_t i, std::size_t j) const { return data.data() + (i * grid_w + j) * channels; }
  Vec2 image_coord(std::size_t i, std::size_t j) const {
    return Vec2(static_cast<double>(j) * scale_x + offset_x, static_cast<double>(i) * scale_y + offset_y);
  }
};

/// Row-stacked descriptors with their source image coordinates.
struct KeypointMatrix {
  DescriptorMatrix x;
  std::vector<Vec2> coords;

  std::size_t size() const { return coords.size(); }
};

inline constexpr double kMinDescriptorNorm = 1e-12;

namespace detail {

inline std::size_t reflect_index(long i, long n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * (n - 1) - i;
  return static_cast<std::size_t>(i);
}

}  // namespace detail

/// Flattened k×k×C neighbourhoods (reflect padding), mean-subtracted,
/// sampled every `step` pixels.
inline FeatureMap patch_descriptors(const Image& img, std::size_t k, std::size_t step = 1) {
  if (k % 2 == 0) throw ShapeError("patch_descriptors: k must be odd, got " + std::to_string(k));
  if (step == 0) throw ShapeError("patch_descriptors: step must be positive");
  const std::size_t h = img.height(), w = img.width(), c = img.channels();
  if (k > std::min(h, w)) throw ShapeError("patch_descriptors: k exceeds the image extent");
  FeatureMap fm;
  fm.grid_h = (h - 1) / step + 1;
  fm.grid_w = (w - 1) / step + 1;
  fm.channels = k * k * c;
  fm.scale_x = fm.scale_y = static_cast<double>(step);
  fm.data.resize(fm.grid_h * fm.grid_w * fm.channels);
  const long r = static_cast<long>(k / 2);
  for (std::size_t i = 0; i < fm.grid_h; ++i) {
    for (std::size_t j = 0; j < fm.grid_w; ++j) {
      float* d = fm.data.data() + (i * fm.grid_w + j) * fm.channels;
      const long y = static_cast<long>(i * step), x = static_cast<long>(j * step);
      double sum = 0.0;
      std::size_t n = 0;
      for (long dy = -r; dy <= r; ++dy) {
        const std::size_t yy = detail::reflect_index(y + dy, static_cast<long>(h));
        for (long dx = -r; dx <= r; ++dx) {
          const std::size_t xx = detail::reflect_index(x + dx, static_cast<long>(w));
          for (std::size_t ch = 0; ch < c; ++ch) {
            d[n] = img.at(yy, xx, ch);
            sum += d[n++];
          }
        }
      }
      const float mean = static_cast<float>(sum / static_cast<double>(n));
      for (std::size_t q = 0; q < n; ++q) d[q] -= mean;
    }
  }
  return fm;
}

// ---------------------------------------------------------------------------
// Convolutional descriptor: three 3×3 stride-2 conv + ReLU blocks.

struct CnnDescriptorArch {
  static constexpr std::size_t kBlocks = 3;
  static constexpr std::size_t kWidths[kBlocks] = {16, 32, 64};
  static constexpr double kScale = 8.0;
  static constexpr double kOffset = 3.5;

  static std::string weight(std::size_t b) { return "desc.conv" + std::to_string(b + 1) + ".w"; }
  static std::string bias(std::size_t b) { return "desc.conv" + std::to_string(b + 1) + ".b"; }
};

inline ParamStore<float> cnn_descriptor_params(std::size_t in_channels, std::uint64_t seed) {
  ParamStore<float> store;
  Rng rng(derive_seed(seed, 0xde5c));
  std::size_t ci = in_channels;
  for (std::size_t b = 0; b < CnnDescriptorArch::kBlocks; ++b) {
    const std::size_t co = CnnDescriptorArch::kWidths[b];
    store.add(CnnDescriptorArch::weight(b), he_uniform<float>(Shape{co, ci, 3, 3}, ci * 9, rng));
    store.add(CnnDescriptorArch::bias(b), Tensor<float>(Shape{co}));
    ci = co;
  }
  return store;
}

inline FeatureMap cnn_descriptors(const Image& img, const ParamStore<float>& weights) {
  {
    ParamStore<float> expected = cnn_descriptor_params(img.channels(), 0);
    assign_parameters(expected, weights);  // throws naming each offending parameter
  }
  Tape<float> tape;
  ParamBinding<float> p(tape, weights, false);
  Var<float> x = tape.constant(image_to_chw<float>(img));
  for (std::size_t b = 0; b < CnnDescriptorArch::kBlocks; ++b) {
    x = relu(conv2d(x, p(CnnDescriptorArch::weight(b)), p(CnnDescriptorArch::bias(b)), 2, 1));
  }
  const Tensor<float>& v = x.value();
  FeatureMap fm;
  fm.channels = v.dim(0);
  fm.grid_h = v.dim(1);
  fm.grid_w = v.dim(2);
  fm.scale_x = fm.scale_y = CnnDescriptorArch::kScale;
  fm.offset_x = fm.offset_y = CnnDescriptorArch::kOffset;
  fm.data.resize(v.size());
  const std::size_t plane = fm.grid_h * fm.grid_w;
  for (std::size_t c = 0; c < fm.channels; ++c)
    for (std::size_t q = 0; q < plane; ++q) fm.data[q * fm.channels + c] = v[c * plane + q];
  // Post-ReLU channels share a positive bias that dominates cosine scores;
  // each channel is centred over the grid.
  for (std::size_t c = 0; c < fm.channels; ++c) {
    double mean = 0;
    for (std::size_t q = 0; q < plane; ++q) mean += fm.data[q * fm.channels + c];
    mean /= static_cast<double>(plane);
    for (std::size_t q = 0; q < plane; ++q) fm.data[q * fm.channels + c] -= static_cast<float>(mean);
  }
  return fm;
}

// ---------------------------------------------------------------------------
// Pyramid

using DescriptorProvider = std::function<FeatureMap(const Image&)>;

inline DescriptorProvider patch_provider(std::size_t k, std::size_t step = 1) {
  return [k, step](const Image& img) { return patch_descriptors(img, k, step); };
}

inline DescriptorProvider cnn_provider(ParamStore<float> weights) {
  return [w = std::move(weights)](const Image& img) { return cnn_descriptors(img, w); };
}

/// Descriptors of every pyramid level stacked row-wise, with coordinates
/// mapped back to the original image (corner-aligned resize).
inline KeypointMatrix pyramid_keypoints(const Image& img, const std::vector<double>& scales,
                                        const DescriptorProvider& provider) {
  if (scales.empty()) throw ConfigError("pyramid_keypoints: scale list is empty");
  std::vector<FeatureMap> maps;
  std::vector<std::pair<double, double>> ratio;
  std::size_t rows = 0, channels = 0;
  for (double s : scales) {
    if (!(s > 0.0)) throw ConfigError("pyramid_keypoints: scales must be positive");
    const Image level = s == 1.0 ? img : resize(img, s);
    maps.push_back(provider(level));
    const auto& m = maps.back();
    if (!maps.empty() && channels != 0 && m.channels != channels) {
      throw ShapeError("pyramid_keypoints: descriptor width differs between levels");
    }
    channels = m.channels;
    rows += m.grid_h * m.grid_w;
    auto r = [](std::size_t orig, std::size_t lvl) {
      return lvl > 1 ? (static_cast<double>(orig) - 1.0) / (static_cast<double>(lvl) - 1.0) : 1.0;
    };
    ratio.emplace_back(r(img.width(), level.width()), r(img.height(), level.height()));
  }
  KeypointMatrix km;
  km.x.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(channels));
  km.coords.reserve(rows);
  Eigen::Index row = 0;
  const double wmax = static_cast<double>(img.width()) - 1.0, hmax = static_cast<double>(img.height()) - 1.0;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const auto& m = maps[l];
    for (std::size_t i = 0; i < m.grid_h; ++i) {
      for (std::size_t j = 0; j < m.grid_w; ++j, ++row) {
        km.x.row(row) = Eigen::Map<const Eigen::RowVectorXf>(m.row(i, j), static_cast<Eigen::Index>(channels));
        const Vec2 c = m.image_coord(i, j);
        km.coords.emplace_back(std::clamp(c.x() * ratio[l].first, 0.0, wmax), std::clamp(c.y() * ratio[l].second, 0.0, hmax));
      }
    }
  }
  return km;
}

/// Drops rows whose norm is ≤ kMinDescriptorNorm (cosine undefined).
inline KeypointMatrix drop_degenerate(const KeypointMatrix& km) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index r = 0; r < km.x.rows(); ++r) {
    if (static_cast<double>(km.x.row(r).norm()) > kMinDescriptorNorm) keep.push_back(r);
  }
  KeypointMatrix out;
  out.x.resize(static_cast<Eigen::Index>(keep.size()), km.x.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = km.x.row(keep[i]);
    out.coords.push_back(km.coords[static_cast<std::size_t>(keep[i])]);
  }
  return out;
}

}  // namespace diar
