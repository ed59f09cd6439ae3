#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "diar/error.hpp"
#include "diar/image.hpp"

namespace diar {

namespace detail {

inline void require_mask(const Mask* mask, const Image& img) {
  if (mask && (mask->height != img.height() || mask->width != img.width())) {
    throw ShapeError("metric mask extents differ from image extents");
  }
}

inline double mse(const Image& a, const Image& b, const Mask* mask) {
  require_same_shape(a, b, "metric");
  require_mask(mask, a);
  double sum = 0.0;
  std::size_t count = 0;
  const std::size_t c = a.channels();
  for (std::size_t p = 0; p < a.pixels(); ++p) {
    if (mask && !mask->valid[p]) continue;
    for (std::size_t k = 0; k < c; ++k) {
      const double d = static_cast<double>(a.data()[p * c + k]) - static_cast<double>(b.data()[p * c + k]);
      sum += d * d;
    }
    count += c;
  }
  if (count == 0) throw ShapeError("metric: no valid pixels");
  return sum / static_cast<double>(count);
}

}  // namespace detail

/// Root-mean-squared error over all channels (and valid pixels, if masked).
inline double rmse(const Image& a, const Image& b, const Mask* mask = nullptr) {
  return std::sqrt(detail::mse(a, b, mask));
}

/// 10·log10(peak²/MSE); +infinity when the images agree exactly.
inline double psnr(const Image& a, const Image& b, double peak = 1.0, const Mask* mask = nullptr) {
  const double m = detail::mse(a, b, mask);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

struct SsimParams {
  static constexpr int kWindow = 11;
  static constexpr double kSigma = 1.5;
  static constexpr double kK1 = 0.01;
  static constexpr double kK2 = 0.03;
  static constexpr double kRange = 1.0;
};

inline std::array<double, SsimParams::kWindow> ssim_gaussian() {
  std::array<double, SsimParams::kWindow> g{};
  double sum = 0.0;
  for (int i = 0; i < SsimParams::kWindow; ++i) {
    const double d = i - SsimParams::kWindow / 2;
    g[i] = std::exp(-d * d / (2.0 * SsimParams::kSigma * SsimParams::kSigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

/// Single-scale SSIM on luma: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, mean over the valid-window SSIM map. With a
/// mask, only windows whose centre pixel is valid are averaged.
inline double ssim(const Image& a, const Image& b, const Mask* mask = nullptr) {
  require_same_shape(a, b, "ssim");
  detail::require_mask(mask, a);
  constexpr int kw = SsimParams::kWindow;
  if (a.height() < kw || a.width() < kw) throw ShapeError("ssim: image smaller than the 11x11 window");
  const Image ga = to_gray(a), gb = to_gray(b);
  const std::size_t h = a.height(), w = a.width();
  const std::size_t oh = h - kw + 1, ow = w - kw + 1;
  const auto g = ssim_gaussian();
  // Separable filtering of the five moment images: horizontal pass then vertical.
  std::array<std::vector<double>, 5> horiz;
  for (auto& v : horiz) v.assign(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < kw; ++k) {
        const double va = ga.at(y, x + k), vb = gb.at(y, x + k);
        s[0] += g[k] * va;
        s[1] += g[k] * vb;
        s[2] += g[k] * va * va;
        s[3] += g[k] * vb * vb;
        s[4] += g[k] * va * vb;
      }
      for (int i = 0; i < 5; ++i) horiz[i][y * ow + x] = s[i];
    }
  }
  const double c1 = std::pow(SsimParams::kK1 * SsimParams::kRange, 2);
  const double c2 = std::pow(SsimParams::kK2 * SsimParams::kRange, 2);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      if (mask && !mask->at(y + kw / 2, x + kw / 2)) continue;
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < kw; ++k)
        for (int i = 0; i < 5; ++i) s[i] += g[k] * horiz[i][(y + k) * ow + x];
      const double mu_a = s[0], mu_b = s[1];
      const double var_a = s[2] - mu_a * mu_a, var_b = s[3] - mu_b * mu_b, cov = s[4] - mu_a * mu_b;
      total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  if (count == 0) throw ShapeError("ssim: no valid windows");
  return total / static_cast<double>(count);
}

struct MetricReport {
  double rmse = 0.0;
  double psnr = 0.0;  // +inf when identical
  double ssim = 0.0;

  bool psnr_infinite() const { return std::isinf(psnr); }
};

inline MetricReport evaluate(const Image& estimate, const Image& label, const Mask* mask = nullptr) {
  return MetricReport{rmse(estimate, label, mask), psnr(estimate, label, 1.0, mask), ssim(estimate, label, mask)};
}

}  // namespace diar
