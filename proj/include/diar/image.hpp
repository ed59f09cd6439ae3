#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "diar/error.hpp"
#include "diar/geometry.hpp"

namespace diar {

/// Row-major H×W×C raster with values in [0, 1]; C is 1 or 3.
class Image {
 public:
  Image() = default;

  Image(std::size_t height, std::size_t width, std::size_t channels, float fill = 0.0f)
      : height_(height), width_(width), channels_(channels) {
    if (height == 0 || width == 0) throw ShapeError("image extents must be positive");
    if (channels != 1 && channels != 3) throw ShapeError("image must have 1 or 3 channels");
    data_.assign(height * width * channels, std::clamp(fill, 0.0f, 1.0f));
  }

  Image(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> data)
      : Image(height, width, channels) {
    if (data.size() != data_.size()) throw ShapeError("image data length does not match extents");
    data_ = std::move(data);
    clamp();
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t pixels() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float at(std::size_t y, std::size_t x, std::size_t c = 0) const { return data_[(y * width_ + x) * channels_ + c]; }
  float& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data_[(y * width_ + x) * channels_ + c]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  bool same_shape(const Image& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  void clamp() {
    for (auto& v : data_) v = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
  }

  friend bool operator==(const Image& a, const Image& b) { return a.same_shape(b) && a.data_ == b.data_; }

 private:
  std::size_t height_ = 0, width_ = 0, channels_ = 0;
  std::vector<float> data_;
};

/// Per-pixel validity flags for an H×W raster.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> valid;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, bool value) : height(h), width(w), valid(h * w, value ? 1 : 0) {}

  bool at(std::size_t y, std::size_t x) const { return valid[y * width + x] != 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), 1)); }
  bool all() const { return count() == valid.size(); }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": image shapes differ (" + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + "x" + std::to_string(a.channels()) + " vs " +
                     std::to_string(b.height()) + "x" + std::to_string(b.width()) + "x" +
                     std::to_string(b.channels()) + ")");
  }
}

inline Image to_gray(const Image& img) {
  if (img.channels() == 1) return img;
  Image out(img.height(), img.width(), 1);
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      out.at(y, x) = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
  return out;
}

// ---------------------------------------------------------------------------
// PPM / PGM

namespace detail {

class PnmHeaderReader {
 public:
  PnmHeaderReader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}

  std::string token() {
    skip_space_and_comments();
    const std::size_t start = pos_;
    while (pos_ < b_.size() && !std::isspace(static_cast<unsigned char>(b_[pos_]))) ++pos_;
    if (start == pos_) fail("unexpected end of header");
    return b_.substr(start, pos_ - start);
  }

  std::size_t number() {
    const std::size_t at = pos_;
    const std::string t = token();
    if (t.empty() || t.size() > 9 || !std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      pos_ = at;
      fail("expected a decimal number");
    }
    return std::stoul(t);
  }

  // Single whitespace byte ending the header.
  void end_of_header() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) fail("missing whitespace after header");
    ++pos_;
  }

  std::size_t pos() const { return pos_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(path_ + ": " + what + " at byte offset " + std::to_string(pos_));
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& b_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

/// Decodes binary P6 (RGB) or P5 (gray) with maxval 255.
inline Image decode_ppm(const std::string& bytes, const std::string& origin = "ppm") {
  detail::PnmHeaderReader r(bytes, origin);
  const std::string magic = r.token();
  if (magic != "P6" && magic != "P5") r.fail("unsupported magic '" + magic + "'");
  const std::size_t channels = magic == "P6" ? 3 : 1;
  const std::size_t width = r.number();
  const std::size_t height = r.number();
  const std::size_t maxval = r.number();
  if (width == 0 || height == 0) r.fail("zero image extent");
  if (maxval != 255) r.fail("maxval must be 255, got " + std::to_string(maxval));
  r.end_of_header();
  const std::size_t need = width * height * channels;
  if (bytes.size() - r.pos() < need) {
    throw ParseError(origin + ": truncated payload, expected " + std::to_string(need) + " bytes at byte offset " +
                     std::to_string(r.pos()) + ", file has " + std::to_string(bytes.size()));
  }
  std::vector<float> data(need);
  for (std::size_t i = 0; i < need; ++i) data[i] = static_cast<float>(static_cast<unsigned char>(bytes[r.pos() + i])) / 255.0f;
  return Image(height, width, channels, std::move(data));
}

inline std::string encode_ppm(const Image& img) {
  std::string out = (img.channels() == 3 ? "P6\n" : "P5\n") + std::to_string(img.width()) + " " +
                    std::to_string(img.height()) + "\n255\n";
  out.reserve(out.size() + img.size());
  for (float v : img.data()) out.push_back(static_cast<char>(detail::quantize(v)));
  return out;
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes, path);
}

inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = encode_ppm(img);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

/// Rounds every value to the nearest 8-bit level (what a write/read cycle does).
inline Image quantized(const Image& img) {
  Image out = img;
  for (auto& v : out.data()) v = static_cast<float>(detail::quantize(v)) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

struct Sample {
  std::array<float, 3> value{0.0f, 0.0f, 0.0f};
  bool in_bounds = false;
};

inline constexpr double kBoundsEps = 1e-9;

/// Bilinear blend of the four neighbours; pixel (x, y) sits at real
/// coordinates (x, y). Outside [0, W−1]×[0, H−1] returns 0 with
/// in_bounds == false.
inline Sample bilinear_sample(const Image& img, double x, double y) {
  Sample s;
  const double wmax = static_cast<double>(img.width()) - 1.0;
  const double hmax = static_cast<double>(img.height()) - 1.0;
  if (!(x >= -kBoundsEps && x <= wmax + kBoundsEps && y >= -kBoundsEps && y <= hmax + kBoundsEps)) return s;
  x = std::clamp(x, 0.0, wmax);
  y = std::clamp(y, 0.0, hmax);
  std::size_t x0 = static_cast<std::size_t>(std::floor(x));
  std::size_t y0 = static_cast<std::size_t>(std::floor(y));
  if (img.width() > 1) x0 = std::min(x0, img.width() - 2);
  if (img.height() > 1) y0 = std::min(y0, img.height() - 2);
  const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
  const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  for (std::size_t c = 0; c < img.channels(); ++c) {
    const double top = (1.0 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
    const double bottom = (1.0 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
    s.value[c] = static_cast<float>((1.0 - fy) * top + fy * bottom);
  }
  s.in_bounds = true;
  return s;
}

struct WarpResult {
  Image image;
  Mask mask;
};

/// Pull warp: out(x, y) = image(h(x, y)).
inline WarpResult warp(const Image& img, const Homography& h, std::size_t out_h, std::size_t out_w) {
  if (std::fabs(h.det()) <= kMinHomographyDet) throw GeometryError("warp: singular homography");
  WarpResult r{Image(out_h, out_w, img.channels()), Mask(out_h, out_w, false)};
  const Mat3& m = h.matrix();
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const double xd = static_cast<double>(x), yd = static_cast<double>(y);
      const double w = m(2, 0) * xd + m(2, 1) * yd + m(2, 2);
      if (std::fabs(w) < kInfinityEps) continue;
      const double sx = (m(0, 0) * xd + m(0, 1) * yd + m(0, 2)) / w;
      const double sy = (m(1, 0) * xd + m(1, 1) * yd + m(1, 2)) / w;
      const Sample s = bilinear_sample(img, sx, sy);
      if (!s.in_bounds) continue;
      for (std::size_t c = 0; c < img.channels(); ++c) r.image.at(y, x, c) = s.value[c];
      r.mask.valid[y * out_w + x] = 1;
    }
  }
  r.image.clamp();
  return r;
}

inline WarpResult warp(const Image& img, const Homography& h) { return warp(img, h, img.height(), img.width()); }

/// Bilinear resampling to an explicit size; the corner pixels of both grids
/// coincide.
inline Image resize_to(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ShapeError("resize: degenerate output size");
  if (out_h == img.height() && out_w == img.width()) return img;
  Image out(out_h, out_w, img.channels());
  const double fx = out_w > 1 ? (static_cast<double>(img.width()) - 1.0) / (static_cast<double>(out_w) - 1.0) : 0.0;
  const double fy = out_h > 1 ? (static_cast<double>(img.height()) - 1.0) / (static_cast<double>(out_h) - 1.0) : 0.0;
  const double cx = out_w > 1 ? 0.0 : (static_cast<double>(img.width()) - 1.0) / 2.0;
  const double cy = out_h > 1 ? 0.0 : (static_cast<double>(img.height()) - 1.0) / 2.0;
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const Sample s = bilinear_sample(img, cx + static_cast<double>(x) * fx, cy + static_cast<double>(y) * fy);
      for (std::size_t c = 0; c < img.channels(); ++c) out.at(y, x, c) = s.value[c];
    }
  }
  out.clamp();
  return out;
}

inline std::size_t scaled_extent(std::size_t n, double scale) {
  return static_cast<std::size_t>(std::lround(static_cast<double>(n) * scale));
}

inline Image resize(const Image& img, double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ShapeError("resize: scale must be positive");
  const std::size_t h = scaled_extent(img.height(), scale), w = scaled_extent(img.width(), scale);
  if (h < 1 || w < 1) throw ShapeError("resize: degenerate output size");
  return resize_to(img, h, w);
}

}  // namespace diar
