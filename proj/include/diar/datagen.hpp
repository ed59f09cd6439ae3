#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diar/error.hpp"
#include "diar/geometry.hpp"
#include "diar/image.hpp"
#include "diar/rng.hpp"

namespace diar {

struct CameraRanges {
  double radius_min = 1.0;  // camera distance, relative to the reference distance
  double radius_max = 1.15;
  double max_tilt_deg = 15.0;  // half-angle of the viewing cone around the plane normal
  double fov_scale_min = 0.92;  // focal length relative to the reference camera
  double fov_scale_max = 1.08;
  double lookat_jitter = 0.05;  // fraction of the plane half-extent
  double max_roll_deg = 4.0;
};

struct LightParams {
  double gain_strength = 0.5;  // amplitude of the low-frequency gain field
  int specular_min = 0;
  int specular_max = 2;
  double specular_intensity = 0.6;
};

struct ShadowParams {
  int count_min = 0;
  int count_max = 2;
  double softness = 0.04;  // edge width, fraction of the image width
  double darkness_min = 0.3;
  double darkness_max = 0.9;
};

struct OccluderParams {
  int count_min = 0;
  int count_max = 2;
  double size_min = 0.1;  // fraction of the image width
  double size_max = 0.3;
  double opacity_min = 0.7;
  double opacity_max = 1.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CameraRanges, radius_min, radius_max, max_tilt_deg, fov_scale_min,
                                                fov_scale_max, lookat_jitter, max_roll_deg)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LightParams, gain_strength, specular_min, specular_max,
                                                specular_intensity)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ShadowParams, count_min, count_max, softness, darkness_min,
                                                darkness_max)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OccluderParams, count_min, count_max, size_min, size_max,
                                                opacity_min, opacity_max)

/// Everything needed to render one sequence, apart from the base image.
struct SceneParams {
  std::size_t frame_count = 10;
  std::size_t height = 128;
  std::size_t width = 128;
  bool aligned = true;
  CameraRanges camera;
  LightParams light;
  ShadowParams shadow;
  OccluderParams occluder;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("scene: " + m); };
    if (frame_count < 1) fail("frame_count must be >= 1");
    if (height < 2 || width < 2) fail("output size must be at least 2x2");
    const auto& c = camera;
    if (!(c.radius_min > 0.0 && c.radius_min <= c.radius_max)) fail("camera radius range is empty or non-positive");
    if (!(c.max_tilt_deg >= 0.0 && c.max_tilt_deg < 90.0)) fail("camera tilt must be in [0, 90)");
    if (!(c.fov_scale_min > 0.0 && c.fov_scale_min <= c.fov_scale_max)) fail("camera fov range is empty");
    if (c.lookat_jitter < 0.0 || c.max_roll_deg < 0.0) fail("camera jitter/roll must be non-negative");
    if (light.gain_strength < 0.0 || light.gain_strength > 1.0) fail("gain strength must be in [0, 1]");
    if (light.specular_min < 0 || light.specular_min > light.specular_max) fail("specular count range is empty");
    if (light.specular_intensity < 0.0 || light.specular_intensity > 1.0) fail("specular intensity must be in [0, 1]");
    if (shadow.count_min < 0 || shadow.count_min > shadow.count_max) fail("shadow count range is empty");
    if (!(shadow.darkness_min >= 0.0 && shadow.darkness_min <= shadow.darkness_max && shadow.darkness_max <= 1.0)) {
      fail("shadow darkness range must lie in [0, 1]");
    }
    if (shadow.softness < 0.0) fail("shadow softness must be non-negative");
    if (occluder.count_min < 0 || occluder.count_min > occluder.count_max) fail("occluder count range is empty");
    if (!(occluder.size_min > 0.0 && occluder.size_min <= occluder.size_max)) fail("occluder size range is empty");
    if (!(occluder.opacity_min >= 0.0 && occluder.opacity_min <= occluder.opacity_max && occluder.opacity_max <= 1.0)) {
      fail("occluder opacity range must lie in [0, 1]");
    }
  }

  /// Every distortion disabled.
  SceneParams without_distortions() const {
    SceneParams p = *this;
    p.light.gain_strength = 0.0;
    p.light.specular_min = p.light.specular_max = 0;
    p.shadow.count_min = p.shadow.count_max = 0;
    p.occluder.count_min = p.occluder.count_max = 0;
    return p;
  }

  /// Small perspective changes and light artifacts.
  static SceneParams mild() {
    SceneParams p;
    p.aligned = false;
    p.camera.max_tilt_deg = 10.0;
    p.camera.radius_max = 1.1;
    p.camera.fov_scale_min = 0.95;
    p.camera.fov_scale_max = 1.05;
    p.camera.max_roll_deg = 3.0;
    p.light.gain_strength = 0.3;
    p.light.specular_max = 1;
    p.light.specular_intensity = 0.4;
    p.shadow.count_max = 1;
    p.shadow.darkness_max = 0.6;
    p.occluder.count_max = 1;
    p.occluder.size_max = 0.2;
    return p;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SceneParams, frame_count, height, width, aligned, camera, light,
                                                shadow, occluder)

struct SceneSpec {
  Image base_image;
  std::uint64_t seed = 0;
  std::uint64_t distortion_seed = 0;  // reseeds lights/shadows/occluders only
  SceneParams params;
};

// ---------------------------------------------------------------------------
// Plane and reference camera

/// The textured plane lies in Z = 0; raster pixel (u, v) sits at
/// ((u − (W−1)/2)·s, (v − (H−1)/2)·s, 0). The reference camera looks along +Z
/// from distance kReferenceDistance and sees exactly the raster.
struct PlaneFrame {
  static constexpr double kReferenceDistance = 2.0;

  std::size_t height, width;

  double pixel_size() const { return 2.0 / (static_cast<double>(std::max(height, width)) - 1.0); }
  double cx() const { return (static_cast<double>(width) - 1.0) / 2.0; }
  double cy() const { return (static_cast<double>(height) - 1.0) / 2.0; }
  double focal() const { return kReferenceDistance / pixel_size(); }

  Vec3 world(double u, double v) const { return Vec3((u - cx()) * pixel_size(), (v - cy()) * pixel_size(), 0.0); }

  std::array<Vec3, 4> corners() const {
    const double w = static_cast<double>(width) - 1.0, h = static_cast<double>(height) - 1.0;
    return {world(0, 0), world(w, 0), world(0, h), world(w, h)};
  }

  Camera reference_camera() const {
    return Camera(Camera::intrinsics(focal(), focal(), cx(), cy()), Mat3::Identity(), Vec3(0, 0, kReferenceDistance));
  }
};

inline bool same_camera(const Camera& a, const Camera& b) { return a.k() == b.k() && a.r() == b.r() && a.t() == b.t(); }

/// Rotation whose rows are the camera axes for a camera at `center` looking
/// at `target`, with image y pointing along world +Y, rolled by `roll` rad.
inline Mat3 look_at(const Vec3& center, const Vec3& target, double roll) {
  const Vec3 z = (target - center).normalized();
  Vec3 x = Vec3(0, 1, 0).cross(z);
  if (x.norm() < 1e-9) x = Vec3(1, 0, 0);
  x.normalize();
  Vec3 y = z.cross(x);
  const double c = std::cos(roll), s = std::sin(roll);
  const Vec3 xr = c * x + s * y;
  const Vec3 yr = -s * x + c * y;
  Mat3 r;
  r.row(0) = xr.transpose();
  r.row(1) = yr.transpose();
  r.row(2) = z.transpose();
  return r;
}

/// Camera in the front half-space shell, looking at a jittered plane centre.
/// Rejection-samples until all plane corners have positive depth.
inline Camera sample_camera(const SceneSpec& spec, Rng& rng) {
  const auto& p = spec.params;
  p.validate();
  const PlaneFrame plane{p.height, p.width};
  const auto& cr = p.camera;
  const double half_x = plane.cx() * plane.pixel_size(), half_y = plane.cy() * plane.pixel_size();
  constexpr double deg = std::numbers::pi / 180.0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double tilt = cr.max_tilt_deg * deg * std::sqrt(rng.uniform());
    const double azimuth = 2.0 * std::numbers::pi * rng.uniform();
    const double radius = PlaneFrame::kReferenceDistance * rng.uniform(cr.radius_min, cr.radius_max);
    const Vec3 dir(std::sin(tilt) * std::cos(azimuth), std::sin(tilt) * std::sin(azimuth), -std::cos(tilt));
    const Vec3 center = radius * dir;
    const Vec3 target(rng.uniform(-1.0, 1.0) * cr.lookat_jitter * half_x,
                      rng.uniform(-1.0, 1.0) * cr.lookat_jitter * half_y, 0.0);
    const double roll = rng.uniform(-1.0, 1.0) * cr.max_roll_deg * deg;
    const double f = plane.focal() * rng.uniform(cr.fov_scale_min, cr.fov_scale_max);
    const Mat3 r = look_at(center, target, roll);
    Camera cam(Camera::intrinsics(f, f, plane.cx(), plane.cy()), r, -r * center);
    bool visible = true;
    for (const auto& c : plane.corners()) visible = visible && cam.depth(c) > 1e-6;
    if (visible) return cam;
  }
  throw ConfigError("sample_camera: no valid camera after 100 attempts (camera ranges too extreme)");
}

// ---------------------------------------------------------------------------
// Compositing primitives

namespace detail {

inline double smooth_coverage(double signed_dist, double softness) {
  if (softness <= 0.0) return signed_dist >= 0.0 ? 1.0 : 0.0;
  return std::clamp(0.5 + signed_dist / (2.0 * softness), 0.0, 1.0);
}

struct Polygon {
  std::vector<Vec2> pts;

  // Positive inside, negative outside.
  double signed_distance(const Vec2& q) const {
    bool inside = false;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
      const Vec2& a = pts[j];
      const Vec2& b = pts[i];
      if (((a.y() > q.y()) != (b.y() > q.y())) && (q.x() < (b.x() - a.x()) * (q.y() - a.y()) / (b.y() - a.y()) + a.x())) {
        inside = !inside;
      }
      const Vec2 ab = b - a;
      const double t = std::clamp((q - a).dot(ab) / std::max(ab.squaredNorm(), 1e-12), 0.0, 1.0);
      best = std::min(best, (a + t * ab - q).norm());
    }
    return inside ? best : -best;
  }
};

inline Polygon random_polygon(Rng& rng, const Vec2& center, double radius) {
  Polygon poly;
  const int n = rng.uniform_int(3, 7);
  std::vector<double> angles(static_cast<std::size_t>(n));
  for (auto& a : angles) a = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::sort(angles.begin(), angles.end());
  for (double a : angles) {
    const double r = radius * rng.uniform(0.6, 1.0);
    poly.pts.emplace_back(center.x() + r * std::cos(a), center.y() + r * std::sin(a));
  }
  return poly;
}

// Approximate signed distance to an axis-rotated ellipse, in pixels.
inline double ellipse_signed_distance(const Vec2& q, const Vec2& c, double a, double b, double angle) {
  const Vec2 d = q - c;
  const double u = std::cos(angle) * d.x() + std::sin(angle) * d.y();
  const double v = -std::sin(angle) * d.x() + std::cos(angle) * d.y();
  const double k = std::sqrt((u * u) / (a * a) + (v * v) / (b * b));
  return (1.0 - k) * std::min(a, b);
}

// Smooth random field: bilinear interpolation of a coarse grid of random
// colours.
class ValueNoise {
 public:
  ValueNoise(Rng& rng, std::size_t cells, std::size_t channels) : cells_(cells), channels_(channels) {
    values_.resize((cells + 1) * (cells + 1) * channels);
    for (auto& v : values_) v = rng.uniform();
  }

  double at(double u, double v, std::size_t c) const {  // u, v in [0, 1]
    const double x = std::clamp(u, 0.0, 1.0) * static_cast<double>(cells_);
    const double y = std::clamp(v, 0.0, 1.0) * static_cast<double>(cells_);
    const std::size_t x0 = std::min(static_cast<std::size_t>(x), cells_ - 1);
    const std::size_t y0 = std::min(static_cast<std::size_t>(y), cells_ - 1);
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    auto g = [&](std::size_t yy, std::size_t xx) { return values_[(yy * (cells_ + 1) + xx) * channels_ + c]; };
    return (1 - fy) * ((1 - fx) * g(y0, x0) + fx * g(y0, x0 + 1)) + fy * ((1 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1));
  }

 private:
  std::size_t cells_, channels_;
  std::vector<double> values_;
};

template <typename F>
void for_each_pixel(std::size_t h, std::size_t w, F f) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) f(y, x, Vec2(static_cast<double>(x), static_cast<double>(y)));
}

}  // namespace detail

struct FrameRender {
  Image frame;
  Homography homography;  // reference pixels → frame pixels
  std::vector<float> occlusion;  // per-pixel occluder alpha
};

/// Renders one frame: perspective warp of the base raster by the camera's
/// homography, then a gain field, specular highlights, soft shadows and
/// occluders composited in camera space.
inline FrameRender render_frame(const SceneSpec& spec, const Camera& cam, Rng& rng) {
  const auto& p = spec.params;
  p.validate();
  const std::size_t h = p.height, w = p.width;
  const PlaneFrame plane{h, w};
  const Camera ref = plane.reference_camera();
  const Homography hom = same_camera(cam, ref) ? Homography::identity()
                                               : homography_from_cameras(ref, cam, plane.corners());
  const Image base = (spec.base_image.height() == h && spec.base_image.width() == w)
                         ? spec.base_image
                         : resize_to(spec.base_image, h, w);
  FrameRender out{warp(base, hom.inverse(), h, w).image, hom, std::vector<float>(h * w, 0.0f)};
  Image& img = out.frame;
  const std::size_t nc = img.channels();
  const double wd = static_cast<double>(w), hd = static_cast<double>(h);
  auto random_point = [&] { return Vec2(rng.uniform(0.0, wd - 1.0), rng.uniform(0.0, hd - 1.0)); };

  // Low-frequency multiplicative gain.
  {
    struct Blob { Vec2 c; double sigma, amp; };
    std::vector<Blob> blobs(static_cast<std::size_t>(rng.uniform_int(2, 4)));
    for (auto& b : blobs) b = Blob{random_point(), rng.uniform(0.2, 0.6) * wd, rng.uniform(-1.0, 1.0) * p.light.gain_strength};
    if (p.light.gain_strength > 0.0) {
      detail::for_each_pixel(h, w, [&](std::size_t y, std::size_t x, const Vec2& q) {
        double g = 1.0;
        for (const auto& b : blobs) g += b.amp * std::exp(-(q - b.c).squaredNorm() / (2 * b.sigma * b.sigma));
        g = std::clamp(g, 0.4, 1.4);
        for (std::size_t c = 0; c < nc; ++c) img.at(y, x, c) = static_cast<float>(img.at(y, x, c) * g);
      });
    }
  }
  // Additive specular highlights.
  const int n_spec = rng.uniform_int(p.light.specular_min, p.light.specular_max);
  for (int i = 0; i < n_spec; ++i) {
    const Vec2 c = random_point();
    const double sigma = rng.uniform(0.03, 0.12) * wd;
    const double amp = rng.uniform(0.5, 1.0) * p.light.specular_intensity;
    detail::for_each_pixel(h, w, [&](std::size_t y, std::size_t x, const Vec2& q) {
      const double a = amp * std::exp(-(q - c).squaredNorm() / (2 * sigma * sigma));
      for (std::size_t k = 0; k < nc; ++k) img.at(y, x, k) = std::min(1.0f, static_cast<float>(img.at(y, x, k) + a));
    });
  }
  // Multiplicative soft shadows.
  const int n_shadow = rng.uniform_int(p.shadow.count_min, p.shadow.count_max);
  for (int i = 0; i < n_shadow; ++i) {
    const auto poly = detail::random_polygon(rng, random_point(), rng.uniform(0.15, 0.4) * wd);
    const double darkness = rng.uniform(p.shadow.darkness_min, p.shadow.darkness_max);
    const double soft = p.shadow.softness * wd;
    detail::for_each_pixel(h, w, [&](std::size_t y, std::size_t x, const Vec2& q) {
      const double a = detail::smooth_coverage(poly.signed_distance(q), soft);
      if (a <= 0.0) return;
      const double f = 1.0 - darkness * a;
      for (std::size_t k = 0; k < nc; ++k) img.at(y, x, k) = static_cast<float>(img.at(y, x, k) * f);
    });
  }
  // Occluders: solid colour or noise texture, opacity-blended on top.
  const int n_occ = rng.uniform_int(p.occluder.count_min, p.occluder.count_max);
  for (int i = 0; i < n_occ; ++i) {
    const Vec2 c = random_point();
    const double size = rng.uniform(p.occluder.size_min, p.occluder.size_max) * wd;
    const double opacity = rng.uniform(p.occluder.opacity_min, p.occluder.opacity_max);
    const bool ellipse = rng.uniform() < 0.5;
    const double ea = size * rng.uniform(0.5, 1.0), eb = size * rng.uniform(0.3, 1.0);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const auto poly = detail::random_polygon(rng, c, size);
    const bool textured = rng.uniform() < 0.5;
    std::array<double, 3> color{rng.uniform(), rng.uniform(), rng.uniform()};
    const detail::ValueNoise noise(rng, static_cast<std::size_t>(rng.uniform_int(4, 12)), nc);
    detail::for_each_pixel(h, w, [&](std::size_t y, std::size_t x, const Vec2& q) {
      const double sd = ellipse ? detail::ellipse_signed_distance(q, c, ea, eb, angle) : poly.signed_distance(q);
      const double a = opacity * detail::smooth_coverage(sd, 0.5);
      if (a <= 0.0) return;
      for (std::size_t k = 0; k < nc; ++k) {
        const double fill = textured ? noise.at(q.x() / wd, q.y() / hd, k) : color[k];
        img.at(y, x, k) = static_cast<float>((1.0 - a) * img.at(y, x, k) + a * fill);
      }
      float& occ = out.occlusion[y * w + x];
      occ = std::max(occ, static_cast<float>(a));
    });
  }
  img.clamp();
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

struct Sequence {
  std::vector<Image> frames;
  Image label;
  std::vector<Homography> homographies;  // reference pixels → frame-i pixels
  std::uint64_t seed = 0;
  SceneParams params;
};

namespace detail {

inline Rng camera_stream(const SceneSpec& spec, std::size_t frame) {
  return Rng(derive_seed(derive_seed(spec.seed, 0xca11), frame));
}

inline Rng distortion_stream(const SceneSpec& spec, std::size_t frame) {
  return Rng(derive_seed(derive_seed(spec.seed ^ splitmix64(spec.distortion_seed), 0xd15), frame));
}

}  // namespace detail

/// Label from the reference camera with ambient light only; aligned mode
/// renders every frame from the reference camera, misaligned mode only
/// frame 0.
inline Sequence generate_sequence(const SceneSpec& spec) {
  const auto& p = spec.params;
  p.validate();
  if (spec.base_image.empty()) throw ConfigError("scene: base image is empty");
  const Camera ref = PlaneFrame{p.height, p.width}.reference_camera();
  Sequence seq;
  seq.seed = spec.seed;
  seq.params = p;
  {
    SceneSpec clean = spec;
    clean.params = p.without_distortions();
    Rng unused(0);
    seq.label = render_frame(clean, ref, unused).frame;
  }
  for (std::size_t i = 0; i < p.frame_count; ++i) {
    Rng cam_rng = detail::camera_stream(spec, i);
    const Camera cam = (p.aligned || i == 0) ? ref : sample_camera(spec, cam_rng);
    Rng rng = detail::distortion_stream(spec, i);
    FrameRender fr = render_frame(spec, cam, rng);
    seq.frames.push_back(std::move(fr.frame));
    seq.homographies.push_back(fr.homography);
  }
  return seq;
}

/// Procedural "painting": colour gradient, soft shapes, stripes and
/// multi-scale noise, so that local patches are distinctive.
inline Image procedural_base(std::size_t height, std::size_t width, std::uint64_t seed, std::size_t channels = 3) {
  Rng rng(derive_seed(seed, 0xba5e));
  Image img(height, width, channels);
  const double wd = static_cast<double>(width), hd = static_cast<double>(height);
  std::array<double, 3> c0{rng.uniform(), rng.uniform(), rng.uniform()}, c1{rng.uniform(), rng.uniform(), rng.uniform()};
  const double ga = rng.uniform(0.0, 2.0 * std::numbers::pi);
  detail::for_each_pixel(height, width, [&](std::size_t y, std::size_t x, const Vec2& q) {
    const double t = 0.5 + 0.5 * ((q.x() / wd - 0.5) * std::cos(ga) + (q.y() / hd - 0.5) * std::sin(ga));
    for (std::size_t k = 0; k < channels; ++k) img.at(y, x, k) = static_cast<float>((1 - t) * c0[k] + t * c1[k]);
  });
  const int shapes = rng.uniform_int(10, 18);
  for (int s = 0; s < shapes; ++s) {
    const Vec2 c(rng.uniform(0.0, wd), rng.uniform(0.0, hd));
    const double size = rng.uniform(0.05, 0.3) * wd;
    const bool ellipse = rng.uniform() < 0.5;
    const double ea = size, eb = size * rng.uniform(0.3, 1.0), angle = rng.uniform(0.0, std::numbers::pi);
    const auto poly = detail::random_polygon(rng, c, size);
    std::array<double, 3> col{rng.uniform(), rng.uniform(), rng.uniform()};
    const bool striped = rng.uniform() < 0.3;
    const double freq = rng.uniform(0.15, 0.5), sa = rng.uniform(0.0, std::numbers::pi);
    const double alpha = rng.uniform(0.6, 1.0);
    detail::for_each_pixel(height, width, [&](std::size_t y, std::size_t x, const Vec2& q) {
      const double sd = ellipse ? detail::ellipse_signed_distance(q, c, ea, eb, angle) : poly.signed_distance(q);
      double a = alpha * detail::smooth_coverage(sd, 1.0);
      if (a <= 0.0) return;
      if (striped) a *= 0.5 + 0.5 * std::sin(freq * (q.x() * std::cos(sa) + q.y() * std::sin(sa)));
      for (std::size_t k = 0; k < channels; ++k)
        img.at(y, x, k) = static_cast<float>((1 - a) * img.at(y, x, k) + a * col[k]);
    });
  }
  const detail::ValueNoise coarse(rng, 8, channels), fine(rng, std::max<std::size_t>(width / 4, 8), channels);
  detail::for_each_pixel(height, width, [&](std::size_t y, std::size_t x, const Vec2& q) {
    for (std::size_t k = 0; k < channels; ++k) {
      const double n = 0.12 * (coarse.at(q.x() / wd, q.y() / hd, k) - 0.5) + 0.18 * (fine.at(q.x() / wd, q.y() / hd, k) - 0.5);
      img.at(y, x, k) = static_cast<float>(img.at(y, x, k) + n);
    }
  });
  img.clamp();
  return img;
}

/// Base images used for a dataset: the given list cycled, or procedural
/// paintings when the list is empty.
inline Image base_for_sequence(std::span<const Image> bases, std::size_t index, std::uint64_t seq_seed,
                               std::size_t height, std::size_t width) {
  if (bases.empty()) return procedural_base(height, width, seq_seed);
  const Image& b = bases[index % bases.size()];
  return (b.height() == height && b.width() == width) ? b : resize_to(b, height, width);
}

inline std::uint64_t sequence_seed(std::uint64_t master, std::size_t index) { return derive_seed(master, index); }

inline std::vector<Sequence> generate_dataset(const SceneParams& params, std::size_t count, std::uint64_t master_seed,
                                              std::span<const Image> bases = {}) {
  params.validate();
  std::vector<Sequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec spec;
    spec.seed = sequence_seed(master_seed, i);
    spec.params = params;
    spec.base_image = base_for_sequence(bases, i, spec.seed, params.height, params.width);
    out.push_back(generate_sequence(spec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: seq_%05d/{frame_%03d.ppm, label.ppm, meta.json}

namespace detail {

inline std::string numbered(const char* fmt, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, i);
  return buf;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "' for writing");
  f << s;
  if (!f) throw IoError("write failed for '" + p.string() + "'");
}

}  // namespace detail

inline nlohmann::json sequence_meta(const Sequence& s) {
  nlohmann::json hs = nlohmann::json::array();
  for (const auto& h : s.homographies) hs.push_back(h.to_array());
  return {{"seed", s.seed},
          {"mode", s.params.aligned ? "aligned" : "misaligned"},
          {"frame_count", s.frames.size()},
          {"homographies", hs},
          {"scene", s.params}};
}

inline void write_dataset(std::span<const Sequence> sequences, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory '" + dir + "': " + ec.message());
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& s = sequences[i];
    const fs::path sd = fs::path(dir) / detail::numbered("seq_%05zu", i);
    fs::create_directories(sd, ec);
    if (ec) throw IoError("cannot create '" + sd.string() + "': " + ec.message());
    for (std::size_t t = 0; t < s.frames.size(); ++t) write_ppm(s.frames[t], (sd / detail::numbered("frame_%03zu.ppm", t)).string());
    write_ppm(s.label, (sd / "label.ppm").string());
    detail::write_text(sd / "meta.json", sequence_meta(s).dump(2) + "\n");
  }
}

inline Sequence read_sequence(const std::filesystem::path& sd) {
  namespace fs = std::filesystem;
  const std::string name = sd.filename().string();
  auto fail = [&](const std::string& member, const std::string& what) -> ParseError {
    return ParseError("dataset sequence '" + name + "', member '" + member + "': " + what);
  };
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(detail::read_text(sd / "meta.json"));
  } catch (const std::exception& e) {
    throw fail("meta.json", e.what());
  }
  Sequence s;
  try {
    s.seed = meta.at("seed").get<std::uint64_t>();
    const std::string mode = meta.at("mode").get<std::string>();
    if (mode != "aligned" && mode != "misaligned") throw fail("meta.json", "mode must be aligned or misaligned");
    s.params = meta.value("scene", SceneParams{});
    s.params.aligned = mode == "aligned";
    const auto& hs = meta.at("homographies");
    if (!hs.is_array()) throw fail("meta.json", "homographies must be an array");
    for (const auto& h : hs) {
      if (!h.is_array() || h.size() != 9) throw fail("meta.json", "each homography must be an array of 9 numbers");
      std::array<double, 9> a{};
      for (std::size_t k = 0; k < 9; ++k) {
        if (!h[k].is_number()) throw fail("meta.json", "homography entries must be numbers");
        a[k] = h[k].get<double>();
      }
      s.homographies.push_back(Homography::from_array(a));
    }
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw fail("meta.json", e.what());
  }
  for (std::size_t t = 0; t < s.homographies.size(); ++t) {
    const std::string member = detail::numbered("frame_%03zu.ppm", t);
    try {
      s.frames.push_back(read_ppm((sd / member).string()));
    } catch (const std::exception& e) {
      throw fail(member, e.what());
    }
  }
  try {
    s.label = read_ppm((sd / "label.ppm").string());
  } catch (const std::exception& e) {
    throw fail("label.ppm", e.what());
  }
  if (fs::exists(sd / detail::numbered("frame_%03zu.ppm", s.homographies.size()))) {
    throw fail("meta.json", "more frames on disk than homographies");
  }
  if (meta.contains("frame_count") && meta["frame_count"].get<std::size_t>() != s.frames.size()) {
    throw fail("meta.json", "frame_count does not match the homography list");
  }
  return s;
}

/// Reads every seq_NNNNN directory in name order; a directory without
/// sequences is an empty dataset.
inline std::vector<Sequence> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory '" + dir + "' does not exist");
  static const std::regex pattern("seq_[0-9]{5}");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && std::regex_match(e.path().filename().string(), pattern)) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<Sequence> out;
  for (const auto& d : dirs) out.push_back(read_sequence(d));
  return out;
}

/// Every *.ppm / *.pgm file of a directory, in name order.
inline std::vector<Image> load_base_images(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("base image directory '" + dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Image> out;
  for (const auto& f : files) out.push_back(read_ppm(f.string()));
  if (out.empty()) throw IoError("no PPM images in '" + dir + "'");
  return out;
}

}  // namespace diar
