#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diar/error.hpp"

namespace diar {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kMinHomographyDet = 1e-12;
inline constexpr double kInfinityEps = 1e-12;

/// Invertible 3×3 projective map. Equality of homographies is only defined
/// up to scale; see normalize_det().
class Homography {
 public:
  Homography() : m_(Mat3::Identity()) {}

  explicit Homography(const Mat3& m) : m_(m) {
    if (!m_.allFinite()) throw GeometryError("homography has non-finite entries");
    if (std::fabs(m_.determinant()) <= kMinHomographyDet) {
      throw GeometryError("singular homography (|det| <= 1e-12)");
    }
  }

  static Homography identity() { return Homography(); }

  static Homography translation(double tx, double ty) {
    Mat3 m = Mat3::Identity();
    m(0, 2) = tx;
    m(1, 2) = ty;
    return Homography(m);
  }

  // Row-major h11 … h33.
  static Homography from_array(const std::array<double, 9>& a) {
    Mat3 m;
    m << a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8];
    return Homography(m);
  }

  std::array<double, 9> to_array() const {
    return {m_(0, 0), m_(0, 1), m_(0, 2), m_(1, 0), m_(1, 1), m_(1, 2), m_(2, 0), m_(2, 1), m_(2, 2)};
  }

  const Mat3& matrix() const { return m_; }
  double det() const { return m_.determinant(); }
  Homography inverse() const { return Homography(m_.inverse()); }

  // (a * b)(p) == a(b(p))
  friend Homography operator*(const Homography& a, const Homography& b) { return Homography(a.m_ * b.m_); }

  friend bool operator==(const Homography& a, const Homography& b) { return a.m_ == b.m_; }

 private:
  Mat3 m_;
};

/// Maps p through h; nullopt when p lands on the line at infinity.
inline std::optional<Vec2> try_apply(const Homography& h, const Vec2& p) {
  const Vec3 q = h.matrix() * Vec3(p.x(), p.y(), 1.0);
  if (std::fabs(q.z()) < kInfinityEps) return std::nullopt;
  return Vec2(q.x() / q.z(), q.y() / q.z());
}

inline Vec2 apply(const Homography& h, const Vec2& p) {
  auto q = try_apply(h, p);
  if (!q) throw GeometryError("point maps to the line at infinity");
  return *q;
}

/// Pinhole camera x = K [I|0] [R t; 0 1] X.
class Camera {
 public:
  Camera(const Mat3& k, const Mat3& r, const Vec3& t) : k_(k), r_(r), t_(t) {
    if ((r_.transpose() * r_ - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 || r_.determinant() < 0.0) {
      throw GeometryError("camera rotation is not a proper rotation");
    }
    if (k_(1, 0) != 0.0 || k_(2, 0) != 0.0 || k_(2, 1) != 0.0 || k_(0, 1) != 0.0 || k_(2, 2) != 1.0) {
      throw GeometryError("camera intrinsics must be upper triangular with zero skew and k22 == 1");
    }
    if (!(k_(0, 0) > 0.0 && k_(1, 1) > 0.0)) throw GeometryError("camera focal lengths must be positive");
  }

  static Mat3 intrinsics(double fx, double fy, double cx, double cy) {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  const Mat3& k() const { return k_; }
  const Mat3& r() const { return r_; }
  const Vec3& t() const { return t_; }

  Vec3 to_camera(const Vec3& x) const { return r_ * x + t_; }
  double depth(const Vec3& x) const { return to_camera(x).z(); }
  Vec3 center() const { return -r_.transpose() * t_; }

 private:
  Mat3 k_;
  Mat3 r_;
  Vec3 t_;
};

inline Vec2 project(const Camera& cam, const Vec3& x) {
  const Vec3 c = cam.to_camera(x);
  if (std::fabs(c.z()) < kInfinityEps) throw GeometryError("point lies on the camera plane (zero depth)");
  const Vec3 p = cam.k() * c;
  return Vec2(p.x() / p.z(), p.y() / p.z());
}

struct Correspondence {
  Vec2 p;  // image i
  Vec2 q;  // image j
  double score = 1.0;
};

namespace detail {

// Similarity moving the centroid to the origin with mean distance √2.
inline Mat3 hartley_transform(std::span<const Vec2> pts) {
  Vec2 c = Vec2::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const auto& p : pts) mean_dist += (p - c).norm();
  mean_dist /= static_cast<double>(pts.size());
  if (mean_dist < 1e-15) throw GeometryError("dlt: all points coincide");
  const double s = std::sqrt(2.0) / mean_dist;
  Mat3 t;
  t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return t;
}

inline bool collinear(const Vec2& a, const Vec2& b, const Vec2& c, double scale) {
  const double area = (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
  return std::fabs(area) <= 1e-10 * scale * scale;
}

}  // namespace detail

/// True when some three of the points are (numerically) collinear.
inline bool has_collinear_triple(std::span<const Vec2> pts) {
  double scale = 0.0;
  for (const auto& p : pts) scale = std::max(scale, p.cwiseAbs().maxCoeff());
  scale = std::max(scale, 1.0);
  for (std::size_t a = 0; a < pts.size(); ++a)
    for (std::size_t b = a + 1; b < pts.size(); ++b)
      for (std::size_t c = b + 1; c < pts.size(); ++c)
        if (detail::collinear(pts[a], pts[b], pts[c], scale)) return true;
  return false;
}

inline Homography normalize_det(const Homography& h) {
  // Real (sign-preserving) cube root, so λH and H normalize identically for λ < 0 too.
  return Homography(h.matrix() / std::cbrt(h.det()));
}

/// Least-squares homography mapping p → q from ≥4 pairs (normalized DLT),
/// returned with determinant 1.
inline Homography dlt(std::span<const Correspondence> pairs) {
  const std::size_t n = pairs.size();
  if (n < 4) throw GeometryError("dlt: need at least 4 correspondences, got " + std::to_string(n));
  std::vector<Vec2> src(n), dst(n);
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = pairs[i].p;
    dst[i] = pairs[i].q;
    if (!src[i].allFinite() || !dst[i].allFinite()) throw GeometryError("dlt: non-finite coordinates");
  }
  if (n == 4 && (has_collinear_triple(src) || has_collinear_triple(dst))) {
    throw GeometryError("dlt: degenerate configuration (three collinear points)");
  }
  const Mat3 t1 = detail::hartley_transform(src);
  const Mat3 t2 = detail::hartley_transform(dst);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(std::max<std::size_t>(2 * n, 9)), 9);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p = t1 * Vec3(src[i].x(), src[i].y(), 1.0);
    const Vec3 q = t2 * Vec3(dst[i].x(), dst[i].y(), 1.0);
    const double x = p.x() / p.z(), y = p.y() / p.z();
    const double u = q.x() / q.z(), v = q.y() / q.z();
    const auto r = static_cast<Eigen::Index>(2 * i);
    a.row(r) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
    a.row(r + 1) << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(7) / sv(0) < 1e-10) throw GeometryError("dlt: degenerate configuration (rank < 8)");
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  Mat3 m = t2.inverse() * hn * t1;
  m /= m.norm();
  const double d = m.determinant();
  if (!std::isfinite(d) || std::fabs(d) <= kMinHomographyDet) {
    throw GeometryError("dlt: degenerate configuration (singular estimate)");
  }
  return Homography(m / std::cbrt(d));
}

/// Homography taking view-i pixels to view-j pixels for the plane through
/// the four given corners.
inline Homography homography_from_cameras(const Camera& cam_i, const Camera& cam_j,
                                          const std::array<Vec3, 4>& plane_corners) {
  std::array<Correspondence, 4> pairs;
  for (std::size_t k = 0; k < 4; ++k) {
    if (cam_i.depth(plane_corners[k]) <= 0.0 || cam_j.depth(plane_corners[k]) <= 0.0) {
      throw GeometryError("plane corner " + std::to_string(k) + " is behind a camera");
    }
    pairs[k] = Correspondence{project(cam_i, plane_corners[k]), project(cam_j, plane_corners[k]), 1.0};
  }
  return dlt(pairs);
}

/// Frobenius norm between the determinant-normalized matrices.
inline double homography_error(const Homography& h_true, const Homography& h_est) {
  return (normalize_det(h_true).matrix() - normalize_det(h_est).matrix()).norm();
}

inline const std::array<Vec2, 4>& normalized_corners() {
  static const std::array<Vec2, 4> c{Vec2(-1, -1), Vec2(1, -1), Vec2(-1, 1), Vec2(1, 1)};
  return c;
}

inline double mean_corner_distance(const Homography& a, const Homography& b, const std::array<Vec2, 4>& pts) {
  double sum = 0.0;
  for (const auto& p : pts) sum += (apply(a, p) - apply(b, p)).norm();
  return sum / 4.0;
}

/// Mean displacement of the points (±1, ±1) between the two maps.
inline double projection_error(const Homography& h_true, const Homography& h_est) {
  return mean_corner_distance(h_true, h_est, normalized_corners());
}

/// Same measure evaluated at the pixel corners of a width×height image.
inline double corner_error_px(const Homography& h_true, const Homography& h_est, std::size_t width,
                              std::size_t height) {
  const double w = static_cast<double>(width) - 1.0, h = static_cast<double>(height) - 1.0;
  return mean_corner_distance(h_true, h_est, {Vec2(0, 0), Vec2(w, 0), Vec2(0, h), Vec2(w, h)});
}

/// Affine map from pixel coordinates [0, W−1]×[0, H−1] to [−1, 1]².
inline Mat3 pixel_to_normalized(std::size_t width, std::size_t height) {
  if (width < 2 || height < 2) throw GeometryError("normalized frame needs width, height >= 2");
  const double sx = 2.0 / (static_cast<double>(width) - 1.0);
  const double sy = 2.0 / (static_cast<double>(height) - 1.0);
  Mat3 n;
  n << sx, 0, -1, 0, sy, -1, 0, 0, 1;
  return n;
}

inline Homography to_normalized_frame(const Homography& h, std::size_t width, std::size_t height) {
  const Mat3 n = pixel_to_normalized(width, height);
  return Homography(n * h.matrix() * n.inverse());
}

inline Homography from_normalized_frame(const Homography& h, std::size_t width, std::size_t height) {
  const Mat3 n = pixel_to_normalized(width, height);
  return Homography(n.inverse() * h.matrix() * n);
}

/// Mean of the forward and backward transfer distances of one pair.
inline double symmetric_transfer_error(const Homography& h, const Homography& h_inv, const Vec2& p, const Vec2& q) {
  const auto fwd = try_apply(h, p);
  const auto bwd = try_apply(h_inv, q);
  if (!fwd || !bwd) return std::numeric_limits<double>::infinity();
  return 0.5 * ((*fwd - q).norm() + (*bwd - p).norm());
}

}  // namespace diar
