#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diar/error.hpp"
#include "diar/image.hpp"
#include "diar/numeric.hpp"

namespace diar {

namespace detail {

inline void check_stack(std::span<const Image> frames, std::span<const Mask> masks) {
  if (frames.empty()) throw ShapeError("empty frame stack");
  for (const auto& f : frames) require_same_shape(frames[0], f, "frame stack");
  if (!masks.empty()) {
    if (masks.size() != frames.size()) throw ShapeError("one mask per frame is required");
    for (const auto& m : masks) {
      if (m.height != frames[0].height() || m.width != frames[0].width()) throw ShapeError("mask extents differ from frames");
    }
  }
}

inline bool valid_at(std::span<const Mask> masks, std::size_t t, std::size_t p) {
  return masks.empty() || masks[t].valid[p] != 0;
}

[[noreturn]] inline void no_observation(const Image& f, std::size_t p) {
  throw Error("pixel (x=" + std::to_string(p % f.width()) + ", y=" + std::to_string(p / f.width()) +
              ") has no valid observation");
}

// Per-entry reduction over the valid observations of a stack.
template <typename Reduce>
Image reduce_stack(std::span<const Image> frames, std::span<const Mask> masks, Reduce reduce) {
  check_stack(frames, masks);
  const Image& f0 = frames[0];
  Image out(f0.height(), f0.width(), f0.channels());
  std::vector<double> values;
  values.reserve(frames.size());
  const std::size_t c = f0.channels();
  for (std::size_t p = 0; p < f0.pixels(); ++p) {
    for (std::size_t k = 0; k < c; ++k) {
      values.clear();
      for (std::size_t t = 0; t < frames.size(); ++t)
        if (valid_at(masks, t, p)) values.push_back(frames[t].data()[p * c + k]);
      if (values.empty()) no_observation(f0, p);
      out.data()[p * c + k] = static_cast<float>(reduce(values));
    }
  }
  out.clamp();
  return out;
}

inline double lower_median(std::vector<double>& v) {
  const std::size_t mid = (v.size() - 1) / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  return v[mid];
}

}  // namespace detail

/// Per-pixel median of the valid observations; even counts take the lower
/// median.
inline Image median_stack(std::span<const Image> frames, std::span<const Mask> masks = {}) {
  return detail::reduce_stack(frames, masks, [](std::vector<double>& v) { return detail::lower_median(v); });
}

/// Per-pixel arithmetic mean of the valid observations.
inline Image mean_stack(std::span<const Image> frames, std::span<const Mask> masks = {}) {
  return detail::reduce_stack(frames, masks,
                              [](std::vector<double>& v) { return exact_sum(v) / static_cast<double>(v.size()); });
}

/// Replaces masked entries by the per-pixel valid median.
inline std::vector<Image> impute_masked(std::span<const Image> frames, std::span<const Mask> masks) {
  std::vector<Image> out(frames.begin(), frames.end());
  if (masks.empty()) return out;
  const Image med = median_stack(frames, masks);
  const std::size_t c = med.channels();
  for (std::size_t t = 0; t < out.size(); ++t)
    for (std::size_t p = 0; p < med.pixels(); ++p)
      if (!masks[t].valid[p])
        for (std::size_t k = 0; k < c; ++k) out[t].data()[p * c + k] = med.data()[p * c + k];
  return out;
}

// ---------------------------------------------------------------------------
// Robust PCA

/// (H·W·C)×T matrix whose column t is frame t flattened.
inline Eigen::MatrixXd stack_matrix(std::span<const Image> frames) {
  detail::check_stack(frames, {});
  Eigen::MatrixXd d(static_cast<Eigen::Index>(frames[0].size()), static_cast<Eigen::Index>(frames.size()));
  for (std::size_t t = 0; t < frames.size(); ++t)
    for (std::size_t i = 0; i < frames[t].size(); ++i)
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = frames[t].data()[i];
  return d;
}

struct RpcaConfig {
  double lambda = -1.0;  // <= 0 selects 1/√max(rows, cols)
  double tol = 1e-7;
  int max_iters = 500;
};

struct RpcaResult {
  Eigen::MatrixXd low_rank;
  Eigen::MatrixXd sparse;
  int iterations = 0;
  bool converged = false;
  std::vector<double> residuals;  // ‖D − L − S‖_F / ‖D‖_F per iteration
};

/// Principal component pursuit by the inexact augmented Lagrange multiplier
/// method.
inline RpcaResult rpca(const Eigen::MatrixXd& d, const RpcaConfig& cfg = {}) {
  if (d.size() == 0) throw ShapeError("rpca: empty matrix");
  const Eigen::Index m = d.rows(), n = d.cols();
  RpcaResult r{Eigen::MatrixXd::Zero(m, n), Eigen::MatrixXd::Zero(m, n), 0, false, {}};
  const double norm_d = d.norm();
  if (norm_d == 0.0) {
    r.iterations = 1;
    r.converged = true;
    r.residuals.push_back(0.0);
    return r;
  }
  const double lambda = cfg.lambda > 0.0 ? cfg.lambda : 1.0 / std::sqrt(static_cast<double>(std::max(m, n)));
  Eigen::BDCSVD<Eigen::MatrixXd> svd0(d);
  const double norm_two = svd0.singularValues()(0);
  const double norm_inf = d.cwiseAbs().maxCoeff() / lambda;
  Eigen::MatrixXd y = d / std::max(norm_two, norm_inf);
  double mu = 1.25 / norm_two;
  const double mu_bar = mu * 1e7;
  const double rho = 1.5;
  Eigen::MatrixXd prev_l = r.low_rank, prev_s = r.sparse;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    const Eigen::MatrixXd s_target = d - r.low_rank + y / mu;
    const double shrink = lambda / mu;
    r.sparse = s_target.unaryExpr([shrink](double v) {
      return v > shrink ? v - shrink : (v < -shrink ? v + shrink : 0.0);
    });
    Eigen::BDCSVD<Eigen::MatrixXd> svd(d - r.sparse + y / mu, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd sv = (svd.singularValues().array() - 1.0 / mu).max(0.0);
    r.low_rank = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
    const Eigen::MatrixXd z = d - r.low_rank - r.sparse;
    y += mu * z;
    mu = std::min(mu * rho, mu_bar);
    const double res = z.norm() / norm_d;
    const double change = std::max((r.low_rank - prev_l).norm(), (r.sparse - prev_s).norm()) / norm_d;
    prev_l = r.low_rank;
    prev_s = r.sparse;
    r.residuals.push_back(res);
    r.iterations = it;
    // A small primal residual alone can occur before L and S separate.
    if (res < cfg.tol && change < std::sqrt(cfg.tol)) {
      r.converged = true;
      break;
    }
  }
  return r;
}

struct BaselineResult {
  Image image;
  bool converged = true;
};

/// RPCA reconstruction: per-pixel median over the columns of the low-rank
/// component.
inline BaselineResult rpca_reconstruct(std::span<const Image> frames, std::span<const Mask> masks = {},
                                       const RpcaConfig& cfg = {}) {
  detail::check_stack(frames, masks);
  const std::vector<Image> filled = impute_masked(frames, masks);
  // For one column λ‖d‖₁ ≤ ‖d‖₂ (Cauchy-Schwarz with λ = 1/√rows), so PCP
  // puts a single frame entirely in S; the frame is its own low-rank part.
  if (filled.size() == 1) return BaselineResult{filled[0], true};
  const RpcaResult r = rpca(stack_matrix(filled), cfg);
  const Image& f0 = frames[0];
  std::vector<Image> columns;
  for (Eigen::Index t = 0; t < r.low_rank.cols(); ++t) {
    std::vector<float> col(f0.size());
    for (std::size_t i = 0; i < col.size(); ++i) col[i] = static_cast<float>(r.low_rank(static_cast<Eigen::Index>(i), t));
    columns.emplace_back(f0.height(), f0.width(), f0.channels(), std::move(col));
  }
  return BaselineResult{median_stack(columns), r.converged};
}

// ---------------------------------------------------------------------------
// Intrinsic image (median of log-gradients, Poisson reintegration)

inline constexpr double kLogFloor = 1.0 / 255.0;

namespace detail {

// y = DᵀD x for forward differences with Neumann boundaries (graph Laplacian).
inline void apply_gradient_normal(const std::vector<double>& x, std::vector<double>& y, std::size_t h, std::size_t w) {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t p = r * w + c;
      if (c + 1 < w) {
        const double e = x[p + 1] - x[p];
        y[p + 1] += e;
        y[p] -= e;
      }
      if (r + 1 < h) {
        const double e = x[p + w] - x[p];
        y[p + w] += e;
        y[p] -= e;
      }
    }
  }
}

}  // namespace detail

struct MleConfig {
  double tol = 1e-8;       // relative CG residual
  std::size_t max_iters = 0;  // 0 selects 10·H·W
  double log_floor = kLogFloor;  // added before the log; 0 requires strictly positive input
};

/// Reflectance estimate from the per-pixel temporal median of log-image
/// derivatives (filters [1, −1] and [1, −1]ᵀ), reintegrated by conjugate
/// gradients and scaled so its mean matches the temporal-median image.
inline BaselineResult weiss_mle(std::span<const Image> frames, std::span<const Mask> masks = {},
                                const MleConfig& cfg = {}) {
  detail::check_stack(frames, masks);
  const std::vector<Image> filled = impute_masked(frames, masks);
  const Image& f0 = filled[0];
  const std::size_t h = f0.height(), w = f0.width(), nc = f0.channels(), np = h * w, nt = filled.size();
  const Image med_img = median_stack(filled);
  const std::size_t max_iters = cfg.max_iters ? cfg.max_iters : 10 * np;
  Image out(h, w, nc);
  bool converged = true;
  std::vector<double> vals(nt);
  for (std::size_t ch = 0; ch < nc; ++ch) {
    std::vector<std::vector<double>> logs(nt, std::vector<double>(np));
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t p = 0; p < np; ++p) logs[t][p] = std::log(static_cast<double>(filled[t].data()[p * nc + ch]) + cfg.log_floor);
    // Median derivative fields; b = Dᵀ g.
    std::vector<double> b(np, 0.0), x(np, 0.0);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t p = r * w + c;
        if (c + 1 < w) {
          for (std::size_t t = 0; t < nt; ++t) vals[t] = logs[t][p + 1] - logs[t][p];
          const double g = detail::lower_median(vals);
          b[p + 1] += g;
          b[p] -= g;
        }
        if (r + 1 < h) {
          for (std::size_t t = 0; t < nt; ++t) vals[t] = logs[t][p + w] - logs[t][p];
          const double g = detail::lower_median(vals);
          b[p + w] += g;
          b[p] -= g;
        }
        for (std::size_t t = 0; t < nt; ++t) vals[t] = logs[t][p];
        x[p] = detail::lower_median(vals);
      }
    }
    // Conjugate gradients on the singular but consistent normal equations.
    std::vector<double> ax(np), res(np), dir(np), ad(np);
    detail::apply_gradient_normal(x, ax, h, w);
    double b_norm = 0.0;
    for (std::size_t p = 0; p < np; ++p) {
      res[p] = b[p] - ax[p];
      b_norm += b[p] * b[p];
    }
    b_norm = std::sqrt(b_norm);
    dir = res;
    double rr = 0.0;
    for (double v : res) rr += v * v;
    const double target = cfg.tol * std::max(b_norm, 1e-300);
    std::size_t it = 0;
    while (std::sqrt(rr) > target && it < max_iters) {
      detail::apply_gradient_normal(dir, ad, h, w);
      double dad = 0.0;
      for (std::size_t p = 0; p < np; ++p) dad += dir[p] * ad[p];
      if (dad <= 0.0) break;
      const double alpha = rr / dad;
      double rr_new = 0.0;
      for (std::size_t p = 0; p < np; ++p) {
        x[p] += alpha * dir[p];
        res[p] -= alpha * ad[p];
        rr_new += res[p] * res[p];
      }
      const double beta = rr_new / rr;
      rr = rr_new;
      for (std::size_t p = 0; p < np; ++p) dir[p] = res[p] + beta * dir[p];
      ++it;
    }
    if (b_norm > 0.0 && std::sqrt(rr) > target) converged = false;
    // Free constant: mean of exp(x + c) equals mean of (median image + floor).
    double mean_exp = 0.0, mean_med = 0.0;
    for (std::size_t p = 0; p < np; ++p) {
      mean_exp += std::exp(x[p]);
      mean_med += static_cast<double>(med_img.data()[p * nc + ch]) + cfg.log_floor;
    }
    const double shift = std::log(mean_med) - std::log(mean_exp);
    for (std::size_t p = 0; p < np; ++p) out.data()[p * nc + ch] = static_cast<float>(std::exp(x[p] + shift) - cfg.log_floor);
  }
  out.clamp();
  return BaselineResult{out, converged};
}

}  // namespace diar
