#pragma once

#include <algorithm>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diar/descriptors.hpp"
#include "diar/error.hpp"
#include "diar/geometry.hpp"
#include "diar/image.hpp"
#include "diar/rng.hpp"

namespace diar {

/// s(j, i) = cosine similarity of x₂ row j and x₁ row i.
struct ScoreMatrix {
  Eigen::MatrixXf s;
};

struct Match {
  std::size_t i1, i2;
  float score;

  friend bool operator==(const Match&, const Match&) = default;
};

using MatchSet = std::vector<Match>;

namespace detail {

inline DescriptorMatrix normalized_rows(const DescriptorMatrix& x, const char* which) {
  if (x.rows() == 0 || x.cols() == 0) throw ShapeError(std::string("score_matrix: ") + which + " is empty");
  DescriptorMatrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).cast<double>().norm();
    if (!(n > kMinDescriptorNorm)) {
      throw ShapeError(std::string("score_matrix: ") + which + " row " + std::to_string(r) + " has zero norm");
    }
    out.row(r) = (x.row(r).cast<double>() / n).cast<float>();
  }
  return out;
}

}  // namespace detail

inline ScoreMatrix score_matrix(const DescriptorMatrix& x1, const DescriptorMatrix& x2) {
  if (x1.cols() != x2.cols()) throw ShapeError("score_matrix: descriptor widths differ");
  const DescriptorMatrix a = detail::normalized_rows(x1, "x1"), b = detail::normalized_rows(x2, "x2");
  ScoreMatrix out{(b * a.transpose()).cwiseMax(-1.0f).cwiseMin(1.0f)};
  return out;
}

inline ScoreMatrix score_matrix(const KeypointMatrix& x1, const KeypointMatrix& x2) { return score_matrix(x1.x, x2.x); }

/// Pairs (i, j) where i is the best x₁ for x₂[j] and j the best x₂ for
/// x₁[i], with score ≥ min_score. Ties go to the lowest index.
inline MatchSet mutual_matches(const ScoreMatrix& sm, float min_score) {
  const auto& s = sm.s;
  const Eigen::Index n2 = s.rows(), n1 = s.cols();
  std::vector<Eigen::Index> best_i(static_cast<std::size_t>(n2), -1), best_j(static_cast<std::size_t>(n1), -1);
  std::vector<float> best_j_score(static_cast<std::size_t>(n1), -std::numeric_limits<float>::infinity());
  for (Eigen::Index j = 0; j < n2; ++j) {
    float best = -std::numeric_limits<float>::infinity();
    for (Eigen::Index i = 0; i < n1; ++i) {
      const float v = s(j, i);
      if (v > best) {
        best = v;
        best_i[static_cast<std::size_t>(j)] = i;
      }
      if (v > best_j_score[static_cast<std::size_t>(i)]) {
        best_j_score[static_cast<std::size_t>(i)] = v;
        best_j[static_cast<std::size_t>(i)] = j;
      }
    }
  }
  MatchSet out;
  for (Eigen::Index i = 0; i < n1; ++i) {
    const Eigen::Index j = best_j[static_cast<std::size_t>(i)];
    if (j < 0 || best_i[static_cast<std::size_t>(j)] != i) continue;
    if (s(j, i) >= min_score) out.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), s(j, i)});
  }
  return out;
}

/// mutual_matches(score_matrix(x1, x2)) without materializing the N₂×N₁
/// matrix: scores are produced `block` rows of x₂ at a time.
inline MatchSet mutual_matches_streaming(const DescriptorMatrix& x1, const DescriptorMatrix& x2, float min_score,
                                         std::size_t block = 256) {
  if (x1.cols() != x2.cols()) throw ShapeError("score_matrix: descriptor widths differ");
  const DescriptorMatrix a = detail::normalized_rows(x1, "x1"), b = detail::normalized_rows(x2, "x2");
  const Eigen::Index n1 = a.rows(), n2 = b.rows();
  const Eigen::Index bs = static_cast<Eigen::Index>(std::max<std::size_t>(block, 1));
  std::vector<Eigen::Index> best_i(static_cast<std::size_t>(n2), -1), best_j(static_cast<std::size_t>(n1), -1);
  std::vector<float> best_i_score(static_cast<std::size_t>(n2)), best_j_score(static_cast<std::size_t>(n1), -2.0f);
  const DescriptorMatrix at = a.transpose();
  Eigen::MatrixXf chunk;
  for (Eigen::Index j0 = 0; j0 < n2; j0 += bs) {
    const Eigen::Index rows = std::min(bs, n2 - j0);
    chunk.noalias() = b.middleRows(j0, rows) * at;
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Eigen::Index j = j0 + r;
      float best = -2.0f;
      for (Eigen::Index i = 0; i < n1; ++i) {
        const float v = std::clamp(chunk(r, i), -1.0f, 1.0f);
        if (v > best) {
          best = v;
          best_i[static_cast<std::size_t>(j)] = i;
        }
        if (v > best_j_score[static_cast<std::size_t>(i)]) {
          best_j_score[static_cast<std::size_t>(i)] = v;
          best_j[static_cast<std::size_t>(i)] = j;
        }
      }
      best_i_score[static_cast<std::size_t>(j)] = best;
    }
  }
  MatchSet out;
  for (Eigen::Index i = 0; i < n1; ++i) {
    const Eigen::Index j = best_j[static_cast<std::size_t>(i)];
    if (j < 0 || best_i[static_cast<std::size_t>(j)] != i) continue;
    const float v = best_i_score[static_cast<std::size_t>(j)];
    if (v >= min_score) out.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), v});
  }
  return out;
}

// ---------------------------------------------------------------------------
// RANSAC

struct RansacConfig {
  double threshold_px = 3.0;
  int max_iters = 2000;
  std::uint64_t seed = 0;
};

struct RansacResult {
  std::optional<Homography> homography;  // empty on failure
  std::vector<std::uint8_t> inliers;  // per correspondence, under the final model
  std::size_t n_inliers = 0;
  double mean_residual = 0.0;
  std::string failure;

  bool ok() const { return homography.has_value(); }
};

namespace detail {

struct Consensus {
  std::size_t count = 0;
  double residual_sum = 0.0;
  std::vector<std::uint8_t> mask;
};

inline Consensus consensus(const Homography& h, std::span<const Correspondence> corr, double threshold) {
  Consensus c;
  c.mask.assign(corr.size(), 0);
  const Homography h_inv = h.inverse();
  for (std::size_t k = 0; k < corr.size(); ++k) {
    const double e = symmetric_transfer_error(h, h_inv, corr[k].p, corr[k].q);
    if (e < threshold) {
      c.mask[k] = 1;
      ++c.count;
      c.residual_sum += e;
    }
  }
  return c;
}

inline bool better(const Consensus& a, const Consensus& b) {
  if (a.count != b.count) return a.count > b.count;
  if (a.count == 0) return false;
  return a.residual_sum / static_cast<double>(a.count) < b.residual_sum / static_cast<double>(b.count);
}

}  // namespace detail

/// Most-inliers homography p → q over random 4-samples, refit by DLT on the
/// consensus set. Failure is reported in the result, never thrown.
inline RansacResult ransac_homography(std::span<const Correspondence> corr, const RansacConfig& cfg) {
  RansacResult out;
  if (corr.size() < 4) {
    out.failure = "fewer than 4 matches (" + std::to_string(corr.size()) + ")";
    return out;
  }
  Rng rng(derive_seed(cfg.seed, 0x5a4c));
  detail::Consensus best;
  std::optional<Homography> best_h;
  std::array<Correspondence, 4> sample;
  for (int it = 0; it < cfg.max_iters; ++it) {
    std::array<std::size_t, 4> idx{};
    for (std::size_t a = 0; a < 4; ++a) {
      bool fresh;
      do {
        idx[a] = rng.index(corr.size());
        fresh = std::find(idx.begin(), idx.begin() + static_cast<long>(a), idx[a]) == idx.begin() + static_cast<long>(a);
      } while (!fresh);
      sample[a] = corr[idx[a]];
    }
    Homography h;
    try {
      h = dlt(sample);
    } catch (const GeometryError&) {
      continue;
    }
    detail::Consensus c = detail::consensus(h, corr, cfg.threshold_px);
    if (detail::better(c, best)) {
      best = std::move(c);
      best_h = h;
    }
  }
  if (!best_h || best.count < 4) {
    out.failure = "best consensus has fewer than 4 inliers (" + std::to_string(best.count) + ")";
    return out;
  }
  std::vector<Correspondence> in;
  for (std::size_t k = 0; k < corr.size(); ++k)
    if (best.mask[k]) in.push_back(corr[k]);
  Homography final_h = *best_h;
  try {
    final_h = dlt(in);
  } catch (const GeometryError&) {
    // Keep the minimal-sample model.
  }
  detail::Consensus fc = detail::consensus(final_h, corr, cfg.threshold_px);
  if (fc.count < 4) {
    final_h = *best_h;
    fc = std::move(best);
  }
  out.homography = final_h;
  out.n_inliers = fc.count;
  out.mean_residual = fc.count ? fc.residual_sum / static_cast<double>(fc.count) : 0.0;
  out.inliers = std::move(fc.mask);
  return out;
}

/// Correspondences reference (x₁) → frame (x₂) from a match set.
inline std::vector<Correspondence> correspondences(const MatchSet& matches, std::span<const Vec2> coords1,
                                                   std::span<const Vec2> coords2) {
  std::vector<Correspondence> out;
  out.reserve(matches.size());
  for (const auto& m : matches) {
    if (m.i1 >= coords1.size() || m.i2 >= coords2.size()) throw ShapeError("match index outside the coordinate list");
    out.push_back({coords1[m.i1], coords2[m.i2], m.score});
  }
  return out;
}

inline RansacResult ransac_homography(const MatchSet& matches, std::span<const Vec2> coords1,
                                      std::span<const Vec2> coords2, const RansacConfig& cfg) {
  const auto corr = correspondences(matches, coords1, coords2);
  return ransac_homography(std::span<const Correspondence>(corr), cfg);
}

// ---------------------------------------------------------------------------
// Sequence alignment

struct AlignConfig {
  std::vector<double> scales{1.0, 0.75, 0.5};
  float min_score = 0.0f;
  RansacConfig ransac;
  std::size_t block_rows = 256;
};

struct FrameAlignment {
  std::size_t frame = 0;
  std::size_t n_matches = 0;
  std::size_t n_inliers = 0;
  Homography homography;  // reference → frame
  bool failed = false;
  std::string reason;
};

struct AlignedSequence {
  std::vector<Image> frames;  // warped into the reference frame
  std::vector<Mask> masks;
  std::vector<std::uint8_t> usable;  // 0 for failed frames
  std::vector<Homography> homographies;
  std::vector<FrameAlignment> diagnostics;  // non-reference frames only

  std::vector<Image> usable_frames() const {
    std::vector<Image> out;
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (usable[i]) out.push_back(frames[i]);
    return out;
  }
  std::vector<Mask> usable_masks() const {
    std::vector<Mask> out;
    for (std::size_t i = 0; i < masks.size(); ++i)
      if (usable[i]) out.push_back(masks[i]);
    return out;
  }
};

/// Estimates reference → frame homographies by mutual descriptor matching
/// and RANSAC, then pulls every frame into the reference raster.
inline AlignedSequence align_sequence(std::span<const Image> frames, std::size_t ref_index,
                                      const DescriptorProvider& provider, const AlignConfig& cfg) {
  if (ref_index >= frames.size()) {
    throw ConfigError("align_sequence: reference index " + std::to_string(ref_index) + " outside a sequence of " +
                      std::to_string(frames.size()));
  }
  const Image& ref = frames[ref_index];
  AlignedSequence out;
  std::optional<KeypointMatrix> ref_kp;
  std::string ref_problem;
  try {
    ref_kp = drop_degenerate(pyramid_keypoints(ref, cfg.scales, provider));
    if (ref_kp->size() == 0) ref_problem = "reference frame has no usable descriptors";
  } catch (const ShapeError& e) {
    ref_problem = e.what();
  }
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (t == ref_index) {
      out.frames.push_back(ref);
      out.masks.emplace_back(ref.height(), ref.width(), true);
      out.usable.push_back(1);
      out.homographies.push_back(Homography::identity());
      continue;
    }
    FrameAlignment d;
    d.frame = t;
    try {
      if (!ref_problem.empty()) throw ShapeError(ref_problem);
      const KeypointMatrix kp = drop_degenerate(pyramid_keypoints(frames[t], cfg.scales, provider));
      if (kp.size() == 0) throw ShapeError("frame has no usable descriptors");
      const MatchSet m = mutual_matches_streaming(ref_kp->x, kp.x, cfg.min_score, cfg.block_rows);
      d.n_matches = m.size();
      RansacConfig rc = cfg.ransac;
      rc.seed = derive_seed(cfg.ransac.seed, t);
      const RansacResult r = ransac_homography(m, ref_kp->coords, kp.coords, rc);
      if (!r.ok()) throw GeometryError(r.failure);
      d.n_inliers = r.n_inliers;
      d.homography = *r.homography;
    } catch (const Error& e) {
      d.failed = true;
      d.reason = e.what();
    }
    if (d.failed) {
      out.frames.push_back(frames[t]);
      out.masks.emplace_back(frames[t].height(), frames[t].width(), false);
      out.usable.push_back(0);
    } else {
      WarpResult w = warp(frames[t], d.homography, ref.height(), ref.width());
      out.frames.push_back(std::move(w.image));
      out.masks.push_back(std::move(w.mask));
      out.usable.push_back(1);
    }
    out.homographies.push_back(d.homography);
    out.diagnostics.push_back(std::move(d));
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string alignment_csv_header() {
  return "seq_id,frame,n_matches,n_inliers,h0,h1,h2,h3,h4,h5,h6,h7,h8,failed";
}

inline std::string alignment_csv_row(std::size_t seq_id, const FrameAlignment& d) {
  std::string row = std::to_string(seq_id) + "," + std::to_string(d.frame) + "," + std::to_string(d.n_matches) + "," +
                    std::to_string(d.n_inliers);
  for (double v : d.homography.to_array()) row += "," + format_double(v);
  row += d.failed ? ",1" : ",0";
  return row;
}

}  // namespace diar
