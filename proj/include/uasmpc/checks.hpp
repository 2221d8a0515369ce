// SPDX-License-Identifier: Apache-2.0
//
// Slow, independent reference computations for the keep-out geometry.
// Nothing here calls the closed-form evaluation path; these routines exist
// to cross-check it (unit tests and the check-geometry CLI command).

#pragma once

#include "uasmpc/core.hpp"
#include "uasmpc/geometry.hpp"

#include <cmath>
#include <vector>

namespace uasmpc::checks {

/// Distance from z to {s1 v1 + s2 v2 : |s|<=1} by dense grid search over the
/// coefficient box followed by local refinement. The squared distance is a
/// convex quadratic in (s1, s2), so refinement by exact alternating
/// coordinate minimization converges to the global minimum from the grid
/// seed, even along the flat valleys produced by near-parallel generators.
inline double brute_force_zonotope_distance(const Vec2& z, const Vec2& v1, const Vec2& v2,
                                            int grid = 201, int refine_iters = 400) {
  auto eval = [&](double s1, double s2) { return (s1 * v1 + s2 * v2 - z).norm(); };

  double best = std::numeric_limits<double>::infinity();
  double b1 = 0.0, b2 = 0.0;
  const double step0 = 2.0 / (grid - 1);
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      const double s1 = -1.0 + i * step0;
      const double s2 = -1.0 + j * step0;
      const double d = eval(s1, s2);
      if (d < best) {
        best = d;
        b1 = s1;
        b2 = s2;
      }
    }
  }

  for (int it = 0; it < refine_iters; ++it) {
    const double n1 = std::clamp(v1.dot(z - b2 * v2) / v1.squaredNorm(), -1.0, 1.0);
    const double n2 = std::clamp(v2.dot(z - n1 * v1) / v2.squaredNorm(), -1.0, 1.0);
    if (std::abs(n1 - b1) < 1e-15 && std::abs(n2 - b2) < 1e-15) {
      b1 = n1;
      b2 = n2;
      break;
    }
    b1 = n1;
    b2 = n2;
  }
  return std::min(best, eval(b1, b2));
}

/// Monte-Carlo estimate of the chi-square(2) quantile: empirical p-quantile
/// of squared norms of standard-normal 2-vectors.
inline double mc_chi2_quantile_2dof(double p, int samples, Rng& rng) {
  std::vector<double> sq(static_cast<std::size_t>(samples));
  for (auto& v : sq) {
    const Vec2 g = rng.normal2();
    v = g.squaredNorm();
  }
  std::sort(sq.begin(), sq.end());
  const auto idx = static_cast<std::size_t>(p * (samples - 1));
  return sq[idx];
}

struct ChanceEstimate {
  double frequency;  // empirical collision rate
  double stderr_;    // binomial standard error at the nominal rate 1-p
};

/// Empirical probability that a Gaussian obstacle center o ~ N(mu, cov)
/// overlaps the ego at x, i.e. x - o lands in the overlap rectangle.
inline ChanceEstimate mc_collision_frequency(const Vec2& x, const Vec2& mu,
                                             const geometry::Covariance2& cov,
                                             const geometry::OverlapRect& rect, double p,
                                             int samples, Rng& rng) {
  const Eigen::LLT<Mat2> llt(cov.mat());
  const Mat2 l = llt.matrixL();
  int hits = 0;
  for (int i = 0; i < samples; ++i) {
    const Vec2 o = mu + l * rng.normal2();
    const Vec2 d = x - o;
    if (std::abs(d.x()) <= rect.r_long && std::abs(d.y()) <= rect.r_lat) ++hits;
  }
  const double n = static_cast<double>(samples);
  return ChanceEstimate{hits / n, std::sqrt(p * (1.0 - p) / n)};
}

/// A point on the constraint boundary g = 0, found by bisection along a ray
/// from the obstacle mean (g is -sqrt(beta) at the mean and grows without
/// bound along any ray).
inline Vec2 point_on_boundary(const Vec2& mu, const geometry::Covariance2& cov,
                              const geometry::OverlapRect& rect, double beta,
                              const Vec2& direction) {
  const Vec2 dir = direction.normalized();
  double lo = 0.0;
  double hi = 1.0;
  while (geometry::constraint_value(mu + hi * dir, mu, cov, rect, beta) < 0.0) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (geometry::constraint_value(mu + mid * dir, mu, cov, rect, beta) < 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return mu + hi * dir;
}

}  // namespace uasmpc::checks
