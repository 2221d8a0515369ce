// SPDX-License-Identifier: Apache-2.0
//
// Probabilistic keep-out geometry for rectangular vehicles under bivariate
// Gaussian position uncertainty.
//
// Vehicles are axis-aligned rectangles. Two rectangles overlap iff their
// center offset lies in the Minkowski overlap rectangle R. For a Gaussian
// obstacle center o ~ N(mu, Sigma), the ego center must stay outside
// E(+)R, where E is the Mahalanobis ellipsoid containing o with
// probability p. In Mahalanobis coordinates z = Sigma^{-1/2}(x - mu) the
// ellipsoid becomes the disk of radius sqrt(beta) and R becomes a
// parallelogram (a two-generator zonotope), so the exact test reduces to
//
//     dist(z, zonotope) >= sqrt(beta),      beta = chi2 quantile, 2 dof.
//
// The distance to the parallelogram is evaluated in closed form from nine
// candidate projections: the interior, the four edges, the four corners.

#pragma once

#include "uasmpc/core.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace uasmpc::geometry {

/// Chi-square quantile with 2 degrees of freedom: beta = -2 ln(1 - p).
inline double chi2_quantile_2dof(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::domain_error("coverage level p must lie in (0,1)");
  return -2.0 * std::log1p(-p);
}

/// Chi-square CDF with 2 degrees of freedom.
inline double chi2_cdf_2dof(double x) {
  return x <= 0.0 ? 0.0 : -std::expm1(-0.5 * x);
}

/// Per-step coverage level and its chi-square(2) quantile.
struct CoverageLevel {
  double p;
  double beta;

  explicit CoverageLevel(double p_) : p(p_), beta(chi2_quantile_2dof(p_)) {}
};

/// Symmetric positive definite 2x2 covariance (m^2). Eigenvalues are floored
/// at kEigFloor on construction; predicted covariances can be near-singular
/// and the Mahalanobis transform needs the inverse square root.
class Covariance2 {
 public:
  static constexpr double kEigFloor = 1e-9;

  Covariance2() : m_(Mat2::Identity()) {}

  Covariance2(double xx, double xy, double yy) {
    Mat2 m;
    m << xx, xy, xy, yy;
    init(m);
  }

  explicit Covariance2(const Mat2& m) { init(0.5 * (m + m.transpose())); }

  const Mat2& mat() const { return m_; }
  double xx() const { return m_(0, 0); }
  double xy() const { return m_(0, 1); }
  double yy() const { return m_(1, 1); }

  double det() const { return m_.determinant(); }

  /// Elementwise alpha * Sigma. Exact (no re-flooring), so scaling by alpha
  /// and 1/alpha round-trips and alpha = 1 is the identity.
  Covariance2 scaled(double alpha) const {
    if (!(alpha > 0.0)) throw std::domain_error("covariance scale must be positive");
    Covariance2 out;
    out.m_ = alpha * m_;
    return out;
  }

 private:
  void init(const Mat2& sym) {
    if (!sym.allFinite()) throw std::runtime_error("covariance has non-finite entries");
    Eigen::SelfAdjointEigenSolver<Mat2> es(sym);
    Vec2 ev = es.eigenvalues().cwiseMax(kEigFloor);
    m_ = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    m_ = 0.5 * (m_ + m_.transpose());
  }

  Mat2 m_;
};

/// Symmetric inverse square root M with M * Sigma * M = I.
inline Mat2 inv_sqrt(const Covariance2& cov) {
  Eigen::SelfAdjointEigenSolver<Mat2> es(cov.mat());
  const Vec2 ev = es.eigenvalues();
  if (!(ev.minCoeff() > 0.0))
    throw std::runtime_error("covariance not positive definite after flooring");
  const Vec2 inv_sqrt_ev(1.0 / std::sqrt(ev(0)), 1.0 / std::sqrt(ev(1)));
  return es.eigenvectors() * inv_sqrt_ev.asDiagonal() * es.eigenvectors().transpose();
}

/// Center-to-center overlap rectangle: half extents of the Minkowski sum of
/// two axis-aligned vehicle rectangles.
struct OverlapRect {
  double r_long;  // half-length, m
  double r_lat;   // half-width, m
};

inline OverlapRect overlap_rect(const Vec2& ev_half, const Vec2& nev_half) {
  if (!(ev_half.x() > 0.0 && ev_half.y() > 0.0 && nev_half.x() > 0.0 && nev_half.y() > 0.0))
    throw std::domain_error("rectangle half extents must be positive");
  return OverlapRect{ev_half.x() + nev_half.x(), ev_half.y() + nev_half.y()};
}

/// Two-generator zonotope {s1 v1 + s2 v2 : |s1|,|s2| <= 1}, the image of the
/// overlap rectangle in Mahalanobis coordinates.
struct Zonotope2 {
  Vec2 v1;
  Vec2 v2;

  static constexpr double kDetTol = 1e-12;

  Zonotope2(const Vec2& g1, const Vec2& g2) : v1(g1), v2(g2) {
    if (std::abs(det()) <= kDetTol)
      throw std::runtime_error("zonotope generators are degenerate");
  }

  double det() const { return v1.x() * v2.y() - v1.y() * v2.x(); }

  Mat2 generator_matrix() const {
    Mat2 v;
    v.col(0) = v1;
    v.col(1) = v2;
    return v;
  }
};

/// Overlap rectangle mapped through M = Sigma^{-1/2}.
inline Zonotope2 rect_to_zonotope(const OverlapRect& rect, const Mat2& m) {
  return Zonotope2(m * Vec2(rect.r_long, 0.0), m * Vec2(0.0, rect.r_lat));
}

struct ZonotopeDistance {
  double distance;
  Vec2 nearest;  // attaining point inside the zonotope
};

/// Euclidean distance from z to the parallelogram, with the attaining point.
/// Nine candidates: the coordinate inversion clamped to the box (covers the
/// interior), orthogonal projections onto the four edges clamped to their
/// segments, and the four corners. Zero exactly when the inversion lands in
/// [-1,1]^2.
inline ZonotopeDistance dist_to_zonotope(const Vec2& z, const Zonotope2& b) {
  const Mat2 v = b.generator_matrix();
  const double det = b.det();
  if (std::abs(det) <= Zonotope2::kDetTol)
    throw std::runtime_error("zonotope generators are degenerate");

  Mat2 v_inv;
  v_inv << v(1, 1), -v(0, 1), -v(1, 0), v(0, 0);
  v_inv /= det;

  const Vec2 s = v_inv * z;
  if (std::abs(s.x()) <= 1.0 && std::abs(s.y()) <= 1.0)
    return ZonotopeDistance{0.0, z};

  ZonotopeDistance best{std::numeric_limits<double>::infinity(), Vec2::Zero()};
  auto consider = [&](const Vec2& point) {
    const double d = (point - z).norm();
    if (d < best.distance) best = ZonotopeDistance{d, point};
  };

  // edges s1 = +/-1 (free coordinate along v2) and s2 = +/-1 (along v1)
  for (double sign : {-1.0, 1.0}) {
    const Vec2 base1 = sign * b.v1;
    const double t1 = std::clamp(b.v2.dot(z - base1) / b.v2.squaredNorm(), -1.0, 1.0);
    consider(base1 + t1 * b.v2);

    const Vec2 base2 = sign * b.v2;
    const double t2 = std::clamp(b.v1.dot(z - base2) / b.v1.squaredNorm(), -1.0, 1.0);
    consider(base2 + t2 * b.v1);
  }
  // corners
  for (double s1 : {-1.0, 1.0})
    for (double s2 : {-1.0, 1.0}) consider(s1 * b.v1 + s2 * b.v2);

  return best;
}

/// Collision-avoidance margin for ego center x against an obstacle with
/// Gaussian center N(mu, cov) and overlap rectangle rect:
///
///     g = dist( Sigma^{-1/2}(x - mu), Sigma^{-1/2} R ) - sqrt(beta).
///
/// The constraint is satisfied iff g >= 0.
inline double constraint_value(const Vec2& x, const Vec2& mu, const Covariance2& cov,
                               const OverlapRect& rect, double beta) {
  const Mat2 m = inv_sqrt(cov);
  const Zonotope2 b = rect_to_zonotope(rect, m);
  return dist_to_zonotope(m * (x - mu), b).distance - std::sqrt(beta);
}

}  // namespace uasmpc::geometry
