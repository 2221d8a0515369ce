// SPDX-License-Identifier: Apache-2.0
//
// Shared small types: 2D aliases, deterministic RNG, polyline utilities.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace uasmpc {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

inline constexpr double kPi = 3.14159265358979323846;

/// Deterministic random stream. Gaussians come from Box-Muller on top of
/// the raw 64-bit stream so that sequences are reproducible bit- exactly
/// from the seed, independent of the standard library's distribution
/// implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {
    // warm up splitmix so nearby seeds decorrelate
    for (int i = 0; i < 4; ++i) next_u64();
  }

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * kPi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  Vec2 normal2() {
    const double x = normal();
    const double y = normal();
    return Vec2(x, y);
  }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Piecewise-linear path with arc-length parameterization.
class Polyline {
 public:
  Polyline() = default;

  explicit Polyline(std::vector<Vec2> pts) : pts_(std::move(pts)) {
    if (pts_.size() < 2)
      throw std::invalid_argument("polyline needs at least 2 waypoints");
    cum_.resize(pts_.size());
    cum_[0] = 0.0;
    for (std::size_t i = 1; i < pts_.size(); ++i) {
      const double seg = (pts_[i] - pts_[i - 1]).norm();
      if (seg <= 0.0)
        throw std::invalid_argument("polyline arc length must be strictly increasing");
      cum_[i] = cum_[i - 1] + seg;
    }
  }

  const std::vector<Vec2>& points() const { return pts_; }
  double length() const { return cum_.back(); }

  /// Point at arc length s, clamped to [0, length].
  Vec2 point_at(double s) const {
    const std::size_t i = segment_of(s);
    const double t = (s_clamped(s) - cum_[i]) / (cum_[i + 1] - cum_[i]);
    return pts_[i] + t * (pts_[i + 1] - pts_[i]);
  }

  /// Unit tangent at arc length s.
  Vec2 tangent_at(double s) const {
    const std::size_t i = segment_of(s);
    return (pts_[i + 1] - pts_[i]).normalized();
  }

  struct Projection {
    double s;         // arc length of the closest point
    double distance;  // Euclidean distance to the path
  };

  /// Closest point on the path to p.
  Projection project(const Vec2& p) const {
    Projection best{0.0, std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i + 1 < pts_.size(); ++i) {
      const Vec2 d = pts_[i + 1] - pts_[i];
      const double len2 = d.squaredNorm();
      double t = d.dot(p - pts_[i]) / len2;
      t = std::clamp(t, 0.0, 1.0);
      const Vec2 q = pts_[i] + t * d;
      const double dist = (q - p).norm();
      if (dist < best.distance) {
        best.distance = dist;
        best.s = cum_[i] + t * std::sqrt(len2);
      }
    }
    return best;
  }

  /// Uniformly resampled copy with the given spacing. The final waypoint is
  /// always kept so the total length is preserved.
  Polyline resampled(double spacing) const {
    if (spacing <= 0.0) throw std::invalid_argument("spacing must be positive");
    std::vector<Vec2> out;
    const double total = length();
    const auto n = static_cast<std::size_t>(std::floor(total / spacing));
    out.reserve(n + 2);
    for (std::size_t i = 0; i <= n; ++i) out.push_back(point_at(static_cast<double>(i) * spacing));
    if (total - static_cast<double>(n) * spacing > 1e-9) out.push_back(point_at(total));
    return Polyline(std::move(out));
  }

  /// Waypoints covering [s0, s0 + span], at most max_points of them.
  std::vector<Vec2> window(double s0, double span, std::size_t max_points) const {
    std::vector<Vec2> out;
    s0 = s_clamped(s0);
    const double s_end = std::min(s0 + span, length());
    // walk existing waypoints inside the window, bracketed by interpolants
    out.push_back(point_at(s0));
    for (std::size_t i = 0; i < pts_.size(); ++i) {
      if (cum_[i] > s0 && cum_[i] < s_end) out.push_back(pts_[i]);
      if (out.size() >= max_points - 1) break;
    }
    if ((out.back() - point_at(s_end)).norm() > 1e-12) out.push_back(point_at(s_end));
    if (out.size() < 2) {  // degenerate window at the route end
      out = {point_at(std::max(0.0, s_end - 1e-3)), point_at(s_end)};
    }
    return out;
  }

 private:
  double s_clamped(double s) const { return std::clamp(s, 0.0, length()); }

  std::size_t segment_of(double s) const {
    const double sc = s_clamped(s);
    auto it = std::upper_bound(cum_.begin(), cum_.end(), sc);
    std::size_t i = static_cast<std::size_t>(it - cum_.begin());
    if (i > 0) --i;
    return std::min(i, pts_.size() - 2);
  }

  std::vector<Vec2> pts_;
  std::vector<double> cum_;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Sample standard error: stddev / sqrt(n). Zero for fewer than two samples.
inline double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double n = static_cast<double>(v.size());
  return std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

}  // namespace uasmpc
