// SPDX-License-Identifier: Apache-2.0
//
// Receding-horizon planner over mode-coupled feedback policies.
//
// The decision variables are the feedforward terms (and optionally feedback
// gains) of a policy whose first control is shared across all prediction
// modes; later controls are mode-specific. The ego follows single-integrator
// dynamics in the plane, tracking a reference while honoring velocity and
// per-step velocity-change bounds and the probabilistic keep-out constraint
// for every obstacle, mode, and step. Everything is assembled in an
// ego-centered frame (positions relative to the ego at the current step) and
// shifted back on output.

#pragma once

#include "uasmpc/core.hpp"
#include "uasmpc/geometry.hpp"
#include "uasmpc/prediction.hpp"
#include "uasmpc/solver.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <vector>

namespace uasmpc::planner {

using prediction::AgentState;
using prediction::GmmPrediction;

struct EgoState {
  Vec2 position = Vec2::Zero();
  Vec2 velocity = Vec2::Zero();
};

struct PlannerConfig {
  int horizon = 10;   // N
  double dt = 0.3;    // s

  Vec2 v_min = Vec2(-15.0, -15.0);  // m/s
  Vec2 v_max = Vec2(15.0, 15.0);
  Vec2 a_min = Vec2(-1.5, -1.5);  // m/s per step (velocity-change bound)
  Vec2 a_max = Vec2(1.5, 1.5);

  double coverage_p = 0.9;

  Mat2 q = Mat2::Identity();                       // tracking weight
  Mat2 r1 = 0.1 * Mat2::Identity();                // control tracking weight
  Mat2 r2 = Mat2::Identity();                      // control smoothness weight

  Vec2 ego_half = Vec2(2.5, 1.0);  // ego rectangle half extents, m

  int max_nevs = 8;          // nearest obstacles that get constraints
  double nev_radius = 50.0;  // m; obstacles farther than this are ignored
  double max_route_distance = 50.0;  // m; reference build fails beyond this

  // Feedback gains are frozen at zero by default: with mean-valued
  // deterministic predictions a free gain is an affine reparameterization of
  // the feedforward and makes the program degenerate. A ridge keeps the
  // study mode well-posed when gains are released.
  bool free_gains = false;
  double gain_ridge = 1e-6;

  double softmin_tau = solver::kSoftminTemperature;
  solver::SolveOptions solve_options;

  void validate() const {
    if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
    if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
    if (!(v_min.x() < v_max.x() && v_min.y() < v_max.y()))
      throw std::invalid_argument("velocity bounds must satisfy v_min < v_max");
    if (!(a_min.x() < a_max.x() && a_min.y() < a_max.y()))
      throw std::invalid_argument("acceleration bounds must satisfy a_min < a_max");
    if (!(coverage_p > 0.0 && coverage_p < 1.0))
      throw std::invalid_argument("coverage level must lie in (0,1)");
  }
};

/// Feedforward terms and feedback gains of the mode-coupled policy. The
/// first control is stored once; sharing across modes is structural.
struct PolicyParameters {
  Vec2 h0 = Vec2::Zero();
  std::vector<Mat2> k0;                            // per NEV
  std::vector<std::vector<Vec2>> h;                // [mode][k-1], k = 1..N-1
  std::vector<std::vector<std::vector<Mat2>>> k;   // [mode][k-1][nev]

  int num_modes() const { return static_cast<int>(h.size()); }
};

/// Per-mode open-loop rollout of the policy, in the ego-centered frame.
struct ModeRollout {
  std::vector<Vec2> states;    // N+1 entries, states[0] = 0
  std::vector<Vec2> controls;  // N entries
};

struct RolloutResult {
  std::vector<ModeRollout> modes;
};

/// Reference trajectory and the finite-difference reference controls.
struct Reference {
  std::vector<Vec2> states;    // N+1
  std::vector<Vec2> controls;  // N
};

// --- constraint accounting ---------------------------------------------------
//
// Row layout of the constraint vector, in order:
//   velocity:  u_0 (4 rows: x/y lower, x/y upper), then u_k^j for each mode j
//              and step k = 1..N-1 (4 rows each)            -> 4 (1 + Xi(N-1))
//   accel:     u_0 - u_prev (4 rows), u_1^j - u_0 (4 rows per mode), then
//              u_{k+1}^j - u_k^j for k = 1..N-2              -> 4 (1 + Xi(N-1))
//   collision: one margin per (nev i, mode j, step k), constraining the
//              position x_{k+1}^j, i-major then j then k     -> A Xi N
//
// For a single mode this gives the 8N bound rows + A*N collision rows.
struct ConstraintLayout {
  int horizon = 0;
  int n_modes = 0;
  int n_nevs = 0;

  int n_velocity() const { return 4 * (1 + n_modes * (horizon - 1)); }
  int n_accel() const {
    return 4 * (1 + (horizon >= 2 ? n_modes * (horizon - 1) : 0));
  }
  int n_collision() const { return n_nevs * n_modes * horizon; }
  int total() const { return n_velocity() + n_accel() + n_collision(); }

  int velocity_offset() const { return 0; }
  int accel_offset() const { return n_velocity(); }
  int collision_offset() const { return n_velocity() + n_accel(); }

  int collision_row(int nev, int mode, int step) const {
    return collision_offset() + (nev * n_modes + mode) * horizon + step;
  }
};

namespace detail {

/// Decision-vector layout. Feedforward terms first (h0, then h_k^j), gain
/// blocks appended only when gains are free.
struct ParamLayout {
  int horizon = 0;
  int n_modes = 0;
  int n_nevs = 0;
  bool free_gains = false;

  int h0_index() const { return 0; }
  int h_index(int mode, int k) const {  // k = 1..N-1
    return 2 + 2 * (mode * (horizon - 1) + (k - 1));
  }
  int ff_size() const { return 2 + 2 * n_modes * (horizon - 1); }
  int k0_index(int nev) const { return ff_size() + 4 * nev; }
  int k_index(int mode, int k, int nev) const {
    return ff_size() + 4 * n_nevs + 4 * ((mode * (horizon - 1) + (k - 1)) * n_nevs + nev);
  }
  int size() const {
    return free_gains ? ff_size() + 4 * n_nevs * (1 + n_modes * (horizon - 1)) : ff_size();
  }
};

inline Eigen::VectorXd pack(const PolicyParameters& p, const ParamLayout& lay) {
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(lay.size());
  theta.segment<2>(lay.h0_index()) = p.h0;
  for (int j = 0; j < lay.n_modes; ++j)
    for (int k = 1; k < lay.horizon; ++k)
      theta.segment<2>(lay.h_index(j, k)) = p.h[j][k - 1];
  if (lay.free_gains) {
    for (int i = 0; i < lay.n_nevs; ++i) {
      const Mat2& m = p.k0[i];
      theta.segment<4>(lay.k0_index(i)) << m(0, 0), m(0, 1), m(1, 0), m(1, 1);
    }
    for (int j = 0; j < lay.n_modes; ++j)
      for (int k = 1; k < lay.horizon; ++k)
        for (int i = 0; i < lay.n_nevs; ++i) {
          const Mat2& m = p.k[j][k - 1][i];
          theta.segment<4>(lay.k_index(j, k, i)) << m(0, 0), m(0, 1), m(1, 0), m(1, 1);
        }
  }
  return theta;
}

inline PolicyParameters unpack(const Eigen::VectorXd& theta, const ParamLayout& lay) {
  PolicyParameters p;
  p.h0 = theta.segment<2>(lay.h0_index());
  p.h.assign(lay.n_modes, std::vector<Vec2>(std::max(0, lay.horizon - 1), Vec2::Zero()));
  p.k0.assign(lay.n_nevs, Mat2::Zero());
  p.k.assign(lay.n_modes,
             std::vector<std::vector<Mat2>>(std::max(0, lay.horizon - 1),
                                            std::vector<Mat2>(lay.n_nevs, Mat2::Zero())));
  for (int j = 0; j < lay.n_modes; ++j)
    for (int k = 1; k < lay.horizon; ++k) p.h[j][k - 1] = theta.segment<2>(lay.h_index(j, k));
  if (lay.free_gains) {
    for (int i = 0; i < lay.n_nevs; ++i) {
      const auto b = theta.segment<4>(lay.k0_index(i));
      p.k0[i] << b(0), b(1), b(2), b(3);
    }
    for (int j = 0; j < lay.n_modes; ++j)
      for (int k = 1; k < lay.horizon; ++k)
        for (int i = 0; i < lay.n_nevs; ++i) {
          const auto b = theta.segment<4>(lay.k_index(j, k, i));
          p.k[j][k - 1][i] << b(0), b(1), b(2), b(3);
        }
  }
  return p;
}

}  // namespace detail

/// Number of shared modes across the given predictions (1 when empty).
/// Throws when the predictions disagree.
inline int shared_mode_count(const std::vector<GmmPrediction>& preds) {
  int n = 1;
  bool seen = false;
  for (const auto& p : preds) {
    const int m = static_cast<int>(p.modes.size());
    if (!seen) {
      n = m;
      seen = true;
    } else if (m != n) {
      throw std::invalid_argument("all obstacle predictions must share the mode count");
    }
  }
  return n;
}

/// Shared-index mode probabilities: the per-obstacle probability vectors
/// averaged elementwise. A single implicit mode when no obstacles are given.
inline std::vector<double> shared_mode_probs(const std::vector<GmmPrediction>& preds) {
  const int n_modes = shared_mode_count(preds);
  std::vector<double> probs(n_modes, 0.0);
  if (preds.empty()) return {1.0};
  for (const auto& p : preds)
    for (int j = 0; j < n_modes; ++j) probs[j] += p.modes[j].prob;
  for (auto& x : probs) x /= static_cast<double>(preds.size());
  return probs;
}

/// Open-loop rollout of the policy through the single-integrator dynamics,
/// in the ego-centered frame. Obstacle feedback uses the observed positions
/// at the shared first step and the per-mode predicted means afterwards.
inline RolloutResult rollout(const PolicyParameters& params, const EgoState& ego,
                             const std::vector<AgentState>& nev_states,
                             const std::vector<GmmPrediction>& preds,
                             const PlannerConfig& cfg) {
  const int n = cfg.horizon;
  const int n_modes = std::max(1, params.num_modes());
  if (!preds.empty() && shared_mode_count(preds) != n_modes)
    throw std::invalid_argument("policy mode count does not match predictions");
  for (const auto& p : preds)
    if (p.horizon != n) throw std::invalid_argument("prediction horizon mismatch");

  const std::size_t n_nevs = nev_states.size();
  const bool has_gains = !params.k0.empty() || !params.k.empty();

  Vec2 u0 = params.h0;
  for (std::size_t i = 0; i < n_nevs && i < params.k0.size(); ++i)
    u0 += params.k0[i] * (nev_states[i].position - ego.position);

  RolloutResult result;
  result.modes.resize(n_modes);
  for (int j = 0; j < n_modes; ++j) {
    auto& mode = result.modes[j];
    mode.controls.resize(n);
    mode.states.assign(n + 1, Vec2::Zero());
    mode.controls[0] = u0;
    for (int k = 1; k < n; ++k) {
      Vec2 u = params.h.at(j).at(k - 1);
      if (has_gains && !params.k.empty()) {
        const auto& gains = params.k.at(j).at(k - 1);
        for (std::size_t i = 0; i < n_nevs && i < gains.size(); ++i) {
          const Vec2 mu_rel = preds[i].modes[j].means[k - 1] - ego.position;
          u += gains[i] * mu_rel;
        }
      }
      mode.controls[k] = u;
    }
    for (int k = 0; k < n; ++k)
      mode.states[k + 1] = mode.states[k] + cfg.dt * mode.controls[k];
  }
  return result;
}

/// Expected tracking cost over modes: quadratic deviation from the reference
/// trajectory and controls plus a control-smoothness term, weighted by the
/// shared-index mode probabilities.
inline double cost(const PolicyParameters& params, const RolloutResult& rolled,
                   const Reference& ref, const std::vector<double>& mode_probs,
                   const PlannerConfig& cfg) {
  const int n = cfg.horizon;
  if (static_cast<int>(ref.states.size()) != n + 1 ||
      static_cast<int>(ref.controls.size()) != n)
    throw std::invalid_argument("reference length mismatch");
  if (rolled.modes.size() != mode_probs.size())
    throw std::invalid_argument("mode probability count mismatch");

  double total = 0.0;
  for (std::size_t j = 0; j < rolled.modes.size(); ++j) {
    const auto& mode = rolled.modes[j];
    double mode_cost = 0.0;
    for (int k = 0; k < n; ++k) {
      const Vec2 dx = mode.states[k + 1] - ref.states[k + 1];
      const Vec2 du = mode.controls[k] - ref.controls[k];
      mode_cost += dx.dot(cfg.q * dx) + du.dot(cfg.r1 * du);
      if (k + 1 < n) {
        const Vec2 dd = mode.controls[k + 1] - mode.controls[k];
        mode_cost += dd.dot(cfg.r2 * dd);
      }
    }
    total += mode_probs[j] * mode_cost;
  }
  if (cfg.free_gains) {
    double ridge = 0.0;
    for (const auto& m : params.k0) ridge += m.squaredNorm();
    for (const auto& per_mode : params.k)
      for (const auto& per_step : per_mode)
        for (const auto& m : per_step) ridge += m.squaredNorm();
    total += cfg.gain_ridge * ridge;
  }
  return total;
}

/// Keep-out data for one (obstacle, mode, step), precomputed once per plan.
struct KeepOut {
  Vec2 mu;  // predicted mean, ego-centered frame
  geometry::Covariance2 cov;
  Mat2 inv_sqrt_cov;
  geometry::OverlapRect rect;
  double sqrt_beta;
};

/// Exact constraint vector for a rollout (reporting path; the solver uses
/// the smooth surrogate for collision rows). Rows follow ConstraintLayout.
inline Eigen::VectorXd constraints(const RolloutResult& rolled, const Vec2& u_prev,
                                   const std::vector<std::vector<std::vector<KeepOut>>>& keepouts,
                                   const PlannerConfig& cfg, const ConstraintLayout& lay) {
  Eigen::VectorXd c(lay.total());
  int row = 0;

  auto push_box = [&](const Vec2& value, const Vec2& lo, const Vec2& hi) {
    c(row++) = value.x() - lo.x();
    c(row++) = value.y() - lo.y();
    c(row++) = hi.x() - value.x();
    c(row++) = hi.y() - value.y();
  };

  // velocity rows
  push_box(rolled.modes[0].controls[0], cfg.v_min, cfg.v_max);
  for (int j = 0; j < lay.n_modes; ++j)
    for (int k = 1; k < lay.horizon; ++k)
      push_box(rolled.modes[j].controls[k], cfg.v_min, cfg.v_max);

  // velocity-change rows
  push_box(rolled.modes[0].controls[0] - u_prev, cfg.a_min, cfg.a_max);
  if (lay.horizon >= 2) {
    for (int j = 0; j < lay.n_modes; ++j) {
      push_box(rolled.modes[j].controls[1] - rolled.modes[j].controls[0], cfg.a_min, cfg.a_max);
      for (int k = 1; k + 1 < lay.horizon; ++k)
        push_box(rolled.modes[j].controls[k + 1] - rolled.modes[j].controls[k], cfg.a_min,
                 cfg.a_max);
    }
  }

  // collision rows
  for (int i = 0; i < lay.n_nevs; ++i)
    for (int j = 0; j < lay.n_modes; ++j)
      for (int k = 0; k < lay.horizon; ++k) {
        const KeepOut& ko = keepouts[i][j][k];
        const geometry::Zonotope2 b =
            geometry::rect_to_zonotope(ko.rect, ko.inv_sqrt_cov);
        const Vec2 z = ko.inv_sqrt_cov * (rolled.modes[j].states[k + 1] - ko.mu);
        c(row++) = geometry::dist_to_zonotope(z, b).distance - ko.sqrt_beta;
      }
  return c;
}

/// Reference construction: project the ego onto the route, advance at the
/// current speed (clipped to the velocity bounds), and read points off the
/// polyline. Controls are the finite differences of the reference states.
inline Reference build_reference(const std::vector<Vec2>& route, const EgoState& ego,
                                 const PlannerConfig& cfg) {
  if (route.size() < 2) throw std::invalid_argument("reference route needs >= 2 waypoints");
  const Polyline poly(route);
  const auto proj = poly.project(ego.position);
  if (proj.distance > cfg.max_route_distance)
    throw std::invalid_argument("ego is too far from the reference route");

  const double v_cap = std::min(cfg.v_max.x(), cfg.v_max.y());
  const double speed = std::clamp(ego.velocity.norm(), 0.0, v_cap);

  Reference ref;
  ref.states.resize(cfg.horizon + 1);
  ref.controls.resize(cfg.horizon);
  for (int k = 0; k <= cfg.horizon; ++k)
    ref.states[k] = poly.point_at(proj.s + k * cfg.dt * speed);
  for (int k = 0; k < cfg.horizon; ++k)
    ref.controls[k] = (ref.states[k + 1] - ref.states[k]) / cfg.dt;
  return ref;
}

struct WarmStart {
  Eigen::VectorXd theta;
  Eigen::VectorXd multipliers;  // optional; reused when the row count matches
  double penalty = 0.0;
};

struct PlanResult {
  Vec2 first_control = Vec2::Zero();
  std::vector<std::vector<Vec2>> trajectories;  // per mode, absolute, N+1 states
  std::vector<std::vector<Vec2>> controls;      // per mode, N controls
  double cost = 0.0;
  Eigen::VectorXd constraint_values;  // exact, rows per ConstraintLayout
  std::vector<double> collision_margins;  // exact margins, (i,j,k) order
  double max_violation = 0.0;
  solver::SolveStatus status = solver::SolveStatus::degraded;
  int outer_iterations = 0;
  int inner_iterations = 0;
  PolicyParameters params;
  Eigen::VectorXd theta;        // solution vector, reusable as a warm start
  Eigen::VectorXd multipliers;  // dual solution for warm starts
  double penalty = 0.0;
  ConstraintLayout layout;
  std::vector<double> mode_probs;
  std::vector<int> nev_indices;  // indices of the obstacles that got constraints
};

namespace detail {

/// Shortest push that takes a point out of the dilated keep-out, with a
/// small extra pad. For interior points the push aims at the nearest edge of
/// the zonotope (ties broken by a fixed candidate order); in the dilation
/// band it follows the exact nearest-point direction.
inline Vec2 push_out_of_keepout(const Vec2& x, const KeepOut& ko, double pad) {
  const geometry::Zonotope2 b = geometry::rect_to_zonotope(ko.rect, ko.inv_sqrt_cov);
  const Vec2 z = ko.inv_sqrt_cov * (x - ko.mu);
  const auto exact = geometry::dist_to_zonotope(z, b);
  if (exact.distance >= ko.sqrt_beta) return x;  // already outside

  Vec2 boundary;
  Vec2 outward;
  if (exact.distance > 1e-12) {
    boundary = exact.nearest;
    outward = (z - boundary) / exact.distance;
  } else {
    // interior: nearest point on the four edges
    double best = std::numeric_limits<double>::infinity();
    for (double sign : {-1.0, 1.0}) {
      for (int axis : {0, 1}) {
        const Vec2& base_dir = axis == 0 ? b.v1 : b.v2;
        const Vec2& free_dir = axis == 0 ? b.v2 : b.v1;
        const Vec2 base = sign * base_dir;
        const double t =
            std::clamp(free_dir.dot(z - base) / free_dir.squaredNorm(), -1.0, 1.0);
        const Vec2 candidate = base + t * free_dir;
        const double d = (candidate - z).norm();
        if (d < best) {
          best = d;
          boundary = candidate;
        }
      }
    }
    outward = (boundary - z).normalized();
  }
  const Vec2 z_out = boundary + (ko.sqrt_beta + pad) * outward;
  // inv_sqrt_cov is its own transpose; undo the Mahalanobis map
  return ko.mu + ko.inv_sqrt_cov.inverse() * z_out;
}

struct NlpContext {
  PlannerConfig cfg;
  ParamLayout lay;
  ConstraintLayout clay;
  EgoState ego;                       // absolute; rollout runs ego-centered
  std::vector<AgentState> nevs;      // selected obstacles
  std::vector<GmmPrediction> preds;  // selected predictions
  Reference ref_rel;                 // ego-centered reference
  std::vector<double> mode_probs;
  std::vector<std::vector<std::vector<KeepOut>>> keepouts;
  Vec2 u_prev;
};

/// Scatter a per-control gradient contribution into the decision vector.
inline void add_control_gradient(const NlpContext& ctx, int mode, int k, const Vec2& w,
                                 Eigen::VectorXd& out) {
  if (k == 0) {
    out.segment<2>(ctx.lay.h0_index()) += w;
    if (ctx.lay.free_gains)
      for (int i = 0; i < ctx.lay.n_nevs; ++i) {
        const Vec2 o_rel = ctx.nevs[i].position - ctx.ego.position;
        auto block = out.segment<4>(ctx.lay.k0_index(i));
        block(0) += w.x() * o_rel.x();
        block(1) += w.x() * o_rel.y();
        block(2) += w.y() * o_rel.x();
        block(3) += w.y() * o_rel.y();
      }
  } else {
    out.segment<2>(ctx.lay.h_index(mode, k)) += w;
    if (ctx.lay.free_gains)
      for (int i = 0; i < ctx.lay.n_nevs; ++i) {
        const Vec2 mu_rel = ctx.preds[i].modes[mode].means[k - 1] - ctx.ego.position;
        auto block = out.segment<4>(ctx.lay.k_index(mode, k, i));
        block(0) += w.x() * mu_rel.x();
        block(1) += w.x() * mu_rel.y();
        block(2) += w.y() * mu_rel.x();
        block(3) += w.y() * mu_rel.y();
      }
  }
}

inline double nlp_objective(const NlpContext& ctx, const Eigen::VectorXd& theta,
                            Eigen::VectorXd* grad) {
  const PolicyParameters params = unpack(theta, ctx.lay);
  const RolloutResult rolled = rollout(params, ctx.ego, ctx.nevs, ctx.preds, ctx.cfg);
  const double value = cost(params, rolled, ctx.ref_rel, ctx.mode_probs, ctx.cfg);
  if (!grad) return value;

  grad->setZero(ctx.lay.size());
  const int n = ctx.cfg.horizon;
  for (int j = 0; j < ctx.lay.n_modes; ++j) {
    const auto& mode = rolled.modes[j];
    const double pj = ctx.mode_probs[j];

    // adjoint of the state chain: suffix sums of 2 Q dx
    Vec2 suffix = Vec2::Zero();
    std::vector<Vec2> du_grad(n, Vec2::Zero());
    for (int k = n - 1; k >= 0; --k) {
      const Vec2 dx = mode.states[k + 1] - ctx.ref_rel.states[k + 1];
      suffix += 2.0 * (ctx.cfg.q * dx);
      du_grad[k] += ctx.cfg.dt * suffix;
      const Vec2 du = mode.controls[k] - ctx.ref_rel.controls[k];
      du_grad[k] += 2.0 * (ctx.cfg.r1 * du);
    }
    for (int k = 0; k + 1 < n; ++k) {
      const Vec2 dd = 2.0 * (ctx.cfg.r2 * (mode.controls[k + 1] - mode.controls[k]));
      du_grad[k + 1] += dd;
      du_grad[k] -= dd;
    }
    for (int k = 0; k < n; ++k) add_control_gradient(ctx, j, k, pj * du_grad[k], *grad);
  }

  if (ctx.lay.free_gains) {
    for (int i = 0; i < ctx.lay.n_nevs; ++i)
      grad->segment<4>(ctx.lay.k0_index(i)) +=
          2.0 * ctx.cfg.gain_ridge * theta.segment<4>(ctx.lay.k0_index(i));
    for (int j = 0; j < ctx.lay.n_modes; ++j)
      for (int k = 1; k < n; ++k)
        for (int i = 0; i < ctx.lay.n_nevs; ++i)
          grad->segment<4>(ctx.lay.k_index(j, k, i)) +=
              2.0 * ctx.cfg.gain_ridge * theta.segment<4>(ctx.lay.k_index(j, k, i));
  }
  return value;
}

/// Constraint values (smooth collision surrogate) and Jacobian.
inline void nlp_constraints(const NlpContext& ctx, const Eigen::VectorXd& theta,
                            Eigen::VectorXd* values, Eigen::MatrixXd* jac) {
  const PolicyParameters params = unpack(theta, ctx.lay);
  const RolloutResult rolled = rollout(params, ctx.ego, ctx.nevs, ctx.preds, ctx.cfg);
  const int n = ctx.cfg.horizon;

  values->resize(ctx.clay.total());
  if (jac) jac->setZero(ctx.clay.total(), ctx.lay.size());
  int row = 0;

  Eigen::VectorXd scratch(ctx.lay.size());
  auto box_rows = [&](int mode, int k_hi, int k_lo, const Vec2& value, const Vec2& lo,
                      const Vec2& hi) {
    // k_lo < 0 encodes a fixed subtrahend (u_prev or none)
    (*values)(row + 0) = value.x() - lo.x();
    (*values)(row + 1) = value.y() - lo.y();
    (*values)(row + 2) = hi.x() - value.x();
    (*values)(row + 3) = hi.y() - value.y();
    if (jac) {
      for (int comp = 0; comp < 2; ++comp) {
        for (int sign_row = 0; sign_row < 2; ++sign_row) {
          const double sgn = sign_row == 0 ? 1.0 : -1.0;
          scratch.setZero();
          const Vec2 w = sgn * (comp == 0 ? Vec2(1, 0) : Vec2(0, 1));
          add_control_gradient(ctx, mode, k_hi, w, scratch);
          if (k_lo >= 0) add_control_gradient(ctx, mode, k_lo, -w, scratch);
          jac->row(row + 2 * sign_row + comp) = scratch.transpose();
        }
      }
    }
    row += 4;
  };

  // velocity rows
  box_rows(0, 0, -1, rolled.modes[0].controls[0], ctx.cfg.v_min, ctx.cfg.v_max);
  for (int j = 0; j < ctx.clay.n_modes; ++j)
    for (int k = 1; k < n; ++k)
      box_rows(j, k, -1, rolled.modes[j].controls[k], ctx.cfg.v_min, ctx.cfg.v_max);

  // velocity-change rows
  box_rows(0, 0, -1, rolled.modes[0].controls[0] - ctx.u_prev, ctx.cfg.a_min, ctx.cfg.a_max);
  if (n >= 2) {
    for (int j = 0; j < ctx.clay.n_modes; ++j) {
      box_rows(j, 1, 0, rolled.modes[j].controls[1] - rolled.modes[j].controls[0],
               ctx.cfg.a_min, ctx.cfg.a_max);
      for (int k = 1; k + 1 < n; ++k)
        box_rows(j, k + 1, k, rolled.modes[j].controls[k + 1] - rolled.modes[j].controls[k],
                 ctx.cfg.a_min, ctx.cfg.a_max);
    }
  }

  // collision rows (smooth surrogate; exact margins are recomputed on output)
  for (int i = 0; i < ctx.clay.n_nevs; ++i)
    for (int j = 0; j < ctx.clay.n_modes; ++j)
      for (int k = 0; k < n; ++k) {
        const KeepOut& ko = ctx.keepouts[i][j][k];
        const geometry::Zonotope2 b = geometry::rect_to_zonotope(ko.rect, ko.inv_sqrt_cov);
        const Vec2 z = ko.inv_sqrt_cov * (rolled.modes[j].states[k + 1] - ko.mu);
        const solver::SmoothDistance sd =
            solver::smooth_dist_to_zonotope(z, b, ctx.cfg.softmin_tau);
        (*values)(row) = sd.value - ko.sqrt_beta;
        if (jac) {
          const Vec2 gx = ko.inv_sqrt_cov * sd.grad;  // symmetric transform back
          scratch.setZero();
          for (int l = 0; l <= k; ++l)
            add_control_gradient(ctx, j, l, ctx.cfg.dt * gx, scratch);
          jac->row(row) = scratch.transpose();
        }
        ++row;
      }
}

/// Initialization repair: any rollout state inside a keep-out is projected
/// just outside it and the feedforward terms are re-derived from the
/// repaired states. Leaves feasible iterates untouched. Without this, an
/// initial trajectory threading an obstacle dead-center starts on the flat
/// interior plateau of the margin surface, where no merit function has a
/// useful gradient.
inline Eigen::VectorXd repair_init(const NlpContext& ctx, const Eigen::VectorXd& theta0) {
  if (ctx.nevs.empty()) return theta0;
  PolicyParameters params = unpack(theta0, ctx.lay);
  RolloutResult rolled = rollout(params, ctx.ego, ctx.nevs, ctx.preds, ctx.cfg);
  const double pad = 0.05;
  bool changed = false;

  for (int j = 0; j < ctx.lay.n_modes; ++j) {
    auto& states = rolled.modes[j].states;
    for (int k = 0; k < ctx.cfg.horizon; ++k) {
      for (int i = 0; i < static_cast<int>(ctx.nevs.size()); ++i) {
        const Vec2 pushed = push_out_of_keepout(states[k + 1], ctx.keepouts[i][j][k], pad);
        if ((pushed - states[k + 1]).squaredNorm() > 0.0) {
          states[k + 1] = pushed;
          changed = true;
        }
      }
    }
    if (!changed) continue;
    // re-derive controls and strip the feedback contribution; the shared
    // first control comes from the first mode
    for (int k = 0; k < ctx.cfg.horizon; ++k) {
      const Vec2 u = (states[k + 1] - states[k]) / ctx.cfg.dt;
      Vec2 feedback = Vec2::Zero();
      if (k == 0) {
        if (j != 0) continue;
        for (std::size_t i = 0; i < ctx.nevs.size() && i < params.k0.size(); ++i)
          feedback += params.k0[i] * (ctx.nevs[i].position - ctx.ego.position);
        params.h0 = u - feedback;
      } else {
        if (!params.k.empty())
          for (std::size_t i = 0; i < ctx.nevs.size() && i < params.k[j][k - 1].size(); ++i)
            feedback +=
                params.k[j][k - 1][i] * (ctx.preds[i].modes[j].means[k - 1] - ctx.ego.position);
        params.h[j][k - 1] = u - feedback;
      }
    }
  }
  return changed ? pack(params, ctx.lay) : theta0;
}

}  // namespace detail

/// The planner program in solver form, with the context that the callables
/// reference. Kept alive by shared ownership so the problem can outlive the
/// assembling scope.
struct AssembledNlp {
  std::shared_ptr<detail::NlpContext> ctx;
  solver::NlpProblem problem;
  Eigen::VectorXd theta0;
  std::vector<int> nev_indices;
};

/// Obstacle selection, reference construction, and NLP assembly. Shared by
/// plan() and the gradient-verification tooling.
inline AssembledNlp assemble_nlp(const EgoState& ego,
                                 const std::vector<AgentState>& nev_states,
                                 const std::vector<GmmPrediction>& preds,
                                 const std::vector<Vec2>& reference_route,
                                 const PlannerConfig& cfg,
                                 const std::optional<WarmStart>& warm = std::nullopt) {
  cfg.validate();
  if (reference_route.size() < 2)
    throw std::invalid_argument("plan requires a reference route");
  if (nev_states.size() != preds.size())
    throw std::invalid_argument("one prediction per obstacle state is required");

  auto ctx_ptr = std::make_shared<detail::NlpContext>();
  detail::NlpContext& ctx = *ctx_ptr;
  ctx.cfg = cfg;
  ctx.ego = ego;
  ctx.u_prev = ego.velocity;

  // nearest-first obstacle selection inside the interaction radius
  std::vector<int> order(nev_states.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double da = (nev_states[a].position - ego.position).squaredNorm();
    const double db = (nev_states[b].position - ego.position).squaredNorm();
    return da != db ? da < db : a < b;
  });
  std::vector<int> nev_indices;
  for (int idx : order) {
    if (static_cast<int>(ctx.nevs.size()) >= cfg.max_nevs) break;
    if ((nev_states[idx].position - ego.position).norm() > cfg.nev_radius) continue;
    preds[idx].validate();
    ctx.nevs.push_back(nev_states[idx]);
    ctx.preds.push_back(preds[idx]);
    nev_indices.push_back(idx);
  }

  for (const auto& p : ctx.preds)
    if (p.horizon != cfg.horizon)
      throw std::invalid_argument("prediction horizon does not match the planner horizon");

  const int n_modes = shared_mode_count(ctx.preds);
  ctx.mode_probs = shared_mode_probs(ctx.preds);

  ctx.lay = detail::ParamLayout{cfg.horizon, n_modes, static_cast<int>(ctx.nevs.size()),
                                cfg.free_gains};
  ctx.clay = ConstraintLayout{cfg.horizon, n_modes, static_cast<int>(ctx.nevs.size())};

  // ego-centered reference
  const Reference ref_abs = build_reference(reference_route, ego, cfg);
  ctx.ref_rel = ref_abs;
  for (auto& x : ctx.ref_rel.states) x -= ego.position;

  // keep-out precomputation
  const double beta = geometry::chi2_quantile_2dof(cfg.coverage_p);
  ctx.keepouts.resize(ctx.nevs.size());
  for (std::size_t i = 0; i < ctx.nevs.size(); ++i) {
    const geometry::OverlapRect rect =
        geometry::overlap_rect(cfg.ego_half, ctx.nevs[i].half_size);
    ctx.keepouts[i].resize(n_modes);
    for (int j = 0; j < n_modes; ++j) {
      ctx.keepouts[i][j].reserve(cfg.horizon);
      for (int k = 0; k < cfg.horizon; ++k) {
        KeepOut ko;
        ko.cov = ctx.preds[i].modes[j].covs[k];
        ko.mu = ctx.preds[i].modes[j].means[k] - ego.position;
        ko.inv_sqrt_cov = geometry::inv_sqrt(ko.cov);
        ko.rect = rect;
        ko.sqrt_beta = std::sqrt(beta);
        ctx.keepouts[i][j].push_back(ko);
      }
    }
  }

  AssembledNlp out;
  out.ctx = ctx_ptr;
  out.nev_indices = std::move(nev_indices);
  out.problem.dim = ctx.lay.size();
  out.problem.num_constraints = ctx.clay.total();
  out.problem.objective = [ctx_ptr](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    return detail::nlp_objective(*ctx_ptr, theta, grad);
  };
  out.problem.constraints = [ctx_ptr](const Eigen::VectorXd& theta, Eigen::VectorXd* values,
                                      Eigen::MatrixXd* jac) {
    detail::nlp_constraints(*ctx_ptr, theta, values, jac);
  };
  out.problem.soft.assign(ctx.clay.total(), false);
  for (int r = ctx.clay.collision_offset(); r < ctx.clay.total(); ++r)
    out.problem.soft[r] = true;

  if (warm && warm->theta.size() == ctx.lay.size()) {
    out.theta0 = warm->theta;
  } else {
    // follow the reference controls
    PolicyParameters init;
    init.h0 = ctx.ref_rel.controls[0];
    init.h.assign(n_modes, std::vector<Vec2>(std::max(0, cfg.horizon - 1)));
    for (int j = 0; j < n_modes; ++j)
      for (int k = 1; k < cfg.horizon; ++k) init.h[j][k - 1] = ctx.ref_rel.controls[k];
    init.k0.assign(ctx.nevs.size(), Mat2::Zero());
    init.k.assign(n_modes, std::vector<std::vector<Mat2>>(
                               std::max(0, cfg.horizon - 1),
                               std::vector<Mat2>(ctx.nevs.size(), Mat2::Zero())));
    out.theta0 = detail::pack(init, ctx.lay);
  }
  out.theta0 = detail::repair_init(ctx, out.theta0);
  return out;
}

/// Full receding-horizon plan: obstacle selection, reference construction,
/// NLP assembly, solve, and exact-margin reporting. Positions in the result
/// are absolute. Pure in its inputs; the warm start is explicit.
inline PlanResult plan(const EgoState& ego, const std::vector<AgentState>& nev_states,
                       const std::vector<GmmPrediction>& preds,
                       const std::vector<Vec2>& reference_route, const PlannerConfig& cfg,
                       const std::optional<WarmStart>& warm = std::nullopt) {
  AssembledNlp nlp = assemble_nlp(ego, nev_states, preds, reference_route, cfg, warm);
  detail::NlpContext& ctx = *nlp.ctx;
  const int n_modes = ctx.lay.n_modes;

  solver::DualWarmStart dual;
  const solver::DualWarmStart* dual_ptr = nullptr;
  if (warm && warm->multipliers.size() == ctx.clay.total() && warm->penalty > 0.0) {
    dual.multipliers = warm->multipliers;
    dual.penalty = warm->penalty;
    dual_ptr = &dual;
  }
  const solver::SolveReport rep =
      solver::solve(nlp.problem, nlp.theta0, cfg.solve_options, dual_ptr);

  // report with exact geometry
  PlanResult result;
  result.theta = rep.x;
  result.params = detail::unpack(rep.x, ctx.lay);
  const RolloutResult rolled = rollout(result.params, ego, ctx.nevs, ctx.preds, cfg);
  result.first_control = rolled.modes[0].controls[0];
  result.trajectories.resize(n_modes);
  result.controls.resize(n_modes);
  for (int j = 0; j < n_modes; ++j) {
    result.controls[j] = rolled.modes[j].controls;
    result.trajectories[j].reserve(cfg.horizon + 1);
    for (const auto& x : rolled.modes[j].states)
      result.trajectories[j].push_back(x + ego.position);
  }
  result.cost = cost(result.params, rolled, ctx.ref_rel, ctx.mode_probs, cfg);
  result.constraint_values = constraints(rolled, ctx.u_prev, ctx.keepouts, cfg, ctx.clay);
  result.collision_margins.assign(
      result.constraint_values.data() + ctx.clay.collision_offset(),
      result.constraint_values.data() + ctx.clay.total());
  double viol = 0.0;
  for (int r = 0; r < result.constraint_values.size(); ++r)
    viol = std::max(viol, -result.constraint_values(r));
  result.max_violation = viol;
  result.status = rep.status;
  if (rep.status == solver::SolveStatus::optimal && viol > cfg.solve_options.feasibility_tol)
    result.status = solver::SolveStatus::degraded;  // exact margins gate the label
  result.outer_iterations = rep.outer_iterations;
  result.inner_iterations = rep.inner_iterations;
  result.multipliers = rep.multipliers;
  result.penalty = rep.penalty;
  result.layout = ctx.clay;
  result.mode_probs = ctx.mode_probs;
  result.nev_indices = nlp.nev_indices;
  return result;
}

}  // namespace uasmpc::planner
