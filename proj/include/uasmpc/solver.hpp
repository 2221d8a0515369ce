// SPDX-License-Identifier: Apache-2.0
//
// Self-contained solver for the planner's nonlinear programs: an augmented
// Lagrangian outer loop (Powell-Hestenes-Rockafellar multipliers for
// inequality constraints) around an L-BFGS inner minimization with Armijo
// backtracking. Collision rows can be marked soft; they additionally carry a
// fixed quadratic slack penalty so every inner problem stays well-posed even
// when the chance constraints are momentarily infeasible.
//
// Also hosts the smooth surrogate of the keep-out distance: a softmin over
// the nine candidate projections. The surrogate is used for descent
// directions only; reported margins always come from the exact function.

#pragma once

#include "uasmpc/core.hpp"
#include "uasmpc/geometry.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace uasmpc::solver {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// --- smooth keep-out surrogate ---------------------------------------------

inline constexpr double kSoftminTemperature = 1e-3;

struct SmoothDistance {
  double value;
  Vec2 grad;  // d value / d z
};

/// Softmin over the nine candidate projections of the exact distance. Lies
/// within tau * ln 9 below the exact value everywhere; ~0 with ~0 gradient in
/// the interior, where the exact distance is flat anyway.
inline SmoothDistance smooth_dist_to_zonotope(const Vec2& z, const geometry::Zonotope2& b,
                                              double tau = kSoftminTemperature) {
  const Mat2 v = b.generator_matrix();
  const double det = b.det();
  Mat2 v_inv;
  v_inv << v(1, 1), -v(0, 1), -v(1, 0), v(0, 0);
  v_inv /= det;

  double d[9];
  Vec2 g[9];
  int n = 0;

  auto fixed_point = [&](const Vec2& y) {
    const Vec2 r = y - z;
    const double dist = r.norm();
    d[n] = dist;
    g[n] = dist > 1e-14 ? Vec2(-r / dist) : Vec2::Zero();
    ++n;
  };

  // interior candidate: coordinate inversion clamped back into the box
  {
    const Vec2 s = v_inv * z;
    const Vec2 sc(std::clamp(s.x(), -1.0, 1.0), std::clamp(s.y(), -1.0, 1.0));
    const Vec2 y = v * sc;
    const Vec2 r = y - z;
    const double dist = r.norm();
    d[n] = dist;
    if (dist > 1e-14) {
      Mat2 keep = Mat2::Zero();
      if (std::abs(s.x()) < 1.0) keep(0, 0) = 1.0;
      if (std::abs(s.y()) < 1.0) keep(1, 1) = 1.0;
      const Mat2 jac = v * keep * v_inv;  // d y / d z
      g[n] = (jac.transpose() - Mat2::Identity()) * (r / dist);
    } else {
      g[n] = Vec2::Zero();
    }
    ++n;
  }

  // edges: orthogonal projection onto each segment. When unclamped the
  // residual is orthogonal to the edge direction, so the gradient reduces to
  // the unit residual; when clamped the candidate is a fixed corner.
  for (double sign : {-1.0, 1.0}) {
    for (int axis : {0, 1}) {
      const Vec2& base_dir = axis == 0 ? b.v1 : b.v2;
      const Vec2& free_dir = axis == 0 ? b.v2 : b.v1;
      const Vec2 base = sign * base_dir;
      const double t = std::clamp(free_dir.dot(z - base) / free_dir.squaredNorm(), -1.0, 1.0);
      fixed_point(base + t * free_dir);
    }
  }
  // corners
  for (double s1 : {-1.0, 1.0})
    for (double s2 : {-1.0, 1.0}) fixed_point(s1 * b.v1 + s2 * b.v2);

  double lo = d[0];
  for (int i = 1; i < n; ++i) lo = std::min(lo, d[i]);
  double denom = 0.0;
  Vec2 grad = Vec2::Zero();
  for (int i = 0; i < n; ++i) {
    const double w = std::exp(-(d[i] - lo) / tau);
    denom += w;
    grad += w * g[i];
  }
  return SmoothDistance{lo - tau * std::log(denom), grad / denom};
}

/// Smooth variant of geometry::constraint_value, with gradient w.r.t. x.
inline double smooth_constraint_value(const Vec2& x, const Vec2& mu,
                                      const geometry::Covariance2& cov,
                                      const geometry::OverlapRect& rect, double beta,
                                      double tau = kSoftminTemperature,
                                      Vec2* grad_x = nullptr) {
  const Mat2 m = geometry::inv_sqrt(cov);
  const geometry::Zonotope2 b = geometry::rect_to_zonotope(rect, m);
  const SmoothDistance sd = smooth_dist_to_zonotope(m * (x - mu), b, tau);
  if (grad_x) *grad_x = m * sd.grad;  // m is symmetric
  return sd.value - std::sqrt(beta);
}

// --- problem description -----------------------------------------------------

/// Inequality-constrained program: minimize f(x) subject to c(x) >= 0
/// elementwise. Gradients are optional; central differences fill in when a
/// callable does not provide them.
struct NlpProblem {
  int dim = 0;
  int num_constraints = 0;

  // value; fills grad if non-null
  std::function<double(const VectorXd&, VectorXd* grad)> objective;
  // values (size num_constraints); fills jacobian (num_constraints x dim) if non-null
  std::function<void(const VectorXd&, VectorXd* values, MatrixXd* jacobian)> constraints;

  // rows relaxed through slack variables with a fixed quadratic penalty
  std::vector<bool> soft;

  // optional variable bounds (empty = unbounded)
  VectorXd lower;
  VectorXd upper;

  bool has_bounds() const { return lower.size() == dim && upper.size() == dim; }
};

struct SolveOptions {
  double feasibility_tol = 1e-6;
  double stationarity_tol = 1e-5;
  int max_outer = 200;
  int max_inner = 500;
  double penalty_growth = 10.0;
  double initial_penalty = 10.0;
  double max_penalty = 1e8;  // beyond this the merit curvature defeats L-BFGS
  double soft_weight = 1e4;  // quadratic slack penalty on soft rows
  int lbfgs_memory = 10;
  double fd_step = 1e-6;  // used only when analytic gradients are absent
};

enum class SolveStatus { optimal, max_iter, degraded };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::max_iter: return "max_iter";
    case SolveStatus::degraded: return "degraded";
  }
  return "unknown";
}

struct SolveReport {
  VectorXd x;
  double objective = 0.0;
  double max_violation = 0.0;
  double stationarity = 0.0;
  int outer_iterations = 0;
  int inner_iterations = 0;
  SolveStatus status = SolveStatus::degraded;
  std::vector<double> violation_trace;  // accepted outer iterations, non-increasing
  VectorXd multipliers;  // final estimates, reusable as a warm start
  double penalty = 0.0;
};

/// Dual warm start: replaying (x, multipliers, penalty) of a converged solve
/// reproduces it without taking a step.
struct DualWarmStart {
  VectorXd multipliers;
  double penalty = 0.0;
};

namespace detail {

inline void check_finite(const VectorXd& x, double value, const char* what) {
  if (std::isnan(value) || !x.allFinite()) {
    std::ostringstream os;
    os << "NaN encountered in " << what << " at x = [";
    for (int i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x(i);
    os << "]";
    throw std::runtime_error(os.str());
  }
}

/// Objective value, plus gradient (analytic when provided, else central
/// differences).
inline double eval_objective(const NlpProblem& p, const VectorXd& x, VectorXd* grad,
                             double fd_step) {
  if (!grad) {
    const double f = p.objective(x, nullptr);
    check_finite(x, f, "objective");
    return f;
  }
  grad->resize(p.dim);
  grad->setConstant(std::numeric_limits<double>::quiet_NaN());
  const double f = p.objective(x, grad);
  check_finite(x, f, "objective");
  if (grad->allFinite()) return f;
  VectorXd xp = x;
  for (int i = 0; i < p.dim; ++i) {
    xp(i) = x(i) + fd_step;
    const double f1 = p.objective(xp, nullptr);
    xp(i) = x(i) - fd_step;
    const double f0 = p.objective(xp, nullptr);
    xp(i) = x(i);
    (*grad)(i) = (f1 - f0) / (2.0 * fd_step);
  }
  return f;
}

/// Constraint values, plus Jacobian (analytic when provided, else central
/// differences).
inline void eval_constraints(const NlpProblem& p, const VectorXd& x, VectorXd& values,
                             MatrixXd* jac, double fd_step) {
  if (!jac) {
    p.constraints(x, &values, nullptr);
    if (!values.allFinite()) check_finite(x, std::nan(""), "constraints");
    return;
  }
  jac->resize(p.num_constraints, p.dim);
  jac->setConstant(std::numeric_limits<double>::quiet_NaN());
  p.constraints(x, &values, jac);
  if (!values.allFinite()) check_finite(x, std::nan(""), "constraints");
  if (jac->allFinite()) return;
  VectorXd xp = x;
  VectorXd c1(p.num_constraints), c0(p.num_constraints);
  for (int i = 0; i < p.dim; ++i) {
    xp(i) = x(i) + fd_step;
    p.constraints(xp, &c1, nullptr);
    xp(i) = x(i) - fd_step;
    p.constraints(xp, &c0, nullptr);
    xp(i) = x(i);
    jac->col(i) = (c1 - c0) / (2.0 * fd_step);
  }
}

}  // namespace detail

/// Augmented Lagrangian solve. Deterministic: identical inputs give an
/// identical report.
inline SolveReport solve(const NlpProblem& problem, const VectorXd& x0,
                         const SolveOptions& opt = {},
                         const DualWarmStart* warm = nullptr) {
  if (x0.size() != problem.dim) throw std::invalid_argument("x0 dimension mismatch");
  if (!x0.allFinite()) throw std::invalid_argument("x0 must be finite");
  if (!problem.objective) throw std::invalid_argument("problem has no objective");

  const int m = problem.num_constraints;
  const bool has_constraints = m > 0 && static_cast<bool>(problem.constraints);

  auto project = [&](VectorXd& x) {
    if (problem.has_bounds())
      x = x.cwiseMax(problem.lower).cwiseMin(problem.upper);
  };

  auto violation_of = [&](const VectorXd& c) {
    double v = 0.0;
    for (int i = 0; i < c.size(); ++i) v = std::max(v, -c(i));
    return v;
  };

  VectorXd lambda = VectorXd::Zero(m);
  double rho = opt.initial_penalty;
  if (warm && warm->multipliers.size() == m && warm->penalty > 0.0) {
    lambda = warm->multipliers.cwiseMax(0.0);
    rho = warm->penalty;
  }

  // merit value and gradient of the augmented Lagrangian at fixed (lambda, rho)
  VectorXd c_buf(m);
  MatrixXd jac_buf;
  auto merit = [&](const VectorXd& x, VectorXd* grad) {
    double f = detail::eval_objective(problem, x, grad, opt.fd_step);
    if (!has_constraints) return f;
    detail::eval_constraints(problem, x, c_buf, grad ? &jac_buf : nullptr, opt.fd_step);
    for (int i = 0; i < m; ++i) {
      const double mult = std::max(0.0, lambda(i) - rho * c_buf(i));
      f += (mult * mult - lambda(i) * lambda(i)) / (2.0 * rho);
      if (grad) grad->noalias() -= mult * jac_buf.row(i).transpose();
      if (!problem.soft.empty() && problem.soft[i] && c_buf(i) < 0.0) {
        f += opt.soft_weight * c_buf(i) * c_buf(i);
        if (grad)
          grad->noalias() += 2.0 * opt.soft_weight * c_buf(i) * jac_buf.row(i).transpose();
      }
    }
    return f;
  };

  SolveReport report;
  VectorXd x = x0;
  project(x);

  VectorXd c(m);
  if (has_constraints) detail::eval_constraints(problem, x, c, nullptr, opt.fd_step);
  double best_viol = has_constraints ? violation_of(c) : 0.0;
  double prev_viol = best_viol;
  double prev_stat = std::numeric_limits<double>::infinity();
  VectorXd best_x = x;
  double inner_tol = has_constraints ? 1e-2 : opt.stationarity_tol;

  for (int outer = 0; outer < opt.max_outer; ++outer) {
    ++report.outer_iterations;

    // ---- inner L-BFGS minimization of the merit function ----
    std::deque<VectorXd> s_hist, y_hist;
    VectorXd grad(problem.dim);
    double f = merit(x, &grad);
    double grad_norm = grad.lpNorm<Eigen::Infinity>();
    int stalled = 0;

    for (int inner = 0; inner < opt.max_inner && grad_norm > inner_tol; ++inner) {
      ++report.inner_iterations;

      // two-loop recursion
      VectorXd q = grad;
      std::vector<double> alpha_hist(s_hist.size());
      for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
        const double rho_i = 1.0 / y_hist[i].dot(s_hist[i]);
        alpha_hist[i] = rho_i * s_hist[i].dot(q);
        q -= alpha_hist[i] * y_hist[i];
      }
      if (!s_hist.empty()) {
        const double gamma =
            s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        q *= gamma;
      }
      for (std::size_t i = 0; i < s_hist.size(); ++i) {
        const double rho_i = 1.0 / y_hist[i].dot(s_hist[i]);
        const double beta = rho_i * y_hist[i].dot(q);
        q += (alpha_hist[i] - beta) * s_hist[i];
      }
      VectorXd dir = -q;
      double slope = grad.dot(dir);
      if (slope >= 0.0) {  // not a descent direction; fall back to steepest
        dir = -grad;
        slope = grad.dot(dir);
        s_hist.clear();
        y_hist.clear();
      }

      // Armijo backtracking
      double step = 1.0;
      VectorXd x_new;
      double f_new = f;
      bool moved = false;
      for (int bt = 0; bt < 60; ++bt) {
        x_new = x + step * dir;
        project(x_new);
        f_new = merit(x_new, nullptr);
        if (f_new <= f + 1e-4 * step * slope) {
          moved = true;
          break;
        }
        step *= 0.5;
      }
      if (!moved) break;  // line search exhausted; inner loop has converged
      if (f - f_new <= 1e-13 * std::max(1.0, std::abs(f))) {
        if (++stalled >= 2) break;  // descent has flattened out
      } else {
        stalled = 0;
      }

      VectorXd grad_new(problem.dim);
      const double f_check = merit(x_new, &grad_new);
      (void)f_check;

      const VectorXd s = x_new - x;
      const VectorXd y = grad_new - grad;
      if (y.dot(s) > 1e-12 * s.norm() * y.norm()) {
        s_hist.push_back(s);
        y_hist.push_back(y);
        if (static_cast<int>(s_hist.size()) > opt.lbfgs_memory) {
          s_hist.pop_front();
          y_hist.pop_front();
        }
      }
      x = x_new;
      f = f_new;
      grad = grad_new;
      grad_norm = grad.lpNorm<Eigen::Infinity>();
    }

    // ---- outer bookkeeping ----
    if (has_constraints) detail::eval_constraints(problem, x, c, nullptr, opt.fd_step);
    const double viol = has_constraints ? violation_of(c) : 0.0;

    if (viol <= best_viol + 1e-15) {
      report.violation_trace.push_back(viol);
      best_viol = std::min(best_viol, viol);
      best_x = x;
    }

    // multiplier update, then measure stationarity against the updated
    // multipliers (this is the residual a replayed warm start will see)
    for (int i = 0; i < m; ++i) lambda(i) = std::max(0.0, lambda(i) - rho * c(i));
    if (has_constraints) {
      merit(x, &grad);
      grad_norm = grad.lpNorm<Eigen::Infinity>();
    }

    report.stationarity = grad_norm;
    if (viol <= opt.feasibility_tol && grad_norm <= opt.stationarity_tol) {
      report.x = x;
      report.objective = problem.objective(x, nullptr);
      report.max_violation = viol;
      report.status = SolveStatus::optimal;
      report.multipliers = lambda;
      report.penalty = rho;
      return report;
    }

    // grow the penalty when progress stalls: insufficient feasibility gain
    // while infeasible, or a stalled stationarity residual while feasible
    bool grow = false;
    if (outer > 0) {
      if (viol > opt.feasibility_tol)
        grow = viol > 0.25 * prev_viol;
      else
        grow = grad_norm > opt.stationarity_tol && grad_norm > 0.5 * prev_stat;
    }
    if (grow && rho < opt.max_penalty)
      rho = std::min(rho * opt.penalty_growth, opt.max_penalty);
    prev_viol = viol;
    prev_stat = grad_norm;
    inner_tol = std::max(opt.stationarity_tol, 0.2 * inner_tol);
  }

  // out of outer iterations: report the best-feasibility iterate
  report.x = best_x;
  report.objective = problem.objective(best_x, nullptr);
  if (has_constraints) detail::eval_constraints(problem, best_x, c, nullptr, opt.fd_step);
  report.max_violation = has_constraints ? violation_of(c) : 0.0;
  report.status = report.max_violation <= opt.feasibility_tol ? SolveStatus::max_iter
                                                              : SolveStatus::degraded;
  report.multipliers = lambda;
  report.penalty = rho;
  return report;
}

// --- gradient verification ---------------------------------------------------

struct GradientCheckReport {
  double max_rel_error = 0.0;
  int worst_constraint = -1;  // -1 = objective
  int worst_component = -1;
  bool ok = true;
};

/// Central finite differences against the supplied analytic gradients.
inline GradientCheckReport check_gradients(const NlpProblem& problem, const VectorXd& x,
                                           double h, double tol) {
  if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  GradientCheckReport rep;

  auto rel_err = [](double fd, double an) {
    return std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
  };

  VectorXd grad(problem.dim);
  grad.setConstant(std::numeric_limits<double>::quiet_NaN());
  problem.objective(x, &grad);
  VectorXd xp = x;
  if (grad.allFinite()) {
    for (int i = 0; i < problem.dim; ++i) {
      xp(i) = x(i) + h;
      const double f1 = problem.objective(xp, nullptr);
      xp(i) = x(i) - h;
      const double f0 = problem.objective(xp, nullptr);
      xp(i) = x(i);
      const double e = rel_err((f1 - f0) / (2 * h), grad(i));
      if (e > rep.max_rel_error) {
        rep.max_rel_error = e;
        rep.worst_constraint = -1;
        rep.worst_component = i;
      }
    }
  }

  if (problem.num_constraints > 0 && problem.constraints) {
    MatrixXd jac(problem.num_constraints, problem.dim);
    jac.setConstant(std::numeric_limits<double>::quiet_NaN());
    VectorXd values(problem.num_constraints);
    problem.constraints(x, &values, &jac);
    if (jac.allFinite()) {
      VectorXd c1(problem.num_constraints), c0(problem.num_constraints);
      for (int i = 0; i < problem.dim; ++i) {
        xp(i) = x(i) + h;
        problem.constraints(xp, &c1, nullptr);
        xp(i) = x(i) - h;
        problem.constraints(xp, &c0, nullptr);
        xp(i) = x(i);
        for (int r = 0; r < problem.num_constraints; ++r) {
          const double e = rel_err((c1(r) - c0(r)) / (2 * h), jac(r, i));
          if (e > rep.max_rel_error) {
            rep.max_rel_error = e;
            rep.worst_constraint = r;
            rep.worst_component = i;
          }
        }
      }
    }
  }

  rep.ok = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace uasmpc::solver
