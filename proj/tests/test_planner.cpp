// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "uasmpc/planner.hpp"

#include <cmath>

using namespace uasmpc;
using namespace uasmpc::planner;
using prediction::AgentState;
using prediction::GmmPrediction;
using prediction::Mode;

namespace {

std::vector<Vec2> straight_route(double length = 200.0, double spacing = 1.0) {
  std::vector<Vec2> route;
  for (double x = -20.0; x <= length; x += spacing) route.emplace_back(x, 0.0);
  return route;
}

GmmPrediction stationary_prediction(const Vec2& pos, int n, double dt, double sigma2 = 0.02,
                                    int n_modes = 1) {
  GmmPrediction pred;
  pred.horizon = n;
  pred.dt = dt;
  for (int j = 0; j < n_modes; ++j) {
    Mode m;
    m.prob = 1.0 / n_modes;
    for (int k = 0; k < n; ++k) {
      m.means.push_back(pos);
      m.covs.emplace_back(sigma2, 0.0, sigma2);
    }
    pred.modes.push_back(std::move(m));
  }
  return pred;
}

PolicyParameters zero_policy(int n_modes, int horizon, int n_nevs = 0) {
  PolicyParameters p;
  p.h0 = Vec2::Zero();
  p.h.assign(n_modes, std::vector<Vec2>(horizon - 1, Vec2::Zero()));
  p.k0.assign(n_nevs, Mat2::Zero());
  p.k.assign(n_modes, std::vector<std::vector<Mat2>>(
                          horizon - 1, std::vector<Mat2>(n_nevs, Mat2::Zero())));
  return p;
}

}  // namespace

TEST_CASE("rollout: zero policy stays at the origin") {
  PlannerConfig cfg;
  EgoState ego;
  ego.position = Vec2(12.0, -3.0);
  const auto r = rollout(zero_policy(1, cfg.horizon), ego, {}, {}, cfg);
  REQUIRE(r.modes.size() == 1);
  for (const auto& x : r.modes[0].states) CHECK(x.norm() == 0.0);
}

TEST_CASE("rollout: constant feedforward integrates as Euler") {
  PlannerConfig cfg;
  cfg.horizon = 10;
  cfg.dt = 0.3;
  auto p = zero_policy(1, cfg.horizon);
  p.h0 = Vec2(1.0, 0.0);
  for (auto& h : p.h[0]) h = Vec2(1.0, 0.0);
  const auto r = rollout(p, EgoState{}, {}, {}, cfg);
  for (int k = 0; k <= cfg.horizon; ++k) {
    CHECK(r.modes[0].states[k].x() == doctest::Approx(0.3 * k).epsilon(1e-12));
    CHECK(r.modes[0].states[k].y() == doctest::Approx(0.0));
  }
}

TEST_CASE("rollout: random policy matches step-by-step re-integration") {
  Rng rng(5);
  PlannerConfig cfg;
  cfg.horizon = 8;
  cfg.dt = 0.25;
  cfg.free_gains = true;

  EgoState ego;
  ego.position = Vec2(4.0, 2.0);
  std::vector<AgentState> nevs(2);
  nevs[0].position = Vec2(10.0, 2.0);
  nevs[1].position = Vec2(-3.0, 5.0);
  std::vector<GmmPrediction> preds;
  for (const auto& nev : nevs) {
    AgentState moving = nev;
    moving.velocity = Vec2(rng.uniform(-2, 2), rng.uniform(-2, 2));
    preds.push_back(prediction::constant_velocity_predict(moving, cfg.horizon, cfg.dt));
  }

  PolicyParameters p = zero_policy(1, cfg.horizon, 2);
  p.h0 = Vec2(rng.uniform(-1, 1), rng.uniform(-1, 1));
  for (auto& h : p.h[0]) h = Vec2(rng.uniform(-1, 1), rng.uniform(-1, 1));
  for (auto& m : p.k0) m = Mat2::NullaryExpr([&]() { return rng.uniform(-0.1, 0.1); });
  for (auto& per_step : p.k[0])
    for (auto& m : per_step) m = Mat2::NullaryExpr([&]() { return rng.uniform(-0.1, 0.1); });

  const auto r = rollout(p, ego, nevs, preds, cfg);

  // independent re-integration
  Vec2 u0 = p.h0;
  for (int i = 0; i < 2; ++i) u0 += p.k0[i] * (nevs[i].position - ego.position);
  Vec2 x = Vec2::Zero();
  std::vector<Vec2> states{x};
  for (int k = 0; k < cfg.horizon; ++k) {
    Vec2 u;
    if (k == 0) {
      u = u0;
    } else {
      u = p.h[0][k - 1];
      for (int i = 0; i < 2; ++i)
        u += p.k[0][k - 1][i] * (preds[i].modes[0].means[k - 1] - ego.position);
    }
    CHECK((r.modes[0].controls[k] - u).norm() == 0.0);
    x += cfg.dt * u;
    CHECK((r.modes[0].states[k + 1] - x).norm() == 0.0);
  }
}

TEST_CASE("cost: zero on reference, unit quadratic, naive oracle") {
  PlannerConfig cfg;
  cfg.horizon = 6;
  cfg.dt = 0.3;

  Reference ref;
  for (int k = 0; k <= cfg.horizon; ++k) ref.states.emplace_back(3.0 * k * cfg.dt, 0.0);
  for (int k = 0; k < cfg.horizon; ++k)
    ref.controls.push_back((ref.states[k + 1] - ref.states[k]) / cfg.dt);

  PolicyParameters p = zero_policy(1, cfg.horizon);
  p.h0 = ref.controls[0];
  for (int k = 1; k < cfg.horizon; ++k) p.h[0][k - 1] = ref.controls[k];
  const auto rolled = rollout(p, EgoState{}, {}, {}, cfg);
  CHECK(cost(p, rolled, ref, {1.0}, cfg) == doctest::Approx(0.0).epsilon(1e-15));

  // one step off the reference by (1,0) with matching controls elsewhere
  PlannerConfig one;
  one.horizon = 1;
  one.dt = 1.0;
  one.q = Mat2::Identity();
  one.r1 = Mat2::Zero();
  one.r2 = Mat2::Identity();
  Reference ref1;
  ref1.states = {Vec2(0, 0), Vec2(0, 0)};
  ref1.controls = {Vec2(0, 0)};
  PolicyParameters p1;
  p1.h0 = Vec2(1.0, 0.0);
  p1.h.assign(1, {});
  const auto rolled1 = rollout(p1, EgoState{}, {}, {}, one);
  CHECK(cost(p1, rolled1, ref1, {1.0}, one) == doctest::Approx(1.0));

  // random instance vs naive summation
  Rng rng(7);
  PlannerConfig rnd;
  rnd.horizon = 5;
  rnd.dt = 0.4;
  rnd.q << 1.3, 0.2, 0.2, 0.9;
  rnd.r1 << 0.2, 0.0, 0.0, 0.3;
  rnd.r2 << 1.1, -0.1, -0.1, 0.8;
  Reference rref;
  for (int k = 0; k <= rnd.horizon; ++k)
    rref.states.emplace_back(rng.uniform(-5, 5), rng.uniform(-5, 5));
  for (int k = 0; k < rnd.horizon; ++k)
    rref.controls.push_back((rref.states[k + 1] - rref.states[k]) / rnd.dt);
  PolicyParameters pr = zero_policy(2, rnd.horizon);
  pr.h0 = Vec2(rng.uniform(-2, 2), rng.uniform(-2, 2));
  for (auto& per_mode : pr.h)
    for (auto& h : per_mode) h = Vec2(rng.uniform(-2, 2), rng.uniform(-2, 2));
  const std::vector<double> probs{0.3, 0.7};

  // two far-apart stationary obstacles provide the two modes
  std::vector<AgentState> nevs(1);
  nevs[0].position = Vec2(100, 100);
  std::vector<GmmPrediction> preds{
      stationary_prediction(nevs[0].position, rnd.horizon, rnd.dt, 0.02, 2)};
  const auto rrolled = rollout(pr, EgoState{}, nevs, preds, rnd);

  double naive = 0.0;
  for (int j = 0; j < 2; ++j) {
    double mode_cost = 0.0;
    for (int k = 0; k < rnd.horizon; ++k) {
      const Vec2 dx = rrolled.modes[j].states[k + 1] - rref.states[k + 1];
      const Vec2 du = rrolled.modes[j].controls[k] - rref.controls[k];
      mode_cost += dx.transpose() * rnd.q * dx;
      mode_cost += du.transpose() * rnd.r1 * du;
    }
    for (int k = 0; k + 1 < rnd.horizon; ++k) {
      const Vec2 dd = rrolled.modes[j].controls[k + 1] - rrolled.modes[j].controls[k];
      mode_cost += dd.transpose() * rnd.r2 * dd;
    }
    naive += probs[j] * mode_cost;
  }
  CHECK(cost(pr, rrolled, rref, probs, rnd) == doctest::Approx(naive).epsilon(1e-10));
}

TEST_CASE("constraint accounting and center violation") {
  PlannerConfig cfg;
  cfg.horizon = 10;

  // empty scene: 8N rows, all satisfied for in-bounds controls
  {
    ConstraintLayout lay{cfg.horizon, 1, 0};
    CHECK(lay.total() == 8 * cfg.horizon);
    auto p = zero_policy(1, cfg.horizon);
    p.h0 = Vec2(1.0, 0.0);
    for (auto& h : p.h[0]) h = Vec2(1.0, 0.0);
    const auto rolled = rollout(p, EgoState{}, {}, {}, cfg);
    const auto c = constraints(rolled, Vec2(1.0, 0.0), {}, cfg, lay);
    REQUIRE(c.size() == 8 * cfg.horizon);
    CHECK(c.minCoeff() >= 0.0);
  }

  // general count: 4(1 + Xi(N-1)) + 4(1 + Xi(N-1)) + A Xi N
  {
    ConstraintLayout lay{10, 3, 2};
    CHECK(lay.n_velocity() == 4 * (1 + 3 * 9));
    CHECK(lay.n_accel() == 4 * (1 + 3 * 9));
    CHECK(lay.n_collision() == 2 * 3 * 10);
    CHECK(lay.total() == lay.n_velocity() + lay.n_accel() + lay.n_collision());
  }

  // ego parked on a predicted mean: margin is exactly -sqrt(beta)
  {
    const double beta = geometry::chi2_quantile_2dof(cfg.coverage_p);
    ConstraintLayout lay{cfg.horizon, 1, 1};
    const auto p = zero_policy(1, cfg.horizon);
    const auto rolled = rollout(p, EgoState{}, {}, {}, cfg);
    std::vector<std::vector<std::vector<KeepOut>>> keepouts(1);
    keepouts[0].resize(1);
    const geometry::OverlapRect rect = geometry::overlap_rect(cfg.ego_half, Vec2(2.5, 1.0));
    for (int k = 0; k < cfg.horizon; ++k) {
      KeepOut ko;
      ko.mu = Vec2::Zero();  // obstacle mean on top of the (stationary) ego
      ko.cov = geometry::Covariance2(0.02, 0, 0.02);
      ko.inv_sqrt_cov = geometry::inv_sqrt(ko.cov);
      ko.rect = rect;
      ko.sqrt_beta = std::sqrt(beta);
      keepouts[0][0].push_back(ko);
    }
    const auto c = constraints(rolled, Vec2::Zero(), keepouts, cfg, lay);
    for (int k = 0; k < cfg.horizon; ++k)
      CHECK(c(lay.collision_row(0, 0, k)) == doctest::Approx(-std::sqrt(beta)).epsilon(1e-12));
  }
}

TEST_CASE("build_reference: straight, stationary, curved, too far") {
  PlannerConfig cfg;
  cfg.horizon = 10;
  cfg.dt = 0.3;

  EgoState ego;
  ego.position = Vec2(0, 0);
  ego.velocity = Vec2(10, 0);
  const auto ref = build_reference(straight_route(), ego, cfg);
  for (int k = 0; k <= cfg.horizon; ++k) {
    CHECK(ref.states[k].x() == doctest::Approx(3.0 * k).epsilon(1e-9));
    CHECK(ref.states[k].y() == doctest::Approx(0.0));
  }

  EgoState still;
  still.position = Vec2(5.0, 0.4);
  const auto ref_still = build_reference(straight_route(), still, cfg);
  for (const auto& x : ref_still.states) CHECK((x - Vec2(5.0, 0.0)).norm() < 1e-9);

  // curved route: all reference points must lie on the polyline
  std::vector<Vec2> arc;
  for (int i = 0; i <= 100; ++i) {
    const double a = 0.5 * kPi * i / 100.0;
    arc.emplace_back(30.0 * std::sin(a), 30.0 * (1.0 - std::cos(a)));
  }
  EgoState curving;
  curving.position = Vec2(0.5, 0.0);
  curving.velocity = Vec2(8.0, 0.0);
  const auto ref_arc = build_reference(arc, curving, cfg);
  const Polyline poly(arc);
  for (const auto& x : ref_arc.states) CHECK(poly.project(x).distance < 1e-9);

  EgoState far;
  far.position = Vec2(0, 200.0);
  CHECK_THROWS_AS(build_reference(straight_route(), far, cfg), std::invalid_argument);
}

TEST_CASE("plan: empty scene tracks the reference") {
  PlannerConfig cfg;
  EgoState ego;
  ego.position = Vec2(0, 0);
  ego.velocity = Vec2(10, 0);
  const auto result = plan(ego, {}, {}, straight_route(), cfg);
  CHECK(result.status == solver::SolveStatus::optimal);
  CHECK(result.cost < 1e-4);
  CHECK(result.max_violation < 1e-6);
  CHECK((result.first_control - Vec2(10, 0)).norm() < 1e-3);
}

TEST_CASE("plan: stationary obstacle astride the reference forces a detour") {
  PlannerConfig cfg;
  EgoState ego;
  ego.position = Vec2(0, 0);
  ego.velocity = Vec2(10, 0);

  AgentState nev;
  nev.position = Vec2(18.0, 0.0);  // in the lane, reachable within the horizon
  nev.velocity = Vec2::Zero();
  const auto pred = prediction::constant_velocity_predict(nev, cfg.horizon, cfg.dt);

  const auto result = plan(ego, {nev}, {pred}, straight_route(), cfg);
  CHECK(result.max_violation <= 1e-6);
  double max_lateral = 0.0;
  for (const auto& x : result.trajectories[0]) max_lateral = std::max(max_lateral, std::abs(x.y()));
  CHECK(max_lateral > 0.5);  // it must leave the centerline
  for (double margin : result.collision_margins) CHECK(margin >= -1e-6);
}

TEST_CASE("plan: warm-started replan on identical inputs is stable") {
  PlannerConfig cfg;
  EgoState ego;
  ego.velocity = Vec2(8, 0);
  AgentState nev;
  nev.position = Vec2(25.0, 1.0);
  const auto pred = prediction::constant_velocity_predict(nev, cfg.horizon, cfg.dt);

  const auto first = plan(ego, {nev}, {pred}, straight_route(), cfg);
  const auto second = plan(ego, {nev}, {pred}, straight_route(), cfg,
                           WarmStart{first.theta, first.multipliers, first.penalty});
  CHECK((second.first_control - first.first_control).norm() < 1e-8);
}

TEST_CASE("plan: first control shared bit-exactly across modes") {
  PlannerConfig cfg;
  EgoState ego;
  ego.velocity = Vec2(9, 0);
  AgentState nev;
  nev.position = Vec2(20.0, 4.0);

  // three-mode prediction: stay, drift up, drift down
  GmmPrediction pred;
  pred.horizon = cfg.horizon;
  pred.dt = cfg.dt;
  const std::vector<Vec2> drifts{Vec2(0, 0), Vec2(0, 1.0), Vec2(0, -1.0)};
  const std::vector<double> probs{0.5, 0.3, 0.2};
  for (int j = 0; j < 3; ++j) {
    Mode m;
    m.prob = probs[j];
    for (int k = 1; k <= cfg.horizon; ++k) {
      m.means.push_back(nev.position + k * cfg.dt * drifts[j]);
      m.covs.emplace_back(0.05, 0.0, 0.05);
    }
    pred.modes.push_back(std::move(m));
  }

  const auto result = plan(ego, {nev}, {pred}, straight_route(), cfg);
  REQUIRE(result.controls.size() == 3);
  for (int j = 1; j < 3; ++j) {
    CHECK(result.controls[j][0].x() == result.controls[0][0].x());
    CHECK(result.controls[j][0].y() == result.controls[0][0].y());
  }

  // dynamics consistency: states re-integrate exactly from controls
  for (int j = 0; j < 3; ++j) {
    Vec2 x = ego.position;
    for (int k = 0; k < cfg.horizon; ++k) {
      x += cfg.dt * result.controls[j][k];
      CHECK((result.trajectories[j][k + 1] - x).norm() == 0.0);
    }
  }

  // margin honesty: reported margins equal exact recomputation
  const double beta = geometry::chi2_quantile_2dof(cfg.coverage_p);
  const auto rect = geometry::overlap_rect(cfg.ego_half, nev.half_size);
  int idx = 0;
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < cfg.horizon; ++k, ++idx) {
      const double expected = geometry::constraint_value(
          result.trajectories[j][k + 1], pred.modes[j].means[k], pred.modes[j].covs[k], rect,
          beta);
      CHECK(result.collision_margins[idx] == doctest::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("plan: mode permutation leaves first control and cost unchanged") {
  PlannerConfig cfg;
  EgoState ego;
  ego.velocity = Vec2(9, 0);
  AgentState nev;
  nev.position = Vec2(22.0, 2.0);

  GmmPrediction pred;
  pred.horizon = cfg.horizon;
  pred.dt = cfg.dt;
  const std::vector<Vec2> vels{Vec2(0, 0.8), Vec2(-1.0, 0)};
  const std::vector<double> probs{0.6, 0.4};
  for (int j = 0; j < 2; ++j) {
    Mode m;
    m.prob = probs[j];
    for (int k = 1; k <= cfg.horizon; ++k) {
      m.means.push_back(nev.position + k * cfg.dt * vels[j]);
      m.covs.emplace_back(0.04, 0.0, 0.04);
    }
    pred.modes.push_back(std::move(m));
  }
  GmmPrediction swapped = pred;
  std::swap(swapped.modes[0], swapped.modes[1]);

  const auto a = plan(ego, {nev}, {pred}, straight_route(), cfg);
  const auto b = plan(ego, {nev}, {swapped}, straight_route(), cfg);
  CHECK((a.first_control - b.first_control).norm() < 1e-5);
  CHECK(a.cost == doctest::Approx(b.cost).epsilon(1e-5));
  // per-mode outputs permute
  CHECK((a.trajectories[0][cfg.horizon] - b.trajectories[1][cfg.horizon]).norm() < 1e-4);
  CHECK((a.trajectories[1][cfg.horizon] - b.trajectories[0][cfg.horizon]).norm() < 1e-4);
}

TEST_CASE("plan: margins recomputed under unscaled covariance dominate scaled ones") {
  PlannerConfig cfg;
  EgoState ego;
  ego.velocity = Vec2(10, 0);
  AgentState nev;
  nev.position = Vec2(20.0, 0.5);
  const auto pred = prediction::constant_velocity_predict(nev, cfg.horizon, cfg.dt);
  const auto scaled = prediction::scale_covariances(pred, 4.0);

  const auto result = plan(ego, {nev}, {scaled}, straight_route(), cfg);
  const double beta = geometry::chi2_quantile_2dof(cfg.coverage_p);
  const auto rect = geometry::overlap_rect(cfg.ego_half, nev.half_size);
  for (int k = 0; k < cfg.horizon; ++k) {
    const double m_scaled = geometry::constraint_value(
        result.trajectories[0][k + 1], scaled.modes[0].means[k], scaled.modes[0].covs[k], rect,
        beta);
    const double m_unscaled = geometry::constraint_value(
        result.trajectories[0][k + 1], pred.modes[0].means[k], pred.modes[0].covs[k], rect,
        beta);
    CHECK(m_unscaled >= m_scaled - 1e-12);
  }
}

TEST_CASE("plan: input validation") {
  PlannerConfig cfg;
  EgoState ego;
  CHECK_THROWS_AS(plan(ego, {}, {}, {}, cfg), std::invalid_argument);  // no route

  AgentState nev;
  nev.position = Vec2(10, 0);
  const auto pred_short = prediction::constant_velocity_predict(nev, cfg.horizon - 1, cfg.dt);
  CHECK_THROWS_AS(plan(ego, {nev}, {pred_short}, straight_route(), cfg),
                  std::invalid_argument);

  // mismatched shared mode counts across obstacles
  AgentState nev2;
  nev2.position = Vec2(12, 3);
  auto p1 = stationary_prediction(nev.position, cfg.horizon, cfg.dt, 0.02, 2);
  auto p2 = stationary_prediction(nev2.position, cfg.horizon, cfg.dt, 0.02, 3);
  CHECK_THROWS_AS(plan(ego, {nev, nev2}, {p1, p2}, straight_route(), cfg),
                  std::invalid_argument);
}

TEST_CASE("assembled NLP gradients match finite differences") {
  Rng rng(11);
  PlannerConfig cfg;
  EgoState ego;
  ego.velocity = Vec2(8, 0);
  AgentState nev;
  nev.position = Vec2(15.0, 1.0);
  nev.velocity = Vec2(-1.0, 0.0);
  const auto pred = prediction::constant_velocity_predict(nev, cfg.horizon, cfg.dt);

  const auto nlp = assemble_nlp(ego, {nev}, {pred}, straight_route(), cfg);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd x = nlp.theta0;
    for (int i = 0; i < x.size(); ++i) x(i) += rng.uniform(-0.5, 0.5);
    const auto rep = solver::check_gradients(nlp.problem, x, 1e-6, 1e-4);
    CHECK(rep.max_rel_error <= 1e-4);
  }
}
