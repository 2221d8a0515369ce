// SPDX-License-Identifier: Apache-2.0
//
// Multi-modal Gaussian-mixture trajectory forecasts: containers, the
// constant-velocity baseline, covariance scaling, and the prediction
// quality metrics (NLL, entropy, minADE/minFDE, calibration error).

#pragma once

#include "uasmpc/core.hpp"
#include "uasmpc/geometry.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace uasmpc::prediction {

using geometry::Covariance2;

/// One mode of an agent's future: a probability and per-step bivariate
/// Gaussians (means in m, covariances in m^2).
struct Mode {
  double prob = 1.0;
  std::vector<Vec2> means;
  std::vector<Covariance2> covs;
};

/// Per-agent multi-modal forecast over a fixed horizon.
struct GmmPrediction {
  std::vector<Mode> modes;
  int horizon = 0;    // steps
  double dt = 0.0;    // seconds per step

  void validate() const {
    if (modes.empty()) throw std::invalid_argument("prediction has no modes");
    double total = 0.0;
    for (const auto& m : modes) {
      if (m.prob < 0.0) throw std::invalid_argument("mode probability must be >= 0");
      if (static_cast<int>(m.means.size()) != horizon ||
          static_cast<int>(m.covs.size()) != horizon)
        throw std::invalid_argument("mode length does not match horizon");
      total += m.prob;
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw std::invalid_argument("mode probabilities must sum to 1");
  }
};

/// Kinematic state of a tracked agent.
struct AgentState {
  Vec2 position = Vec2::Zero();
  Vec2 velocity = Vec2::Zero();
  double heading = 0.0;           // rad, (-pi, pi]
  Vec2 half_size = Vec2(2.5, 1.0);  // (half length, half width), m
};

inline constexpr double kDefaultSigma2 = 0.02;  // m^2, fixed baseline covariance

/// Single-mode forecast that extrapolates the current velocity, with a fixed
/// isotropic covariance at every step.
inline GmmPrediction constant_velocity_predict(const AgentState& state, int n, double dt,
                                               double sigma2 = kDefaultSigma2) {
  if (n < 1) throw std::invalid_argument("horizon must be >= 1");
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (!(sigma2 > 0.0)) throw std::invalid_argument("sigma2 must be positive");

  Mode mode;
  mode.prob = 1.0;
  mode.means.reserve(n);
  mode.covs.reserve(n);
  for (int k = 1; k <= n; ++k) {
    mode.means.push_back(state.position + k * dt * state.velocity);
    mode.covs.emplace_back(sigma2, 0.0, sigma2);
  }
  return GmmPrediction{{std::move(mode)}, n, dt};
}

/// Sigma -> alpha * Sigma on every step of every mode; means and mode
/// probabilities unchanged.
inline GmmPrediction scale_covariances(const GmmPrediction& pred, double alpha) {
  if (!(alpha > 0.0)) throw std::domain_error("covariance scale must be positive");
  GmmPrediction out = pred;
  for (auto& mode : out.modes)
    for (auto& cov : mode.covs) cov = cov.scaled(alpha);
  return out;
}

namespace detail {

inline double log_gaussian2(const Vec2& x, const Vec2& mu, const Covariance2& cov) {
  const Mat2 m = geometry::inv_sqrt(cov);
  const double maha2 = (m * (x - mu)).squaredNorm();
  return -std::log(2.0 * kPi) - 0.5 * std::log(cov.det()) - 0.5 * maha2;
}

inline double logsumexp(const std::vector<double>& terms) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double t : terms) hi = std::max(hi, t);
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - hi);
  return hi + std::log(acc);
}

}  // namespace detail

/// Mean over timesteps of -ln sum_j p_j N(truth_k; mu_k^j, Sigma_k^j),
/// accumulated in log domain.
inline double gmm_nll(const GmmPrediction& pred, const std::vector<Vec2>& truth) {
  pred.validate();
  if (static_cast<int>(truth.size()) != pred.horizon)
    throw std::invalid_argument("truth length does not match horizon");

  double total = 0.0;
  std::vector<double> terms(pred.modes.size());
  for (int k = 0; k < pred.horizon; ++k) {
    for (std::size_t j = 0; j < pred.modes.size(); ++j) {
      const auto& m = pred.modes[j];
      terms[j] = m.prob > 0.0
                     ? std::log(m.prob) + detail::log_gaussian2(truth[k], m.means[k], m.covs[k])
                     : -std::numeric_limits<double>::infinity();
    }
    total -= detail::logsumexp(terms);
  }
  return total / pred.horizon;
}

/// Mean over modes and steps of the bivariate Gaussian differential entropy
/// ln(2 pi e) + 0.5 ln det Sigma.
inline double avg_entropy(const GmmPrediction& pred) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& mode : pred.modes) {
    for (const auto& cov : mode.covs) {
      total += std::log(2.0 * kPi) + 1.0 + 0.5 * std::log(cov.det());
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

/// Draw n trajectories: a mode per trajectory from the mode probabilities,
/// then each step independently from its Gaussian. Deterministic in seed.
inline std::vector<std::vector<Vec2>> sample_trajectories(const GmmPrediction& pred, int n,
                                                          std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  pred.validate();
  Rng rng(seed);
  std::vector<std::vector<Vec2>> out;
  out.reserve(n);
  for (int s = 0; s < n; ++s) {
    double u = rng.uniform();
    std::size_t j = 0;
    for (; j + 1 < pred.modes.size(); ++j) {
      if (u < pred.modes[j].prob) break;
      u -= pred.modes[j].prob;
    }
    const Mode& mode = pred.modes[j];
    std::vector<Vec2> traj(pred.horizon);
    for (int k = 0; k < pred.horizon; ++k) {
      const Eigen::LLT<Mat2> llt(mode.covs[k].mat());
      traj[k] = mode.means[k] + Mat2(llt.matrixL()) * rng.normal2();
    }
    out.push_back(std::move(traj));
  }
  return out;
}

/// Mode means as trajectories, in mode order (the non-sampled minADE variant).
inline std::vector<std::vector<Vec2>> mode_mean_trajectories(const GmmPrediction& pred) {
  std::vector<std::vector<Vec2>> out;
  out.reserve(pred.modes.size());
  for (const auto& m : pred.modes) out.push_back(m.means);
  return out;
}

struct AdeFde {
  double min_ade;
  double min_fde;
};

/// Best-of-samples average and final displacement errors.
inline AdeFde min_ade_fde(const std::vector<std::vector<Vec2>>& samples,
                          const std::vector<Vec2>& truth) {
  if (samples.empty()) throw std::invalid_argument("need at least one sample");
  AdeFde best{std::numeric_limits<double>::infinity(),
              std::numeric_limits<double>::infinity()};
  for (const auto& s : samples) {
    if (s.size() != truth.size()) throw std::invalid_argument("sample/truth length mismatch");
    double ade = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) ade += (s[k] - truth[k]).norm();
    ade /= static_cast<double>(s.size());
    const double fde = (s.back() - truth.back()).norm();
    best.min_ade = std::min(best.min_ade, ade);
    best.min_fde = std::min(best.min_fde, fde);
  }
  return best;
}

/// One calibration record: a ground-truth point and the predicted mixture at
/// the same step.
struct MixtureAt {
  std::vector<double> probs;
  std::vector<Vec2> means;
  std::vector<Covariance2> covs;
};

struct CalibrationRecord {
  Vec2 truth;
  MixtureAt mixture;
};

/// Expected calibration error. Each record is reduced to a coverage score
/// c = sum_j p_j F_chi2(d_j^2) with d_j the Mahalanobis distance of the
/// truth under mode j; perfectly calibrated predictions make c uniform on
/// [0,1]. The ECE is the mean orthogonal distance |empirical - ideal|/sqrt(2)
/// between the empirical CDF of the scores and the diagonal, over a fixed
/// grid of 100 evenly spaced levels.
inline double ece(const std::vector<CalibrationRecord>& records) {
  if (records.empty()) throw std::domain_error("ECE needs at least one record");

  std::vector<double> scores;
  scores.reserve(records.size());
  for (const auto& rec : records) {
    double c = 0.0;
    for (std::size_t j = 0; j < rec.mixture.probs.size(); ++j) {
      const Mat2 m = geometry::inv_sqrt(rec.mixture.covs[j]);
      const double d2 = (m * (rec.truth - rec.mixture.means[j])).squaredNorm();
      c += rec.mixture.probs[j] * geometry::chi2_cdf_2dof(d2);
    }
    scores.push_back(c);
  }
  std::sort(scores.begin(), scores.end());

  const double n = static_cast<double>(scores.size());
  double total = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double level = (i + 0.5) / 100.0;
    const auto below = std::upper_bound(scores.begin(), scores.end(), level) - scores.begin();
    const double empirical = static_cast<double>(below) / n;
    total += std::abs(empirical - level) / std::sqrt(2.0);
  }
  return total / 100.0;
}

// --- prediction dump -------------------------------------------------------
//
// JSON array of records, one per (agent, time) pair:
//   {"agent_id": ..., "t": ..., "modes": [{"prob": p, "means": [[x,y],...],
//    "covs": [[xx,xy,yy],...]}], "truth": [[x,y],...]}

struct DumpRecord {
  std::int64_t agent_id = 0;
  std::int64_t t = 0;
  GmmPrediction prediction;
  std::vector<Vec2> truth;
};

inline nlohmann::json dump_record_to_json(const DumpRecord& rec) {
  nlohmann::json modes = nlohmann::json::array();
  for (const auto& m : rec.prediction.modes) {
    nlohmann::json means = nlohmann::json::array();
    nlohmann::json covs = nlohmann::json::array();
    for (const auto& mu : m.means) means.push_back({mu.x(), mu.y()});
    for (const auto& c : m.covs) covs.push_back({c.xx(), c.xy(), c.yy()});
    modes.push_back({{"prob", m.prob}, {"means", means}, {"covs", covs}});
  }
  nlohmann::json truth = nlohmann::json::array();
  for (const auto& p : rec.truth) truth.push_back({p.x(), p.y()});
  return {{"agent_id", rec.agent_id}, {"t", rec.t}, {"modes", modes}, {"truth", truth}};
}

inline DumpRecord dump_record_from_json(const nlohmann::json& j) {
  DumpRecord rec;
  rec.agent_id = j.at("agent_id").get<std::int64_t>();
  rec.t = j.at("t").get<std::int64_t>();
  for (const auto& jm : j.at("modes")) {
    Mode m;
    m.prob = jm.at("prob").get<double>();
    for (const auto& mu : jm.at("means")) m.means.emplace_back(mu.at(0), mu.at(1));
    for (const auto& c : jm.at("covs"))
      m.covs.emplace_back(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>());
    rec.prediction.modes.push_back(std::move(m));
  }
  for (const auto& p : j.at("truth")) rec.truth.emplace_back(p.at(0), p.at(1));
  if (rec.prediction.modes.empty()) throw std::invalid_argument("dump record has no modes");
  rec.prediction.horizon = static_cast<int>(rec.prediction.modes.front().means.size());
  rec.prediction.dt = 1.0;  // dumps carry no timestep; none of the metrics need it
  rec.prediction.validate();
  if (rec.truth.size() != static_cast<std::size_t>(rec.prediction.horizon))
    throw std::invalid_argument("dump record truth length mismatch");
  return rec;
}

inline std::vector<DumpRecord> load_prediction_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open prediction dump: " + path);
  nlohmann::json j;
  in >> j;
  if (!j.is_array()) throw std::invalid_argument("prediction dump must be a JSON array");
  std::vector<DumpRecord> out;
  out.reserve(j.size());
  for (const auto& item : j) out.push_back(dump_record_from_json(item));
  return out;
}

inline void save_prediction_dump(const std::vector<DumpRecord>& records,
                                 const std::string& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& rec : records) j.push_back(dump_record_to_json(rec));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write prediction dump: " + path);
  out << j.dump(1) << "\n";
}

}  // namespace uasmpc::prediction
