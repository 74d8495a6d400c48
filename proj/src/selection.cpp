#include "fcmix/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include "fcmix/errors.hpp"
#include "fcmix/parallel.hpp"

namespace fcmix {

LoglikEstimate is2_loglik(const FitData& data, const ModelParams& omega, int n_samples, PriorTerm prior,
                          const PosteriorOptions& options, Rng& rng) {
  if (n_samples < 1) throw ConfigError("estimator needs at least one sample");
  const int n = data.n(), G = omega.G;
  const auto terms = profile_terms_table(data.stats, omega);
  auto prior_term = [&](const LabelField& z) {
    if (G == 1) return 0.0;
    return prior == PriorTerm::PseudoLikelihood ? potts_log_pseudolikelihood(z, omega.xi, data.graph, G)
                                                : potts_log_unnormalized(z, omega.xi, data.graph);
  };
  if (G == 1) {
    const LabelField z(n, 0);
    return {marginal_loglik(data.sites, terms, z, omega, options), 0.0};
  }
  const Eigen::MatrixXd L = per_profile_loglik_table(terms, omega);
  Eigen::MatrixXd log_prop(n, G);
  for (int i = 0; i < n; ++i) {
    const double m = L.row(i).maxCoeff();
    const double lse = m + std::log((L.row(i).array() - m).exp().sum());
    log_prop.row(i) = L.row(i).array() - lse;
  }
  std::vector<LabelField> zs(n_samples, LabelField(n));
  for (auto& z : zs) {
    for (int i = 0; i < n; ++i) {
      double u = uniform01(rng);
      int g = 0;
      for (; g < G - 1; ++g) {
        u -= std::exp(log_prop(i, g));
        if (u < 0.0) break;
      }
      z[i] = g;
    }
  }
  std::vector<double> terms_t(n_samples);
  parallel_for(n_samples, [&](int t) {
    double lp = 0.0;
    for (int i = 0; i < n; ++i) lp += log_prop(i, zs[t][i]);
    terms_t[t] = marginal_loglik(data.sites, terms, zs[t], omega, options) + prior_term(zs[t]) - lp;
  });
  LoglikEstimate out;
  out.value = log_sum_exp(terms_t) - std::log(static_cast<double>(n_samples));
  if (n_samples > 1) {
    const double m = *std::max_element(terms_t.begin(), terms_t.end());
    double s = 0.0, ss = 0.0;
    for (double v : terms_t) {
      const double w = std::exp(v - m);
      s += w;
      ss += w * w;
    }
    const double mean = s / n_samples;
    const double var = std::max(ss / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1);
    out.se = std::sqrt(var / n_samples) / mean;
  }
  return out;
}

double effective_dof(const Eigen::MatrixXd& M, const Eigen::MatrixXd& penalty, double lambda) {
  if (lambda < 0.0) throw ConfigError("penalty weight must be non-negative");
  // With M = L L^T the trace is sum 1 / (1 + lambda e_j) over the eigenvalues
  // of L^-1 penalty L^-T, which stays accurate when lambda swamps M.
  const Eigen::LLT<Eigen::MatrixXd> lm(M);
  const bool well_posed =
      lm.info() == Eigen::Success && lm.matrixLLT().diagonal().minCoeff() > 1e-8 * std::sqrt(std::max(M.trace(), 0.0));
  if (well_posed) {
    Eigen::MatrixXd c = lm.matrixL().solve(penalty);
    c = lm.matrixL().solve(c.transpose()).eval();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (c + c.transpose()), Eigen::EigenvaluesOnly);
    Eigen::ArrayXd e = es.eigenvalues().array();
    // round-off in the penalty null space would otherwise be scaled by lambda
    const double floor = 1e-10 * std::max(e.maxCoeff(), 0.0);
    e = (e > floor).select(e, 0.0);
    return (1.0 / (1.0 + lambda * e)).sum();
  }
  Eigen::MatrixXd a = M + lambda * penalty;
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) {
    a.diagonal().array() += 1e-10 * std::max(a.trace(), 1e-300);
    llt.compute(a);
    if (llt.info() != Eigen::Success) throw NumericError("effective_dof: singular normal equations");
  }
  return llt.solve(M).trace();
}

double total_dof(std::span<const BlockDof> blocks, const ModelParams& omega, const FitConfig& config,
                 bool time_varies) {
  double d = 0.0;
  for (const auto& b : blocks) d += b.dof;
  int per_kernel = 2;  // variance, spatial range
  if (config.estimate_smoothness) ++per_kernel;
  if (config.estimate_deformation) per_kernel += 5;
  if (time_varies) ++per_kernel;
  d += static_cast<double>(omega.G) * omega.Q() * per_kernel;
  d += 1 + omega.K;
  if (omega.G > 1 && config.estimate_xi) d += 1;
  return d;
}

AicResult aic(const FitData& data, const FitState& state, const FitConfig& config, int n_samples, Rng& rng) {
  const auto popts = config.posterior_options(child_seed(rng));
  const LoglikEstimate est = is2_loglik(data, state.omega, n_samples, PriorTerm::Unnormalized, popts, rng);
  AicResult r;
  r.loglik = est.value;
  bool time_varies = false;
  for (const auto& s : data.sites) time_varies = time_varies || s.t != data.sites.front().t;
  r.dof = total_dof(state.dof, state.omega, config, time_varies);
  r.aic = -2.0 * est.value + 2.0 * r.dof;
  r.se = 2.0 * est.se;
  return r;
}

std::vector<SelectionCandidate> candidate_grid(std::span<const int> q1_values, std::span<const int> q2_values,
                                               std::span<const double> penalty_values) {
  std::vector<SelectionCandidate> out;
  for (int q1 : q1_values) {
    for (int q2 : q2_values) {
      for (double lam : penalty_values) {
        SelectionCandidate c;
        c.Q1 = q1;
        c.Q2 = q2;
        c.penalties = {lam, lam, lam, lam, lam};
        out.push_back(c);
      }
    }
  }
  return out;
}

std::vector<SelectionCandidate> select_model(const FitData& data, const FitConfig& base,
                                             std::vector<SelectionCandidate> candidates, int aic_samples) {
  if (candidates.empty()) throw ConfigError("no candidate models");
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    auto& c = candidates[k];
    FitConfig cfg = base;
    cfg.Q1 = c.Q1;
    cfg.Q2 = c.Q2;
    cfg.penalties = c.penalties;
    const FitState st = fit(data, cfg);
    Rng rng = make_stream(base.seed, 0xa1c0000ULL + k);
    c.result = aic(data, st, cfg, aic_samples, rng);
    spdlog::info("candidate Q1={} Q2={} lambda={:.3g}: AIC {:.3f} (se {:.3f}, dof {:.2f})", c.Q1, c.Q2,
                 c.penalties.theta_e, c.result.aic, c.result.se, c.result.dof);
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < candidates.size(); ++k) {
    if (candidates[k].result.aic < candidates[best].result.aic) best = k;
  }
  const double threshold = candidates[best].result.aic + candidates[best].result.se;
  std::size_t chosen = best;
  auto size_of = [](const SelectionCandidate& c) { return c.Q1 + c.Q2; };
  auto pen_of = [](const Penalties& p) { return p.mean_y + p.mean_x + p.theta_e + p.theta_x + p.lambda; };
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (candidates[k].result.aic > threshold) continue;
    const auto& a = candidates[k];
    const auto& b = candidates[chosen];
    if (size_of(a) < size_of(b) || (size_of(a) == size_of(b) && pen_of(a.penalties) > pen_of(b.penalties))) {
      chosen = k;
    }
  }
  candidates[chosen].selected = true;
  return candidates;
}

}  // namespace fcmix
