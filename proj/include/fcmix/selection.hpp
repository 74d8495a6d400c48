#ifndef FCMIX_SELECTION_HPP
#define FCMIX_SELECTION_HPP

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fcmix/em.hpp"

namespace fcmix {

// How the label prior enters the observed-data likelihood estimate.
//   PseudoLikelihood: sum_i log P(z_i | neighbours), a normalized surrogate
//   Unnormalized: xi * sum over edges, exact up to the Potts constant
enum class PriorTerm { PseudoLikelihood, Unnormalized };

struct LoglikEstimate {
  double value = 0.0;
  double se = 0.0;
};

// log f(X, Y) by importance sampling with labels drawn independently per
// profile from the independent-mixture posterior P_I2(z_i = g) propto
// f(X_i, Y_i | Z_i = g). Standard error by the delta method.
LoglikEstimate is2_loglik(const FitData& data, const ModelParams& omega, int n_samples, PriorTerm prior,
                          const PosteriorOptions& options, Rng& rng);

// tr((M + lambda P)^-1 M)
double effective_dof(const Eigen::MatrixXd& M, const Eigen::MatrixXd& penalty, double lambda);

// Sum of block dofs plus unpenalized scalars: kernel parameters that are
// estimated (the temporal range only when sites span several times), noise
// variances and xi.
double total_dof(std::span<const BlockDof> blocks, const ModelParams& omega, const FitConfig& config,
                 bool time_varies);

struct AicResult {
  double aic = 0.0;
  double se = 0.0;
  double loglik = 0.0;
  double dof = 0.0;
};

AicResult aic(const FitData& data, const FitState& state, const FitConfig& config, int n_samples, Rng& rng);

struct SelectionCandidate {
  int Q1 = 0;
  int Q2 = 0;
  Penalties penalties;
  AicResult result;
  bool selected = false;
};

// Fits every candidate and marks the smallest model whose AIC is within one
// standard error of the minimum (ties broken by smaller Q1 + Q2, then by
// larger penalties).
std::vector<SelectionCandidate> select_model(const FitData& data, const FitConfig& base,
                                             std::vector<SelectionCandidate> candidates, int aic_samples);

// Candidate grid: Q1 and Q2 ranges crossed with a common penalty grid.
std::vector<SelectionCandidate> candidate_grid(std::span<const int> q1_values, std::span<const int> q2_values,
                                               std::span<const double> penalty_values);

}  // namespace fcmix

#endif  // FCMIX_SELECTION_HPP
