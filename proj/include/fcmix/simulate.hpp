#ifndef FCMIX_SIMULATE_HPP
#define FCMIX_SIMULATE_HPP

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fcmix/em.hpp"

namespace fcmix {

// Two-group clustering benchmark on the unit square. Every profile is
// response-only, observed on a uniform pressure grid of n_obs points in
// [0, 1] at time 0.
struct SimConfig {
  int n = 200;
  int n_obs = 20;
  int G = 2;
  int basis_dim = 11;
  // 1-based indices of the orthonormal spline functions used as the PCs of
  // each group; the group-g, component-l function is (g + 2l).
  std::vector<std::vector<int>> pc_index = {{3, 5, 7}, {4, 6, 8}};
  std::vector<double> score_variances = {1.0 / 3.0, 1.0 / 6.0, 1.0 / 12.0};
  std::vector<std::vector<double>> ranges = {{0.10, 0.05, 0.07}, {0.07, 0.10, 0.05}};
  double noise_variance = 1.0;
  double xi = 0.5;
  int graph_k = 5;
  int label_burn_in = 5000;

  int Q() const { return static_cast<int>(score_variances.size()); }
  void validate() const;
};

// mu(p) = exp(2 - 2p) cos(5 (p - 0.1))
double sim_mean(double p);

// P x P coefficient matrix whose columns are the L2-orthonormal functions
// obtained by Gram-Schmidt of the clamped cubic B-spline basis of dimension
// basis_dim on [0, 1] (uniform knots).
Eigen::MatrixXd orthonormal_spline_coefficients(const BasisSystem& basis);

struct SimData {
  std::vector<Profile> profiles;
  LabelField labels;
  Eigen::MatrixXd scores;  // n x Q, scores of each site's own group
};

SimData generate(const SimConfig& config, Rng& rng);

// Fraction of matching labels, maximized over relabelings of `estimate`.
double clustering_accuracy(const LabelField& truth, const LabelField& estimate, int G);

struct StudyConfig {
  SimConfig sim;
  FitConfig fit;  // G, Q2 and the basis are overridden to match sim
  std::vector<int> n_obs = {20, 100};
  std::vector<EStepMethod> methods = {EStepMethod::ImportanceSampling, EStepMethod::Gibbs};
  int datasets = 20;
  std::uint64_t seed = 2024;

  void validate() const;
};

std::string method_name(EStepMethod m);

struct StudyRow {
  EStepMethod method;
  int n_obs = 0;
  int dataset = 0;
  int iteration = 0;  // 0: k-means, 1..independent_em_iters, then MCEM
  double accuracy = 0.0;
};

// Fit configuration used for one study dataset.
FitConfig study_fit_config(const StudyConfig& config);

struct StudyCell {
  EStepMethod method;
  int n_obs = 0;
  int dataset = 0;
  const FitData* data = nullptr;
  const FitState* state = nullptr;
  const FitConfig* config = nullptr;
};
// Called once per finished fit, possibly from several threads at once.
using StudyObserver = std::function<void(const StudyCell&)>;

// Runs every (n_obs, dataset, method) cell; dataset d at n_obs uses the same
// generated data for every method. Cells run in parallel.
std::vector<StudyRow> run_study(const StudyConfig& config, const StudyObserver& observer = {});

void write_study_csv(std::ostream& os, const std::vector<StudyRow>& rows);

}  // namespace fcmix

#endif  // FCMIX_SIMULATE_HPP
