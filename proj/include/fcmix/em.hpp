#ifndef FCMIX_EM_HPP
#define FCMIX_EM_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fcmix/model.hpp"
#include "fcmix/mrf.hpp"

namespace fcmix {

enum class EStepMethod { ImportanceSampling, Gibbs };

struct FitConfig {
  int G = 2;
  int Q1 = 0;
  int Q2 = 3;
  int R = 0;
  int n_interior_knots = 8;  // P = 12
  std::optional<double> domain_lo;
  std::optional<double> domain_hi;
  CoordMode mode = CoordMode::Euclidean;

  int graph_k = 5;
  GraphWeights graph_weights;

  EStepMethod method = EStepMethod::ImportanceSampling;
  int T_mc = 50;
  int max_iters = 20;
  int gibbs_burn_in = 20;
  int gibbs_thin = 1;
  Penalties penalties;
  VecchiaOptions vecchia;
  std::uint64_t seed = 1;

  int kmeans_restarts = 10;
  int independent_em_iters = 5;
  int interp_grid = 20;

  double conv_tol = 1e-4;
  int conv_window = 3;

  int dense_max_dim = 500;
  int logdet_probes = 32;
  int trace_samples = 50;

  KernelKind kernel_kind = KernelKind::Exponential;
  bool estimate_smoothness = false;
  bool estimate_deformation = false;
  bool estimate_xi = true;
  double init_xi = 0.5;
  double init_range_fraction = 0.1;
  int optimizer_max_evals = 200;

  // Throws ConfigError on out-of-range values.
  void validate() const;
  PosteriorOptions posterior_options(std::uint64_t probe_seed) const;
};

// Profiles plus everything derived from them that stays fixed during a fit.
struct FitData {
  std::vector<Profile> profiles;
  BasisSystem basis;
  std::vector<ProfileStats> stats;
  std::vector<SpaceTimePoint> sites;
  NeighborGraph graph;
  int K = 0;

  int n() const { return static_cast<int>(profiles.size()); }
};

GraphMetric graph_metric(CoordMode mode);

// Validates profiles against the configuration (throws DataError) and builds
// the basis, per-profile statistics and the neighbour graph.
FitData prepare_data(std::vector<Profile> profiles, const FitConfig& config);

// Per-profile, per-cluster first and second moments of the latent scores
// weighted by the label probability:
//   pi(i, g) = E[1(z_i = g)], m[g].row(i) = E[1(z_i = g) u_i], S[g][i] = E[1(z_i = g) u_i u_i^T]
struct Moments {
  Eigen::MatrixXd pi;
  std::vector<Eigen::MatrixXd> m;
  std::vector<std::vector<Eigen::MatrixXd>> S;
};

Moments moments_from_samples(std::span<const LatentSample> samples, int n, int G, int Q);

// Named effective degrees of freedom of one penalized block, tr((M + lambda P)^-1 M).
struct BlockDof {
  std::string name;
  double dof = 0.0;
};

struct MStepOptions {
  bool update_kernels = true;  // false: score variances from moments, ranges untouched
  bool update_xi = true;
};

// One full M-step. Rotates `moments` and the scores of `samples` consistently
// with the orthonormalization. `samples` may be empty unless kernels or xi are
// updated.
std::vector<BlockDof> m_step(const FitData& data, Moments& moments, std::vector<LatentSample>& samples,
                             ModelParams& omega, const FitConfig& config, const MStepOptions& options);

// k-means++ seeded Lloyd iterations with restarts; returns labels 0..G-1.
LabelField kmeans(const Eigen::MatrixXd& features, int G, int restarts, Rng& rng, int max_iter = 100);

// Features for k-means: each channel linearly interpolated to a uniform grid.
Eigen::MatrixXd interpolated_features(const FitData& data, int grid_points);

struct IterationReport {
  std::string phase;  // "kmeans" (iteration 0), "independent" or "mcem"
  int iteration = 0;  // counts on across phases
  const Eigen::MatrixXd* label_probs = nullptr;
  const ModelParams* omega = nullptr;
};

using IterationCallback = std::function<void(const IterationReport&)>;

struct InitResult {
  ModelParams omega;
  Eigen::MatrixXd label_probs;
  std::vector<BlockDof> dof;
};

InitResult initialize(const FitData& data, const FitConfig& config, const IterationCallback& callback = {});

struct EStepResult {
  std::vector<LatentSample> samples;
  double ess = 0.0;
};

// Importance-sampling E-step: labels from Gibbs on the posterior proposal
// starting at z_state (left at the chain's final state), scores from the
// cluster posteriors, weights f(X, Y | z) / prod_i f(X_i, Y_i | z_i).
EStepResult e_step(const FitData& data, const ModelParams& omega, LabelField& z_state, const FitConfig& config,
                   Rng& rng);

// Comparator E-step: one label and score state per site, alternating scores |
// labels from the cluster posteriors and labels | scores site by site.
// Returns equally weighted draws.
struct GibbsState {
  LabelField z;
  Eigen::MatrixXd scores;  // n x Q
};
EStepResult gibbs_e_step(const FitData& data, const ModelParams& omega, GibbsState& state, const FitConfig& config,
                         Rng& rng);

// Weighted label frequencies (n x G).
Eigen::MatrixXd label_probabilities(std::span<const LatentSample> samples, int n, int G);

struct FitState {
  ModelParams omega;
  int iteration = 0;
  bool converged = false;
  std::vector<double> loglik_trace;  // entry 0 is the initialization
  std::vector<double> loglik_se;
  std::vector<double> ess_trace;
  std::vector<double> orthonormality_trace;
  std::vector<LatentSample> samples;
  Eigen::MatrixXd label_probs;
  LabelField z_state;
  std::vector<BlockDof> dof;
};

FitState fit(const FitData& data, const FitConfig& config, const IterationCallback& callback = {});

}  // namespace fcmix

#endif  // FCMIX_EM_HPP
