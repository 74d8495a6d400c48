#ifndef FCMIX_MODEL_HPP
#define FCMIX_MODEL_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "fcmix/covariance.hpp"
#include "fcmix/mrf.hpp"
#include "fcmix/sparse_gp.hpp"
#include "fcmix/splines.hpp"

namespace fcmix {

struct Channel {
  std::vector<double> pressure;
  std::vector<double> value;

  bool empty() const { return pressure.empty(); }
  int size() const { return static_cast<int>(pressure.size()); }
};

struct Profile {
  std::string id;
  SpaceTimePoint site;
  Channel y;               // may be empty (predictor-only profile)
  std::vector<Channel> x;  // K predictor channels
};

// Per-cluster spline coefficients and score-field kernels.
//   upsilon_y: P x D, upsilon_x: KP x D (D = 2R + 1, channel-major rows)
//   theta_x: KP x Q1, theta_e: P x Q2, lambda: P x Q1
struct ClusterParams {
  Eigen::MatrixXd upsilon_y;
  Eigen::MatrixXd upsilon_x;
  Eigen::MatrixXd theta_x;
  Eigen::MatrixXd theta_e;
  Eigen::MatrixXd lambda;
  std::vector<KernelParams> alpha_kernels;
  std::vector<KernelParams> eta_kernels;

  // kernel of latent component q (alpha first, then eta)
  const KernelParams& kernel(int q) const;
  KernelParams& kernel(int q);
};

struct Penalties {
  double mean_y = 1e-5;
  double mean_x = 1e-5;
  double theta_e = 1e-5;
  double theta_x = 1e-5;
  double lambda = 1e-5;
};

struct ModelParams {
  int G = 1;
  int Q1 = 0;
  int Q2 = 0;
  int R = 0;
  int K = 0;
  BasisSystem basis;
  CoordMode mode = CoordMode::Euclidean;
  std::vector<ClusterParams> clusters;
  double sigma2_y = 1.0;
  std::vector<double> sigma2_x;
  double xi = 0.5;
  Penalties penalties;

  int P() const { return basis.size(); }
  int D() const { return 2 * R + 1; }
  int Q() const { return Q1 + Q2; }
  // Throws ConfigError on inconsistent dimensions or non-positive variances.
  void validate() const;
  // Largest |theta^T M theta - I| entry over clusters and both blocks.
  double orthonormality_residual() const;
  // sum of (lambda / 2) * integrated squared second derivatives over every
  // penalized function of every cluster
  double penalty() const;
};

// Zero-filled parameters of the right shapes.
ModelParams make_params(int G, int Q1, int Q2, int R, int K, const BasisSystem& basis, CoordMode mode);

// One importance-sampled draw. scores is n x Q (alpha columns, then eta).
struct LatentSample {
  LabelField z;
  Eigen::MatrixXd scores;
  double log_weight = 0.0;
  double norm_weight = 0.0;
};

// (1, sin(2 pi t / 365.25), cos(2 pi t / 365.25), ..., cos(2 pi R t / 365.25))
Eigen::VectorXd seasonal_covariates(double t, int R);

struct DesignMatrices {
  Eigen::MatrixXd B;              // n_Y x P
  Eigen::MatrixXd Bx;             // (sum_k n_k) x KP, block diagonal
  Eigen::MatrixXd B_delta;        // n_Y x PD, row j = kron(B_j, delta^T)
  Eigen::MatrixXd Bx_delta;       // (sum_k n_k) x KPD
};

DesignMatrices design_matrices(const Profile& profile, const BasisSystem& basis, int R);

// B^T B, B^T y, y^T y for one channel of one profile.
struct ChannelStats {
  Eigen::MatrixXd btb;
  Eigen::VectorXd bty;
  double yty = 0.0;
  int n = 0;
};

struct ProfileStats {
  Eigen::VectorXd delta;
  ChannelStats y;
  std::vector<ChannelStats> x;
};

std::vector<ProfileStats> profile_stats(std::span<const Profile> profiles, const BasisSystem& basis, int R);

// Channel c = 0 is the response, c = 1..K the predictors.
const ChannelStats& channel(const ProfileStats& s, int c);
double channel_noise(const ModelParams& omega, int c);
// P x Q map from latent scores to the channel's coefficient vector.
Eigen::MatrixXd channel_loading(const ModelParams& omega, int g, int c);
// P-vector of the channel's seasonal mean coefficients at delta.
Eigen::VectorXd channel_mean(const ModelParams& omega, int g, int c, const Eigen::VectorXd& delta);

// Cluster-conditional quantities of one profile, with r the data minus the
// seasonal mean, M the score loading and D the noise covariance:
//   H = M^T D^-1 M, b = M^T D^-1 r, rdr = r^T D^-1 r, logdet_noise = log|D|.
struct ProfileTerms {
  Eigen::MatrixXd H;
  Eigen::VectorXd b;
  double rdr = 0.0;
  double logdet_noise = 0.0;
  int n = 0;
};

ProfileTerms profile_terms(const ProfileStats& stats, const ModelParams& omega, int g);

// terms[i][g]
std::vector<std::vector<ProfileTerms>> profile_terms_table(std::span<const ProfileStats> stats,
                                                           const ModelParams& omega);

// log f(X_i, Y_i | Z_i = g) with independent scores of variance = kernel variances.
double per_profile_loglik(const ProfileTerms& terms, const ClusterParams& cluster, int Q);

// n x G table of per_profile_loglik.
Eigen::MatrixXd per_profile_loglik_table(const std::vector<std::vector<ProfileTerms>>& terms,
                                         const ModelParams& omega);

// Exact posterior moments of the scores of one profile under the independent
// model: mean and covariance of N((V^-1 + H)^-1 b, (V^-1 + H)^-1).
struct ScoreMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};
ScoreMoments independent_score_moments(const ProfileTerms& terms, const ClusterParams& cluster, int Q);

struct PosteriorOptions {
  VecchiaOptions vecchia;
  int dense_max_dim = 500;
  int logdet_probes = 32;
  std::uint64_t probe_seed = 0;  // shared across samples so logdet noise is common
  LanczosOptions lanczos;
  double cg_tol = 1e-10;
};

// Gaussian posterior of the score fields of one cluster given the data of
// the profiles assigned to it. Latent vector is component-major: entry
// q * n_sites + k holds component q at site k. Sites with null terms carry no
// data (used for prediction targets).
class ClusterPosterior {
 public:
  ClusterPosterior(std::span<const SpaceTimePoint> sites, std::vector<const ProfileTerms*> terms,
                   const ClusterParams& cluster, int Q, CoordMode mode, const PosteriorOptions& options);

  int n_sites() const { return n_; }
  int dim() const { return n_ * q_; }
  bool dense() const { return dense_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  // log f(data | labels) of this cluster's profiles
  double loglik() const { return loglik_; }
  // mean as n_sites x Q
  Eigen::MatrixXd mean_scores() const;

  Eigen::VectorXd apply_precision(const Eigen::VectorXd& x) const;
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  // n_sites x Q draw from the posterior
  Eigen::MatrixXd sample(Rng& rng) const;
  // Posterior covariance among the given latent indices.
  Eigen::MatrixXd covariance(const std::vector<int>& indices) const;

 private:
  int n_ = 0;
  int q_ = 0;
  bool dense_ = true;
  std::vector<VecchiaFactor> priors_;
  std::vector<const ProfileTerms*> terms_;
  PosteriorOptions options_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd jacobi_;
  Eigen::VectorXd mean_;
  double loglik_ = 0.0;
};

// log f(X, Y | Z = z), summed over clusters.
double marginal_loglik(std::span<const SpaceTimePoint> sites, const std::vector<std::vector<ProfileTerms>>& terms,
                       const LabelField& z, const ModelParams& omega, const PosteriorOptions& options);

struct NormalizedWeights {
  std::vector<double> weights;
  double ess = 0.0;
};

// Self-normalizes log weights with log-sum-exp; ESS = 1 / sum w^2.
NormalizedWeights normalize_log_weights(std::span<const double> log_weights);

double log_sum_exp(std::span<const double> v);

}  // namespace fcmix

#endif  // FCMIX_MODEL_HPP
