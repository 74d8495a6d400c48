#ifndef FCMIX_PREDICT_HPP
#define FCMIX_PREDICT_HPP

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fcmix/em.hpp"

namespace fcmix {

struct PredictOptions {
  int n_samples = 50;  // label fields over observed + target sites
  int burn_in = 20;
  int thin = 1;
  int batch_size = 25;  // targets sharing one label chain
  // Simultaneous bands are computed on this pressure grid when non-empty.
  std::vector<double> band_pressures;
  double band_level = 0.95;
  int band_sims = 2000;
};

// Mixture prediction of the response curve at one site. Coefficients are in
// the fitted basis; the curve mean at p is B(p) mean_coef and the variance
// splits exactly into a score part and a cluster part.
struct PredictionResult {
  SpaceTimePoint site;
  Eigen::VectorXd cluster_probs;
  Eigen::VectorXd mean_coef;
  Eigen::MatrixXd var_scores_coef;   // sum_t w_t Cov(coef | z_t)
  Eigen::MatrixXd var_cluster_coef;  // sum_t w_t (E(coef | z_t) - mean)(...)^T
  // Conditional on the target's own label: mean and total covariance.
  std::vector<Eigen::VectorXd> cluster_mean_coef;
  std::vector<Eigen::MatrixXd> cluster_cov_coef;
  // Per cluster sup-norm band multiplier (empty when no band grid was given).
  std::vector<double> band_radius;
  bool extrapolated = false;

  double mean(const BasisSystem& basis, double p) const;
  double var_scores(const BasisSystem& basis, double p) const;
  double var_cluster(const BasisSystem& basis, double p) const;
  double variance(const BasisSystem& basis, double p) const;
};

// Targets are profiles whose measurements (any channel, possibly none) are
// conditioned on; their label is sampled jointly with the observed labels.
std::vector<PredictionResult> predict(const FitData& data, const FitState& state, const FitConfig& config,
                                      std::span<const Profile> targets, const PredictOptions& options, Rng& rng);

struct VarianceDecomposition {
  Eigen::VectorXd mean;
  Eigen::MatrixXd var_scores;
  Eigen::MatrixXd var_cluster;
};

// Law of total covariance over weighted conditional means and covariances.
VarianceDecomposition variance_decomposition(std::span<const Eigen::VectorXd> means,
                                             std::span<const Eigen::MatrixXd> covs, std::span<const double> weights);

// Level-quantile of sup_p |Z(p)| / sd(p) for Z ~ N(0, curve_cov) by
// simulation. Grid points with zero variance are ignored; all-zero gives 0.
double simultaneous_band(const Eigen::MatrixXd& curve_cov, double level, int n_sim, Rng& rng);

// Same, for the curve B(p) loading u with u ~ N(., score_cov).
double simultaneous_band(const Eigen::MatrixXd& score_cov, const Eigen::MatrixXd& loading, const BasisSystem& basis,
                         std::span<const double> pressures, double level, int n_sim, Rng& rng);

struct GridSpec {
  std::vector<double> lon;  // x in Euclidean mode
  std::vector<double> lat;  // y in Euclidean mode
  std::vector<double> time;
  std::vector<double> pressure;
  PredictOptions options;
  std::uint64_t seed = 7;
};

struct GridPrediction {
  std::vector<Profile> targets;
  std::vector<PredictionResult> results;
};

GridPrediction grid_predict(const FitData& data, const FitState& state, const FitConfig& config,
                            const GridSpec& grid);

void write_grid_csv(std::ostream& os, const GridSpec& grid, const GridPrediction& pred, const BasisSystem& basis);

}  // namespace fcmix

#endif  // FCMIX_PREDICT_HPP
