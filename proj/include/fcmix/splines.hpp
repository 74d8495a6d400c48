#ifndef FCMIX_SPLINES_HPP
#define FCMIX_SPLINES_HPP

#include <array>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace fcmix {

// Clamped cubic B-spline basis on [domain_lo, domain_hi] with uniformly spaced
// interior knots, together with its Gram matrix J = int B^T B and the
// roughness penalty int B''^T B''. Immutable after construction.
class BasisSystem {
 public:
  static constexpr int kDegree = 3;
  static constexpr int kOrder = kDegree + 1;

  BasisSystem() = default;
  BasisSystem(double domain_lo, double domain_hi, int n_interior_knots);

  double domain_lo() const { return lo_; }
  double domain_hi() const { return hi_; }
  int n_interior_knots() const { return static_cast<int>(interior_.size()); }
  const std::vector<double>& interior_knots() const { return interior_; }
  int size() const { return n_basis_; }
  const Eigen::MatrixXd& gram() const { return gram_; }
  const Eigen::MatrixXd& penalty() const { return penalty_; }

  bool contains(double p) const { return p >= lo_ && p <= hi_; }

  // Full length-P row of basis values at p; throws DataError outside the domain.
  Eigen::RowVectorXd evaluate(double p) const;
  // Row of derivative values (order 0, 1 or 2).
  Eigen::RowVectorXd derivative(double p, int order) const;

  // The (at most) four nonzero values at p. Returns the index of the first
  // basis function they belong to.
  int evaluate_local(double p, std::array<double, kOrder>& values, int order = 0) const;

  // n x P evaluation matrix for a list of pressures.
  Eigen::MatrixXd design(std::span<const double> pressures) const;

  double penalty_quadform(const Eigen::VectorXd& coef) const;

 private:
  int find_span(double p) const;

  double lo_ = 0.0;
  double hi_ = 1.0;
  int n_basis_ = 0;
  std::vector<double> interior_;
  std::vector<double> knots_;
  Eigen::MatrixXd gram_;
  Eigen::MatrixXd penalty_;
};

BasisSystem build_basis(double domain_lo, double domain_hi, int n_interior_knots);

// Orthonormalizes one block of principal-component coefficients in the metric
// `metric` (I_K (x) J) while diagonalizing the empirical score covariance.
//
//   theta' = theta0 * O,   theta0 = theta (theta^T M theta)^{-1/2}
//   O from  W cov W^T = O D O^T,  W = theta0^T M theta
//
// New scores are rotation * old scores, so theta * s == theta' * (rotation * s).
// Columns are sorted by descending variance and the first nonzero entry of each
// column is made positive.
struct BlockOrthonormalization {
  Eigen::MatrixXd theta;
  Eigen::MatrixXd rotation;
  Eigen::VectorXd variances;
};

BlockOrthonormalization orthonormalize_block(const Eigen::MatrixXd& theta,
                                             const Eigen::MatrixXd& score_cov,
                                             const Eigen::MatrixXd& metric);

struct Orthonormalization {
  Eigen::MatrixXd theta_x;
  Eigen::MatrixXd theta_e;
  Eigen::MatrixXd lambda;
  Eigen::MatrixXd rotation_x;  // alpha' = rotation_x * alpha
  Eigen::MatrixXd rotation_e;  // eta'   = rotation_e * eta
  Eigen::VectorXd variances_x;
  Eigen::VectorXd variances_e;
};

// theta_x is (K*P) x Q1, theta_e is P x Q2, lambda is P x Q1. The predictor
// block uses the metric I_K (x) gram. lambda is adjusted so that lambda * alpha
// is unchanged under the alpha rotation.
Orthonormalization orthonormalize(const Eigen::MatrixXd& theta_x, const Eigen::MatrixXd& theta_e,
                                  const Eigen::MatrixXd& lambda, const Eigen::MatrixXd& score_cov_x,
                                  const Eigen::MatrixXd& score_cov_e, const Eigen::MatrixXd& gram);

// I_k (x) m
Eigen::MatrixXd block_identity_kron(int k, const Eigen::MatrixXd& m);

}  // namespace fcmix

#endif  // FCMIX_SPLINES_HPP
