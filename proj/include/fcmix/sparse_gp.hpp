#ifndef FCMIX_SPARSE_GP_HPP
#define FCMIX_SPARSE_GP_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "fcmix/covariance.hpp"
#include "fcmix/rng.hpp"

namespace fcmix {

using LinearOperator = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

enum class VecchiaOrdering { MaxMin, Coordinate, Random };

struct VecchiaOptions {
  int m = 10;
  VecchiaOrdering ordering = VecchiaOrdering::MaxMin;
  std::uint64_t seed = 0;  // only used by random ordering
};

// Ordering and conditioning sets; depends on geometry only, so it can be
// reused while the variance changes.
struct VecchiaStructure {
  std::vector<int> ordering;                    // ordering[k] = site placed k-th
  std::vector<std::vector<int>> neighbor_sets;  // per site (original index), earlier-ordered neighbors
};

VecchiaStructure vecchia_structure(const std::vector<MappedPoint>& points, const VecchiaOptions& options);

// Sparse factor with inverse covariance ~= U U^T. Column i of U holds
// 1/sqrt(v_i) on the diagonal and -b_i/sqrt(v_i) at the conditioning set of i,
// where b_i are the kriging weights and v_i the conditional variance.
struct VecchiaFactor {
  std::vector<int> ordering;
  std::vector<std::vector<int>> neighbor_sets;
  Eigen::SparseMatrix<double> U;
  double logdet_prec = 0.0;  // log|U U^T| = 2 sum log diag(U)

  Eigen::Index size() const { return U.rows(); }
  Eigen::VectorXd apply_ut(const Eigen::VectorXd& a) const { return U.transpose() * a; }
  Eigen::SparseMatrix<double> precision() const;
  // Gaussian log density of a zero-mean field value vector.
  double loglik(const Eigen::VectorXd& a) const;
};

// Sites closer than 1e-9 (in kernel distance) are treated as 1e-9 apart.
VecchiaFactor vecchia_factor(std::span<const SpaceTimePoint> sites, const KernelParams& params, CoordMode mode,
                             const VecchiaOptions& options);
VecchiaFactor vecchia_factor(const std::vector<MappedPoint>& points, const VecchiaStructure& structure,
                             double variance, double nu);

struct CgResult {
  Eigen::VectorXd x;
  int iterations = 0;
  double relative_residual = 0.0;
};

// Conjugate gradients for an SPD action. Iteration cap defaults to the
// dimension; exceeding it throws NumericError. Optional Jacobi preconditioner.
CgResult cg_solve(const LinearOperator& apply_a, const Eigen::VectorXd& b, double rel_tol = 1e-10,
                  int max_iterations = -1, const Eigen::VectorXd* jacobi_diagonal = nullptr);

struct LanczosOptions {
  double sample_tol = 1e-6;     // sup-norm change between checkpoints 10 steps apart
  double quadform_tol = 1e-12;  // relative change of the Gauss quadrature estimate
  double logdet_tol = 1e-10;
  int dense_fallback_max_dim = 500;
};

// Draw from N(0, Q^{-1}) given the action of the SPD precision Q, via
// ||w|| V T^{-1/2} e1 on the Krylov space of Q started at w ~ N(0, I).
Eigen::VectorXd lanczos_sqrt_sample(const LinearOperator& apply_precision, Eigen::Index dim, Rng& rng,
                                    const LanczosOptions& options = {});

// v^T M^{-1} v by Lanczos (Gauss) quadrature.
double lanczos_quadform(const LinearOperator& apply_m, const Eigen::VectorXd& v, const LanczosOptions& options = {});

// Stochastic Lanczos quadrature estimate of log|M| with Rademacher probes.
double logdet_hutchinson(const LinearOperator& apply_m, Eigen::Index dim, int n_probes, Rng& rng,
                         const LanczosOptions& options = {});

Eigen::MatrixXd dense_from_operator(const LinearOperator& apply, Eigen::Index dim);

}  // namespace fcmix

#endif  // FCMIX_SPARSE_GP_HPP
