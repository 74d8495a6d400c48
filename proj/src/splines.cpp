#include "fcmix/splines.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "fcmix/errors.hpp"

namespace fcmix {

namespace {

// 5-point Gauss-Legendre on [-1, 1]; exact for polynomials of degree <= 9.
constexpr std::array<double, 5> kGlNodes = {-0.9061798459386640, -0.5384693101056831, 0.0,
                                            0.5384693101056831, 0.9061798459386640};
constexpr std::array<double, 5> kGlWeights = {0.2369268850561891, 0.4786286704993665,
                                              0.5688888888888889, 0.4786286704993665,
                                              0.2369268850561891};

}  // namespace

BasisSystem::BasisSystem(double domain_lo, double domain_hi, int n_interior_knots)
    : lo_(domain_lo), hi_(domain_hi) {
  if (!(domain_hi > domain_lo) || !std::isfinite(domain_lo) || !std::isfinite(domain_hi)) {
    throw ConfigError("basis domain must have positive length");
  }
  if (n_interior_knots < 1) throw ConfigError("basis needs at least one interior knot");

  n_basis_ = n_interior_knots + kOrder;
  const double h = (hi_ - lo_) / (n_interior_knots + 1);
  interior_.resize(n_interior_knots);
  for (int k = 0; k < n_interior_knots; ++k) interior_[k] = lo_ + h * (k + 1);

  knots_.assign(kOrder, lo_);
  knots_.insert(knots_.end(), interior_.begin(), interior_.end());
  knots_.insert(knots_.end(), kOrder, hi_);

  gram_ = Eigen::MatrixXd::Zero(n_basis_, n_basis_);
  penalty_ = Eigen::MatrixXd::Zero(n_basis_, n_basis_);
  std::array<double, kOrder> v{};
  std::array<double, kOrder> d2{};
  std::vector<double> breaks{lo_};
  breaks.insert(breaks.end(), interior_.begin(), interior_.end());
  breaks.push_back(hi_);
  for (std::size_t s = 0; s + 1 < breaks.size(); ++s) {
    const double a = breaks[s];
    const double b = breaks[s + 1];
    const double half = 0.5 * (b - a);
    const double mid = 0.5 * (a + b);
    for (std::size_t q = 0; q < kGlNodes.size(); ++q) {
      const double p = mid + half * kGlNodes[q];
      const double w = half * kGlWeights[q];
      const int first = evaluate_local(p, v, 0);
      evaluate_local(p, d2, 2);
      for (int i = 0; i < kOrder; ++i) {
        for (int j = 0; j < kOrder; ++j) {
          gram_(first + i, first + j) += w * v[i] * v[j];
          penalty_(first + i, first + j) += w * d2[i] * d2[j];
        }
      }
    }
  }
}

BasisSystem build_basis(double domain_lo, double domain_hi, int n_interior_knots) {
  return BasisSystem(domain_lo, domain_hi, n_interior_knots);
}

int BasisSystem::find_span(double p) const {
  if (p >= hi_) return n_basis_ - 1;
  // knots_[span] <= p < knots_[span + 1], span in [kDegree, n_basis_ - 1]
  auto it = std::upper_bound(knots_.begin() + kDegree, knots_.begin() + n_basis_ + 1, p);
  return static_cast<int>(it - knots_.begin()) - 1;
}

int BasisSystem::evaluate_local(double p, std::array<double, kOrder>& values, int order) const {
  if (!contains(p)) {
    std::ostringstream os;
    os << "pressure " << p << " outside basis domain [" << lo_ << ", " << hi_ << "]";
    throw DataError(os.str());
  }
  if (order < 0 || order > kDegree) throw ConfigError("derivative order must be in [0, 3]");
  constexpr int deg = kDegree;
  const int span = find_span(p);

  // Cox-de Boor triangle with derivatives (Piegl & Tiller, A2.3).
  double ndu[kOrder][kOrder];
  double left[kOrder];
  double right[kOrder];
  ndu[0][0] = 1.0;
  for (int j = 1; j <= deg; ++j) {
    left[j] = p - knots_[span + 1 - j];
    right[j] = knots_[span + j] - p;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      ndu[j][r] = right[r + 1] + left[j - r];
      const double temp = ndu[r][j - 1] / ndu[j][r];
      ndu[r][j] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    ndu[j][j] = saved;
  }
  if (order == 0) {
    for (int j = 0; j <= deg; ++j) values[j] = ndu[j][deg];
    return span - deg;
  }

  double ders[kOrder][kOrder] = {};
  double a[2][kOrder];
  for (int j = 0; j <= deg; ++j) ders[0][j] = ndu[j][deg];
  for (int r = 0; r <= deg; ++r) {
    int s1 = 0;
    int s2 = 1;
    a[0][0] = 1.0;
    for (int k = 1; k <= order; ++k) {
      double d = 0.0;
      const int rk = r - k;
      const int pk = deg - k;
      if (r >= k) {
        a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
        d = a[s2][0] * ndu[rk][pk];
      }
      const int j1 = rk >= -1 ? 1 : -rk;
      const int j2 = (r - 1 <= pk) ? k - 1 : deg - r;
      for (int j = j1; j <= j2; ++j) {
        a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][rk + j];
        d += a[s2][j] * ndu[rk + j][pk];
      }
      if (r <= pk) {
        a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
        d += a[s2][k] * ndu[r][pk];
      }
      ders[k][r] = d;
      std::swap(s1, s2);
    }
  }
  double factor = deg;
  for (int k = 1; k <= order; ++k) {
    for (int j = 0; j <= deg; ++j) ders[k][j] *= factor;
    factor *= (deg - k);
  }
  for (int j = 0; j <= deg; ++j) values[j] = ders[order][j];
  return span - deg;
}

Eigen::RowVectorXd BasisSystem::evaluate(double p) const { return derivative(p, 0); }

Eigen::RowVectorXd BasisSystem::derivative(double p, int order) const {
  std::array<double, kOrder> v{};
  const int first = evaluate_local(p, v, order);
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(n_basis_);
  for (int j = 0; j < kOrder; ++j) row(first + j) = v[j];
  return row;
}

Eigen::MatrixXd BasisSystem::design(std::span<const double> pressures) const {
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(pressures.size()), n_basis_);
  std::array<double, kOrder> v{};
  for (std::size_t r = 0; r < pressures.size(); ++r) {
    const int first = evaluate_local(pressures[r], v, 0);
    for (int j = 0; j < kOrder; ++j) b(static_cast<Eigen::Index>(r), first + j) = v[j];
  }
  return b;
}

double BasisSystem::penalty_quadform(const Eigen::VectorXd& coef) const {
  if (coef.size() != n_basis_) throw ConfigError("coefficient length does not match basis size");
  return std::max(0.0, coef.dot(penalty_ * coef));
}

Eigen::MatrixXd block_identity_kron(int k, const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(k * m.rows(), k * m.cols());
  for (int b = 0; b < k; ++b) out.block(b * m.rows(), b * m.cols(), m.rows(), m.cols()) = m;
  return out;
}

BlockOrthonormalization orthonormalize_block(const Eigen::MatrixXd& theta,
                                             const Eigen::MatrixXd& score_cov,
                                             const Eigen::MatrixXd& metric) {
  const Eigen::Index q = theta.cols();
  BlockOrthonormalization out;
  if (q == 0) {
    out.theta = theta;
    out.rotation = Eigen::MatrixXd(0, 0);
    out.variances = Eigen::VectorXd(0);
    return out;
  }
  if (score_cov.rows() != q || score_cov.cols() != q || metric.rows() != theta.rows()) {
    throw ConfigError("orthonormalize: dimension mismatch");
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> cov_eig(0.5 * (score_cov + score_cov.transpose()));
  const double trace = std::max(score_cov.trace(), 0.0);
  if (cov_eig.eigenvalues().minCoeff() < -1e-10 * std::max(trace, 1e-300)) {
    throw NumericError("orthonormalize: score covariance is not positive semidefinite");
  }

  // theta0 = theta G^{-1/2}, G = theta^T M theta.
  const Eigen::MatrixXd g = theta.transpose() * metric * theta;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> g_eig(0.5 * (g + g.transpose()));
  const Eigen::VectorXd ge = g_eig.eigenvalues();
  if (!(ge.minCoeff() > 1e-12 * std::max(ge.maxCoeff(), 1e-300))) {
    throw NumericError("orthonormalize: coefficient block is rank deficient");
  }
  const Eigen::MatrixXd g_isqrt =
      g_eig.eigenvectors() * ge.cwiseSqrt().cwiseInverse().asDiagonal() * g_eig.eigenvectors().transpose();
  const Eigen::MatrixXd g_sqrt =
      g_eig.eigenvectors() * ge.cwiseSqrt().asDiagonal() * g_eig.eigenvectors().transpose();
  const Eigen::MatrixXd theta0 = theta * g_isqrt;

  // Scores in the theta0 basis are g_sqrt * s.
  Eigen::MatrixXd rotated_cov = g_sqrt * score_cov * g_sqrt;
  rotated_cov = 0.5 * (rotated_cov + rotated_cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> r_eig(rotated_cov);
  // Eigen returns ascending eigenvalues.
  Eigen::MatrixXd o(q, q);
  Eigen::VectorXd d(q);
  for (Eigen::Index j = 0; j < q; ++j) {
    o.col(j) = r_eig.eigenvectors().col(q - 1 - j);
    d(j) = std::max(r_eig.eigenvalues()(q - 1 - j), 0.0);
  }

  out.theta = theta0 * o;
  out.rotation = o.transpose() * g_sqrt;
  out.variances = d;
  for (Eigen::Index j = 0; j < q; ++j) {
    const double scale = out.theta.col(j).cwiseAbs().maxCoeff();
    for (Eigen::Index r = 0; r < out.theta.rows(); ++r) {
      const double v = out.theta(r, j);
      if (std::abs(v) > 1e-10 * scale) {
        if (v < 0.0) {
          out.theta.col(j) *= -1.0;
          out.rotation.row(j) *= -1.0;
        }
        break;
      }
    }
  }
  return out;
}

Orthonormalization orthonormalize(const Eigen::MatrixXd& theta_x, const Eigen::MatrixXd& theta_e,
                                  const Eigen::MatrixXd& lambda, const Eigen::MatrixXd& score_cov_x,
                                  const Eigen::MatrixXd& score_cov_e, const Eigen::MatrixXd& gram) {
  const Eigen::Index p = gram.rows();
  if (gram.cols() != p) throw ConfigError("gram must be square");
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) throw NumericError("orthonormalize: gram matrix is singular");

  Orthonormalization out;
  if (theta_x.cols() > 0) {
    if (theta_x.rows() % p != 0) throw ConfigError("theta_x rows must be a multiple of P");
    const int k = static_cast<int>(theta_x.rows() / p);
    auto bx = orthonormalize_block(theta_x, score_cov_x, block_identity_kron(k, gram));
    out.theta_x = std::move(bx.theta);
    out.rotation_x = std::move(bx.rotation);
    out.variances_x = std::move(bx.variances);
    // lambda * alpha = lambda' * (rotation * alpha)
    out.lambda = out.rotation_x.transpose().partialPivLu().solve(lambda.transpose()).transpose();
  } else {
    out.theta_x = theta_x;
    out.rotation_x = Eigen::MatrixXd(0, 0);
    out.variances_x = Eigen::VectorXd(0);
    out.lambda = lambda;
  }
  auto be = orthonormalize_block(theta_e, score_cov_e, gram);
  out.theta_e = std::move(be.theta);
  out.rotation_e = std::move(be.rotation);
  out.variances_e = std::move(be.variances);
  return out;
}

}  // namespace fcmix
