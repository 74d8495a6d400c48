// Independent reference implementations used by the tests.
#ifndef FCMIX_TESTS_ORACLES_HPP
#define FCMIX_TESTS_ORACLES_HPP

#include <cmath>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "fcmix/rng.hpp"

namespace oracle {

// Cox-de Boor recursion on the full clamped knot vector.
inline std::vector<double> clamped_knots(double lo, double hi, int n_interior) {
  std::vector<double> t(4, lo);
  for (int k = 1; k <= n_interior; ++k) t.push_back(lo + (hi - lo) * k / (n_interior + 1));
  for (int k = 0; k < 4; ++k) t.push_back(hi);
  return t;
}

inline double bspline(const std::vector<double>& t, int i, int deg, double x) {
  if (deg == 0) {
    const double hi = t.back();
    if (x == hi) return (t[i] < x && t[i + 1] == hi) ? 1.0 : 0.0;
    return (t[i] <= x && x < t[i + 1]) ? 1.0 : 0.0;
  }
  double v = 0.0;
  const double d1 = t[i + deg] - t[i], d2 = t[i + deg + 1] - t[i + 1];
  if (d1 > 0) v += (x - t[i]) / d1 * bspline(t, i, deg - 1, x);
  if (d2 > 0) v += (t[i + deg + 1] - x) / d2 * bspline(t, i + 1, deg - 1, x);
  return v;
}

inline Eigen::RowVectorXd basis_row(double lo, double hi, int n_interior, double x) {
  const auto t = clamped_knots(lo, hi, n_interior);
  const int P = n_interior + 4;
  Eigen::RowVectorXd r(P);
  for (int i = 0; i < P; ++i) r(i) = bspline(t, i, 3, x);
  return r;
}

inline Eigen::MatrixXd random_spd(int n, double cond, fcmix::Rng& rng) {
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = std::normal_distribution<double>()(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd q = qr.householderQ();
  Eigen::VectorXd ev(n);
  for (int i = 0; i < n; ++i) ev(i) = std::pow(cond, -static_cast<double>(i) / std::max(1, n - 1));
  return q * ev.asDiagonal() * q.transpose();
}

inline double log_mvn(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::VectorXd r = llt.matrixL().solve(x - mu);
  double ld = 0.0;
  for (int i = 0; i < cov.rows(); ++i) ld += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * (x.size() * std::log(2.0 * M_PI) + ld + r.squaredNorm());
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace oracle

#endif  // FCMIX_TESTS_ORACLES_HPP
