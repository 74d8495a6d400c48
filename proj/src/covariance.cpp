#include "fcmix/covariance.hpp"

#include <cmath>
#include <numbers>

#include "fcmix/errors.hpp"

namespace fcmix {

void KernelParams::validate() const {
  if (!(variance > 0.0) || !(range_x > 0.0) || !(range_t > 0.0) || !(smoothness > 0.0) ||
      !std::isfinite(variance) || !std::isfinite(range_x) || !std::isfinite(range_t)) {
    throw ConfigError("kernel parameters must be finite and strictly positive");
  }
  if (kind == KernelKind::Exponential && smoothness != 0.5) {
    throw ConfigError("exponential kernel requires smoothness 0.5");
  }
}

bool KernelParams::deformed() const {
  for (double w : deform) {
    if (w != 0.0) return true;
  }
  return false;
}

Eigen::Vector3d sphere_point(double lon_deg, double lat_deg) {
  if (!(lat_deg >= -90.0 && lat_deg <= 90.0) || !(lon_deg >= -360.0 && lon_deg <= 360.0)) {
    throw DataError("latitude must lie in [-90, 90] and longitude in [-360, 360]");
  }
  const double lon = lon_deg * std::numbers::pi / 180.0;
  const double lat = lat_deg * std::numbers::pi / 180.0;
  return {std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat)};
}

Eigen::Vector3d deformation(const Eigen::Vector3d& v, const std::array<double, 5>& w) {
  const double x = v(0), y = v(1), z = v(2);
  Eigen::Vector3d g = w[0] * Eigen::Vector3d(y, x, 0.0) + w[1] * Eigen::Vector3d(0.0, z, y) +
                      w[2] * Eigen::Vector3d(z, 0.0, x) + w[3] * Eigen::Vector3d(x, -y, 0.0) +
                      w[4] * Eigen::Vector3d(0.0, 0.0, 3.0 * z);
  return g - g.dot(v) * v;
}

MappedPoint map_point(const SpaceTimePoint& s, const KernelParams& params, CoordMode mode) {
  MappedPoint m;
  if (mode == CoordMode::Sphere) {
    Eigen::Vector3d v = sphere_point(s.x, s.y);
    if (params.deformed()) v += deformation(v, params.deform);
    m.x = v / params.range_x;
  } else {
    m.x = Eigen::Vector3d(s.x, s.y, 0.0) / params.range_x;
  }
  m.t = s.t / params.range_t;
  return m;
}

std::vector<MappedPoint> map_points(std::span<const SpaceTimePoint> sites, const KernelParams& params,
                                    CoordMode mode) {
  std::vector<MappedPoint> out;
  out.reserve(sites.size());
  for (const auto& s : sites) out.push_back(map_point(s, params, mode));
  return out;
}

double deformed_distance(const SpaceTimePoint& s, const SpaceTimePoint& s_prime, const KernelParams& params,
                         CoordMode mode) {
  return mapped_distance(map_point(s, params, mode), map_point(s_prime, params, mode));
}

double matern_correlation_bessel(double d, double nu) {
  if (d < 1e-12) return 1.0;
  const double k = std::cyl_bessel_k(nu, d);
  if (k == 0.0) return 0.0;
  return std::exp((1.0 - nu) * std::numbers::ln2 - std::lgamma(nu) + nu * std::log(d)) * k;
}

double matern_correlation(double d, double nu) {
  if (d <= 0.0) return 1.0;
  if (nu == 0.5) return std::exp(-d);
  if (nu == 1.5) return (1.0 + d) * std::exp(-d);
  if (nu == 2.5) return (1.0 + d + d * d / 3.0) * std::exp(-d);
  if (d > 700.0) return 0.0;
  return matern_correlation_bessel(d, nu);
}

double kernel(double d, const KernelParams& params) {
  return params.variance * matern_correlation(d, params.nu());
}

Eigen::MatrixXd cov_matrix(std::span<const SpaceTimePoint> sites, const KernelParams& params, double nugget,
                           CoordMode mode) {
  const auto pts = map_points(sites, params, mode);
  const auto n = static_cast<Eigen::Index>(pts.size());
  Eigen::MatrixXd c(n, n);
  const double nu = params.nu();
  for (Eigen::Index i = 0; i < n; ++i) {
    c(i, i) = params.variance + nugget;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double v = params.variance * matern_correlation(mapped_distance(pts[i], pts[j]), nu);
      c(i, j) = v;
      c(j, i) = v;
    }
  }
  return c;
}

}  // namespace fcmix
