#ifndef FCMIX_COVARIANCE_HPP
#define FCMIX_COVARIANCE_HPP

#include <array>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace fcmix {

// Euclidean: (x, y) in the plane. Sphere: (x, y) = (lon, lat) in degrees,
// mapped to the unit sphere; supports deformation.
enum class CoordMode { Euclidean, Sphere };

enum class KernelKind { Matern, Exponential };

struct SpaceTimePoint {
  double x = 0.0;
  double y = 0.0;
  double t = 0.0;  // days
};

struct KernelParams {
  double variance = 1.0;
  double range_x = 0.1;
  double range_t = 1.0;
  double smoothness = 0.5;
  // weights on the surface gradients of the five real degree-2 spherical
  // harmonics (xy, yz, xz, (x^2-y^2)/2, (3z^2-1)/2)
  std::array<double, 5> deform{};
  KernelKind kind = KernelKind::Exponential;

  // Throws ConfigError unless all scale parameters are strictly positive and
  // exponential kernels carry smoothness 0.5.
  void validate() const;
  double nu() const { return kind == KernelKind::Exponential ? 0.5 : smoothness; }
  bool deformed() const;
};

// Smoothness bounds used during estimation.
inline constexpr double kMinSmoothness = 0.25;
inline constexpr double kMaxSmoothness = 3.5;

Eigen::Vector3d sphere_point(double lon_deg, double lat_deg);

// Tangential deformation field: sum_k w_k grad_S Y_k(v) at unit vector v.
Eigen::Vector3d deformation(const Eigen::Vector3d& v, const std::array<double, 5>& weights);

// A site after deformation and range scaling: kernel distance between two
// mapped points is |a.x - b.x| + |a.t - b.t|.
struct MappedPoint {
  Eigen::Vector3d x = Eigen::Vector3d::Zero();
  double t = 0.0;
};

MappedPoint map_point(const SpaceTimePoint& s, const KernelParams& params, CoordMode mode);
std::vector<MappedPoint> map_points(std::span<const SpaceTimePoint> sites, const KernelParams& params,
                                    CoordMode mode);

inline double mapped_distance(const MappedPoint& a, const MappedPoint& b) {
  return (a.x - b.x).norm() + std::abs(a.t - b.t);
}

double deformed_distance(const SpaceTimePoint& s, const SpaceTimePoint& s_prime, const KernelParams& params,
                         CoordMode mode);

// Matern correlation with unit variance, rho(0) = 1. Half-integer smoothness
// 0.5, 1.5 and 2.5 use closed forms.
double matern_correlation(double d, double nu);
// Same function, always through the modified Bessel function K_nu.
double matern_correlation_bessel(double d, double nu);

// variance * matern_correlation(d, nu)
double kernel(double d, const KernelParams& params);

Eigen::MatrixXd cov_matrix(std::span<const SpaceTimePoint> sites, const KernelParams& params, double nugget,
                           CoordMode mode);

}  // namespace fcmix

#endif  // FCMIX_COVARIANCE_HPP
