#ifndef FCMIX_RNG_HPP
#define FCMIX_RNG_HPP

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace fcmix {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent, reproducible stream for task `id` under a master seed.
inline Rng make_stream(std::uint64_t seed, std::uint64_t id) {
  return Rng(splitmix64(splitmix64(seed) ^ splitmix64(id + 0x632be59bd9b4e019ULL)));
}

// Draws a fresh seed from an existing stream (for handing to sub-tasks).
inline std::uint64_t child_seed(Rng& rng) { return rng(); }

inline Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = nd(rng);
  return v;
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace fcmix

#endif  // FCMIX_RNG_HPP
