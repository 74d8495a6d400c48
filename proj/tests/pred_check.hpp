#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fcmix/predict.hpp"
#include "tiny.hpp"

namespace pred_check {

using namespace fcmix;

// Largest deviation from the exhaustive-label oracle in units of the Monte
// Carlo standard error, over the target's cluster probability and the curve
// mean and variance at a few pressures. The standard error comes from
// independent replicate chains, floored by the error of an ideal sampler
// drawing labels straight from the posterior, so never-visited rare labels
// still count.
struct Outcome {
  double max_z = 0.0;
  int checks = 0;
  int failures = 0;
};

inline Outcome check_instance(std::uint64_t seed, int n_profiles, int replicates, int n_samples) {
  const tiny::Instance in = tiny::make(seed, n_profiles);
  const FitConfig cfg = tiny::config_for(in);
  const FitData data = prepare_data(in.profiles, cfg);
  FitState state;
  state.omega = in.omega;
  Rng srng = make_stream(seed, 77);
  Profile target;
  target.site = {uniform01(srng), uniform01(srng), 365.0 * uniform01(srng)};
  target.x.resize(in.omega.K);
  const auto oracle = tiny::predict_oracle(in, target.site, cfg.graph_k);

  const std::vector<double> ps{0.1, 0.5, 0.9};
  PredictOptions opt;
  opt.n_samples = n_samples;
  opt.burn_in = 20;
  opt.thin = 2;
  std::vector<std::vector<double>> est;  // replicate x quantity
  for (int r = 0; r < replicates; ++r) {
    Rng rng = make_stream(seed, 1000 + r);
    const auto res = predict(data, state, cfg, std::span<const Profile>(&target, 1), opt, rng).front();
    std::vector<double> v{res.cluster_probs(1)};
    for (double p : ps) {
      v.push_back(res.mean(data.basis, p));
      v.push_back(res.variance(data.basis, p));
    }
    est.push_back(v);
  }
  std::vector<double> ref{oracle.probs(1)};
  // per-configuration value of each estimated quantity
  std::vector<std::vector<double>> h(oracle.weight.size());
  for (std::size_t c = 0; c < h.size(); ++c) h[c].push_back(oracle.label[c] == 1);
  for (double p : ps) {
    const Eigen::RowVectorXd b = data.basis.evaluate(p);
    const double mean = (b * oracle.mean)(0, 0);
    ref.push_back(mean);
    ref.push_back((b * oracle.cov * b.transpose())(0, 0));
    for (std::size_t c = 0; c < h.size(); ++c) {
      const double m = (b * oracle.cond_mean[c])(0, 0);
      h[c].push_back(m);
      h[c].push_back((b * oracle.cond_cov[c] * b.transpose())(0, 0) + (m - mean) * (m - mean));
    }
  }
  Outcome out;
  const double R = replicates;
  for (std::size_t q = 0; q < ref.size(); ++q) {
    double m = 0.0, v = 0.0;
    for (const auto& e : est) m += e[q] / R;
    for (const auto& e : est) v += (e[q] - m) * (e[q] - m) / (R - 1);
    double ideal = 0.0;
    for (std::size_t c = 0; c < h.size(); ++c) ideal += oracle.weight[c] * (h[c][q] - ref[q]) * (h[c][q] - ref[q]);
    const double se = std::max(std::sqrt(v / R), std::sqrt(ideal / (R * n_samples)));
    const double z = std::abs(m - ref[q]) / std::max(se, 1e-12 * std::max(1.0, std::abs(ref[q])));
    out.max_z = std::max(out.max_z, z);
    ++out.checks;
    if (z > 3.0) ++out.failures;
  }
  return out;
}

}  // namespace pred_check
