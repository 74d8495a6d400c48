#include "fcmix/predict.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <ostream>

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include "fcmix/errors.hpp"
#include "fcmix/io.hpp"
#include "fcmix/parallel.hpp"

namespace fcmix {

double PredictionResult::mean(const BasisSystem& basis, double p) const { return basis.evaluate(p).dot(mean_coef); }

double PredictionResult::var_scores(const BasisSystem& basis, double p) const {
  const Eigen::RowVectorXd b = basis.evaluate(p);
  return std::max((b * var_scores_coef * b.transpose())(0, 0), 0.0);
}

double PredictionResult::var_cluster(const BasisSystem& basis, double p) const {
  const Eigen::RowVectorXd b = basis.evaluate(p);
  return std::max((b * var_cluster_coef * b.transpose())(0, 0), 0.0);
}

double PredictionResult::variance(const BasisSystem& basis, double p) const {
  return var_scores(basis, p) + var_cluster(basis, p);
}

VarianceDecomposition variance_decomposition(std::span<const Eigen::VectorXd> means,
                                             std::span<const Eigen::MatrixXd> covs, std::span<const double> weights) {
  if (means.size() != covs.size() || means.size() != weights.size() || means.empty()) {
    throw ConfigError("variance_decomposition: need matching, non-empty inputs");
  }
  const Eigen::Index d = means.front().size();
  VarianceDecomposition out;
  out.mean = Eigen::VectorXd::Zero(d);
  out.var_scores = Eigen::MatrixXd::Zero(d, d);
  out.var_cluster = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t t = 0; t < means.size(); ++t) {
    out.mean += weights[t] * means[t];
    out.var_scores += weights[t] * covs[t];
  }
  for (std::size_t t = 0; t < means.size(); ++t) {
    const Eigen::VectorXd e = means[t] - out.mean;
    out.var_cluster.noalias() += weights[t] * e * e.transpose();
  }
  return out;
}

double simultaneous_band(const Eigen::MatrixXd& curve_cov, double level, int n_sim, Rng& rng) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("band level must lie in (0, 1)");
  if (n_sim < 1) throw ConfigError("band needs at least one simulation");
  const Eigen::Index m = curve_cov.rows();
  Eigen::VectorXd sd = curve_cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  const double scale = sd.maxCoeff();
  if (m == 0 || !(scale > 0.0)) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (curve_cov + curve_cov.transpose()));
  const Eigen::MatrixXd root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::vector<double> sup(n_sim);
  for (int s = 0; s < n_sim; ++s) {
    const Eigen::VectorXd z = root * standard_normal(m, rng);
    double best = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (sd(j) > 1e-12 * scale) best = std::max(best, std::abs(z(j)) / sd(j));
    }
    sup[s] = best;
  }
  std::sort(sup.begin(), sup.end());
  const auto k = static_cast<std::size_t>(std::ceil(level * n_sim)) - 1;
  return sup[std::min<std::size_t>(k, sup.size() - 1)];
}

double simultaneous_band(const Eigen::MatrixXd& score_cov, const Eigen::MatrixXd& loading, const BasisSystem& basis,
                         std::span<const double> pressures, double level, int n_sim, Rng& rng) {
  const Eigen::MatrixXd B = basis.design(pressures) * loading;
  return simultaneous_band(B * score_cov * B.transpose(), level, n_sim, rng);
}

namespace {

struct Box {
  double x_lo, x_hi, y_lo, y_hi, t_lo, t_hi;

  bool contains(const SpaceTimePoint& s) const {
    return s.x >= x_lo && s.x <= x_hi && s.y >= y_lo && s.y <= y_hi && s.t >= t_lo && s.t <= t_hi;
  }
};

Box bounding_box(std::span<const SpaceTimePoint> sites) {
  const double inf = std::numeric_limits<double>::infinity();
  Box b{inf, -inf, inf, -inf, inf, -inf};
  for (const auto& s : sites) {
    b.x_lo = std::min(b.x_lo, s.x);
    b.x_hi = std::max(b.x_hi, s.x);
    b.y_lo = std::min(b.y_lo, s.y);
    b.y_hi = std::max(b.y_hi, s.y);
    b.t_lo = std::min(b.t_lo, s.t);
    b.t_hi = std::max(b.t_hi, s.t);
  }
  return b;
}

// Conditional mean and covariance of the response coefficients of every
// target carried by one cluster posterior.
struct TargetMoments {
  std::vector<int> targets;  // batch-local target index
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::MatrixXd> cov;
};

void predict_batch(const FitData& data, const FitState& state, const FitConfig& config,
                   std::span<const Profile> targets, const PredictOptions& options, std::uint64_t seed,
                   std::span<PredictionResult> out) {
  const ModelParams& omega = state.omega;
  const int n = data.n(), m = static_cast<int>(targets.size()), G = omega.G, Q = omega.Q(), P = omega.P();
  const int N = n + m;

  std::vector<SpaceTimePoint> sites = data.sites;
  for (const auto& t : targets) sites.push_back(t.site);
  const auto obs_terms = profile_terms_table(data.stats, omega);
  const auto tgt_stats = profile_stats(targets, data.basis, omega.R);
  const auto tgt_terms = profile_terms_table(tgt_stats, omega);
  std::vector<bool> has_data(m);
  for (int k = 0; k < m; ++k) has_data[k] = tgt_terms[k].front().n > 0;
  auto terms_of = [&](int i, int g) -> const ProfileTerms* {
    if (i < n) return &obs_terms[i][g];
    return has_data[i - n] ? &tgt_terms[i - n][g] : nullptr;
  };

  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(N, G);
  L.topRows(n) = per_profile_loglik_table(obs_terms, omega);
  for (int k = 0; k < m; ++k) {
    if (!has_data[k]) continue;
    for (int g = 0; g < G; ++g) L(n + k, g) = per_profile_loglik(tgt_terms[k][g], omega.clusters[g], Q);
  }

  const NeighborGraph graph =
      build_graph(sites, std::min(config.graph_k, N - 1), graph_metric(config.mode), config.graph_weights);
  LabelField z(N, 0);
  for (int i = 0; i < N; ++i) {
    if (i < n && static_cast<int>(state.z_state.size()) == n) {
      z[i] = state.z_state[i];
    } else {
      L.row(i).maxCoeff(&z[i]);
    }
  }
  Rng chain = make_stream(seed, 0xc4a1ULL);
  const auto fields = sample_fields(z, omega.xi, graph, G, &L,
                                    GibbsSchedule{options.n_samples, options.burn_in, options.thin}, chain);
  const int T = static_cast<int>(fields.size());

  std::map<std::pair<int, std::vector<int>>, int> index;
  std::vector<std::pair<int, std::vector<int>>> keys;
  std::vector<std::vector<int>> sample_posts(T, std::vector<int>(G));
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < G; ++g) {
      std::vector<int> members;
      for (int i = 0; i < N; ++i) {
        if (fields[t][i] == g) members.push_back(i);
      }
      auto [it, fresh] = index.try_emplace({g, members}, static_cast<int>(keys.size()));
      if (fresh) keys.emplace_back(g, std::move(members));
      sample_posts[t][g] = it->second;
    }
  }

  const PosteriorOptions popts = config.posterior_options(make_stream(seed, 0x9b0beULL)());
  std::vector<double> key_loglik(keys.size());
  std::vector<TargetMoments> key_moments(keys.size());
  parallel_for(static_cast<int>(keys.size()), [&](int kk) {
    const auto& [g, members] = keys[kk];
    const int ng = static_cast<int>(members.size());
    std::vector<SpaceTimePoint> s;
    std::vector<const ProfileTerms*> tp;
    for (int i : members) {
      s.push_back(sites[i]);
      tp.push_back(terms_of(i, g));
    }
    const ClusterPosterior post(s, tp, omega.clusters[g], Q, omega.mode, popts);
    key_loglik[kk] = post.loglik();
    TargetMoments& tm = key_moments[kk];
    std::vector<int> pos;
    for (int a = 0; a < ng; ++a) {
      if (members[a] >= n) {
        tm.targets.push_back(members[a] - n);
        pos.push_back(a);
      }
    }
    if (tm.targets.empty()) return;
    const Eigen::MatrixXd load = channel_loading(omega, g, 0);
    Eigen::MatrixXd cov;
    if (Q > 0) {
      std::vector<int> idx;
      for (int a : pos) {
        for (int q = 0; q < Q; ++q) idx.push_back(q * ng + a);
      }
      cov = post.covariance(idx);
    }
    for (std::size_t j = 0; j < pos.size(); ++j) {
      const Eigen::VectorXd delta = seasonal_covariates(targets[tm.targets[j]].site.t, omega.R);
      Eigen::VectorXd c = channel_mean(omega, g, 0, delta);
      Eigen::MatrixXd C = Eigen::MatrixXd::Zero(P, P);
      if (Q > 0) {
        Eigen::VectorXd u(Q);
        for (int q = 0; q < Q; ++q) u(q) = post.mean()(q * ng + pos[j]);
        const Eigen::MatrixXd S = cov.block(j * Q, j * Q, Q, Q);
        c += load * u;
        C = load * S * load.transpose();
      }
      tm.mean.push_back(std::move(c));
      tm.cov.push_back(std::move(C));
    }
  });

  std::vector<double> lw(T, 0.0);
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < G; ++g) lw[t] += key_loglik[sample_posts[t][g]];
    for (int i = 0; i < N; ++i) lw[t] -= L(i, fields[t][i]);
  }
  const NormalizedWeights nw = normalize_log_weights(lw);

  const Box box = bounding_box(data.sites);
  parallel_for(m, [&](int k) {
    std::vector<Eigen::VectorXd> means(T);
    std::vector<Eigen::MatrixXd> covs(T);
    std::vector<int> label(T);
    for (int t = 0; t < T; ++t) {
      const int g = fields[t][n + k];
      const TargetMoments& tm = key_moments[sample_posts[t][g]];
      const auto j = std::find(tm.targets.begin(), tm.targets.end(), k) - tm.targets.begin();
      means[t] = tm.mean[j];
      covs[t] = tm.cov[j];
      label[t] = g;
    }
    PredictionResult& r = out[k];
    r.site = targets[k].site;
    r.extrapolated = !box.contains(r.site);
    const VarianceDecomposition vd = variance_decomposition(means, covs, nw.weights);
    r.mean_coef = vd.mean;
    r.var_scores_coef = vd.var_scores;
    r.var_cluster_coef = vd.var_cluster;
    r.cluster_probs = Eigen::VectorXd::Zero(G);
    r.cluster_mean_coef.assign(G, Eigen::VectorXd::Zero(P));
    r.cluster_cov_coef.assign(G, Eigen::MatrixXd::Zero(P, P));
    for (int g = 0; g < G; ++g) {
      std::vector<Eigen::VectorXd> mg;
      std::vector<Eigen::MatrixXd> cg;
      std::vector<double> wg;
      for (int t = 0; t < T; ++t) {
        if (label[t] != g) continue;
        mg.push_back(means[t]);
        cg.push_back(covs[t]);
        wg.push_back(nw.weights[t]);
      }
      double mass = 0.0;
      for (double w : wg) mass += w;
      r.cluster_probs(g) = mass;
      if (mass <= 0.0) continue;
      for (double& w : wg) w /= mass;
      const VarianceDecomposition dg = variance_decomposition(mg, cg, wg);
      r.cluster_mean_coef[g] = dg.mean;
      r.cluster_cov_coef[g] = dg.var_scores + dg.var_cluster;
    }
    r.cluster_probs /= r.cluster_probs.sum();
    if (!options.band_pressures.empty()) {
      const Eigen::MatrixXd B = data.basis.design(options.band_pressures);
      Rng band_rng = make_stream(seed, 0xba9dULL + static_cast<std::uint64_t>(k));
      r.band_radius.resize(G);
      for (int g = 0; g < G; ++g) {
        r.band_radius[g] = simultaneous_band(B * r.cluster_cov_coef[g] * B.transpose(), options.band_level,
                                             options.band_sims, band_rng);
      }
    }
  });
}

}  // namespace

std::vector<PredictionResult> predict(const FitData& data, const FitState& state, const FitConfig& config,
                                      std::span<const Profile> targets, const PredictOptions& options, Rng& rng) {
  if (options.n_samples < 1 || options.batch_size < 1 || options.thin < 1 || options.burn_in < 0) {
    throw ConfigError("prediction needs positive sample, batch and thinning counts");
  }
  state.omega.validate();
  for (const auto& t : targets) {
    if (static_cast<int>(t.x.size()) != data.K) throw DataError("target " + t.id + ": wrong channel count");
    for (double p : t.y.pressure) {
      if (!data.basis.contains(p)) throw DataError("target " + t.id + ": pressure outside the basis domain");
    }
    for (const auto& ch : t.x) {
      for (double p : ch.pressure) {
        if (!data.basis.contains(p)) throw DataError("target " + t.id + ": pressure outside the basis domain");
      }
    }
  }
  const int m = static_cast<int>(targets.size());
  std::vector<PredictionResult> out(m);
  const std::uint64_t base = child_seed(rng);
  int extrapolated = 0;
  for (int start = 0, b = 0; start < m; start += options.batch_size, ++b) {
    const int len = std::min(options.batch_size, m - start);
    predict_batch(data, state, config, targets.subspan(start, len), options,
                  make_stream(base, static_cast<std::uint64_t>(b))(), std::span(out).subspan(start, len));
  }
  for (const auto& r : out) extrapolated += r.extrapolated;
  if (extrapolated > 0) spdlog::warn("{} of {} targets lie outside the observed space-time hull", extrapolated, m);
  return out;
}

GridPrediction grid_predict(const FitData& data, const FitState& state, const FitConfig& config,
                            const GridSpec& grid) {
  if (grid.lon.empty() || grid.lat.empty() || grid.time.empty() || grid.pressure.empty()) {
    throw ConfigError("grid needs at least one lon, lat, time and pressure value");
  }
  for (double p : grid.pressure) {
    if (!data.basis.contains(p)) throw ConfigError("grid pressure outside the fitted basis domain");
  }
  GridPrediction gp;
  for (double lon : grid.lon) {
    for (double lat : grid.lat) {
      for (double t : grid.time) {
        Profile p;
        p.id = "grid" + std::to_string(gp.targets.size() + 1);
        p.site = {lon, lat, t};
        p.x.resize(data.K);
        gp.targets.push_back(std::move(p));
      }
    }
  }
  Rng rng = make_stream(grid.seed, 0x961dULL);
  gp.results = predict(data, state, config, gp.targets, grid.options, rng);
  return gp;
}

void write_grid_csv(std::ostream& os, const GridSpec& grid, const GridPrediction& pred, const BasisSystem& basis) {
  os << "lon,lat,time,pressure,pred_mean,sd_total,sd_scores,sd_cluster";
  const int G = pred.results.empty() ? 0 : static_cast<int>(pred.results.front().cluster_probs.size());
  for (int g = 0; g < G; ++g) os << ",p_cluster_" << g + 1;
  os << '\n';
  for (std::size_t k = 0; k < pred.results.size(); ++k) {
    const PredictionResult& r = pred.results[k];
    for (double p : grid.pressure) {
      const double vs = r.var_scores(basis, p);
      const double vc = r.var_cluster(basis, p);
      os << format_double(r.site.x) << ',' << format_double(r.site.y) << ',' << format_double(r.site.t) << ','
         << format_double(p) << ',' << format_double(r.mean(basis, p)) << ',' << format_double(std::sqrt(vs + vc))
         << ',' << format_double(std::sqrt(vs)) << ',' << format_double(std::sqrt(vc));
      for (int g = 0; g < G; ++g) os << ',' << format_double(r.cluster_probs(g));
      os << '\n';
    }
  }
}

}  // namespace fcmix
