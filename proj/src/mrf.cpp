#include "fcmix/mrf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <spdlog/spdlog.h>

#include "fcmix/errors.hpp"

namespace fcmix {

namespace {

constexpr double kYearDays = 365.25;

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

Eigen::VectorXd softmax(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  Eigen::VectorXd p = (v.array() - m).exp();
  return p / p.sum();
}

}  // namespace

double graph_distance(const SpaceTimePoint& a, const SpaceTimePoint& b, GraphMetric metric,
                      const GraphWeights& weights) {
  if (metric == GraphMetric::Euclidean) return std::hypot(a.x - b.x, a.y - b.y);
  double dlon = std::fmod(std::abs(a.x - b.x), 360.0);
  dlon = std::min(dlon, 360.0 - dlon);
  const double dlat = std::abs(a.y - b.y);
  double dday = std::fmod(std::abs(a.t - b.t), kYearDays);
  dday = std::min(dday, kYearDays - dday) / kYearDays;
  return weights.lon * dlon + weights.lat * dlat + weights.day * dday;
}

NeighborGraph build_graph(std::span<const SpaceTimePoint> sites, int k, GraphMetric metric,
                          const GraphWeights& weights) {
  const int n = static_cast<int>(sites.size());
  if (k < 1 || k >= n) throw ConfigError("graph neighbour count must satisfy 1 <= k < n");
  NeighborGraph g;
  g.n = n;
  g.k = k;
  std::vector<std::vector<int>> adj(n);
  std::vector<std::pair<double, int>> cand;
  for (int i = 0; i < n; ++i) {
    cand.clear();
    for (int j = 0; j < n; ++j) {
      if (j != i) cand.emplace_back(graph_distance(sites[i], sites[j], metric, weights), j);
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int q = 0; q < k; ++q) {
      adj[i].push_back(cand[q].second);
      adj[cand[q].second].push_back(i);
    }
  }
  g.edges.resize(n);
  for (int i = 0; i < n; ++i) {
    auto& a = adj[i];
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    for (int j : a) {
      const double d = std::max(graph_distance(sites[i], sites[j], metric, weights), kMinGraphDistance);
      g.edges[i].emplace_back(j, 1.0 / d);
    }
  }
  return g;
}

Eigen::VectorXd neighbor_label_weights(const LabelField& z, int i, const NeighborGraph& graph, int G) {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(G);
  for (const auto& [j, w] : graph.edges[i]) s(z[j]) += w;
  return s;
}

Eigen::VectorXd potts_conditional(const LabelField& z, int i, double xi, const NeighborGraph& graph, int G,
                                  const Eigen::MatrixXd* external) {
  Eigen::VectorXd e = xi * neighbor_label_weights(z, i, graph, G);
  if (external != nullptr) e += external->row(i).transpose();
  return softmax(e);
}

void gibbs_sweep(LabelField& z, double xi, const NeighborGraph& graph, int G, const Eigen::MatrixXd* external,
                 Rng& rng) {
  for (int i = 0; i < graph.n; ++i) {
    const Eigen::VectorXd p = potts_conditional(z, i, xi, graph, G, external);
    double u = uniform01(rng);
    int g = 0;
    for (; g < G - 1; ++g) {
      u -= p(g);
      if (u < 0.0) break;
    }
    z[i] = g;
  }
}

std::vector<LabelField> sample_fields(LabelField& z, double xi, const NeighborGraph& graph, int G,
                                      const Eigen::MatrixXd* external, const GibbsSchedule& schedule, Rng& rng) {
  if (schedule.n_samples < 1 || schedule.thin < 1 || schedule.burn_in < 0) {
    throw ConfigError("Gibbs schedule needs n_samples >= 1, thin >= 1, burn_in >= 0");
  }
  if (static_cast<int>(z.size()) != graph.n) throw ConfigError("label field size does not match graph");
  for (int s = 0; s < schedule.burn_in; ++s) gibbs_sweep(z, xi, graph, G, external, rng);
  std::vector<LabelField> out;
  out.reserve(schedule.n_samples);
  for (int t = 0; t < schedule.n_samples; ++t) {
    for (int s = 0; s < schedule.thin; ++s) gibbs_sweep(z, xi, graph, G, external, rng);
    out.push_back(z);
  }
  return out;
}

double potts_log_unnormalized(const LabelField& z, double xi, const NeighborGraph& graph) {
  double s = 0.0;
  for (int i = 0; i < graph.n; ++i) {
    for (const auto& [j, w] : graph.edges[i]) {
      if (j > i && z[i] == z[j]) s += w;
    }
  }
  return xi * s;
}

double potts_log_pseudolikelihood(const LabelField& z, double xi, const NeighborGraph& graph, int G) {
  double s = 0.0;
  for (int i = 0; i < graph.n; ++i) {
    const Eigen::VectorXd e = xi * neighbor_label_weights(z, i, graph, G);
    s += e(z[i]) - log_sum_exp(e);
  }
  return s;
}

double xi_gradient(std::span<const LabelField> fields, std::span<const double> weights, double xi,
                   const NeighborGraph& graph, int G) {
  double grad = 0.0;
  for (std::size_t t = 0; t < fields.size(); ++t) {
    if (weights[t] == 0.0) continue;
    double gt = 0.0;
    for (int i = 0; i < graph.n; ++i) {
      const Eigen::VectorXd s = neighbor_label_weights(fields[t], i, graph, G);
      const Eigen::VectorXd p = softmax(xi * s);
      gt += s(fields[t][i]) - p.dot(s);
    }
    grad += weights[t] * gt;
  }
  return grad;
}

XiEstimate xi_update(std::span<const LabelField> fields, std::span<const double> weights, const NeighborGraph& graph,
                     int G) {
  if (fields.size() != weights.size() || fields.empty()) throw ConfigError("xi_update needs one weight per field");
  auto grad = [&](double xi) { return xi_gradient(fields, weights, xi, graph, G); };
  if (grad(0.0) <= 0.0) return {0.0, true};
  // a gradient that underflows to zero at the bound is still non-negative there
  if (grad(kMaxXi) >= 0.0) {
    spdlog::warn("xi pseudo-likelihood gradient positive on the whole bracket, returning xi = {}", kMaxXi);
    return {kMaxXi, true};
  }
  double lo = 0.0, hi = kMaxXi;
  for (int it = 0; it < 60 && hi - lo > 1e-10; ++it) {
    const double mid = 0.5 * (lo + hi);
    (grad(mid) > 0.0 ? lo : hi) = mid;
  }
  return {0.5 * (lo + hi), false};
}

}  // namespace fcmix
