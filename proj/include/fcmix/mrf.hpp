#ifndef FCMIX_MRF_HPP
#define FCMIX_MRF_HPP

#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fcmix/covariance.hpp"
#include "fcmix/rng.hpp"

namespace fcmix {

// Labels are stored 0-based internally; files and reports use 1..G.
using LabelField = std::vector<int>;

// Euclidean: plain (x, y) distance. LonLatDay: w_lon |dlon| + w_lat |dlat| +
// w_day * (circular day-of-year gap as a fraction of a year), lon wrapped.
enum class GraphMetric { Euclidean, LonLatDay };

struct GraphWeights {
  double lon = 1.0;
  double lat = 3.0;
  double day = 12.0;
};

struct NeighborGraph {
  int n = 0;
  int k = 0;
  // edges[i] = (j, 1/dist(i, j)), symmetrized by union of the kNN relations
  std::vector<std::vector<std::pair<int, double>>> edges;
};

inline constexpr double kMinGraphDistance = 1e-6;
inline constexpr double kMaxXi = 20.0;

double graph_distance(const SpaceTimePoint& a, const SpaceTimePoint& b, GraphMetric metric,
                      const GraphWeights& weights = {});

NeighborGraph build_graph(std::span<const SpaceTimePoint> sites, int k, GraphMetric metric,
                          const GraphWeights& weights = {});

// Weighted count of neighbours carrying each label: s_g = sum_{j~i} w_ij 1(z_j = g).
Eigen::VectorXd neighbor_label_weights(const LabelField& z, int i, const NeighborGraph& graph, int G);

// P(z_i = g | rest). With `external` (n x G table of log f(X_i, Y_i | Z_i = g))
// this is the conditional of the posterior proposal; without, of the prior.
Eigen::VectorXd potts_conditional(const LabelField& z, int i, double xi, const NeighborGraph& graph, int G,
                                  const Eigen::MatrixXd* external = nullptr);

// One systematic-scan sweep in site order.
void gibbs_sweep(LabelField& z, double xi, const NeighborGraph& graph, int G, const Eigen::MatrixXd* external,
                 Rng& rng);

struct GibbsSchedule {
  int n_samples = 1;
  int burn_in = 0;
  int thin = 1;
};

// Runs the chain from `z` (updated in place to the final state) and returns
// n_samples fields taken every `thin` sweeps after `burn_in` sweeps.
std::vector<LabelField> sample_fields(LabelField& z, double xi, const NeighborGraph& graph, int G,
                                      const Eigen::MatrixXd* external, const GibbsSchedule& schedule, Rng& rng);

// xi * sum over undirected edges of w_ij 1(z_i = z_j); log prior up to its constant.
double potts_log_unnormalized(const LabelField& z, double xi, const NeighborGraph& graph);

// sum_i log P(z_i | neighbours) under the prior.
double potts_log_pseudolikelihood(const LabelField& z, double xi, const NeighborGraph& graph, int G);

// Gradient in xi of the weighted log pseudo-likelihood.
double xi_gradient(std::span<const LabelField> fields, std::span<const double> weights, double xi,
                   const NeighborGraph& graph, int G);

struct XiEstimate {
  double xi = 0.0;
  bool at_boundary = false;
};

// Root of the weighted pseudo-likelihood gradient on [0, kMaxXi] by bisection.
// The pseudo-likelihood is concave in xi, so the gradient is non-increasing.
XiEstimate xi_update(std::span<const LabelField> fields, std::span<const double> weights, const NeighborGraph& graph,
                     int G);

}  // namespace fcmix

#endif  // FCMIX_MRF_HPP
