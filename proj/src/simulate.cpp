#include "fcmix/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include <Eigen/Cholesky>
#include <spdlog/spdlog.h>

#include "fcmix/errors.hpp"
#include "fcmix/io.hpp"
#include "fcmix/parallel.hpp"

namespace fcmix {

void SimConfig::validate() const {
  if (n < 2) throw ConfigError("simulation needs at least 2 sites");
  if (n_obs < 2) throw ConfigError("simulation needs at least 2 observations per profile");
  if (G < 1) throw ConfigError("G must be positive");
  if (basis_dim < 4) throw ConfigError("basis_dim must be at least 4");
  if (static_cast<int>(pc_index.size()) != G || static_cast<int>(ranges.size()) != G) {
    throw ConfigError("pc_index and ranges need one row per group");
  }
  for (int g = 0; g < G; ++g) {
    if (static_cast<int>(pc_index[g].size()) != Q() || static_cast<int>(ranges[g].size()) != Q()) {
      throw ConfigError("pc_index and ranges rows need one entry per component");
    }
    for (int j : pc_index[g]) {
      if (j < 1 || j > basis_dim) throw ConfigError("pc_index entries must lie in 1..basis_dim");
    }
    for (double r : ranges[g]) {
      if (!(r > 0.0)) throw ConfigError("ranges must be positive");
    }
  }
  for (double v : score_variances) {
    if (!(v > 0.0)) throw ConfigError("score variances must be positive");
  }
  if (noise_variance < 0.0) throw ConfigError("noise variance must be non-negative");
  if (xi < 0.0) throw ConfigError("xi must be non-negative");
  if (graph_k < 1 || graph_k >= n) throw ConfigError("graph_k must lie in 1..n-1");
  if (label_burn_in < 0) throw ConfigError("label_burn_in must be non-negative");
}

double sim_mean(double p) { return std::exp(2.0 - 2.0 * p) * std::cos(5.0 * (p - 0.1)); }

Eigen::MatrixXd orthonormal_spline_coefficients(const BasisSystem& basis) {
  // J = L L^T; C = L^-T is upper triangular, so function k only uses the first
  // k B-splines, exactly as Gram-Schmidt in the natural order would.
  Eigen::LLT<Eigen::MatrixXd> llt(basis.gram());
  if (llt.info() != Eigen::Success) throw NumericError("gram matrix is not positive definite");
  const int P = basis.size();
  Eigen::MatrixXd c = Eigen::MatrixXd::Identity(P, P);
  llt.matrixU().solveInPlace(c);
  return c;
}

SimData generate(const SimConfig& config, Rng& rng) {
  config.validate();
  const int n = config.n, Q = config.Q(), G = config.G;
  const BasisSystem basis = build_basis(0.0, 1.0, config.basis_dim - 4);
  const Eigen::MatrixXd orth = orthonormal_spline_coefficients(basis);

  std::vector<SpaceTimePoint> sites(n);
  for (auto& s : sites) {
    s.x = uniform01(rng);
    s.y = uniform01(rng);
    s.t = 0.0;
  }

  SimData out;
  const NeighborGraph graph = build_graph(sites, config.graph_k, GraphMetric::Euclidean);
  out.labels.resize(n);
  std::uniform_int_distribution<int> pick(0, G - 1);
  for (auto& z : out.labels) z = pick(rng);
  for (int s = 0; s < config.label_burn_in; ++s) gibbs_sweep(out.labels, config.xi, graph, G, nullptr, rng);

  // every group's fields at every site; each site keeps its own group's draw
  out.scores = Eigen::MatrixXd::Zero(n, Q);
  for (int g = 0; g < G; ++g) {
    for (int l = 0; l < Q; ++l) {
      KernelParams k;
      k.kind = KernelKind::Exponential;
      k.variance = config.score_variances[l];
      k.range_x = config.ranges[g][l];
      const Eigen::MatrixXd cov = cov_matrix(sites, k, 1e-10 * k.variance, CoordMode::Euclidean);
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() != Eigen::Success) throw NumericError("simulation covariance is not positive definite");
      const Eigen::VectorXd field = llt.matrixL() * standard_normal(n, rng);
      for (int i = 0; i < n; ++i) {
        if (out.labels[i] == g) out.scores(i, l) = field(i);
      }
    }
  }

  std::vector<double> grid(config.n_obs);
  for (int j = 0; j < config.n_obs; ++j) grid[j] = static_cast<double>(j) / (config.n_obs - 1);
  const Eigen::MatrixXd B = basis.design(grid);
  const double sd = std::sqrt(config.noise_variance);
  std::normal_distribution<double> noise(0.0, 1.0);
  out.profiles.resize(n);
  for (int i = 0; i < n; ++i) {
    const int g = out.labels[i];
    Eigen::VectorXd coef = Eigen::VectorXd::Zero(basis.size());
    for (int l = 0; l < Q; ++l) coef += out.scores(i, l) * orth.col(config.pc_index[g][l] - 1);
    const Eigen::VectorXd curve = B * coef;
    Profile& p = out.profiles[i];
    p.id = "s" + std::to_string(i + 1);
    p.site = sites[i];
    p.y.pressure = grid;
    p.y.value.resize(config.n_obs);
    for (int j = 0; j < config.n_obs; ++j) p.y.value[j] = sim_mean(grid[j]) + curve(j) + sd * noise(rng);
  }
  return out;
}

double clustering_accuracy(const LabelField& truth, const LabelField& estimate, int G) {
  if (truth.size() != estimate.size()) throw ConfigError("label fields differ in length");
  if (truth.empty()) return 1.0;
  std::vector<int> perm(G);
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t best = 0;
  do {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hit += perm[estimate[i]] == truth[i];
    best = std::max(best, hit);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / static_cast<double>(truth.size());
}

void StudyConfig::validate() const {
  sim.validate();
  if (datasets < 1) throw ConfigError("study needs at least one dataset");
  if (n_obs.empty() || methods.empty()) throw ConfigError("study needs n_obs values and methods");
  for (int m : n_obs) {
    if (m < 2) throw ConfigError("n_obs values must be at least 2");
  }
  study_fit_config(*this).validate();
}

std::string method_name(EStepMethod m) { return m == EStepMethod::ImportanceSampling ? "IS" : "Gibbs"; }

FitConfig study_fit_config(const StudyConfig& config) {
  FitConfig f = config.fit;
  f.G = config.sim.G;
  f.Q1 = 0;
  f.Q2 = config.sim.Q();
  f.R = 0;
  f.n_interior_knots = config.sim.basis_dim - 4;
  f.domain_lo = 0.0;
  f.domain_hi = 1.0;
  f.mode = CoordMode::Euclidean;
  f.graph_k = config.sim.graph_k;
  return f;
}

std::vector<StudyRow> run_study(const StudyConfig& config, const StudyObserver& observer) {
  config.validate();
  struct Cell {
    int obs_index, dataset;
    EStepMethod method;
  };
  std::vector<Cell> cells;
  for (std::size_t a = 0; a < config.n_obs.size(); ++a) {
    for (int d = 0; d < config.datasets; ++d) {
      for (EStepMethod m : config.methods) cells.push_back({static_cast<int>(a), d, m});
    }
  }
  std::vector<SimData> sims(config.n_obs.size() * config.datasets);
  parallel_for(static_cast<int>(sims.size()), [&](int k) {
    const int a = k / config.datasets, d = k % config.datasets;
    SimConfig sc = config.sim;
    sc.n_obs = config.n_obs[a];
    Rng rng = make_stream(config.seed, static_cast<std::uint64_t>(sc.n_obs) * 1000003ULL + d);
    sims[k] = generate(sc, rng);
  });

  std::vector<std::vector<StudyRow>> per_cell(cells.size());
  parallel_for(static_cast<int>(cells.size()), [&](int c) {
    const Cell& cell = cells[c];
    const SimData& sim = sims[cell.obs_index * config.datasets + cell.dataset];
    FitConfig fc = study_fit_config(config);
    fc.method = cell.method;
    fc.seed = splitmix64(config.seed ^ (0x5eedULL + static_cast<std::uint64_t>(cell.dataset)));
    const int n_obs = config.n_obs[cell.obs_index];
    auto& rows = per_cell[c];
    auto record = [&](const IterationReport& r) {
      LabelField est(r.label_probs->rows());
      for (Eigen::Index i = 0; i < r.label_probs->rows(); ++i) r.label_probs->row(i).maxCoeff(&est[i]);
      rows.push_back({cell.method, n_obs, cell.dataset + 1, r.iteration,
                      clustering_accuracy(sim.labels, est, config.sim.G)});
    };
    const FitData data = prepare_data(sim.profiles, fc);
    const FitState st = fit(data, fc, record);
    if (observer) observer({cell.method, n_obs, cell.dataset + 1, &data, &st, &fc});
    spdlog::info("study: {} n_i={} dataset {} initial {:.3f} final {:.3f}", method_name(cell.method), n_obs,
                 cell.dataset + 1, rows.size() > static_cast<std::size_t>(fc.independent_em_iters)
                                       ? rows[fc.independent_em_iters].accuracy
                                       : 0.0,
                 rows.empty() ? 0.0 : rows.back().accuracy);
  });
  std::vector<StudyRow> out;
  for (auto& r : per_cell) out.insert(out.end(), r.begin(), r.end());
  return out;
}

void write_study_csv(std::ostream& os, const std::vector<StudyRow>& rows) {
  os << "method,n_i,dataset,iteration,accuracy\n";
  for (const auto& r : rows) {
    os << method_name(r.method) << ',' << r.n_obs << ',' << r.dataset << ',' << r.iteration << ','
       << format_double(r.accuracy) << '\n';
  }
}

}  // namespace fcmix
