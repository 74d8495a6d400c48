#include <doctest.h>

#include <cmath>

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include "fcmix/errors.hpp"
#include "fcmix/selection.hpp"
#include "fcmix/simulate.hpp"
#include "tiny.hpp"

using namespace fcmix;

namespace {

// log sum_z exp(prior(z)) f(data | z), the quantity the estimator targets
double exact_loglik(const tiny::Instance& in, const NeighborGraph& graph, PriorTerm prior) {
  const int n = static_cast<int>(in.profiles.size()), G = in.omega.G;
  int S = 1;
  for (int i = 0; i < n; ++i) S *= G;
  std::vector<double> v;
  for (int c = 0; c < S; ++c) {
    const LabelField z = tiny::decode(c, n, G);
    const double pr = prior == PriorTerm::PseudoLikelihood ? potts_log_pseudolikelihood(z, in.omega.xi, graph, G)
                                                           : potts_log_unnormalized(z, in.omega.xi, graph);
    v.push_back(pr + tiny::dense_loglik(in.profiles, z, in.omega));
  }
  return log_sum_exp(v);
}

}  // namespace

TEST_CASE("effective degrees of freedom") {
  const BasisSystem basis = build_basis(0.0, 1.0, 5);
  const int P = basis.size();
  const Eigen::MatrixXd M = basis.gram();
  const Eigen::MatrixXd Om = basis.penalty();
  CHECK(effective_dof(M, Om, 0.0) == doctest::Approx(P).epsilon(1e-10));
  // only the linear functions survive a huge penalty
  CHECK(effective_dof(M, Om, 1e12) == doctest::Approx(2.0).epsilon(1e-4));
  // identity design: sum of shrinkage factors over penalty eigenvalues
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Om);
  for (double lam : {0.01, 1.0, 100.0}) {
    const double ref = (1.0 / (1.0 + lam * es.eigenvalues().array())).sum();
    CHECK(effective_dof(Eigen::MatrixXd::Identity(P, P), Om, lam) == doctest::Approx(ref).epsilon(1e-10));
  }
  double prev = P + 1.0;
  for (double lam : {0.0, 1e-4, 1e-2, 1.0, 1e2, 1e4}) {
    const double d = effective_dof(M, Om, lam);
    CHECK(d < prev);
    prev = d;
  }
  CHECK_THROWS_AS(effective_dof(M, Om, -1.0), ConfigError);
}

TEST_CASE("scalar parameter count") {
  const BasisSystem basis = build_basis(0.0, 1.0, 3);
  const ModelParams omega = make_params(2, 1, 2, 1, 1, basis, CoordMode::Euclidean);
  FitConfig cfg;
  const std::vector<BlockDof> blocks{{"a", 3.5}, {"b", 1.25}};
  // 2 clusters x 3 kernels x (variance, range) + 2 noise variances + xi
  CHECK(total_dof(blocks, omega, cfg, false) == doctest::Approx(4.75 + 12 + 2 + 1));
  CHECK(total_dof(blocks, omega, cfg, true) == doctest::Approx(4.75 + 18 + 2 + 1));
  cfg.estimate_xi = false;
  CHECK(total_dof(blocks, omega, cfg, false) == doctest::Approx(4.75 + 12 + 2));
}

TEST_CASE("importance-sampling log likelihood matches enumeration") {
  for (PriorTerm prior : {PriorTerm::PseudoLikelihood, PriorTerm::Unnormalized}) {
    for (int s = 0; s < 10; ++s) {
      const tiny::Instance in = tiny::make(700 + s, 5);
      const FitConfig cfg = tiny::config_for(in);
      const FitData data = prepare_data(in.profiles, cfg);
      const double ref = exact_loglik(in, data.graph, prior);
      Rng rng = make_stream(s, 3);
      const LoglikEstimate est = is2_loglik(data, in.omega, 4000, prior, cfg.posterior_options(1), rng);
      CHECK(est.se > 0.0);
      CHECK(std::abs(est.value - ref) <= 3.0 * est.se + 1e-9);
    }
  }
}

TEST_CASE("single cluster likelihood is exact") {
  const tiny::Instance in = tiny::make(720, 5, 6, 1);
  const FitConfig cfg = tiny::config_for(in);
  const FitData data = prepare_data(in.profiles, cfg);
  Rng rng = make_stream(1, 2);
  const LoglikEstimate est = is2_loglik(data, in.omega, 3, PriorTerm::Unnormalized, cfg.posterior_options(1), rng);
  CHECK(est.se == 0.0);
  CHECK(est.value == doctest::Approx(tiny::dense_loglik(in.profiles, LabelField(5, 0), in.omega)).epsilon(1e-8));

  FitState st;
  st.omega = in.omega;
  st.dof = {{"mean", 4.0}};
  FitConfig c1 = cfg;
  Rng r2 = make_stream(1, 3);
  const AicResult a = aic(data, st, c1, 3, r2);
  // single cluster: no xi; the tiny sites span several times
  const double dof = 4.0 + 2 * 3 + 2;
  CHECK(a.dof == doctest::Approx(dof));
  CHECK(a.aic == doctest::Approx(-2.0 * est.value + 2.0 * dof).epsilon(1e-8));
  CHECK(a.se == 0.0);
}

TEST_CASE("candidate grid and selection bookkeeping") {
  const std::vector<int> q1{0}, q2{1, 2};
  const std::vector<double> lam{0.1, 10.0};
  const auto grid = candidate_grid(q1, q2, lam);
  CHECK(grid.size() == 4);
  CHECK(grid[3].Q2 == 2);
  CHECK(grid[3].penalties.theta_e == 10.0);

  spdlog::set_level(spdlog::level::err);
  SimConfig sc;
  sc.n = 30;
  sc.n_obs = 10;
  sc.label_burn_in = 50;
  Rng rng = make_stream(730, 0);
  const SimData sim = generate(sc, rng);
  FitConfig cfg;
  cfg.n_interior_knots = 7;
  cfg.domain_lo = 0;
  cfg.domain_hi = 1;
  cfg.T_mc = 5;
  cfg.max_iters = 1;
  cfg.independent_em_iters = 1;
  const FitData data = prepare_data(sim.profiles, cfg);
  const auto out = select_model(data, cfg, grid, 20);
  int selected = 0;
  double best = 1e300;
  for (const auto& c : out) best = std::min(best, c.result.aic);
  for (const auto& c : out) {
    if (!c.selected) continue;
    ++selected;
    // within one standard error of the best and no smaller model qualifies
    double best_se = 0.0;
    for (const auto& d : out)
      if (d.result.aic == best) best_se = d.result.se;
    CHECK(c.result.aic <= best + best_se);
    for (const auto& d : out)
      if (d.Q1 + d.Q2 < c.Q1 + c.Q2) CHECK(d.result.aic > best + best_se);
  }
  CHECK(selected == 1);
  CHECK_THROWS_AS(select_model(data, cfg, {}, 5), ConfigError);
}
