#include <doctest.h>

#include <cmath>

#include "fcmix/em.hpp"
#include "fcmix/errors.hpp"
#include "fcmix/simulate.hpp"
#include "tiny.hpp"

using namespace fcmix;

namespace {

// log f(data | z, scores) summed over profiles
double data_loglik(const FitData& data, const ModelParams& omega, const LatentSample& s) {
  double ll = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    const Profile& p = data.profiles[i];
    const int g = s.z[i];
    const Eigen::VectorXd d = seasonal_covariates(p.site.t, omega.R);
    const Eigen::VectorXd u = s.scores.row(i).transpose();
    for (int c = 0; c <= omega.K; ++c) {
      const Channel& ch = c == 0 ? p.y : p.x[c - 1];
      const Eigen::VectorXd coef = channel_mean(omega, g, c, d) + channel_loading(omega, g, c) * u;
      const double s2 = channel_noise(omega, c);
      for (int j = 0; j < ch.size(); ++j) {
        const double r = ch.value[j] - (data.basis.evaluate(ch.pressure[j]) * coef)(0, 0);
        ll += -0.5 * (std::log(2 * M_PI * s2) + r * r / s2);
      }
    }
  }
  return ll;
}

double mean_penalty(const ModelParams& omega) {
  double s = 0.0;
  for (const auto& c : omega.clusters) {
    for (int k = 0; k < c.upsilon_y.cols(); ++k) s += 0.5 * omega.penalties.mean_y * omega.basis.penalty_quadform(c.upsilon_y.col(k));
  }
  return s;
}

Moments single_moments(const LatentSample& s, int n, int G, int Q) {
  std::vector<LatentSample> v{s};
  v[0].norm_weight = 1.0;
  return moments_from_samples(v, n, G, Q);
}

}  // namespace

TEST_CASE("importance-sampling E-step matches exhaustive enumeration") {
  // seed 305 has an isolated joint mode, covered separately below
  for (int inst = 0; inst < 5; ++inst) {
    const tiny::Instance in = tiny::make(300 + inst, 4);
    FitConfig cfg = tiny::config_for(in);
    cfg.T_mc = 400;
    cfg.gibbs_burn_in = 20;
    cfg.gibbs_thin = 2;
    const FitData data = prepare_data(in.profiles, cfg);
    const auto exact = tiny::label_posterior(in.profiles, in.omega, data.graph);
    Eigen::VectorXd p_exact = Eigen::VectorXd::Zero(4);
    for (const auto& [z, w] : exact)
      for (int i = 0; i < 4; ++i) p_exact(i) += w * (z[i] == 1);

    // independent replicate chains give an honest standard error
    const int R = 20;
    Eigen::MatrixXd est(R, 4);
    double ess_total = 0.0;
    for (int r = 0; r < R; ++r) {
      LabelField z(4, 0);
      Rng rng = make_stream(inst, 100 + r);
      const EStepResult res = e_step(data, in.omega, z, cfg, rng);
      double wsum = 0.0;
      for (const auto& s : res.samples) wsum += s.norm_weight;
      CHECK(std::abs(wsum - 1.0) < 1e-12);
      CHECK(res.ess >= 1.0);
      CHECK(res.ess <= cfg.T_mc + 1e-9);
      ess_total += res.ess;
      est.row(r) = label_probabilities(res.samples, 4, 2).col(1).transpose();
    }
    const Eigen::VectorXd mean = est.colwise().mean().transpose();
    for (int i = 0; i < 4; ++i) {
      const double sd = std::sqrt((est.col(i).array() - mean(i)).square().sum() / (R - 1));
      // rare labels are never visited, so the replicate spread alone can be zero
      const double binom = std::sqrt(p_exact(i) * (1 - p_exact(i)) / ess_total);
      CHECK(std::abs(mean(i) - p_exact(i)) <= 3.0 * std::max(sd / std::sqrt(R), binom) + 1e-9);
    }
  }
}

TEST_CASE("single-site chain stays out of an isolated joint mode") {
  // the all-ones field carries real mass but every single flip toward it is
  // about 1e-6 as likely, so a chain started at all-zeros never reaches it
  const tiny::Instance in = tiny::make(305, 4);
  FitConfig cfg = tiny::config_for(in);
  cfg.T_mc = 400;
  cfg.gibbs_burn_in = 20;
  cfg.gibbs_thin = 2;
  const FitData data = prepare_data(in.profiles, cfg);
  const auto exact = tiny::label_posterior(in.profiles, in.omega, data.graph);
  const double isolated = exact[15].second;
  CHECK(isolated > 1e-3);
  for (int r = 0; r < 5; ++r) {
    LabelField z(4, 0);
    Rng rng = make_stream(5, 100 + r);
    for (const auto& s : e_step(data, in.omega, z, cfg, rng).samples) CHECK(s.z != LabelField(4, 1));
  }
  // started inside the mode, the chain stays there too
  LabelField z(4, 1);
  Rng rng = make_stream(5, 200);
  int inside = 0;
  const auto res = e_step(data, in.omega, z, cfg, rng);
  for (const auto& s : res.samples) inside += s.z == LabelField(4, 1);
  CHECK(inside > 0.9 * res.samples.size());
}

TEST_CASE("E-step score means match the dense posterior") {
  const tiny::Instance in = tiny::make(320, 3);
  FitConfig cfg = tiny::config_for(in);
  cfg.T_mc = 300;
  cfg.gibbs_thin = 2;
  const FitData data = prepare_data(in.profiles, cfg);
  const auto exact = tiny::label_posterior(in.profiles, in.omega, data.graph);
  // E[1(z_0 = g) u_0] for each g and component
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(2, 2);
  for (const auto& [z, w] : exact) {
    const int g = z[0];
    const auto m = tiny::members_of(z, g);
    const Eigen::VectorXd pm = tiny::dense_cluster(in.profiles, m, in.omega, g).post_mean();
    const int ng = static_cast<int>(m.size());
    for (int q = 0; q < 2; ++q) ref(g, q) += w * pm(q * ng);
  }
  const int R = 20;
  std::vector<Eigen::MatrixXd> est;
  for (int r = 0; r < R; ++r) {
    LabelField z(3, 0);
    Rng rng = make_stream(321, r);
    const EStepResult res = e_step(data, in.omega, z, cfg, rng);
    const Moments mo = moments_from_samples(res.samples, 3, 2, 2);
    Eigen::MatrixXd e(2, 2);
    for (int g = 0; g < 2; ++g) e.row(g) = mo.m[g].row(0);
    est.push_back(e);
  }
  for (int g = 0; g < 2; ++g) {
    for (int q = 0; q < 2; ++q) {
      double m = 0.0, v = 0.0;
      for (const auto& e : est) m += e(g, q) / R;
      for (const auto& e : est) v += std::pow(e(g, q) - m, 2) / (R - 1);
      CHECK(std::abs(m - ref(g, q)) <= 3.0 * std::sqrt(v / R) + 1e-9);
    }
  }
}

TEST_CASE("E-step limits") {
  SUBCASE("independent fields give equal weights") {
    tiny::Instance in = tiny::make(330, 5);
    for (auto& cl : in.omega.clusters)
      for (int q = 0; q < 2; ++q) {
        cl.kernel(q).range_x = 1e-9;
        cl.kernel(q).range_t = 1e-9;
      }
    FitConfig cfg = tiny::config_for(in);
    cfg.T_mc = 30;
    const FitData data = prepare_data(in.profiles, cfg);
    LabelField z(5, 0);
    Rng rng = make_stream(1, 1);
    const EStepResult res = e_step(data, in.omega, z, cfg, rng);
    for (const auto& s : res.samples) CHECK(s.norm_weight == doctest::Approx(1.0 / 30).epsilon(1e-6));
  }
  SUBCASE("a single cluster") {
    tiny::Instance in = tiny::make(331, 4, 6, 1);
    FitConfig cfg = tiny::config_for(in);
    cfg.T_mc = 10;
    const FitData data = prepare_data(in.profiles, cfg);
    LabelField z(4, 0);
    Rng rng = make_stream(2, 1);
    const EStepResult res = e_step(data, in.omega, z, cfg, rng);
    for (const auto& s : res.samples) {
      CHECK(s.norm_weight == doctest::Approx(0.1));
      CHECK(s.z == LabelField(4, 0));
    }
    CHECK((res.samples[0].scores - res.samples[1].scores).norm() > 0.0);
  }
}

TEST_CASE("M-step reduces to least squares without latent structure") {
  tiny::Instance in = tiny::make(340, 5, 6, 1, 0, 0, 1);
  FitConfig cfg = tiny::config_for(in);
  cfg.penalties = {0, 0, 0, 0, 0};
  const FitData data = prepare_data(in.profiles, cfg);
  ModelParams omega = in.omega;
  omega.penalties = cfg.penalties;
  LatentSample s;
  s.z = LabelField(5, 0);
  s.scores = Eigen::MatrixXd::Zero(5, 0);
  Moments mo = single_moments(s, 5, 1, 0);
  std::vector<LatentSample> none;
  m_step(data, mo, none, omega, cfg, {false, false});

  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> y;
  for (const auto& p : in.profiles) {
    const Eigen::VectorXd d = seasonal_covariates(p.site.t, 1);
    for (int j = 0; j < p.y.size(); ++j) {
      const Eigen::RowVectorXd b = omega.basis.evaluate(p.y.pressure[j]);
      Eigen::RowVectorXd r(b.size() * 3);
      for (int a = 0; a < b.size(); ++a)
        for (int c = 0; c < 3; ++c) r(a * 3 + c) = b(a) * d(c);
      rows.push_back(r);
      y.push_back(p.y.value[j]);
    }
  }
  Eigen::MatrixXd X(rows.size(), rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) X.row(r) = rows[r];
  const Eigen::VectorXd yv = Eigen::Map<Eigen::VectorXd>(y.data(), y.size());
  // compare fitted values; the coefficients themselves may be unidentified
  const Eigen::VectorXd ols = X * X.completeOrthogonalDecomposition().solve(yv);
  Eigen::VectorXd fit(rows.size());
  int r = 0;
  for (const auto& p : in.profiles) {
    const Eigen::VectorXd d = seasonal_covariates(p.site.t, 1);
    for (int j = 0; j < p.y.size(); ++j, ++r)
      fit(r) = (omega.basis.evaluate(p.y.pressure[j]) * omega.clusters[0].upsilon_y * d)(0, 0);
  }
  CHECK((fit - ols).norm() < 1e-6 * std::max(1.0, ols.norm()));
  CHECK(omega.sigma2_y == doctest::Approx((yv - ols).squaredNorm() / yv.size()).epsilon(1e-6));
  CHECK(omega.sigma2_y > 0.0);
}

TEST_CASE("heavy mean penalty gives linear mean curves") {
  tiny::Instance in = tiny::make(341, 5, 6, 1, 0, 0, 0);
  FitConfig cfg = tiny::config_for(in);
  cfg.penalties.mean_y = 1e10;
  const FitData data = prepare_data(in.profiles, cfg);
  ModelParams omega = in.omega;
  omega.penalties = cfg.penalties;
  LatentSample s;
  s.z = LabelField(5, 0);
  s.scores = Eigen::MatrixXd::Zero(5, 0);
  Moments mo = single_moments(s, 5, 1, 0);
  std::vector<LatentSample> none;
  const auto dof = m_step(data, mo, none, omega, cfg, {false, false});
  const Eigen::VectorXd c = omega.clusters[0].upsilon_y.col(0);
  CHECK(omega.basis.penalty_quadform(c) < 1e-8 * std::max(1.0, c.squaredNorm()));
  CHECK(dof.front().dof == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("M-step with a frozen sample is a coordinate ascent") {
  for (int inst = 0; inst < 5; ++inst) {
    tiny::Instance in = tiny::make(350 + inst, 5);
    FitConfig cfg = tiny::config_for(in);
    cfg.penalties = {1e-3, 1e-3, 0, 0, 0};
    const FitData data = prepare_data(in.profiles, cfg);
    ModelParams omega = in.omega;
    omega.penalties = cfg.penalties;
    Rng rng = make_stream(inst, 9);
    LatentSample s;
    s.z = LabelField{0, 1, 0, 1, 1};
    s.scores = tiny::random_matrix(5, 2, rng);
    s.norm_weight = 1.0;
    const double before = data_loglik(data, omega, s) - mean_penalty(omega);
    std::vector<LatentSample> samples{s};
    Moments mo = single_moments(s, 5, 2, 2);
    m_step(data, mo, samples, omega, cfg, {true, true});
    const double after = data_loglik(data, omega, samples[0]) - mean_penalty(omega);
    CHECK(after >= before - 1e-8 * std::abs(before));
    CHECK(omega.orthonormality_residual() < 1e-8);
    CHECK(omega.sigma2_y > 0.0);
    CHECK(omega.sigma2_x[0] > 0.0);
    for (const auto& cl : omega.clusters) {
      for (const Eigen::MatrixXd* th : {&cl.theta_x, &cl.theta_e}) {
        for (int q = 0; q < th->cols(); ++q) {
          int k = 0;
          while (std::abs((*th)(k, q)) < 1e-14) ++k;
          CHECK((*th)(k, q) > 0.0);
        }
      }
    }
  }
}

TEST_CASE("orthonormalization orders components by score variance") {
  SimConfig sc;
  sc.n = 60;
  sc.n_obs = 30;
  sc.label_burn_in = 50;
  Rng rng = make_stream(360, 0);
  const SimData sim = generate(sc, rng);
  FitConfig cfg;
  cfg.n_interior_knots = 7;
  cfg.domain_lo = 0;
  cfg.domain_hi = 1;
  cfg.independent_em_iters = 2;
  cfg.max_iters = 0;
  const FitData data = prepare_data(sim.profiles, cfg);
  const InitResult init = initialize(data, cfg);
  CHECK(init.omega.orthonormality_residual() < 1e-8);
  for (const auto& cl : init.omega.clusters) {
    for (int q = 1; q < 3; ++q) CHECK(cl.eta_kernels[q - 1].variance >= cl.eta_kernels[q].variance);
  }
}

TEST_CASE("k-means on well separated clusters") {
  Rng rng = make_stream(370, 0);
  Eigen::MatrixXd x(60, 4);
  LabelField truth(60);
  for (int i = 0; i < 60; ++i) {
    truth[i] = i % 3;
    for (int j = 0; j < 4; ++j) x(i, j) = 10.0 * truth[i] * (j == truth[i] % 4) + std::normal_distribution<double>()(rng) * 0.3;
  }
  const LabelField z = kmeans(x, 3, 5, rng);
  CHECK(clustering_accuracy(truth, z, 3) == 1.0);
  CHECK_THROWS_AS(kmeans(x.topRows(2), 3, 5, rng), DataError);
}

TEST_CASE("initialization separates distinct means") {
  // two clusters whose mean curves are ten noise sd apart
  Rng rng = make_stream(380, 0);
  std::vector<Profile> profiles;
  LabelField truth;
  for (int i = 0; i < 40; ++i) {
    Profile p;
    p.id = "s" + std::to_string(i);
    p.site = {uniform01(rng), uniform01(rng), 0.0};
    const int g = i % 2;
    truth.push_back(g);
    for (int j = 0; j < 15; ++j) {
      const double pr = j / 14.0;
      p.y.pressure.push_back(pr);
      p.y.value.push_back((g ? 10.0 : 0.0) + std::sin(3 * pr) + 0.5 * std::normal_distribution<double>()(rng) * (1 + pr));
    }
    profiles.push_back(p);
  }
  FitConfig cfg;
  cfg.Q2 = 1;
  cfg.n_interior_knots = 4;
  cfg.max_iters = 0;
  const FitData data = prepare_data(profiles, cfg);
  double kmeans_acc = 0.0;
  const InitResult init = initialize(data, cfg, [&](const IterationReport& r) {
    if (r.phase != "kmeans") return;
    LabelField z(40);
    for (int i = 0; i < 40; ++i) r.label_probs->row(i).maxCoeff(&z[i]);
    kmeans_acc = clustering_accuracy(truth, z, 2);
  });
  CHECK(kmeans_acc == 1.0);
  CHECK(init.omega.orthonormality_residual() < 1e-8);
}

TEST_CASE("single cluster initialization is a functional PCA") {
  SimConfig sc;
  sc.n = 50;
  sc.n_obs = 40;
  sc.G = 1;
  sc.pc_index = {{3, 5, 7}};
  sc.ranges = {{0.1, 0.05, 0.07}};
  sc.label_burn_in = 1;
  Rng rng = make_stream(390, 0);
  const SimData sim = generate(sc, rng);
  double prev = 1e300;
  for (int q = 1; q <= 3; ++q) {
    FitConfig cfg;
    cfg.G = 1;
    cfg.Q2 = q;
    cfg.n_interior_knots = 7;
    cfg.domain_lo = 0;
    cfg.domain_hi = 1;
    cfg.max_iters = 0;
    const FitData data = prepare_data(sim.profiles, cfg);
    const FitState st = fit(data, cfg);
    // residual variance of the reconstruction shrinks as components are added
    CHECK(st.omega.sigma2_y < prev);
    prev = st.omega.sigma2_y;
  }
}

TEST_CASE("fit traces, invariants and determinism") {
  SimConfig sc;
  sc.n = 60;
  sc.n_obs = 20;
  sc.label_burn_in = 100;
  Rng rng = make_stream(400, 0);
  const SimData sim = generate(sc, rng);
  FitConfig cfg;
  cfg.n_interior_knots = 7;
  cfg.domain_lo = 0;
  cfg.domain_hi = 1;
  cfg.T_mc = 10;
  cfg.max_iters = 3;
  cfg.independent_em_iters = 2;
  cfg.trace_samples = 10;
  const FitData data = prepare_data(sim.profiles, cfg);
  std::vector<std::string> phases;
  const FitState a = fit(data, cfg, [&](const IterationReport& r) { phases.push_back(r.phase); });
  CHECK(phases.front() == "kmeans");
  CHECK(phases.size() == 1 + 2 + static_cast<std::size_t>(a.iteration));
  CHECK(a.loglik_trace.size() == static_cast<std::size_t>(a.iteration) + 1);
  for (double r : a.orthonormality_trace) CHECK(r < 1e-8);
  double wsum = 0.0;
  for (const auto& s : a.samples) wsum += s.norm_weight;
  CHECK(std::abs(wsum - 1.0) < 1e-12);
  const FitState b = fit(data, cfg);
  CHECK(a.loglik_trace == b.loglik_trace);
  CHECK(a.omega.xi == b.omega.xi);

  FitConfig zero = cfg;
  zero.max_iters = 0;
  const FitState z = fit(data, zero);
  const InitResult init = initialize(data, zero);
  CHECK(z.iteration == 0);
  CHECK((z.omega.clusters[0].theta_e - init.omega.clusters[0].theta_e).norm() == 0.0);
  CHECK(z.omega.sigma2_y == init.omega.sigma2_y);
}

TEST_CASE("measurement error estimate moves toward the truth") {
  SimConfig sc;
  sc.n = 80;
  sc.n_obs = 30;
  sc.label_burn_in = 200;
  Rng rng = make_stream(410, 0);
  const SimData sim = generate(sc, rng);
  FitConfig cfg;
  cfg.n_interior_knots = 7;
  cfg.domain_lo = 0;
  cfg.domain_hi = 1;
  cfg.T_mc = 20;
  const FitData data = prepare_data(sim.profiles, cfg);

  ModelParams omega = make_params(2, 0, 3, 0, 0, data.basis, CoordMode::Euclidean);
  const Eigen::MatrixXd on = orthonormal_spline_coefficients(data.basis);
  std::vector<double> grid;
  for (int k = 0; k <= 100; ++k) grid.push_back(k / 100.0);
  const Eigen::MatrixXd Bd = data.basis.design(grid);
  Eigen::VectorXd mu(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) mu(k) = sim_mean(grid[k]);
  const Eigen::VectorXd mu_coef = Bd.colPivHouseholderQr().solve(mu);
  for (int g = 0; g < 2; ++g) {
    auto& cl = omega.clusters[g];
    cl.upsilon_y.col(0) = mu_coef;
    for (int q = 0; q < 3; ++q) {
      cl.theta_e.col(q) = on.col(sc.pc_index[g][q] - 1);
      cl.eta_kernels[q].variance = sc.score_variances[q];
      cl.eta_kernels[q].range_x = sc.ranges[g][q];
    }
  }
  omega.xi = 0.5;
  omega.sigma2_y = 3.0;
  LabelField z = sim.labels;
  Rng erng = make_stream(411, 0);
  EStepResult es = e_step(data, omega, z, cfg, erng);
  Moments mo = moments_from_samples(es.samples, data.n(), 2, 3);
  m_step(data, mo, es.samples, omega, cfg, {false, false});
  CHECK(std::abs(omega.sigma2_y - 1.0) < 2.0);
  CHECK(std::abs(omega.sigma2_y - 1.0) < 0.5);
}

TEST_CASE("configuration validation") {
  FitConfig c;
  CHECK_NOTHROW(c.validate());
  c.T_mc = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = FitConfig{};
  c.conv_tol = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
