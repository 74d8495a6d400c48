#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fcmix/errors.hpp"
#include "fcmix/simulate.hpp"

using namespace fcmix;

TEST_CASE("mean curve and orthonormal basis") {
  CHECK(sim_mean(0.1) == doctest::Approx(std::exp(1.8)));
  CHECK(sim_mean(1.0) == doctest::Approx(std::cos(4.5)));
  const BasisSystem basis = build_basis(0.0, 1.0, 7);
  const Eigen::MatrixXd C = orthonormal_spline_coefficients(basis);
  CHECK(C.rows() == 11);
  CHECK((C.transpose() * basis.gram() * C - Eigen::MatrixXd::Identity(11, 11)).norm() < 1e-10);
  // Gram-Schmidt keeps the span nested: function j uses basis functions 1..j
  for (int j = 0; j < 11; ++j)
    for (int k = j + 1; k < 11; ++k) CHECK(C(k, j) == 0.0);
}

TEST_CASE("labels are uniform without interaction") {
  SimConfig sc;
  sc.n = 600;
  sc.n_obs = 2;
  sc.xi = 0.0;
  sc.label_burn_in = 3;
  Rng rng = make_stream(800, 0);
  const SimData sim = generate(sc, rng);
  const double frac = std::accumulate(sim.labels.begin(), sim.labels.end(), 0.0) / sc.n;
  CHECK(std::abs(frac - 0.5) < 4.0 * std::sqrt(0.25 / sc.n));
}

TEST_CASE("noiseless curves lie in their group's span") {
  SimConfig sc;
  sc.n = 40;
  sc.n_obs = 25;
  sc.noise_variance = 0.0;
  sc.label_burn_in = 10;
  Rng rng = make_stream(801, 0);
  const SimData sim = generate(sc, rng);
  const BasisSystem basis = build_basis(0.0, 1.0, sc.basis_dim - 4);
  const Eigen::MatrixXd C = orthonormal_spline_coefficients(basis);
  for (int i = 0; i < sc.n; ++i) {
    const Profile& p = sim.profiles[i];
    REQUIRE(p.y.size() == sc.n_obs);
    CHECK(p.x.empty());
    CHECK(p.site.t == 0.0);
    const Eigen::MatrixXd B = basis.design(p.y.pressure);
    Eigen::VectorXd r(p.y.size());
    for (int j = 0; j < p.y.size(); ++j) r(j) = p.y.value[j] - sim_mean(p.y.pressure[j]);
    const int g = sim.labels[i];
    Eigen::VectorXd fit = Eigen::VectorXd::Zero(r.size());
    for (int l = 0; l < 3; ++l) fit += sim.scores(i, l) * B * C.col(sc.pc_index[g][l] - 1);
    CHECK((r - fit).norm() < 1e-9 * std::max(1.0, r.norm()));
  }
}

TEST_CASE("score variances and noise level") {
  SimConfig sc;
  sc.n = 250;
  sc.n_obs = 30;
  sc.label_burn_in = 20;
  Eigen::VectorXd var = Eigen::VectorXd::Zero(3);
  double noise = 0.0;
  const int reps = 12;
  const BasisSystem basis = build_basis(0.0, 1.0, sc.basis_dim - 4);
  const Eigen::MatrixXd C = orthonormal_spline_coefficients(basis);
  for (int r = 0; r < reps; ++r) {
    Rng rng = make_stream(802, r);
    const SimData sim = generate(sc, rng);
    var += sim.scores.colwise().squaredNorm().transpose() / (sc.n * reps);
    double ss = 0.0;
    int m = 0;
    for (int i = 0; i < sc.n; ++i) {
      const Profile& p = sim.profiles[i];
      const Eigen::MatrixXd B = basis.design(p.y.pressure);
      for (int j = 0; j < p.y.size(); ++j) {
        double f = sim_mean(p.y.pressure[j]);
        for (int l = 0; l < 3; ++l) f += sim.scores(i, l) * (B.row(j) * C.col(sc.pc_index[sim.labels[i]][l] - 1))(0, 0);
        ss += std::pow(p.y.value[j] - f, 2);
        ++m;
      }
    }
    noise += ss / m / reps;
  }
  // spatial correlation shrinks the effective sample, hence the loose bound
  for (int l = 0; l < 3; ++l) CHECK(var(l) == doctest::Approx(sc.score_variances[l]).epsilon(0.2));
  CHECK(noise == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("neighbouring labels agree more often with interaction") {
  SimConfig sc;
  sc.n = 300;
  sc.n_obs = 2;
  sc.label_burn_in = 500;
  auto agreement = [&](double xi) {
    sc.xi = xi;
    Rng rng = make_stream(803, static_cast<std::uint64_t>(xi * 10));
    const SimData sim = generate(sc, rng);
    std::vector<SpaceTimePoint> sites;
    for (const auto& p : sim.profiles) sites.push_back(p.site);
    const NeighborGraph g = build_graph(sites, 5, GraphMetric::Euclidean);
    double same = 0.0, all = 0.0;
    for (int i = 0; i < sc.n; ++i)
      for (const auto& [j, w] : g.edges[i]) {
        same += sim.labels[i] == sim.labels[j];
        all += 1.0;
      }
    return same / all;
  };
  CHECK(agreement(1.0) > agreement(0.0) + 0.1);
}

TEST_CASE("generation is deterministic") {
  SimConfig sc;
  sc.n = 30;
  sc.label_burn_in = 5;
  Rng a = make_stream(804, 0), b = make_stream(804, 0);
  const SimData x = generate(sc, a), y = generate(sc, b);
  CHECK(x.labels == y.labels);
  CHECK(x.profiles[7].y.value == y.profiles[7].y.value);
}

TEST_CASE("clustering accuracy") {
  const LabelField t{0, 0, 1, 1, 2, 2};
  CHECK(clustering_accuracy(t, t, 3) == 1.0);
  CHECK(clustering_accuracy(t, {2, 2, 0, 0, 1, 1}, 3) == 1.0);
  CHECK(clustering_accuracy(t, {1, 1, 0, 0, 2, 0}, 3) == doctest::Approx(5.0 / 6.0));
  CHECK(clustering_accuracy(t, {0, 0, 0, 0, 0, 0}, 3) == doctest::Approx(1.0 / 3.0));
  // symmetric under swapping the roles of truth and estimate
  const LabelField e{1, 0, 1, 2, 2, 0};
  CHECK(clustering_accuracy(t, e, 3) == clustering_accuracy(e, t, 3));
  CHECK_THROWS(clustering_accuracy(t, {0, 1}, 3));
}

TEST_CASE("simulation validation") {
  SimConfig sc;
  CHECK_NOTHROW(sc.validate());
  sc.pc_index[0][1] = 12;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  sc = SimConfig{};
  sc.ranges.pop_back();
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  sc = SimConfig{};
  sc.noise_variance = -1;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  StudyConfig st;
  st.datasets = 0;
  CHECK_THROWS_AS(st.validate(), ConfigError);
}
