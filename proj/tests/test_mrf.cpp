#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include <Eigen/Eigenvalues>
#include <gsl/gsl_cdf.h>

#include "fcmix/errors.hpp"
#include "fcmix/mrf.hpp"

using namespace fcmix;

namespace {

std::vector<SpaceTimePoint> random_sites(int n, double side, std::uint64_t seed) {
  Rng rng = make_stream(seed, 0);
  std::vector<SpaceTimePoint> s;
  for (int i = 0; i < n; ++i) s.push_back({side * uniform01(rng), side * uniform01(rng), 0.0});
  return s;
}

LabelField decode(int code, int n, int G) {
  LabelField z(n);
  for (int i = 0; i < n; ++i, code /= G) z[i] = code % G;
  return z;
}

int encode(const LabelField& z, int G) {
  int c = 0;
  for (int i = static_cast<int>(z.size()) - 1; i >= 0; --i) c = c * G + z[i];
  return c;
}

// Enumerated joint law, optionally tilted by an external table.
Eigen::VectorXd enumerate_law(const NeighborGraph& g, int G, double xi, const Eigen::MatrixXd* ext) {
  int S = 1;
  for (int i = 0; i < g.n; ++i) S *= G;
  Eigen::VectorXd lp(S);
  for (int c = 0; c < S; ++c) {
    const LabelField z = decode(c, g.n, G);
    lp(c) = potts_log_unnormalized(z, xi, g);
    if (ext) {
      for (int i = 0; i < g.n; ++i) lp(c) += (*ext)(i, z[i]);
    }
  }
  Eigen::VectorXd p = (lp.array() - lp.maxCoeff()).exp();
  return p / p.sum();
}

NeighborGraph cycle4() {
  std::vector<SpaceTimePoint> s{{0, 0, 0}, {1, 0, 0}, {1, 1.5, 0}, {0, 1.5, 0}};
  return build_graph(s, 2, GraphMetric::Euclidean);
}

}  // namespace

TEST_CASE("graph construction") {
  std::vector<SpaceTimePoint> line{{0, 0, 0}, {1, 0, 0}, {3, 0, 0}};
  const NeighborGraph g = build_graph(line, 1, GraphMetric::Euclidean);
  CHECK(g.edges[1].size() == 2);
  CHECK(g.edges[0].size() == 1);
  CHECK(g.edges[0][0].first == 1);
  CHECK(g.edges[0][0].second == doctest::Approx(1.0));

  const auto s = random_sites(12, 1.0, 1);
  const NeighborGraph full = build_graph(s, 11, GraphMetric::Euclidean);
  for (int i = 0; i < 12; ++i) CHECK(full.edges[i].size() == 11);
  CHECK_THROWS_AS(build_graph(s, 12, GraphMetric::Euclidean), ConfigError);

  std::vector<SpaceTimePoint> dup{{0, 0, 0}, {0, 0, 0}, {1, 1, 0}};
  const NeighborGraph gd = build_graph(dup, 1, GraphMetric::Euclidean);
  CHECK(gd.edges[0][0].second == doctest::Approx(1.0 / kMinGraphDistance));
}

TEST_CASE("kNN sets agree with a brute-force sort and the graph is symmetric") {
  const auto s = random_sites(100, 1.0, 2);
  const int k = 5;
  const NeighborGraph g = build_graph(s, k, GraphMetric::Euclidean);
  std::vector<std::map<int, double>> adj(100);
  for (int i = 0; i < 100; ++i)
    for (auto [j, w] : g.edges[i]) adj[i][j] = w;
  for (int i = 0; i < 100; ++i) {
    std::vector<std::pair<double, int>> d;
    for (int j = 0; j < 100; ++j)
      if (j != i) d.emplace_back(std::hypot(s[i].x - s[j].x, s[i].y - s[j].y), j);
    std::sort(d.begin(), d.end());
    for (int q = 0; q < k; ++q) {
      REQUIRE(adj[i].contains(d[q].second));
      CHECK(adj[i][d[q].second] == doctest::Approx(1.0 / d[q].first));
    }
    for (auto [j, w] : adj[i]) {
      CHECK(adj[j].contains(i));
      CHECK(w > 0.0);
      CHECK(std::isfinite(w));
    }
  }
}

TEST_CASE("lon/lat/day distance wraps longitude and season") {
  const SpaceTimePoint a{179.0, 10.0, 5.0}, b{-179.0, 11.0, 360.0};
  const double d = graph_distance(a, b, GraphMetric::LonLatDay);
  const double dday = (365.25 - 355.0) / 365.25;
  CHECK(d == doctest::Approx(2.0 + 3.0 * 1.0 + 12.0 * dday));
}

TEST_CASE("Potts conditionals") {
  const NeighborGraph g = cycle4();
  const LabelField z{0, 1, 1, 0};
  const Eigen::VectorXd u = potts_conditional(z, 0, 0.0, g, 3);
  CHECK((u.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);

  const LabelField same{1, 1, 1, 1};
  CHECK(potts_conditional(same, 2, 50.0, g, 2)(1) > 0.999);

  Eigen::MatrixXd ext(4, 2);
  ext << 0.3, -1.2, 2.0, 0.1, -0.4, 0.9, 1.5, 1.4;
  Eigen::MatrixXd shifted = ext;
  shifted.row(1).array() += 17.0;
  CHECK((potts_conditional(z, 1, 0.7, g, 2, &ext) - potts_conditional(z, 1, 0.7, g, 2, &shifted)).norm() < 1e-14);

  // path graph of three sites: conditional equals the enumerated ratio
  std::vector<SpaceTimePoint> path{{0, 0, 0}, {1, 0, 0}, {2.5, 0, 0}};
  const NeighborGraph pg = build_graph(path, 1, GraphMetric::Euclidean);
  const Eigen::VectorXd law = enumerate_law(pg, 2, 0.5, nullptr);
  for (int c = 0; c < 8; ++c) {
    const LabelField zc = decode(c, 3, 2);
    for (int i = 0; i < 3; ++i) {
      LabelField a = zc, b = zc;
      a[i] = 0;
      b[i] = 1;
      const double p0 = law(encode(a, 2)) / (law(encode(a, 2)) + law(encode(b, 2)));
      CHECK(potts_conditional(zc, i, 0.5, pg, 2)(0) == doctest::Approx(p0).epsilon(1e-12));
    }
  }
}

TEST_CASE("systematic-scan kernel leaves the enumerated law invariant") {
  const NeighborGraph g = cycle4();
  Eigen::MatrixXd ext(4, 2);
  ext << 0.2, -0.5, 1.0, 0.0, -0.3, 0.4, 0.0, 0.8;
  for (const Eigen::MatrixXd* e : std::vector<const Eigen::MatrixXd*>{nullptr, &ext}) {
    const int S = 16;
    Eigen::MatrixXd K = Eigen::MatrixXd::Identity(S, S);
    for (int i = 0; i < 4; ++i) {
      Eigen::MatrixXd Ki = Eigen::MatrixXd::Zero(S, S);
      for (int c = 0; c < S; ++c) {
        LabelField z = decode(c, 4, 2);
        const Eigen::VectorXd p = potts_conditional(z, i, 0.8, g, 2, e);
        for (int h = 0; h < 2; ++h) {
          z[i] = h;
          Ki(c, encode(z, 2)) += p(h);
        }
      }
      K = K * Ki;
    }
    const Eigen::VectorXd law = enumerate_law(g, 2, 0.8, e);
    CHECK((K.transpose() * law - law).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("Gibbs sampling") {
  SUBCASE("independence at xi = 0") {
    const auto s = random_sites(30, 1.0, 3);
    const NeighborGraph g = build_graph(s, 3, GraphMetric::Euclidean);
    LabelField z(30, 0);
    Rng rng = make_stream(4, 0);
    const auto fields = sample_fields(z, 0.0, g, 3, nullptr, {10000 / 30 + 1, 0, 1}, rng);
    Eigen::Vector3d count = Eigen::Vector3d::Zero();
    for (const auto& f : fields)
      for (int v : f) count(v) += 1.0;
    const double N = count.sum();
    double chi2 = 0.0;
    for (int h = 0; h < 3; ++h) chi2 += std::pow(count(h) - N / 3, 2) / (N / 3);
    CHECK(gsl_cdf_chisq_Q(chi2, 2) > 0.001);
  }
  SUBCASE("frozen field under saturation") {
    const auto s = random_sites(20, 1.0, 5);
    const NeighborGraph g = build_graph(s, 4, GraphMetric::Euclidean);
    LabelField z(20, 1);
    Rng rng = make_stream(6, 0);
    sample_fields(z, 1e4, g, 2, nullptr, {50, 0, 1}, rng);
    CHECK(std::all_of(z.begin(), z.end(), [](int v) { return v == 1; }));
  }
  SUBCASE("deterministic by seed") {
    const NeighborGraph g = cycle4();
    LabelField a{0, 0, 1, 1}, b = a;
    Rng ra = make_stream(7, 1), rb = make_stream(7, 1);
    CHECK(sample_fields(a, 0.5, g, 2, nullptr, {200, 5, 2}, ra) == sample_fields(b, 0.5, g, 2, nullptr, {200, 5, 2}, rb));
  }
  const NeighborGraph g = cycle4();
  LabelField short_z{0, 0, 0};
  Rng r;
  CHECK_THROWS_AS(sample_fields(short_z, 0.5, g, 2, nullptr, {1, 0, 1}, r), ConfigError);
}

TEST_CASE("Gibbs empirical law on a 4-cycle") {
  const NeighborGraph g = cycle4();
  const Eigen::VectorXd law = enumerate_law(g, 2, 0.8, nullptr);
  LabelField z{0, 1, 0, 1};
  Rng rng = make_stream(8, 0);
  const auto fields = sample_fields(z, 0.8, g, 2, nullptr, {100000, 100, 1}, rng);
  Eigen::VectorXd emp = Eigen::VectorXd::Zero(16);
  for (const auto& f : fields) emp(encode(f, 2)) += 1.0;
  emp /= static_cast<double>(fields.size());
  CHECK(0.5 * (emp - law).cwiseAbs().sum() <= 0.02);
}

TEST_CASE("xi pseudo-likelihood update") {
  SUBCASE("independent fields give small xi") {
    const auto s = random_sites(400, 20.0, 9);
    const NeighborGraph g = build_graph(s, 5, GraphMetric::Euclidean);
    Rng rng = make_stream(10, 0);
    std::vector<LabelField> f;
    for (int t = 0; t < 10; ++t) {
      LabelField z(400);
      for (int& v : z) v = static_cast<int>(uniform01(rng) * 2);
      f.push_back(z);
    }
    std::vector<double> w(10, 0.1);
    CHECK(xi_update(f, w, g, 2).xi < 0.1);
  }
  SUBCASE("constant field hits the boundary") {
    const auto s = random_sites(30, 1.0, 11);
    const NeighborGraph g = build_graph(s, 3, GraphMetric::Euclidean);
    std::vector<LabelField> f{LabelField(30, 0)};
    std::vector<double> w{1.0};
    const XiEstimate e = xi_update(f, w, g, 2);
    CHECK(e.xi == kMaxXi);
    CHECK(e.at_boundary);
  }
  SUBCASE("recovers the coupling of prior fields") {
    for (int rep = 0; rep < 3; ++rep) {
      const auto s = random_sites(200, 1.0, 20 + rep);
      const NeighborGraph g = build_graph(s, 5, GraphMetric::Euclidean);
      Rng rng = make_stream(30 + rep, 0);
      LabelField z(200);
      for (int& v : z) v = uniform01(rng) < 0.5;
      const auto f = sample_fields(z, 0.5, g, 2, nullptr, {50, 1000, 20}, rng);
      const std::vector<double> w(50, 1.0 / 50);
      const double xi = xi_update(f, w, g, 2).xi;
      CHECK(xi >= 0.3);
      CHECK(xi <= 0.7);
    }
  }
  SUBCASE("gradient is non-increasing") {
    const auto s = random_sites(50, 3.0, 12);
    const NeighborGraph g = build_graph(s, 4, GraphMetric::Euclidean);
    LabelField z(50, 0);
    Rng rng = make_stream(13, 0);
    const auto f = sample_fields(z, 0.4, g, 2, nullptr, {5, 50, 10}, rng);
    std::vector<double> w(5, 0.2);
    double prev = 1e300;
    for (double xi = 0.0; xi <= 5.0; xi += 0.25) {
      const double gr = xi_gradient(f, w, xi, g, 2);
      CHECK(gr <= prev + 1e-9);
      prev = gr;
    }
  }
}
