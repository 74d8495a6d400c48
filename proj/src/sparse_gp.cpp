#include "fcmix/sparse_gp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include "fcmix/errors.hpp"

namespace fcmix {

namespace {

constexpr double kMinSiteDistance = 1e-9;

std::vector<int> maxmin_ordering(const std::vector<MappedPoint>& pts) {
  const int n = static_cast<int>(pts.size());
  std::vector<int> order;
  order.reserve(n);
  if (n == 0) return order;
  MappedPoint centroid;
  for (const auto& p : pts) {
    centroid.x += p.x;
    centroid.t += p.t;
  }
  centroid.x /= n;
  centroid.t /= n;
  int first = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double d = mapped_distance(pts[i], centroid);
    if (d < best) {
      best = d;
      first = i;
    }
  }
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::vector<char> used(n, 0);
  int next = first;
  for (int k = 0; k < n; ++k) {
    order.push_back(next);
    used[next] = 1;
    int arg = -1;
    double far = -1.0;
    for (int j = 0; j < n; ++j) {
      if (used[j]) continue;
      mind[j] = std::min(mind[j], mapped_distance(pts[j], pts[next]));
      if (mind[j] > far) {
        far = mind[j];
        arg = j;
      }
    }
    next = arg;
  }
  return order;
}

}  // namespace

VecchiaStructure vecchia_structure(const std::vector<MappedPoint>& pts, const VecchiaOptions& options) {
  if (options.m < 1) throw ConfigError("Vecchia neighbor count must be >= 1");
  const int n = static_cast<int>(pts.size());
  VecchiaStructure s;
  switch (options.ordering) {
    case VecchiaOrdering::MaxMin:
      s.ordering = maxmin_ordering(pts);
      break;
    case VecchiaOrdering::Coordinate: {
      s.ordering.resize(n);
      std::iota(s.ordering.begin(), s.ordering.end(), 0);
      std::stable_sort(s.ordering.begin(), s.ordering.end(), [&](int a, int b) {
        if (pts[a].x(0) != pts[b].x(0)) return pts[a].x(0) < pts[b].x(0);
        if (pts[a].x(1) != pts[b].x(1)) return pts[a].x(1) < pts[b].x(1);
        return pts[a].t < pts[b].t;
      });
      break;
    }
    case VecchiaOrdering::Random: {
      s.ordering.resize(n);
      std::iota(s.ordering.begin(), s.ordering.end(), 0);
      Rng rng = make_stream(options.seed, 0x5eccULL);
      std::shuffle(s.ordering.begin(), s.ordering.end(), rng);
      break;
    }
  }
  s.neighbor_sets.assign(n, {});
  std::vector<std::pair<double, int>> cand;
  for (int k = 1; k < n; ++k) {
    const int i = s.ordering[k];
    cand.clear();
    for (int q = 0; q < k; ++q) {
      const int j = s.ordering[q];
      cand.emplace_back(mapped_distance(pts[i], pts[j]), j);
    }
    const int keep = std::min<int>(options.m, k);
    std::partial_sort(cand.begin(), cand.begin() + keep, cand.end());
    auto& nb = s.neighbor_sets[i];
    nb.reserve(keep);
    for (int q = 0; q < keep; ++q) nb.push_back(cand[q].second);
  }
  return s;
}

VecchiaFactor vecchia_factor(const std::vector<MappedPoint>& pts, const VecchiaStructure& st, double variance,
                             double nu) {
  const int n = static_cast<int>(pts.size());
  VecchiaFactor f;
  f.ordering = st.ordering;
  f.neighbor_sets = st.neighbor_sets;
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(n) * 8);
  f.logdet_prec = 0.0;

  auto rho = [&](int a, int b) {
    if (a == b) return 1.0;
    return matern_correlation(std::max(mapped_distance(pts[a], pts[b]), kMinSiteDistance), nu);
  };

  for (int i = 0; i < n; ++i) {
    const auto& nb = st.neighbor_sets[i];
    const int k = static_cast<int>(nb.size());
    double v = variance;
    Eigen::VectorXd b;
    if (k > 0) {
      Eigen::MatrixXd cnn(k, k);
      Eigen::VectorXd cin(k);
      for (int a = 0; a < k; ++a) {
        cin(a) = variance * rho(i, nb[a]);
        for (int c = 0; c <= a; ++c) {
          const double val = variance * rho(nb[a], nb[c]);
          cnn(a, c) = val;
          cnn(c, a) = val;
        }
      }
      bool ok = false;
      for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
        double vi = variance;
        Eigen::MatrixXd cm = cnn;
        if (attempt == 1) {
          cm.diagonal().array() += 1e-10 * variance;
          vi += 1e-10 * variance;
        }
        Eigen::LLT<Eigen::MatrixXd> llt(cm);
        if (llt.info() != Eigen::Success) continue;
        b = llt.solve(cin);
        v = vi - cin.dot(b);
        ok = v > 1e-300 && std::isfinite(v);
      }
      if (!ok) throw NumericError("Vecchia conditional covariance is not positive definite");
    }
    const double d = 1.0 / std::sqrt(v);
    trip.emplace_back(i, i, d);
    for (int a = 0; a < k; ++a) trip.emplace_back(nb[a], i, -b(a) * d);
    f.logdet_prec += 2.0 * std::log(d);
  }
  f.U.resize(n, n);
  f.U.setFromTriplets(trip.begin(), trip.end());
  f.U.makeCompressed();
  return f;
}

VecchiaFactor vecchia_factor(std::span<const SpaceTimePoint> sites, const KernelParams& params, CoordMode mode,
                             const VecchiaOptions& options) {
  params.validate();
  const auto pts = map_points(sites, params, mode);
  return vecchia_factor(pts, vecchia_structure(pts, options), params.variance, params.nu());
}

Eigen::SparseMatrix<double> VecchiaFactor::precision() const {
  Eigen::SparseMatrix<double> p = U * U.transpose();
  p.makeCompressed();
  return p;
}

double VecchiaFactor::loglik(const Eigen::VectorXd& a) const {
  const Eigen::VectorXd u = apply_ut(a);
  return -0.5 * (static_cast<double>(a.size()) * std::log(2.0 * std::numbers::pi) - logdet_prec + u.squaredNorm());
}

CgResult cg_solve(const LinearOperator& apply_a, const Eigen::VectorXd& b, double rel_tol, int max_iterations,
                  const Eigen::VectorXd* jacobi) {
  const Eigen::Index n = b.size();
  CgResult res;
  res.x = Eigen::VectorXd::Zero(n);
  const double bnorm = b.norm();
  if (bnorm == 0.0) return res;
  const int cap = max_iterations > 0 ? max_iterations : static_cast<int>(std::max<Eigen::Index>(n, 1));
  auto precond = [&](const Eigen::VectorXd& r) -> Eigen::VectorXd {
    if (jacobi == nullptr) return r;
    return r.cwiseQuotient(*jacobi);
  };

  Eigen::VectorXd r = b;
  Eigen::VectorXd z = precond(r);
  Eigen::VectorXd p = z;
  double rz = r.dot(z);
  for (int it = 1; it <= cap; ++it) {
    const Eigen::VectorXd ap = apply_a(p);
    const double pap = p.dot(ap);
    if (!std::isfinite(pap) || pap <= 0.0) throw NumericError("CG: operator is not positive definite");
    const double step = rz / pap;
    res.x += step * p;
    r -= step * ap;
    const double rn = r.norm();
    if (!std::isfinite(rn)) throw NumericError("CG: NaN in residual");
    res.iterations = it;
    if (rn <= rel_tol * bnorm) {
      // confirm with the true residual; the recurrence drifts in finite precision
      r = b - apply_a(res.x);
      const double true_rn = r.norm();
      if (true_rn <= rel_tol * bnorm) {
        res.relative_residual = true_rn / bnorm;
        return res;
      }
      z = precond(r);
      p = z;
      rz = r.dot(z);
      continue;
    }
    z = precond(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  res.relative_residual = (b - apply_a(res.x)).norm() / bnorm;
  if (res.relative_residual <= rel_tol) return res;
  throw NumericError("CG did not converge within the iteration cap");
}

Eigen::MatrixXd dense_from_operator(const LinearOperator& apply, Eigen::Index dim) {
  Eigen::MatrixXd m(dim, dim);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(dim);
  for (Eigen::Index j = 0; j < dim; ++j) {
    e(j) = 1.0;
    m.col(j) = apply(e);
    e(j) = 0.0;
  }
  return 0.5 * (m + m.transpose());
}

namespace {

// Lanczos with full re-orthogonalization. After every step `visit(k)` is
// called with the k x k tridiagonal available in alpha[0..k), beta[0..k-1);
// returning true stops the process.
struct LanczosRun {
  std::vector<Eigen::VectorXd> basis;
  std::vector<double> alpha;
  std::vector<double> beta;
  bool invariant = false;

  template <typename Visit>
  void run(const LinearOperator& apply, const Eigen::VectorXd& start_unit, Eigen::Index dim, Visit&& visit) {
    basis.clear();
    alpha.clear();
    beta.clear();
    invariant = false;
    basis.push_back(start_unit);
    double scale = 0.0;
    for (Eigen::Index k = 0; k < dim; ++k) {
      Eigen::VectorXd w = apply(basis[k]);
      const double a = basis[k].dot(w);
      if (!std::isfinite(a)) throw NumericError("Lanczos: non-finite operator output");
      alpha.push_back(a);
      scale = std::max(scale, std::abs(a));
      w -= a * basis[k];
      if (k > 0) w -= beta[k - 1] * basis[k - 1];
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto& q : basis) w -= q.dot(w) * q;
      }
      const double bn = w.norm();
      const bool stop = visit(static_cast<int>(k + 1));
      if (stop) return;
      if (bn <= 1e-13 * std::max(scale, 1e-300)) {
        invariant = true;
        return;
      }
      if (k + 1 == dim) return;
      beta.push_back(bn);
      basis.push_back(w / bn);
    }
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> tri_eigen(int k) const {
    Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(alpha.data(), k);
    Eigen::VectorXd e = k > 1 ? Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(beta.data(), k - 1))
                              : Eigen::VectorXd(0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(d, e, Eigen::ComputeEigenvectors);
    return es;
  }

  Eigen::VectorXd combine(const Eigen::VectorXd& coef) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(basis[0].size());
    for (Eigen::Index j = 0; j < coef.size(); ++j) out += coef(j) * basis[j];
    return out;
  }
};

Eigen::VectorXd dense_sqrt_sample(const LinearOperator& apply_precision, Eigen::Index dim, const Eigen::VectorXd& w) {
  const Eigen::MatrixXd q = dense_from_operator(apply_precision, dim);
  Eigen::LLT<Eigen::MatrixXd> llt(q);
  if (llt.info() != Eigen::Success) throw NumericError("precision matrix is not positive definite");
  // Q = L L^T, x = L^{-T} w has covariance Q^{-1}
  return llt.matrixU().solve(w);
}

}  // namespace

Eigen::VectorXd lanczos_sqrt_sample(const LinearOperator& apply_precision, Eigen::Index dim, Rng& rng,
                                    const LanczosOptions& options) {
  const Eigen::VectorXd w = standard_normal(dim, rng);
  const double wn = w.norm();
  if (dim == 0 || wn == 0.0) return Eigen::VectorXd::Zero(dim);

  LanczosRun lz;
  Eigen::VectorXd current;
  Eigen::VectorXd previous;
  bool bad_spectrum = false;
  auto sample_at = [&](int k) -> Eigen::VectorXd {
    auto es = lz.tri_eigen(k);
    const Eigen::VectorXd th = es.eigenvalues();
    if (th.minCoeff() <= 0.0) {
      bad_spectrum = true;
      return {};
    }
    const Eigen::MatrixXd& s = es.eigenvectors();
    const Eigen::VectorXd coef = s * (th.cwiseSqrt().cwiseInverse().asDiagonal() * s.row(0).transpose());
    return wn * lz.combine(coef);
  };
  int last_k = 0;
  lz.run(apply_precision, w / wn, dim, [&](int k) {
    last_k = k;
    if (k % 10 != 0) return false;
    previous = std::move(current);
    current = sample_at(k);
    if (bad_spectrum) return true;
    return previous.size() == current.size() && previous.size() > 0 &&
           (current - previous).lpNorm<Eigen::Infinity>() <= options.sample_tol;
  });
  if (!bad_spectrum && (lz.invariant || last_k == dim || last_k % 10 != 0)) {
    current = sample_at(last_k);
  }
  if (bad_spectrum) {
    if (dim <= options.dense_fallback_max_dim) {
      spdlog::debug("Lanczos sampler breakdown, using dense factorization (dim {})", dim);
      return dense_sqrt_sample(apply_precision, dim, w);
    }
    throw NumericError("Lanczos sampler breakdown");
  }
  return current;
}

double lanczos_quadform(const LinearOperator& apply_m, const Eigen::VectorXd& v, const LanczosOptions& options) {
  const double vn2 = v.squaredNorm();
  if (vn2 == 0.0) return 0.0;
  LanczosRun lz;
  double est = 0.0;
  double prev = std::numeric_limits<double>::quiet_NaN();
  bool bad = false;
  lz.run(apply_m, v / std::sqrt(vn2), v.size(), [&](int k) {
    auto es = lz.tri_eigen(k);
    const Eigen::VectorXd th = es.eigenvalues();
    if (th.minCoeff() <= 0.0) {
      bad = true;
      return true;
    }
    const Eigen::VectorXd s0 = es.eigenvectors().row(0).transpose();
    est = vn2 * (s0.array().square() / th.array()).sum();
    const bool done = std::isfinite(prev) && std::abs(est - prev) <= options.quadform_tol * std::abs(est);
    prev = est;
    return done;
  });
  if (bad) {
    if (v.size() <= options.dense_fallback_max_dim) {
      const Eigen::MatrixXd m = dense_from_operator(apply_m, v.size());
      Eigen::LLT<Eigen::MatrixXd> llt(m);
      if (llt.info() != Eigen::Success) throw NumericError("quadform: matrix is not positive definite");
      return v.dot(llt.solve(v));
    }
    throw NumericError("Lanczos quadrature breakdown");
  }
  return est;
}

double logdet_hutchinson(const LinearOperator& apply_m, Eigen::Index dim, int n_probes, Rng& rng,
                         const LanczosOptions& options) {
  if (n_probes < 1) throw ConfigError("logdet estimator needs at least one probe");
  if (dim == 0) return 0.0;
  std::bernoulli_distribution coin(0.5);
  double total = 0.0;
  for (int probe = 0; probe < n_probes; ++probe) {
    Eigen::VectorXd z(dim);
    for (Eigen::Index i = 0; i < dim; ++i) z(i) = coin(rng) ? 1.0 : -1.0;
    const double zn2 = z.squaredNorm();
    LanczosRun lz;
    double est = 0.0;
    double prev = std::numeric_limits<double>::quiet_NaN();
    bool bad = false;
    lz.run(apply_m, z / std::sqrt(zn2), dim, [&](int k) {
      auto es = lz.tri_eigen(k);
      const Eigen::VectorXd th = es.eigenvalues();
      if (th.minCoeff() <= 0.0) {
        bad = true;
        return true;
      }
      const Eigen::VectorXd s0 = es.eigenvectors().row(0).transpose();
      est = zn2 * (s0.array().square() * th.array().log()).sum();
      const bool done = std::isfinite(prev) && std::abs(est - prev) <= options.logdet_tol * std::max(1.0, std::abs(est));
      prev = est;
      return done;
    });
    if (bad) throw NumericError("stochastic Lanczos quadrature breakdown");
    total += est;
  }
  return total / n_probes;
}

}  // namespace fcmix
