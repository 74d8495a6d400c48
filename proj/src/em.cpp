#include "fcmix/em.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_min.h>
#include <gsl/gsl_multimin.h>
#include <spdlog/spdlog.h>

#include "fcmix/errors.hpp"
#include "fcmix/parallel.hpp"
#include "fcmix/selection.hpp"

namespace fcmix {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kMinMass = 1e-8;

std::uint64_t tag(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (; *s != 0; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001b3ULL;
  return h;
}

void quiet_gsl() {
  static std::once_flag once;
  std::call_once(once, [] { gsl_set_error_handler_off(); });
}

// (A + pen)^-1 rhs with a one-time ridge fallback; also returns tr((A + pen)^-1 A).
struct PenalizedSolve {
  Eigen::VectorXd x;
  double dof = 0.0;
};

PenalizedSolve solve_penalized(const Eigen::MatrixXd& data, const Eigen::MatrixXd& pen, const Eigen::VectorXd& rhs,
                               const std::string& what) {
  Eigen::MatrixXd a = data + pen;
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) {
    const double ridge = 1e-10 * std::max(a.trace(), 1e-300);
    spdlog::debug("{}: normal equations singular, adding ridge {:.3g}", what, ridge);
    a.diagonal().array() += ridge;
    llt.compute(a);
    if (llt.info() != Eigen::Success) throw NumericError(what + ": normal equations are singular");
  }
  PenalizedSolve out;
  out.x = llt.solve(rhs);
  out.dof = llt.solve(data).trace();
  return out;
}

Eigen::VectorXd softmax_row(const Eigen::RowVectorXd& v) {
  const double m = v.maxCoeff();
  Eigen::VectorXd p = (v.array() - m).exp().transpose();
  return p / p.sum();
}

int draw_categorical(const Eigen::VectorXd& p, Rng& rng) {
  double u = uniform01(rng);
  const int G = static_cast<int>(p.size());
  for (int g = 0; g < G - 1; ++g) {
    u -= p(g);
    if (u < 0.0) return g;
  }
  return G - 1;
}

LabelField argmax_labels(const Eigen::MatrixXd& probs) {
  LabelField z(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) probs.row(i).maxCoeff(&z[i]);
  return z;
}

double spatial_diameter(std::span<const SpaceTimePoint> sites, CoordMode mode) {
  KernelParams unit;
  unit.range_x = 1.0;
  const auto pts = map_points(sites, unit, mode);
  double d = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) d = std::max(d, (pts[i].x - pts[j].x).norm());
  }
  return d;
}

double time_span(std::span<const SpaceTimePoint> sites) {
  if (sites.empty()) return 0.0;
  auto [lo, hi] = std::minmax_element(sites.begin(), sites.end(),
                                      [](const auto& a, const auto& b) { return a.t < b.t; });
  return hi->t - lo->t;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m, bool inverse) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  if (inverse) d = d.cwiseInverse();
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

// Leading q eigenfunctions of a coefficient covariance in the metric `metric`.
void top_components(const Eigen::MatrixXd& cov, const Eigen::MatrixXd& metric, int q, Eigen::MatrixXd& theta,
                    Eigen::VectorXd& variances) {
  const Eigen::MatrixXd w = sqrt_psd(metric, false);
  const Eigen::MatrixXd wi = sqrt_psd(metric, true);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w * cov * w);
  const int n = static_cast<int>(cov.rows());
  theta.resize(n, q);
  variances.resize(q);
  for (int j = 0; j < q; ++j) {
    const int src = n - 1 - j;
    theta.col(j) = wi * es.eigenvectors().col(src);
    variances(j) = std::max(es.eigenvalues()(src), 1e-10);
    for (int r = 0; r < n; ++r) {
      if (std::abs(theta(r, j)) > 1e-14) {
        if (theta(r, j) < 0.0) theta.col(j) *= -1.0;
        break;
      }
    }
  }
}

}  // namespace

void FitConfig::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(G >= 1, "G must be >= 1");
  need(Q1 >= 0 && Q2 >= 0, "Q1 and Q2 must be >= 0");
  need(R >= 0, "R must be >= 0");
  need(n_interior_knots >= 1, "n_interior_knots must be >= 1");
  need(!domain_lo || !domain_hi || *domain_hi > *domain_lo, "domain_hi must exceed domain_lo");
  need(graph_k >= 1, "graph_k must be >= 1");
  need(graph_weights.lon >= 0 && graph_weights.lat >= 0 && graph_weights.day >= 0, "graph weights must be >= 0");
  need(T_mc >= 1, "T_mc must be >= 1");
  need(max_iters >= 0, "max_iters must be >= 0");
  need(gibbs_burn_in >= 0 && gibbs_thin >= 1, "gibbs_burn_in >= 0 and gibbs_thin >= 1 required");
  need(penalties.mean_y >= 0 && penalties.mean_x >= 0 && penalties.theta_e >= 0 && penalties.theta_x >= 0 &&
           penalties.lambda >= 0,
       "penalties must be >= 0");
  need(vecchia.m >= 1, "vecchia_m must be >= 1");
  need(kmeans_restarts >= 1, "kmeans_restarts must be >= 1");
  need(independent_em_iters >= 0, "independent_em_iters must be >= 0");
  need(interp_grid >= 2, "interp_grid must be >= 2");
  need(conv_tol > 0 && conv_window >= 1, "conv_tol > 0 and conv_window >= 1 required");
  need(dense_max_dim >= 0, "dense_max_dim must be >= 0");
  need(logdet_probes >= 1, "logdet_probes must be >= 1");
  need(trace_samples >= 1, "trace_samples must be >= 1");
  need(init_xi >= 0 && init_xi <= kMaxXi, "init_xi must lie in [0, 20]");
  need(init_range_fraction > 0, "init_range_fraction must be > 0");
  need(optimizer_max_evals >= 1, "optimizer_max_evals must be >= 1");
  need(!estimate_deformation || mode == CoordMode::Sphere, "deformation requires sphere coordinates");
  need(!estimate_smoothness || kernel_kind == KernelKind::Matern, "smoothness estimation requires a Matern kernel");
}

PosteriorOptions FitConfig::posterior_options(std::uint64_t probe_seed) const {
  PosteriorOptions o;
  o.vecchia = vecchia;
  o.dense_max_dim = dense_max_dim;
  o.logdet_probes = logdet_probes;
  o.probe_seed = probe_seed;
  return o;
}

GraphMetric graph_metric(CoordMode mode) {
  return mode == CoordMode::Sphere ? GraphMetric::LonLatDay : GraphMetric::Euclidean;
}

FitData prepare_data(std::vector<Profile> profiles, const FitConfig& config) {
  config.validate();
  if (profiles.empty()) throw DataError("no profiles");
  FitData d;
  d.K = static_cast<int>(profiles.front().x.size());
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  int with_y = 0;
  for (const auto& p : profiles) {
    if (static_cast<int>(p.x.size()) != d.K) throw DataError("profile " + p.id + ": inconsistent channel count");
    int total = 0;
    auto check = [&](const Channel& ch, const char* name) {
      if (ch.pressure.size() != ch.value.size()) {
        throw DataError("profile " + p.id + " channel " + name + ": pressure/value length mismatch");
      }
      for (std::size_t j = 0; j < ch.pressure.size(); ++j) {
        if (!std::isfinite(ch.pressure[j]) || !std::isfinite(ch.value[j])) {
          throw DataError("profile " + p.id + " channel " + name + ": non-finite measurement");
        }
        lo = std::min(lo, ch.pressure[j]);
        hi = std::max(hi, ch.pressure[j]);
      }
      total += ch.size();
    };
    check(p.y, "Y");
    for (int k = 0; k < d.K; ++k) check(p.x[k], ("X" + std::to_string(k + 1)).c_str());
    if (total == 0) throw DataError("profile " + p.id + " has no measurements");
    if (!p.y.empty()) ++with_y;
    if (!std::isfinite(p.site.x) || !std::isfinite(p.site.y) || !std::isfinite(p.site.t)) {
      throw DataError("profile " + p.id + ": non-finite site coordinates");
    }
    if (config.mode == CoordMode::Sphere) sphere_point(p.site.x, p.site.y);
  }
  if (config.Q1 > 0 && d.K == 0) throw ConfigError("Q1 > 0 requires predictor channels in the data");
  if (with_y < config.G) throw DataError("fewer profiles with response data than clusters");
  const double dlo = config.domain_lo.value_or(lo);
  const double dhi = config.domain_hi.value_or(hi);
  if (!(dhi > dlo)) throw DataError("pressure domain has zero length");
  d.basis = build_basis(dlo, dhi, config.n_interior_knots);
  for (const auto& p : profiles) {
    auto in_domain = [&](const Channel& ch) {
      for (double v : ch.pressure) {
        if (!d.basis.contains(v)) {
          std::ostringstream os;
          os << "profile " << p.id << ": pressure " << v << " outside [" << dlo << ", " << dhi << "]";
          throw DataError(os.str());
        }
      }
    };
    in_domain(p.y);
    for (const auto& ch : p.x) in_domain(ch);
  }
  d.profiles = std::move(profiles);
  d.stats = profile_stats(d.profiles, d.basis, config.R);
  d.sites.reserve(d.profiles.size());
  for (const auto& p : d.profiles) d.sites.push_back(p.site);
  if (d.n() > 1) {
    d.graph = build_graph(d.sites, std::min(config.graph_k, d.n() - 1), graph_metric(config.mode),
                          config.graph_weights);
  } else {
    d.graph.n = d.n();
    d.graph.edges.resize(d.n());
  }
  return d;
}

Moments moments_from_samples(std::span<const LatentSample> samples, int n, int G, int Q) {
  Moments mo;
  mo.pi = Eigen::MatrixXd::Zero(n, G);
  mo.m.assign(G, Eigen::MatrixXd::Zero(n, Q));
  mo.S.assign(G, std::vector<Eigen::MatrixXd>(n, Eigen::MatrixXd::Zero(Q, Q)));
  for (const auto& s : samples) {
    const double w = s.norm_weight;
    if (w == 0.0) continue;
    for (int i = 0; i < n; ++i) {
      const int g = s.z[i];
      mo.pi(i, g) += w;
      if (Q == 0) continue;
      const Eigen::VectorXd u = s.scores.row(i).transpose();
      mo.m[g].row(i) += w * u.transpose();
      mo.S[g][i].noalias() += w * u * u.transpose();
    }
  }
  return mo;
}

Eigen::MatrixXd label_probabilities(std::span<const LatentSample> samples, int n, int G) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, G);
  for (const auto& s : samples) {
    for (int i = 0; i < n; ++i) p(i, s.z[i]) += s.norm_weight;
  }
  return p;
}

// ---------------------------------------------------------------------------
// M-step

namespace {

struct Context {
  const FitData& data;
  Moments& mo;
  ModelParams& omega;
  int P, D, Q, Q1, K, n;
};

double channel_penalty(const ModelParams& omega, int c, int l) {
  if (l < 0) return c == 0 ? omega.penalties.mean_y : omega.penalties.mean_x;
  if (c > 0) return omega.penalties.theta_x;
  return l < omega.Q1 ? omega.penalties.lambda : omega.penalties.theta_e;
}

std::string block_name(int g, int c, int l, int Q1) {
  std::ostringstream os;
  if (l < 0) {
    os << (c == 0 ? "mean_y" : "mean_x" + std::to_string(c));
  } else if (c > 0) {
    os << "theta_x" << c << "_" << l + 1;
  } else if (l < Q1) {
    os << "lambda_" << l + 1;
  } else {
    os << "theta_e_" << l - Q1 + 1;
  }
  os << "[" << g + 1 << "]";
  return os.str();
}

BlockDof update_mean(Context& cx, int g, int c) {
  const int P = cx.P, D = cx.D;
  const double s2 = channel_noise(cx.omega, c);
  const Eigen::MatrixXd C = channel_loading(cx.omega, g, c);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(P * D, P * D);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(P * D);
  for (int i = 0; i < cx.n; ++i) {
    const double p = cx.mo.pi(i, g);
    const ChannelStats& cs = channel(cx.data.stats[i], c);
    if (p == 0.0 || cs.n == 0) continue;
    const Eigen::VectorXd& delta = cx.data.stats[i].delta;
    Eigen::VectorXd a = p * cs.bty;
    if (cx.Q > 0) a.noalias() -= cs.btb * (C * cx.mo.m[g].row(i).transpose());
    if (D == 1) {
      A.noalias() += (p / s2) * cs.btb;
      rhs.noalias() += a / s2;
      continue;
    }
    const Eigen::MatrixXd dd = delta * delta.transpose();
    for (int r = 0; r < P; ++r) {
      rhs.segment(r * D, D) += (a(r) / s2) * delta;
      for (int s = 0; s < P; ++s) {
        const double v = cs.btb(r, s);
        if (v != 0.0) A.block(r * D, s * D, D, D) += (p * v / s2) * dd;
      }
    }
  }
  Eigen::MatrixXd pen = Eigen::MatrixXd::Zero(P * D, P * D);
  const double lam = channel_penalty(cx.omega, c, -1);
  for (int r = 0; r < P; ++r) {
    for (int s = 0; s < P; ++s) {
      for (int d = 0; d < D; ++d) pen(r * D + d, s * D + d) = lam * cx.omega.basis.penalty()(r, s);
    }
  }
  const std::string name = block_name(g, c, -1, cx.Q1);
  const auto sol = solve_penalized(A, pen, rhs, name);
  auto& cl = cx.omega.clusters[g];
  Eigen::MatrixXd ups(P, D);
  for (int r = 0; r < P; ++r) ups.row(r) = sol.x.segment(r * D, D).transpose();
  if (c == 0) {
    cl.upsilon_y = ups;
  } else {
    cl.upsilon_x.middleRows((c - 1) * P, P) = ups;
  }
  return {name, sol.dof};
}

BlockDof update_column(Context& cx, int g, int c, int l) {
  const int P = cx.P;
  const double s2 = channel_noise(cx.omega, c);
  const Eigen::MatrixXd C = channel_loading(cx.omega, g, c);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(P, P);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(P);
  for (int i = 0; i < cx.n; ++i) {
    const ChannelStats& cs = channel(cx.data.stats[i], c);
    if (cx.mo.pi(i, g) == 0.0 || cs.n == 0) continue;
    const Eigen::MatrixXd& S = cx.mo.S[g][i];
    const Eigen::VectorXd mu = channel_mean(cx.omega, g, c, cx.data.stats[i].delta);
    Eigen::VectorXd others = C * S.col(l) - C.col(l) * S(l, l);
    A.noalias() += (S(l, l) / s2) * cs.btb;
    rhs.noalias() += (cx.mo.m[g](i, l) * (cs.bty - cs.btb * mu) - cs.btb * others) / s2;
  }
  const std::string name = block_name(g, c, l, cx.Q1);
  const auto sol = solve_penalized(A, channel_penalty(cx.omega, c, l) * cx.omega.basis.penalty(), rhs, name);
  auto& cl = cx.omega.clusters[g];
  if (c > 0) {
    cl.theta_x.block((c - 1) * P, l, P, 1) = sol.x;
  } else if (l < cx.Q1) {
    cl.lambda.col(l) = sol.x;
  } else {
    cl.theta_e.col(l - cx.Q1) = sol.x;
  }
  return {name, sol.dof};
}

void update_noise(Context& cx, int c) {
  double rss = 0.0;
  double yty = 0.0;
  long n_obs = 0;
  std::vector<Eigen::MatrixXd> loads(cx.omega.G);
  for (int g = 0; g < cx.omega.G; ++g) loads[g] = channel_loading(cx.omega, g, c);
  for (int i = 0; i < cx.n; ++i) {
    const ChannelStats& cs = channel(cx.data.stats[i], c);
    if (cs.n == 0) continue;
    n_obs += cs.n;
    yty += cs.yty;
    for (int g = 0; g < cx.omega.G; ++g) {
      const double p = cx.mo.pi(i, g);
      if (p == 0.0) continue;
      const Eigen::VectorXd mu = channel_mean(cx.omega, g, c, cx.data.stats[i].delta);
      const Eigen::VectorXd btbmu = cs.btb * mu;
      rss += p * (cs.yty - 2.0 * mu.dot(cs.bty) + mu.dot(btbmu));
      if (cx.Q > 0) {
        const Eigen::MatrixXd& Cg = loads[g];
        rss -= 2.0 * (cs.bty - btbmu).dot(Cg * cx.mo.m[g].row(i).transpose());
        rss += (Cg.transpose() * cs.btb * Cg).cwiseProduct(cx.mo.S[g][i]).sum();
      }
    }
  }
  if (n_obs == 0) return;
  const double floor = 1e-12 * std::max(yty / n_obs, 1e-300);
  const double s2 = std::max(rss / n_obs, floor);
  if (c == 0) {
    cx.omega.sigma2_y = s2;
  } else {
    cx.omega.sigma2_x[c - 1] = s2;
  }
}

// Weighted Vecchia likelihood of sampled score fields for one component,
// with the variance profiled out.
struct FieldGroup {
  std::vector<SpaceTimePoint> sites;
  std::vector<double> weights;
  std::vector<Eigen::VectorXd> values;
  VecchiaStructure structure;
};

struct ProfiledFit {
  double objective = -std::numeric_limits<double>::infinity();
  double variance = 1.0;
};

ProfiledFit profiled_loglik(const std::vector<FieldGroup>& groups, const KernelParams& trial, CoordMode mode) {
  double sw_q = 0.0, sw_n = 0.0, sw_ld = 0.0;
  for (const auto& grp : groups) {
    const auto pts = map_points(grp.sites, trial, mode);
    const VecchiaFactor f = vecchia_factor(pts, grp.structure, 1.0, trial.nu());
    for (std::size_t t = 0; t < grp.values.size(); ++t) {
      const double w = grp.weights[t];
      sw_q += w * f.apply_ut(grp.values[t]).squaredNorm();
      sw_n += w * static_cast<double>(grp.values[t].size());
      sw_ld += w * f.logdet_prec;
    }
  }
  ProfiledFit out;
  if (sw_n <= 0.0) return out;
  out.variance = std::max(sw_q / sw_n, 1e-300);
  out.objective = -0.5 * (sw_n * std::log(out.variance) - sw_ld + sw_n);
  return out;
}

// Free kernel parameters in an unconstrained parameterization.
struct KernelFreeParams {
  bool range_t = false;
  bool smoothness = false;
  bool deform = false;
  double lo_x = 0, hi_x = 0, lo_t = 0, hi_t = 0;

  int size() const { return 1 + (range_t ? 1 : 0) + (smoothness ? 1 : 0) + (deform ? 5 : 0); }

  std::vector<double> pack(const KernelParams& k) const {
    std::vector<double> v{std::log(k.range_x)};
    if (range_t) v.push_back(std::log(k.range_t));
    if (smoothness) {
      const double u = (k.smoothness - kMinSmoothness) / (kMaxSmoothness - kMinSmoothness);
      const double c = std::clamp(u, 1e-6, 1.0 - 1e-6);
      v.push_back(std::log(c / (1.0 - c)));
    }
    if (deform) v.insert(v.end(), k.deform.begin(), k.deform.end());
    return v;
  }

  KernelParams unpack(std::span<const double> v, KernelParams k) const {
    std::size_t j = 0;
    k.range_x = std::exp(std::clamp(v[j++], lo_x, hi_x));
    if (range_t && j < v.size()) k.range_t = std::exp(std::clamp(v[j++], lo_t, hi_t));
    if (smoothness && j < v.size()) {
      const double s = 1.0 / (1.0 + std::exp(-v[j++]));
      k.smoothness = kMinSmoothness + s * (kMaxSmoothness - kMinSmoothness);
    }
    if (deform && j + 5 <= v.size()) {
      for (int a = 0; a < 5; ++a) k.deform[a] = std::clamp(v[j++], -2.0, 2.0);
    }
    return k;
  }
};

struct OptimizerData {
  const std::vector<FieldGroup>* groups;
  const KernelFreeParams* free;
  KernelParams base;
  CoordMode mode;
  int evals = 0;
};

double negative_objective(std::span<const double> v, OptimizerData& od) {
  ++od.evals;
  const KernelParams trial = od.free->unpack(v, od.base);
  const double f = profiled_loglik(*od.groups, trial, od.mode).objective;
  return std::isfinite(f) ? -f : 1e300;
}

double gsl_min_target(double x, void* p) {
  return negative_objective(std::span<const double>(&x, 1), *static_cast<OptimizerData*>(p));
}

double gsl_multimin_target(const gsl_vector* x, void* p) {
  auto* od = static_cast<OptimizerData*>(p);
  std::vector<double> v(x->size);
  for (std::size_t j = 0; j < x->size; ++j) v[j] = gsl_vector_get(x, j);
  return negative_objective(v, *od);
}

KernelParams optimize_kernel(const std::vector<FieldGroup>& groups, const KernelParams& start, CoordMode mode,
                             const KernelFreeParams& free, int max_evals) {
  quiet_gsl();
  OptimizerData od{&groups, &free, start, mode, 0};
  std::vector<double> best = free.pack(start);
  best[0] = std::clamp(best[0], free.lo_x, free.hi_x);

  if (free.size() == 1) {
    // coarse log grid, then Brent inside the bracket around the best point
    constexpr int kGrid = 13;
    std::vector<double> xs(kGrid), fs(kGrid);
    for (int j = 0; j < kGrid; ++j) {
      xs[j] = free.lo_x + (free.hi_x - free.lo_x) * j / (kGrid - 1);
      fs[j] = negative_objective(std::span<const double>(&xs[j], 1), od);
    }
    const int b = static_cast<int>(std::min_element(fs.begin(), fs.end()) - fs.begin());
    double x = xs[b];
    if (b > 0 && b < kGrid - 1 && fs[b] < fs[b - 1] && fs[b] < fs[b + 1]) {
      gsl_min_fminimizer* m = gsl_min_fminimizer_alloc(gsl_min_fminimizer_brent);
      gsl_function fn{&gsl_min_target, &od};
      if (gsl_min_fminimizer_set_with_values(m, &fn, xs[b], fs[b], xs[b - 1], fs[b - 1], xs[b + 1], fs[b + 1]) ==
          GSL_SUCCESS) {
        while (od.evals < max_evals) {
          if (gsl_min_fminimizer_iterate(m) != GSL_SUCCESS) break;
          const double lo = gsl_min_fminimizer_x_lower(m);
          const double hi = gsl_min_fminimizer_x_upper(m);
          if (gsl_min_test_interval(lo, hi, 1e-4, 0.0) == GSL_SUCCESS) break;
        }
        x = gsl_min_fminimizer_x_minimum(m);
      }
      gsl_min_fminimizer_free(m);
    }
    return free.unpack(std::span<const double>(&x, 1), start);
  }

  const int dim = free.size();
  gsl_multimin_fminimizer* m = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, dim);
  gsl_vector* x0 = gsl_vector_alloc(dim);
  gsl_vector* step = gsl_vector_alloc(dim);
  for (int j = 0; j < dim; ++j) {
    gsl_vector_set(x0, j, best[j]);
    gsl_vector_set(step, j, 0.5);
  }
  gsl_multimin_function fn{&gsl_multimin_target, static_cast<std::size_t>(dim), &od};
  gsl_multimin_fminimizer_set(m, &fn, x0, step);
  while (od.evals < max_evals) {
    if (gsl_multimin_fminimizer_iterate(m) != GSL_SUCCESS) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(m), 1e-4) == GSL_SUCCESS) break;
  }
  const gsl_vector* xm = gsl_multimin_fminimizer_x(m);
  std::vector<double> xv(dim);
  for (int j = 0; j < dim; ++j) xv[j] = gsl_vector_get(xm, j);
  gsl_vector_free(x0);
  gsl_vector_free(step);
  gsl_multimin_fminimizer_free(m);
  return free.unpack(xv, start);
}

void update_kernels(const FitData& data, std::span<const LatentSample> samples, ModelParams& omega,
                    const FitConfig& config) {
  const int Q = omega.Q();
  if (Q == 0 || samples.empty()) return;
  const double diam = spatial_diameter(data.sites, omega.mode);
  const double tspan = time_span(data.sites);

  // one group per distinct member set, per cluster
  std::vector<std::vector<std::vector<int>>> member_sets(omega.G);
  std::vector<std::vector<std::vector<std::pair<int, double>>>> uses(omega.G);
  for (int g = 0; g < omega.G; ++g) {
    std::map<std::vector<int>, int> index;
    for (int t = 0; t < static_cast<int>(samples.size()); ++t) {
      if (samples[t].norm_weight == 0.0) continue;
      std::vector<int> members;
      for (int i = 0; i < data.n(); ++i) {
        if (samples[t].z[i] == g) members.push_back(i);
      }
      if (members.empty()) continue;
      auto [it, fresh] = index.try_emplace(members, static_cast<int>(member_sets[g].size()));
      if (fresh) {
        member_sets[g].push_back(members);
        uses[g].emplace_back();
      }
      uses[g][it->second].emplace_back(t, samples[t].norm_weight);
    }
  }

  std::vector<std::pair<int, int>> jobs;
  for (int g = 0; g < omega.G; ++g) {
    for (int q = 0; q < Q; ++q) {
      if (!member_sets[g].empty()) jobs.emplace_back(g, q);
    }
  }
  parallel_for(static_cast<int>(jobs.size()), [&](int j) {
    const auto [g, q] = jobs[j];
    KernelParams& kern = omega.clusters[g].kernel(q);
    std::vector<FieldGroup> groups;
    int max_sites = 0;
    for (std::size_t s = 0; s < member_sets[g].size(); ++s) {
      FieldGroup grp;
      const auto& members = member_sets[g][s];
      for (int i : members) grp.sites.push_back(data.sites[i]);
      for (const auto& [t, w] : uses[g][s]) {
        Eigen::VectorXd a(members.size());
        for (std::size_t k = 0; k < members.size(); ++k) a(k) = samples[t].scores(members[k], q);
        grp.values.push_back(std::move(a));
        grp.weights.push_back(w);
      }
      grp.structure = vecchia_structure(map_points(grp.sites, kern, omega.mode), config.vecchia);
      max_sites = std::max(max_sites, static_cast<int>(members.size()));
      groups.push_back(std::move(grp));
    }
    KernelParams next = kern;
    if (max_sites >= 2 && diam > 0.0) {
      KernelFreeParams free;
      free.lo_x = std::log(1e-3 * diam);
      free.hi_x = std::log(10.0 * diam);
      free.range_t = tspan > 0.0;
      if (free.range_t) {
        free.lo_t = std::log(1e-3 * tspan);
        free.hi_t = std::log(10.0 * tspan);
      }
      free.smoothness = config.estimate_smoothness;
      free.deform = config.estimate_deformation;
      next = optimize_kernel(groups, kern, omega.mode, free, config.optimizer_max_evals);
    }
    const ProfiledFit pf = profiled_loglik(groups, next, omega.mode);
    next.variance = std::max(pf.variance, 1e-12);
    kern = next;
  });
}

}  // namespace

std::vector<BlockDof> m_step(const FitData& data, Moments& mo, std::vector<LatentSample>& samples, ModelParams& omega,
                             const FitConfig& config, const MStepOptions& options) {
  Context cx{data, mo, omega, omega.P(), omega.D(), omega.Q(), omega.Q1, omega.K, data.n()};
  std::vector<BlockDof> dof;
  std::vector<bool> active(omega.G, false);
  for (int g = 0; g < omega.G; ++g) {
    const double mass = mo.pi.col(g).sum();
    if (mass < kMinMass) {
      spdlog::warn("cluster {} has no assigned profiles; its parameters are left unchanged", g + 1);
      continue;
    }
    active[g] = true;
    for (int c = 0; c <= cx.K; ++c) dof.push_back(update_mean(cx, g, c));
    for (int l = 0; l < cx.Q1; ++l) dof.push_back(update_column(cx, g, 0, l));
    for (int l = 0; l < cx.Q1; ++l) {
      for (int c = 1; c <= cx.K; ++c) dof.push_back(update_column(cx, g, c, l));
    }
    for (int l = cx.Q1; l < cx.Q; ++l) dof.push_back(update_column(cx, g, 0, l));
  }
  for (int c = 0; c <= cx.K; ++c) update_noise(cx, c);

  if (cx.Q > 0) {
    for (int g = 0; g < omega.G; ++g) {
      if (!active[g]) continue;
      auto& cl = omega.clusters[g];
      const double mass = mo.pi.col(g).sum();
      Eigen::MatrixXd sg = Eigen::MatrixXd::Zero(cx.Q, cx.Q);
      for (int i = 0; i < cx.n; ++i) sg += mo.S[g][i];
      sg /= mass;
      const auto o = orthonormalize(cl.theta_x, cl.theta_e, cl.lambda, sg.topLeftCorner(cx.Q1, cx.Q1),
                                    sg.bottomRightCorner(omega.Q2, omega.Q2), omega.basis.gram());
      cl.theta_x = o.theta_x;
      cl.theta_e = o.theta_e;
      cl.lambda = o.lambda;
      Eigen::MatrixXd rot = Eigen::MatrixXd::Zero(cx.Q, cx.Q);
      rot.topLeftCorner(cx.Q1, cx.Q1) = o.rotation_x;
      rot.bottomRightCorner(omega.Q2, omega.Q2) = o.rotation_e;
      for (int i = 0; i < cx.n; ++i) {
        mo.m[g].row(i) = (rot * mo.m[g].row(i).transpose()).transpose();
        mo.S[g][i] = rot * mo.S[g][i] * rot.transpose();
      }
      for (auto& s : samples) {
        for (int i = 0; i < cx.n; ++i) {
          if (s.z[i] == g) s.scores.row(i) = (rot * s.scores.row(i).transpose()).transpose();
        }
      }
      if (!options.update_kernels) {
        for (int q = 0; q < cx.Q1; ++q) cl.kernel(q).variance = std::max(o.variances_x(q), 1e-12);
        for (int q = 0; q < omega.Q2; ++q) cl.kernel(cx.Q1 + q).variance = std::max(o.variances_e(q), 1e-12);
      }
    }
    if (options.update_kernels) update_kernels(data, samples, omega, config);
  }

  if (options.update_xi && omega.G > 1 && !samples.empty()) {
    std::vector<LabelField> fields;
    std::vector<double> weights;
    for (const auto& s : samples) {
      fields.push_back(s.z);
      weights.push_back(s.norm_weight);
    }
    omega.xi = xi_update(fields, weights, data.graph, omega.G).xi;
  }
  return dof;
}

// ---------------------------------------------------------------------------
// Initialization

LabelField kmeans(const Eigen::MatrixXd& x, int G, int restarts, Rng& rng, int max_iter) {
  const int n = static_cast<int>(x.rows());
  if (n < G) throw DataError("fewer profiles than clusters");
  double best_inertia = std::numeric_limits<double>::infinity();
  LabelField best;
  int attempts = 0;
  int good = 0;
  while (good < restarts && attempts < restarts + 5) {
    ++attempts;
    Eigen::MatrixXd centers(G, x.cols());
    std::uniform_int_distribution<int> pick(0, n - 1);
    centers.row(0) = x.row(pick(rng));
    Eigen::VectorXd d2 = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    for (int c = 1; c < G; ++c) {
      for (int i = 0; i < n; ++i) d2(i) = std::min(d2(i), (x.row(i) - centers.row(c - 1)).squaredNorm());
      const double total = d2.sum();
      int chosen = pick(rng);
      if (total > 0.0) {
        double u = uniform01(rng) * total;
        for (chosen = 0; chosen < n - 1; ++chosen) {
          u -= d2(chosen);
          if (u < 0.0) break;
        }
      }
      centers.row(c) = x.row(chosen);
    }
    LabelField z(n, -1);
    bool empty = false;
    for (int it = 0; it < max_iter; ++it) {
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        int arg = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int c = 0; c < G; ++c) {
          const double d = (x.row(i) - centers.row(c)).squaredNorm();
          if (d < bd) {
            bd = d;
            arg = c;
          }
        }
        if (z[i] != arg) {
          z[i] = arg;
          changed = true;
        }
      }
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(G, x.cols());
      Eigen::VectorXi counts = Eigen::VectorXi::Zero(G);
      for (int i = 0; i < n; ++i) {
        sums.row(z[i]) += x.row(i);
        ++counts(z[i]);
      }
      empty = counts.minCoeff() == 0;
      if (empty) break;
      for (int c = 0; c < G; ++c) centers.row(c) = sums.row(c) / counts(c);
      if (!changed) break;
    }
    if (empty) continue;
    ++good;
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) inertia += (x.row(i) - centers.row(z[i])).squaredNorm();
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best = z;
    }
  }
  if (best.empty()) throw DataError("k-means produced an empty cluster on every restart");
  return best;
}

Eigen::MatrixXd interpolated_features(const FitData& data, int grid_points) {
  const int n = data.n();
  const int C = data.K + 1;
  const double lo = data.basis.domain_lo();
  const double hi = data.basis.domain_hi();
  Eigen::MatrixXd f = Eigen::MatrixXd::Constant(n, C * grid_points, std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < C; ++c) {
      const Channel& ch = c == 0 ? data.profiles[i].y : data.profiles[i].x[c - 1];
      if (ch.empty()) continue;
      std::vector<std::pair<double, double>> pts;
      for (int j = 0; j < ch.size(); ++j) pts.emplace_back(ch.pressure[j], ch.value[j]);
      std::sort(pts.begin(), pts.end());
      for (int k = 0; k < grid_points; ++k) {
        const double p = lo + (hi - lo) * k / (grid_points - 1);
        double v;
        if (p <= pts.front().first) {
          v = pts.front().second;
        } else if (p >= pts.back().first) {
          v = pts.back().second;
        } else {
          auto it = std::upper_bound(pts.begin(), pts.end(), std::make_pair(p, -std::numeric_limits<double>::infinity()));
          const auto& [p1, v1] = *it;
          const auto& [p0, v0] = *(it - 1);
          v = p1 > p0 ? v0 + (v1 - v0) * (p - p0) / (p1 - p0) : v1;
        }
        f(i, c * grid_points + k) = v;
      }
    }
  }
  // impute missing channels by the column mean, then put channels on a common scale
  for (int c = 0; c < C; ++c) {
    double ss = 0.0, s = 0.0;
    long cnt = 0;
    for (int k = 0; k < grid_points; ++k) {
      const int col = c * grid_points + k;
      double cs = 0.0;
      int cc = 0;
      for (int i = 0; i < n; ++i) {
        if (std::isnan(f(i, col))) continue;
        cs += f(i, col);
        ++cc;
      }
      const double mean = cc > 0 ? cs / cc : 0.0;
      for (int i = 0; i < n; ++i) {
        if (std::isnan(f(i, col))) f(i, col) = mean;
        s += f(i, col);
        ss += f(i, col) * f(i, col);
        ++cnt;
      }
    }
    const double var = cnt > 1 ? (ss - s * s / cnt) / (cnt - 1) : 0.0;
    if (var > 0.0) f.middleCols(c * grid_points, grid_points) /= std::sqrt(var);
  }
  return f;
}

namespace {

Moments exact_independent_moments(const FitData& data, const ModelParams& omega, Eigen::MatrixXd& probs) {
  const int n = data.n(), G = omega.G, Q = omega.Q();
  const auto terms = profile_terms_table(data.stats, omega);
  const Eigen::MatrixXd L = per_profile_loglik_table(terms, omega);
  Moments mo;
  mo.pi.resize(n, G);
  mo.m.assign(G, Eigen::MatrixXd::Zero(n, Q));
  mo.S.assign(G, std::vector<Eigen::MatrixXd>(n, Eigen::MatrixXd::Zero(Q, Q)));
  for (int i = 0; i < n; ++i) {
    mo.pi.row(i) = softmax_row(L.row(i)).transpose();
    if (Q == 0) continue;
    for (int g = 0; g < G; ++g) {
      const double p = mo.pi(i, g);
      if (p == 0.0) continue;
      const ScoreMoments sm = independent_score_moments(terms[i][g], omega.clusters[g], Q);
      mo.m[g].row(i) = p * sm.mean.transpose();
      mo.S[g][i] = p * (sm.cov + sm.mean * sm.mean.transpose());
    }
  }
  probs = mo.pi;
  return mo;
}

}  // namespace

InitResult initialize(const FitData& data, const FitConfig& config, const IterationCallback& callback) {
  config.validate();
  const int n = data.n(), G = config.G, K = data.K;
  ModelParams omega = make_params(G, config.Q1, config.Q2, config.R, K, data.basis, config.mode);
  omega.penalties = config.penalties;
  omega.xi = config.init_xi;
  const int P = omega.P(), Q = omega.Q();

  Rng rng = make_stream(config.seed, tag("kmeans"));
  const LabelField labels = kmeans(interpolated_features(data, config.interp_grid), G, config.kmeans_restarts, rng);

  // means from the hard partition with zero scores
  Moments mo;
  mo.pi = Eigen::MatrixXd::Zero(n, G);
  for (int i = 0; i < n; ++i) mo.pi(i, labels[i]) = 1.0;
  mo.m.assign(G, Eigen::MatrixXd::Zero(n, Q));
  mo.S.assign(G, std::vector<Eigen::MatrixXd>(n, Eigen::MatrixXd::Zero(Q, Q)));
  Context cx{data, mo, omega, P, omega.D(), Q, omega.Q1, K, n};
  for (int g = 0; g < G; ++g) {
    for (int c = 0; c <= K; ++c) update_mean(cx, g, c);
  }

  // penalized-spline principal components of the residual curves per cluster
  const Eigen::MatrixXd& pen = data.basis.penalty();
  const Eigen::MatrixXd& gram = data.basis.gram();
  std::vector<double> rss(K + 1, 0.0), yty(K + 1, 0.0);
  std::vector<long> nobs(K + 1, 0);
  for (int g = 0; g < G; ++g) {
    std::vector<int> members;
    for (int i = 0; i < n; ++i) {
      if (labels[i] == g) members.push_back(i);
    }
    std::vector<Eigen::MatrixXd> cov(K + 1, Eigen::MatrixXd::Zero(P, P));
    Eigen::MatrixXd cov_x = Eigen::MatrixXd::Zero(K * P, K * P);
    std::vector<std::vector<Eigen::VectorXd>> resid(K + 1, std::vector<Eigen::VectorXd>(members.size()));
    std::vector<int> count(K + 1, 0);
    for (std::size_t a = 0; a < members.size(); ++a) {
      const int i = members[a];
      Eigen::VectorXd stacked = Eigen::VectorXd::Zero(K * P);
      for (int c = 0; c <= K; ++c) {
        const ChannelStats& cs = channel(data.stats[i], c);
        resid[c][a] = Eigen::VectorXd::Zero(P);
        if (cs.n == 0) continue;
        const Eigen::VectorXd mu = channel_mean(omega, g, c, data.stats[i].delta);
        const double scale = std::max(cs.btb.trace(), 1e-12);
        Eigen::MatrixXd a_mat = cs.btb + (1e-6 * scale / std::max(pen.trace(), 1e-300)) * pen;
        a_mat.diagonal().array() += 1e-8 * scale / P;
        resid[c][a] = a_mat.ldlt().solve(cs.bty - cs.btb * mu);
        ++count[c];
        if (c == 0) {
          cov[0] += resid[0][a] * resid[0][a].transpose();
        } else {
          stacked.segment((c - 1) * P, P) = resid[c][a];
        }
      }
      if (K > 0) cov_x += stacked * stacked.transpose();
    }
    auto& cl = omega.clusters[g];
    Eigen::VectorXd var_x, var_e;
    if (config.Q1 > 0) {
      cov_x /= std::max<double>(members.size(), 1.0);
      top_components(cov_x, block_identity_kron(K, gram), config.Q1, cl.theta_x, var_x);
    }
    if (config.Q2 > 0) {
      cov[0] /= std::max(count[0], 1);
      top_components(cov[0], gram, config.Q2, cl.theta_e, var_e);
    }
    for (int q = 0; q < Q; ++q) {
      KernelParams& k = cl.kernel(q);
      k.kind = config.kernel_kind;
      k.smoothness = 0.5;
      k.variance = q < config.Q1 ? var_x(q) : var_e(q - config.Q1);
    }
    // noise from the residual after projecting on the leading components
    for (std::size_t a = 0; a < members.size(); ++a) {
      const int i = members[a];
      for (int c = 0; c <= K; ++c) {
        const ChannelStats& cs = channel(data.stats[i], c);
        if (cs.n == 0) continue;
        Eigen::MatrixXd basis_c;
        if (c == 0) {
          basis_c = cl.theta_e;
        } else if (config.Q1 > 0) {
          basis_c = cl.theta_x.middleRows((c - 1) * P, P);
        }
        Eigen::VectorXd f = channel_mean(omega, g, c, data.stats[i].delta);
        if (basis_c.cols() > 0) {
          // least-squares projection in the gram metric
          const Eigen::MatrixXd gb = basis_c.transpose() * gram * basis_c;
          f += basis_c * gb.ldlt().solve(basis_c.transpose() * gram * resid[c][a]);
        }
        rss[c] += std::max(cs.yty - 2.0 * f.dot(cs.bty) + f.dot(cs.btb * f), 0.0);
        yty[c] += cs.yty;
        nobs[c] += cs.n;
      }
    }
  }
  for (int c = 0; c <= K; ++c) {
    if (nobs[c] == 0) continue;
    const double s2 = std::max(rss[c] / nobs[c], 1e-6 * yty[c] / nobs[c] + 1e-300);
    if (c == 0) {
      omega.sigma2_y = s2;
    } else {
      omega.sigma2_x[c - 1] = s2;
    }
  }

  const double diam = spatial_diameter(data.sites, config.mode);
  const double tspan = time_span(data.sites);
  for (auto& cl : omega.clusters) {
    for (int q = 0; q < Q; ++q) {
      KernelParams& k = cl.kernel(q);
      k.range_x = diam > 0.0 ? config.init_range_fraction * diam : 1.0;
      k.range_t = tspan > 0.0 ? config.init_range_fraction * tspan : 1.0;
    }
  }

  InitResult out;
  out.label_probs = mo.pi;
  if (callback) callback({"kmeans", 0, &out.label_probs, &omega});
  std::vector<LatentSample> none;
  if (config.independent_em_iters > 0) {
    Moments em = exact_independent_moments(data, omega, out.label_probs);
    for (int it = 1; it <= config.independent_em_iters; ++it) {
      out.dof = m_step(data, em, none, omega, config, {false, false});
      em = exact_independent_moments(data, omega, out.label_probs);
      if (callback) callback({"independent", it, &out.label_probs, &omega});
    }
  }
  out.omega = std::move(omega);
  return out;
}

// ---------------------------------------------------------------------------
// E-steps

EStepResult e_step(const FitData& data, const ModelParams& omega, LabelField& z_state, const FitConfig& config,
                   Rng& rng) {
  const int n = data.n(), G = omega.G, Q = omega.Q();
  const auto terms = profile_terms_table(data.stats, omega);
  const Eigen::MatrixXd L = per_profile_loglik_table(terms, omega);
  const std::uint64_t iter_seed = child_seed(rng);

  GibbsSchedule sched{config.T_mc, config.gibbs_burn_in, config.gibbs_thin};
  Rng chain = make_stream(iter_seed, tag("chain"));
  const std::vector<LabelField> fields = sample_fields(z_state, omega.xi, data.graph, G, &L, sched, chain);
  const int T = static_cast<int>(fields.size());

  // distinct (cluster, member set) pairs across samples
  std::map<std::pair<int, std::vector<int>>, int> index;
  std::vector<std::pair<int, std::vector<int>>> keys;
  std::vector<std::vector<int>> sample_posts(T, std::vector<int>(G, -1));
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < G; ++g) {
      std::vector<int> members;
      for (int i = 0; i < n; ++i) {
        if (fields[t][i] == g) members.push_back(i);
      }
      auto key = std::make_pair(g, std::move(members));
      auto [it, fresh] = index.try_emplace(key, static_cast<int>(keys.size()));
      if (fresh) keys.push_back(it->first);
      sample_posts[t][g] = it->second;
    }
  }
  const PosteriorOptions popts = config.posterior_options(make_stream(iter_seed, tag("probes"))());
  std::vector<std::unique_ptr<ClusterPosterior>> posts(keys.size());
  parallel_for(static_cast<int>(keys.size()), [&](int k) {
    const auto& [g, members] = keys[k];
    std::vector<SpaceTimePoint> s;
    std::vector<const ProfileTerms*> tp;
    for (int i : members) {
      s.push_back(data.sites[i]);
      tp.push_back(&terms[i][g]);
    }
    posts[k] = std::make_unique<ClusterPosterior>(s, tp, omega.clusters[g], Q, omega.mode, popts);
  });

  EStepResult res;
  res.samples.resize(T);
  parallel_for(T, [&](int t) {
    LatentSample& s = res.samples[t];
    s.z = fields[t];
    s.scores = Eigen::MatrixXd::Zero(n, Q);
    Rng r = make_stream(iter_seed, static_cast<std::uint64_t>(t));
    double lw = 0.0;
    for (int g = 0; g < G; ++g) {
      const int k = sample_posts[t][g];
      const auto& members = keys[k].second;
      lw += posts[k]->loglik();
      if (Q > 0 && !members.empty()) {
        const Eigen::MatrixXd draw = posts[k]->sample(r);
        for (std::size_t a = 0; a < members.size(); ++a) s.scores.row(members[a]) = draw.row(a);
      }
    }
    for (int i = 0; i < n; ++i) lw -= L(i, s.z[i]);
    s.log_weight = lw;
  });
  std::vector<double> lws;
  for (const auto& s : res.samples) lws.push_back(s.log_weight);
  const NormalizedWeights nw = normalize_log_weights(lws);
  for (int t = 0; t < T; ++t) res.samples[t].norm_weight = nw.weights[t];
  res.ess = nw.ess;
  return res;
}

EStepResult gibbs_e_step(const FitData& data, const ModelParams& omega, GibbsState& state, const FitConfig& config,
                         Rng& rng) {
  const int n = data.n(), G = omega.G, Q = omega.Q();
  const auto terms = profile_terms_table(data.stats, omega);
  const PosteriorOptions popts = config.posterior_options(child_seed(rng));
  if (static_cast<int>(state.z.size()) != n) throw ConfigError("Gibbs state has the wrong size");
  if (state.scores.rows() != n || state.scores.cols() != Q) state.scores = Eigen::MatrixXd::Zero(n, Q);

  auto sweep = [&] {
    for (int g = 0; g < G && Q > 0; ++g) {
      std::vector<int> members;
      std::vector<SpaceTimePoint> s;
      std::vector<const ProfileTerms*> tp;
      for (int i = 0; i < n; ++i) {
        if (state.z[i] != g) continue;
        members.push_back(i);
        s.push_back(data.sites[i]);
        tp.push_back(&terms[i][g]);
      }
      if (members.empty()) continue;
      const Eigen::MatrixXd draw = ClusterPosterior(s, tp, omega.clusters[g], Q, omega.mode, popts).sample(rng);
      for (std::size_t a = 0; a < members.size(); ++a) state.scores.row(members[a]) = draw.row(a);
    }
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd logits = omega.xi * neighbor_label_weights(state.z, i, data.graph, G);
      const Eigen::VectorXd u = state.scores.row(i).transpose();
      for (int g = 0; g < G; ++g) {
        const ProfileTerms& t = terms[i][g];
        double rss = t.rdr;
        if (Q > 0) rss += -2.0 * t.b.dot(u) + u.dot(t.H * u);
        logits(g) += -0.5 * (t.n * kLog2Pi + t.logdet_noise + rss);
      }
      state.z[i] = draw_categorical(softmax_row(logits.transpose()), rng);
    }
  };

  for (int b = 0; b < config.gibbs_burn_in; ++b) sweep();
  EStepResult res;
  for (int t = 0; t < config.T_mc; ++t) {
    for (int k = 0; k < config.gibbs_thin; ++k) sweep();
    LatentSample s;
    s.z = state.z;
    s.scores = state.scores;
    s.norm_weight = 1.0 / config.T_mc;
    res.samples.push_back(std::move(s));
  }
  res.ess = config.T_mc;
  return res;
}

// ---------------------------------------------------------------------------

FitState fit(const FitData& data, const FitConfig& config, const IterationCallback& callback) {
  config.validate();
  FitState st;
  InitResult init = initialize(data, config, callback);
  st.omega = std::move(init.omega);
  st.label_probs = std::move(init.label_probs);
  st.dof = std::move(init.dof);
  st.z_state = argmax_labels(st.label_probs);

  // One stream for every iteration: common draws make consecutive estimates
  // differ mainly through the parameters, not through Monte Carlo noise.
  auto record_trace = [&]() {
    Rng r = make_stream(config.seed, tag("trace"));
    const auto popts = config.posterior_options(make_stream(config.seed, tag("trace-probes"))());
    const LoglikEstimate est =
        is2_loglik(data, st.omega, config.trace_samples, PriorTerm::PseudoLikelihood, popts, r);
    st.loglik_trace.push_back(est.value - st.omega.penalty());
    st.loglik_se.push_back(est.se);
    st.orthonormality_trace.push_back(st.omega.orthonormality_residual());
  };
  record_trace();

  GibbsState gibbs{st.z_state, Eigen::MatrixXd()};
  int calm = 0;
  for (int it = 1; it <= config.max_iters; ++it) {
    Rng rng = make_stream(config.seed, tag("iteration") + static_cast<std::uint64_t>(it));
    EStepResult es = config.method == EStepMethod::ImportanceSampling
                         ? e_step(data, st.omega, st.z_state, config, rng)
                         : gibbs_e_step(data, st.omega, gibbs, config, rng);
    if (es.ess < 2.0 && config.method == EStepMethod::ImportanceSampling) {
      spdlog::warn("iteration {}: effective sample size {:.2f} below 2", it, es.ess);
    }
    Moments mo = moments_from_samples(es.samples, data.n(), st.omega.G, st.omega.Q());
    st.dof = m_step(data, mo, es.samples, st.omega, config, {true, config.estimate_xi});
    st.samples = std::move(es.samples);
    st.label_probs = label_probabilities(st.samples, data.n(), st.omega.G);
    st.ess_trace.push_back(es.ess);
    st.iteration = it;
    record_trace();
    spdlog::info("iteration {}: loglik {:.4f} (se {:.3f}), ess {:.2f}, xi {:.3f}", it, st.loglik_trace.back(),
                 st.loglik_se.back(), es.ess, st.omega.xi);
    if (callback) callback({"mcem", config.independent_em_iters + it, &st.label_probs, &st.omega});
    const double prev = st.loglik_trace[st.loglik_trace.size() - 2];
    const double cur = st.loglik_trace.back();
    calm = std::abs(cur - prev) <= config.conv_tol * std::max(std::abs(cur), 1e-300) ? calm + 1 : 0;
    if (calm >= config.conv_window) {
      st.converged = true;
      break;
    }
  }
  if (config.method == EStepMethod::Gibbs) st.z_state = gibbs.z;
  return st;
}

}  // namespace fcmix
