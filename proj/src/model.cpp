#include "fcmix/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "fcmix/errors.hpp"

namespace fcmix {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kYearDays = 365.25;

double check_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be finite and positive");
  return v;
}

}  // namespace

const KernelParams& ClusterParams::kernel(int q) const {
  const int q1 = static_cast<int>(alpha_kernels.size());
  return q < q1 ? alpha_kernels[q] : eta_kernels[q - q1];
}

KernelParams& ClusterParams::kernel(int q) {
  const int q1 = static_cast<int>(alpha_kernels.size());
  return q < q1 ? alpha_kernels[q] : eta_kernels[q - q1];
}

ModelParams make_params(int G, int Q1, int Q2, int R, int K, const BasisSystem& basis, CoordMode mode) {
  if (G < 1 || Q1 < 0 || Q2 < 0 || R < 0 || K < 0) throw ConfigError("model counts must be non-negative, G >= 1");
  if (Q1 > 0 && K == 0) throw ConfigError("Q1 > 0 requires at least one predictor channel");
  ModelParams m;
  m.G = G;
  m.Q1 = Q1;
  m.Q2 = Q2;
  m.R = R;
  m.K = K;
  m.basis = basis;
  m.mode = mode;
  m.sigma2_x.assign(K, 1.0);
  const int P = basis.size();
  const int D = 2 * R + 1;
  m.clusters.resize(G);
  for (auto& c : m.clusters) {
    c.upsilon_y = Eigen::MatrixXd::Zero(P, D);
    c.upsilon_x = Eigen::MatrixXd::Zero(K * P, D);
    c.theta_x = Eigen::MatrixXd::Zero(K * P, Q1);
    c.theta_e = Eigen::MatrixXd::Zero(P, Q2);
    c.lambda = Eigen::MatrixXd::Zero(P, Q1);
    c.alpha_kernels.assign(Q1, KernelParams{});
    c.eta_kernels.assign(Q2, KernelParams{});
  }
  return m;
}

void ModelParams::validate() const {
  const int P = basis.size();
  if (P == 0) throw ConfigError("model has no basis");
  if (static_cast<int>(clusters.size()) != G) throw ConfigError("cluster count does not match G");
  if (static_cast<int>(sigma2_x.size()) != K) throw ConfigError("need one noise variance per predictor channel");
  check_positive(sigma2_y, "response noise variance");
  for (double s : sigma2_x) check_positive(s, "predictor noise variance");
  if (!(xi >= 0.0)) throw ConfigError("xi must be non-negative");
  for (const auto& c : clusters) {
    if (c.upsilon_y.rows() != P || c.upsilon_y.cols() != D() || c.upsilon_x.rows() != K * P ||
        c.upsilon_x.cols() != D() || c.theta_x.rows() != K * P || c.theta_x.cols() != Q1 ||
        c.theta_e.rows() != P || c.theta_e.cols() != Q2 || c.lambda.rows() != P || c.lambda.cols() != Q1 ||
        static_cast<int>(c.alpha_kernels.size()) != Q1 || static_cast<int>(c.eta_kernels.size()) != Q2) {
      throw ConfigError("cluster parameter shapes do not match (G, Q1, Q2, R, K, P)");
    }
    for (const auto& k : c.alpha_kernels) k.validate();
    for (const auto& k : c.eta_kernels) k.validate();
  }
}

double ModelParams::orthonormality_residual() const {
  double worst = 0.0;
  const Eigen::MatrixXd mx = block_identity_kron(K, basis.gram());
  for (const auto& c : clusters) {
    if (Q1 > 0) {
      const Eigen::MatrixXd e = c.theta_x.transpose() * mx * c.theta_x - Eigen::MatrixXd::Identity(Q1, Q1);
      worst = std::max(worst, e.cwiseAbs().maxCoeff());
    }
    if (Q2 > 0) {
      const Eigen::MatrixXd e = c.theta_e.transpose() * basis.gram() * c.theta_e - Eigen::MatrixXd::Identity(Q2, Q2);
      worst = std::max(worst, e.cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

double ModelParams::penalty() const {
  const int P = basis.size();
  auto cols = [&](const Eigen::MatrixXd& m) {
    double s = 0.0;
    for (Eigen::Index r0 = 0; r0 < m.rows(); r0 += P) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) s += basis.penalty_quadform(m.block(r0, j, P, 1));
    }
    return s;
  };
  double total = 0.0;
  for (const auto& c : clusters) {
    total += penalties.mean_y * cols(c.upsilon_y) + penalties.mean_x * cols(c.upsilon_x) +
             penalties.theta_e * cols(c.theta_e) + penalties.theta_x * cols(c.theta_x) +
             penalties.lambda * cols(c.lambda);
  }
  return 0.5 * total;
}

Eigen::VectorXd seasonal_covariates(double t, int R) {
  if (R < 0) throw ConfigError("number of harmonics must be non-negative");
  Eigen::VectorXd d(2 * R + 1);
  d(0) = 1.0;
  for (int l = 1; l <= R; ++l) {
    const double a = 2.0 * std::numbers::pi * l * t / kYearDays;
    d(2 * l - 1) = std::sin(a);
    d(2 * l) = std::cos(a);
  }
  return d;
}

DesignMatrices design_matrices(const Profile& profile, const BasisSystem& basis, int R) {
  const int P = basis.size();
  const int K = static_cast<int>(profile.x.size());
  const Eigen::VectorXd delta = seasonal_covariates(profile.site.t, R);
  const int D = static_cast<int>(delta.size());
  DesignMatrices dm;
  dm.B = basis.design(profile.y.pressure);
  int nx = 0;
  for (const auto& ch : profile.x) nx += ch.size();
  dm.Bx = Eigen::MatrixXd::Zero(nx, K * P);
  int row = 0;
  for (int k = 0; k < K; ++k) {
    const int nk = profile.x[k].size();
    dm.Bx.block(row, k * P, nk, P) = basis.design(profile.x[k].pressure);
    row += nk;
  }
  auto kron_delta = [&](const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out(b.rows(), b.cols() * D);
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      for (Eigen::Index p = 0; p < b.cols(); ++p) out.row(j).segment(p * D, D) = b(j, p) * delta.transpose();
    }
    return out;
  };
  dm.B_delta = kron_delta(dm.B);
  dm.Bx_delta = kron_delta(dm.Bx);
  return dm;
}

namespace {

ChannelStats channel_stats(const Channel& ch, const BasisSystem& basis) {
  const int P = basis.size();
  ChannelStats s;
  s.btb = Eigen::MatrixXd::Zero(P, P);
  s.bty = Eigen::VectorXd::Zero(P);
  s.n = ch.size();
  std::array<double, BasisSystem::kOrder> v{};
  for (int j = 0; j < ch.size(); ++j) {
    const int first = basis.evaluate_local(ch.pressure[j], v);
    const double y = ch.value[j];
    for (int a = 0; a < BasisSystem::kOrder; ++a) {
      s.bty(first + a) += v[a] * y;
      for (int b = 0; b < BasisSystem::kOrder; ++b) s.btb(first + a, first + b) += v[a] * v[b];
    }
    s.yty += y * y;
  }
  return s;
}

}  // namespace

std::vector<ProfileStats> profile_stats(std::span<const Profile> profiles, const BasisSystem& basis, int R) {
  std::vector<ProfileStats> out;
  out.reserve(profiles.size());
  for (const auto& p : profiles) {
    ProfileStats s;
    s.delta = seasonal_covariates(p.site.t, R);
    s.y = channel_stats(p.y, basis);
    for (const auto& ch : p.x) s.x.push_back(channel_stats(ch, basis));
    out.push_back(std::move(s));
  }
  return out;
}

const ChannelStats& channel(const ProfileStats& s, int c) { return c == 0 ? s.y : s.x[c - 1]; }

double channel_noise(const ModelParams& omega, int c) { return c == 0 ? omega.sigma2_y : omega.sigma2_x[c - 1]; }

Eigen::MatrixXd channel_loading(const ModelParams& omega, int g, int c) {
  const int P = omega.P();
  const auto& cl = omega.clusters[g];
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(P, omega.Q());
  if (c == 0) {
    m.leftCols(omega.Q1) = cl.lambda;
    m.rightCols(omega.Q2) = cl.theta_e;
  } else {
    m.leftCols(omega.Q1) = cl.theta_x.middleRows((c - 1) * P, P);
  }
  return m;
}

Eigen::VectorXd channel_mean(const ModelParams& omega, int g, int c, const Eigen::VectorXd& delta) {
  const auto& cl = omega.clusters[g];
  if (c == 0) return cl.upsilon_y * delta;
  return cl.upsilon_x.middleRows((c - 1) * omega.P(), omega.P()) * delta;
}

ProfileTerms profile_terms(const ProfileStats& stats, const ModelParams& omega, int g) {
  const int Q = omega.Q();
  ProfileTerms t;
  t.H = Eigen::MatrixXd::Zero(Q, Q);
  t.b = Eigen::VectorXd::Zero(Q);
  for (int c = 0; c <= omega.K; ++c) {
    const ChannelStats& cs = channel(stats, c);
    if (cs.n == 0) continue;
    const double s2 = channel_noise(omega, c);
    const Eigen::VectorXd m = channel_mean(omega, g, c, stats.delta);
    const Eigen::VectorXd btbm = cs.btb * m;
    const double rr = cs.yty - 2.0 * m.dot(cs.bty) + m.dot(btbm);
    t.rdr += std::max(rr, 0.0) / s2;
    t.logdet_noise += cs.n * std::log(s2);
    t.n += cs.n;
    if (Q > 0) {
      const Eigen::MatrixXd C = channel_loading(omega, g, c);
      t.H.noalias() += C.transpose() * (cs.btb * C) / s2;
      t.b.noalias() += C.transpose() * (cs.bty - btbm) / s2;
    }
  }
  return t;
}

std::vector<std::vector<ProfileTerms>> profile_terms_table(std::span<const ProfileStats> stats,
                                                           const ModelParams& omega) {
  std::vector<std::vector<ProfileTerms>> out(stats.size());
  for (std::size_t i = 0; i < stats.size(); ++i) {
    out[i].reserve(omega.G);
    for (int g = 0; g < omega.G; ++g) out[i].push_back(profile_terms(stats[i], omega, g));
  }
  return out;
}

namespace {

Eigen::VectorXd prior_variances(const ClusterParams& cluster, int Q) {
  Eigen::VectorXd v(Q);
  for (int q = 0; q < Q; ++q) v(q) = cluster.kernel(q).variance;
  return v;
}

}  // namespace

double per_profile_loglik(const ProfileTerms& t, const ClusterParams& cluster, int Q) {
  double val = t.n * kLog2Pi + t.logdet_noise + t.rdr;
  if (Q > 0 && t.n > 0) {
    const Eigen::VectorXd v = prior_variances(cluster, Q);
    Eigen::MatrixXd s = t.H;
    s.diagonal() += v.cwiseInverse();
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw NumericError("per-profile posterior precision is not positive definite");
    const Eigen::VectorXd sb = llt.solve(t.b);
    val += -t.b.dot(sb) + v.array().log().sum() + 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
  return -0.5 * val;
}

Eigen::MatrixXd per_profile_loglik_table(const std::vector<std::vector<ProfileTerms>>& terms,
                                         const ModelParams& omega) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(terms.size()), omega.G);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    for (int g = 0; g < omega.G; ++g) out(i, g) = per_profile_loglik(terms[i][g], omega.clusters[g], omega.Q());
  }
  return out;
}

ScoreMoments independent_score_moments(const ProfileTerms& t, const ClusterParams& cluster, int Q) {
  ScoreMoments m;
  Eigen::MatrixXd s = t.H;
  s.diagonal() += prior_variances(cluster, Q).cwiseInverse();
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) throw NumericError("per-profile posterior precision is not positive definite");
  m.cov = llt.solve(Eigen::MatrixXd::Identity(Q, Q));
  m.mean = llt.solve(t.b);
  return m;
}

ClusterPosterior::ClusterPosterior(std::span<const SpaceTimePoint> sites, std::vector<const ProfileTerms*> terms,
                                   const ClusterParams& cluster, int Q, CoordMode mode,
                                   const PosteriorOptions& options)
    : n_(static_cast<int>(sites.size())), q_(Q), terms_(std::move(terms)), options_(options) {
  if (static_cast<int>(terms_.size()) != n_) throw ConfigError("one terms entry per site required");
  double data_const = 0.0;
  for (const auto* t : terms_) {
    if (t != nullptr) data_const += t->n * kLog2Pi + t->logdet_noise + t->rdr;
  }
  if (n_ == 0 || q_ == 0) {
    mean_ = Eigen::VectorXd::Zero(dim());
    loglik_ = -0.5 * data_const;
    return;
  }
  const int d = dim();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(d);
  for (int k = 0; k < n_; ++k) {
    if (terms_[k] == nullptr) continue;
    for (int q = 0; q < q_; ++q) b(q * n_ + k) = terms_[k]->b(q);
  }
  double logdet_prior = 0.0;
  priors_.reserve(q_);
  for (int q = 0; q < q_; ++q) {
    priors_.push_back(vecchia_factor(sites, cluster.kernel(q), mode, options.vecchia));
    logdet_prior += priors_.back().logdet_prec;
  }

  double logdet_post = 0.0;
  dense_ = d <= options.dense_max_dim;
  if (dense_) {
    Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(d, d);
    for (int q = 0; q < q_; ++q) {
      const Eigen::SparseMatrix<double> pq = priors_[q].U * priors_[q].U.transpose();
      prec.block(q * n_, q * n_, n_, n_) = Eigen::MatrixXd(pq);
    }
    for (int k = 0; k < n_; ++k) {
      if (terms_[k] == nullptr) continue;
      for (int a = 0; a < q_; ++a) {
        for (int c = 0; c < q_; ++c) prec(a * n_ + k, c * n_ + k) += terms_[k]->H(a, c);
      }
    }
    llt_.compute(prec);
    if (llt_.info() != Eigen::Success) throw NumericError("cluster posterior precision is not positive definite");
    mean_ = llt_.solve(b);
    logdet_post = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
  } else {
    jacobi_ = Eigen::VectorXd::Zero(d);
    for (int q = 0; q < q_; ++q) {
      const Eigen::SparseMatrix<double>& u = priors_[q].U;
      for (int k = 0; k < u.outerSize(); ++k) {
        for (Eigen::SparseMatrix<double>::InnerIterator it(u, k); it; ++it) {
          jacobi_(q * n_ + it.row()) += it.value() * it.value();
        }
      }
    }
    for (int k = 0; k < n_; ++k) {
      if (terms_[k] == nullptr) continue;
      for (int q = 0; q < q_; ++q) jacobi_(q * n_ + k) += terms_[k]->H(q, q);
    }
    auto op = [this](const Eigen::VectorXd& x) { return apply_precision(x); };
    mean_ = cg_solve(op, b, options.cg_tol, -1, &jacobi_).x;
    Rng probe_rng = make_stream(options.probe_seed, 0x1065dULL);
    logdet_post = logdet_hutchinson(op, d, options.logdet_probes, probe_rng, options.lanczos);
  }
  loglik_ = -0.5 * (data_const - b.dot(mean_) + logdet_post - logdet_prior);
}

Eigen::MatrixXd ClusterPosterior::mean_scores() const {
  return Eigen::Map<const Eigen::MatrixXd>(mean_.data(), n_, q_);
}

Eigen::VectorXd ClusterPosterior::apply_precision(const Eigen::VectorXd& x) const {
  Eigen::VectorXd out(dim());
  for (int q = 0; q < q_; ++q) {
    const Eigen::VectorXd ut = priors_[q].U.transpose() * x.segment(q * n_, n_);
    out.segment(q * n_, n_) = priors_[q].U * ut;
  }
  Eigen::VectorXd u(q_);
  for (int k = 0; k < n_; ++k) {
    if (terms_[k] == nullptr) continue;
    for (int q = 0; q < q_; ++q) u(q) = x(q * n_ + k);
    const Eigen::VectorXd hu = terms_[k]->H * u;
    for (int q = 0; q < q_; ++q) out(q * n_ + k) += hu(q);
  }
  return out;
}

Eigen::VectorXd ClusterPosterior::solve(const Eigen::VectorXd& b) const {
  if (dense_) return llt_.solve(b);
  auto op = [this](const Eigen::VectorXd& x) { return apply_precision(x); };
  return cg_solve(op, b, options_.cg_tol, -1, &jacobi_).x;
}

Eigen::MatrixXd ClusterPosterior::sample(Rng& rng) const {
  Eigen::VectorXd v;
  if (dim() == 0) return Eigen::MatrixXd::Zero(n_, q_);
  if (dense_) {
    const Eigen::VectorXd w = standard_normal(dim(), rng);
    v = mean_ + llt_.matrixU().solve(w);
  } else {
    auto op = [this](const Eigen::VectorXd& x) { return apply_precision(x); };
    v = mean_ + lanczos_sqrt_sample(op, dim(), rng, options_.lanczos);
  }
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), n_, q_);
}

Eigen::MatrixXd ClusterPosterior::covariance(const std::vector<int>& indices) const {
  const int m = static_cast<int>(indices.size());
  Eigen::MatrixXd e = Eigen::MatrixXd::Zero(dim(), m);
  for (int j = 0; j < m; ++j) e(indices[j], j) = 1.0;
  Eigen::MatrixXd cols(dim(), m);
  if (dense_) {
    cols = llt_.solve(e);
  } else {
    for (int j = 0; j < m; ++j) cols.col(j) = solve(e.col(j));
  }
  Eigen::MatrixXd out(m, m);
  for (int a = 0; a < m; ++a) {
    for (int c = 0; c < m; ++c) out(a, c) = cols(indices[a], c);
  }
  return 0.5 * (out + out.transpose());
}

double marginal_loglik(std::span<const SpaceTimePoint> sites, const std::vector<std::vector<ProfileTerms>>& terms,
                       const LabelField& z, const ModelParams& omega, const PosteriorOptions& options) {
  double total = 0.0;
  for (int g = 0; g < omega.G; ++g) {
    std::vector<SpaceTimePoint> sg;
    std::vector<const ProfileTerms*> tg;
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] != g) continue;
      sg.push_back(sites[i]);
      tg.push_back(&terms[i][g]);
    }
    total += ClusterPosterior(sg, tg, omega.clusters[g], omega.Q(), omega.mode, options).loglik();
  }
  return total;
}

double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

NormalizedWeights normalize_log_weights(std::span<const double> log_weights) {
  if (log_weights.empty()) throw NumericError("no importance samples");
  const double lse = log_sum_exp(log_weights);
  if (!std::isfinite(lse)) throw NumericError("all importance weights are zero or undefined");
  NormalizedWeights out;
  out.weights.reserve(log_weights.size());
  double total = 0.0;
  for (double lw : log_weights) {
    out.weights.push_back(std::exp(lw - lse));
    total += out.weights.back();
  }
  double sq = 0.0;
  for (double& w : out.weights) {
    w /= total;
    sq += w * w;
  }
  out.ess = 1.0 / sq;
  return out;
}

}  // namespace fcmix
