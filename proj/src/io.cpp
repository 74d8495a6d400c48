#include "fcmix/io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <cereal/archives/portable_binary.hpp>
#include <cereal/types/array.hpp>
#include <cereal/types/optional.hpp>
#include <cereal/types/string.hpp>
#include <cereal/types/utility.hpp>
#include <cereal/types/vector.hpp>

#include "fcmix/errors.hpp"

namespace Eigen {

template <class Archive, typename Scalar, int R, int C, int O, int MR, int MC>
void save(Archive& ar, const Matrix<Scalar, R, C, O, MR, MC>& m) {
  const std::int64_t rows = m.rows(), cols = m.cols();
  ar(rows, cols);
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) ar(m(i, j));
  }
}

template <class Archive, typename Scalar, int R, int C, int O, int MR, int MC>
void load(Archive& ar, Matrix<Scalar, R, C, O, MR, MC>& m) {
  std::int64_t rows = 0, cols = 0;
  ar(rows, cols);
  if (rows < 0 || cols < 0 || rows > (1 << 24) || cols > (1 << 24)) {
    throw fcmix::DataError("model file: corrupt matrix dimensions");
  }
  m.resize(rows, cols);
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) ar(m(i, j));
  }
}

}  // namespace Eigen

namespace fcmix {

template <class A>
void serialize(A& ar, SpaceTimePoint& s) {
  ar(s.x, s.y, s.t);
}
template <class A>
void serialize(A& ar, Channel& c) {
  ar(c.pressure, c.value);
}
template <class A>
void serialize(A& ar, Profile& p) {
  ar(p.id, p.site, p.y, p.x);
}
template <class A>
void serialize(A& ar, KernelParams& k) {
  ar(k.variance, k.range_x, k.range_t, k.smoothness, k.deform, k.kind);
}
template <class A>
void serialize(A& ar, ClusterParams& c) {
  ar(c.upsilon_y, c.upsilon_x, c.theta_x, c.theta_e, c.lambda, c.alpha_kernels, c.eta_kernels);
}
template <class A>
void serialize(A& ar, Penalties& p) {
  ar(p.mean_y, p.mean_x, p.theta_e, p.theta_x, p.lambda);
}
template <class A>
void serialize(A& ar, GraphWeights& w) {
  ar(w.lon, w.lat, w.day);
}
template <class A>
void serialize(A& ar, VecchiaOptions& v) {
  ar(v.m, v.ordering, v.seed);
}
template <class A>
void serialize(A& ar, BlockDof& b) {
  ar(b.name, b.dof);
}

template <class A>
void save(A& ar, const ModelParams& m) {
  ar(m.G, m.Q1, m.Q2, m.R, m.K, m.basis.domain_lo(), m.basis.domain_hi(), m.basis.n_interior_knots(), m.mode,
     m.clusters, m.sigma2_y, m.sigma2_x, m.xi, m.penalties);
}
template <class A>
void load(A& ar, ModelParams& m) {
  double lo = 0.0, hi = 0.0;
  int knots = 0;
  ar(m.G, m.Q1, m.Q2, m.R, m.K, lo, hi, knots, m.mode, m.clusters, m.sigma2_y, m.sigma2_x, m.xi, m.penalties);
  m.basis = build_basis(lo, hi, knots);
}

template <class A>
void serialize(A& ar, FitConfig& c) {
  ar(c.G, c.Q1, c.Q2, c.R, c.n_interior_knots, c.domain_lo, c.domain_hi, c.mode, c.graph_k, c.graph_weights,
     c.method, c.T_mc, c.max_iters, c.gibbs_burn_in, c.gibbs_thin, c.penalties, c.vecchia, c.seed,
     c.kmeans_restarts, c.independent_em_iters, c.interp_grid, c.conv_tol, c.conv_window, c.dense_max_dim,
     c.logdet_probes, c.trace_samples, c.kernel_kind, c.estimate_smoothness, c.estimate_deformation,
     c.estimate_xi, c.init_xi, c.init_range_fraction, c.optimizer_max_evals);
}

template <class A>
void serialize(A& ar, FitState& s) {
  ar(s.omega, s.iteration, s.converged, s.loglik_trace, s.loglik_se, s.ess_trace, s.orthonormality_trace,
     s.label_probs, s.z_state, s.dof);
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

double parse_double(std::string_view s, const std::string& what) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError(what + ": '" + std::string(s) + "' is not a number");
  }
  return v;
}

namespace {

constexpr std::array<std::string_view, 7> kCsvHeader = {"profile_id", "lon",      "lat",  "time_days",
                                                        "channel",    "pressure", "value"};

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t c = line.find(',', start);
    out.push_back(line.substr(start, c == std::string_view::npos ? std::string_view::npos : c - start));
    if (c == std::string_view::npos) break;
    start = c + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
  }
  return out;
}

void sort_channel(Channel& ch) {
  std::vector<std::size_t> idx(ch.pressure.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return ch.pressure[a] < ch.pressure[b]; });
  Channel s;
  for (auto i : idx) {
    s.pressure.push_back(ch.pressure[i]);
    s.value.push_back(ch.value[i]);
  }
  ch = std::move(s);
}

}  // namespace

std::vector<Profile> read_profiles_csv(std::istream& is, const std::string& source) {
  std::string line;
  long row = 0;
  auto where = [&] { return source + " line " + std::to_string(row); };
  // header
  while (std::getline(is, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") != std::string::npos) break;
  }
  const auto head = split_commas(line);
  if (head.size() != kCsvHeader.size() || !std::equal(head.begin(), head.end(), kCsvHeader.begin())) {
    throw DataError(where() + ": expected header profile_id,lon,lat,time_days,channel,pressure,value");
  }
  std::vector<Profile> out;
  std::unordered_set<std::string> finished;
  int K = 0;
  while (std::getline(is, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_commas(line);
    if (f.size() != kCsvHeader.size()) {
      throw DataError(where() + ": expected 7 fields, found " + std::to_string(f.size()));
    }
    if (f[0].empty()) throw DataError(where() + ": empty profile_id");
    const SpaceTimePoint site{parse_double(f[1], where() + " field lon"), parse_double(f[2], where() + " field lat"),
                              parse_double(f[3], where() + " field time_days")};
    const double p = parse_double(f[5], where() + " field pressure");
    const double v = parse_double(f[6], where() + " field value");
    if (!std::isfinite(site.x) || !std::isfinite(site.y) || !std::isfinite(site.t) || !std::isfinite(p) ||
        !std::isfinite(v)) {
      throw DataError(where() + ": non-finite value");
    }
    int c = 0;
    if (f[4] == "Y") {
      c = 0;
    } else if (f[4].size() >= 2 && f[4].front() == 'X') {
      int k = 0;
      const auto r = std::from_chars(f[4].data() + 1, f[4].data() + f[4].size(), k);
      if (r.ec != std::errc() || r.ptr != f[4].data() + f[4].size() || k < 1) {
        throw DataError(where() + ": channel must be Y or X1..XK, got '" + std::string(f[4]) + "'");
      }
      c = k;
    } else {
      throw DataError(where() + ": channel must be Y or X1..XK, got '" + std::string(f[4]) + "'");
    }
    const std::string id(f[0]);
    if (out.empty() || out.back().id != id) {
      if (!out.empty()) finished.insert(out.back().id);
      if (finished.contains(id)) throw DataError(where() + ": rows of profile " + id + " are not contiguous");
      Profile np;
      np.id = id;
      np.site = site;
      out.push_back(std::move(np));
    }
    Profile& pr = out.back();
    if (pr.site.x != site.x || pr.site.y != site.y || pr.site.t != site.t) {
      throw DataError(where() + ": profile " + id + " changes its site");
    }
    K = std::max(K, c);
    if (static_cast<int>(pr.x.size()) < c) pr.x.resize(c);
    Channel& ch = c == 0 ? pr.y : pr.x[c - 1];
    ch.pressure.push_back(p);
    ch.value.push_back(v);
  }
  if (out.empty()) throw DataError(source + ": no data rows");
  for (auto& pr : out) {
    pr.x.resize(K);
    sort_channel(pr.y);
    for (auto& ch : pr.x) sort_channel(ch);
  }
  return out;
}

std::vector<Profile> read_profiles_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  return read_profiles_csv(is, path.string());
}

void write_profiles_csv(std::ostream& os, const std::vector<Profile>& profiles) {
  os << "profile_id,lon,lat,time_days,channel,pressure,value\n";
  for (const auto& p : profiles) {
    const std::string prefix =
        p.id + ',' + format_double(p.site.x) + ',' + format_double(p.site.y) + ',' + format_double(p.site.t) + ',';
    auto emit = [&](const Channel& ch, const std::string& name) {
      for (int j = 0; j < ch.size(); ++j) {
        os << prefix << name << ',' << format_double(ch.pressure[j]) << ',' << format_double(ch.value[j]) << '\n';
      }
    };
    emit(p.y, "Y");
    for (std::size_t k = 0; k < p.x.size(); ++k) emit(p.x[k], "X" + std::to_string(k + 1));
  }
}

namespace {

constexpr std::array<char, 4> kMagic = {'F', 'C', 'M', 'X'};

// Field-by-field description of the stored layout; edit together with the
// serialize functions above.
constexpr std::string_view kSchema =
    "config{G,Q1,Q2,R,knots,domain_lo?,domain_hi?,mode,graph_k,graph_weights[3],method,T_mc,max_iters,"
    "gibbs_burn_in,gibbs_thin,penalties[5],vecchia{m,ordering,seed},seed,kmeans_restarts,independent_em_iters,"
    "interp_grid,conv_tol,conv_window,dense_max_dim,logdet_probes,trace_samples,kernel_kind,estimate_smoothness,"
    "estimate_deformation,estimate_xi,init_xi,init_range_fraction,optimizer_max_evals};"
    "profiles[{id,site{x,y,t},y{p[],v[]},x[]}];"
    "state{omega{G,Q1,Q2,R,K,lo,hi,knots,mode,clusters[{uy,ux,tx,te,lambda,ak[],ek[]}],s2y,s2x[],xi,penalties},"
    "iteration,converged,trace[],se[],ess[],ortho[],label_probs,z[],dof[]};"
    "kernel{variance,range_x,range_t,smoothness,deform[5],kind};matrix{rows,cols,colmajor}";

}  // namespace

std::uint64_t model_schema_hash() {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : kSchema) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return h;
}

void save_model(std::ostream& os, const ModelFile& model) {
  cereal::PortableBinaryOutputArchive ar(os);
  ar(kMagic, kModelFormatVersion, model_schema_hash());
  ar(model.config, model.profiles, model.state);
}

ModelFile load_model(std::istream& is) {
  ModelFile m;
  try {
    cereal::PortableBinaryInputArchive ar(is);
    std::array<char, 4> magic{};
    std::uint32_t version = 0;
    std::uint64_t hash = 0;
    ar(magic);
    if (magic != kMagic) throw DataError("not a model file");
    ar(version, hash);
    if (version != kModelFormatVersion) {
      throw DataError("model file version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kModelFormatVersion) + ")");
    }
    if (hash != model_schema_hash()) throw DataError("model file schema does not match this build");
    ar(m.config, m.profiles, m.state);
  } catch (const cereal::Exception& e) {
    throw DataError(std::string("model file is truncated or corrupt: ") + e.what());
  }
  return m;
}

void save_model(const std::filesystem::path& path, const ModelFile& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  save_model(os, model);
  if (!os) throw DataError("write failed for " + path.string());
}

ModelFile load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return load_model(is);
}

}  // namespace fcmix
