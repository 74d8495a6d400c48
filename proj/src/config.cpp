#include "fcmix/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <set>
#include <sstream>

#include "fcmix/errors.hpp"
#include "fcmix/io.hpp"

namespace fcmix {

namespace {

std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

// Drops a trailing comment that is not inside a string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  }
  return true;
}

std::vector<std::string> split_list(const std::string& raw) {
  if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']') return {};
  std::vector<std::string> out;
  const std::string body = trim(std::string_view(raw).substr(1, raw.size() - 2));
  if (body.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto c = body.find(',', start);
    out.push_back(trim(std::string_view(body).substr(start, c == std::string::npos ? std::string::npos : c - start)));
    if (c == std::string::npos) break;
    start = c + 1;
  }
  if (!out.empty() && out.back().empty()) out.pop_back();  // trailing comma
  return out;
}

}  // namespace

ConfigDoc ConfigDoc::parse(std::istream& is, const std::string& source) {
  ConfigDoc doc;
  doc.source_ = source;
  std::string line, section;
  int row = 0;
  while (std::getline(is, line)) {
    ++row;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    auto where = [&] { return source + " line " + std::to_string(row); };
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where() + ": malformed section header");
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      if (!valid_key(section)) throw ConfigError(where() + ": malformed section name");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where() + ": expected key = value");
    const std::string key = trim(std::string_view(s).substr(0, eq));
    const std::string value = trim(std::string_view(s).substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where() + ": malformed key '" + key + "'");
    if (value.empty()) throw ConfigError(where() + ": missing value for '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (doc.entries_.contains(full)) throw ConfigError(where() + ": duplicate key '" + full + "'");
    doc.entries_[full] = {value, row};
  }
  return doc;
}

ConfigDoc ConfigDoc::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  return parse(is, path.string());
}

void ConfigDoc::fail(const std::string& key, const std::string& msg) const {
  const auto it = entries_.find(key);
  const std::string where = it == entries_.end() ? source_ : source_ + " line " + std::to_string(it->second.line);
  throw ConfigError(where + ": key '" + key + "': " + msg);
}

const ConfigDoc::Entry& ConfigDoc::at(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError(source_ + ": missing key '" + key + "'");
  return it->second;
}

std::string ConfigDoc::kind() const { return has("kind") ? get_string("kind") : std::string(); }

namespace {

template <typename T>
bool parse_integer(const std::string& s, T& v) {
  std::string_view sv(s);
  if (!sv.empty() && sv.front() == '+') sv.remove_prefix(1);
  const auto r = std::from_chars(sv.data(), sv.data() + sv.size(), v);
  return !sv.empty() && r.ec == std::errc() && r.ptr == sv.data() + sv.size();
}

}  // namespace

long long ConfigDoc::get_int(const std::string& key) const {
  long long v = 0;
  if (!parse_integer(at(key).raw, v)) fail(key, "expected an integer, got " + at(key).raw);
  return v;
}

unsigned long long ConfigDoc::get_uint(const std::string& key) const {
  unsigned long long v = 0;
  if (!parse_integer(at(key).raw, v)) fail(key, "expected a non-negative integer, got " + at(key).raw);
  return v;
}

double ConfigDoc::get_double(const std::string& key) const {
  try {
    return parse_double(at(key).raw, "value");
  } catch (const DataError&) {
    fail(key, "expected a number, got " + at(key).raw);
  }
}

bool ConfigDoc::get_bool(const std::string& key) const {
  const std::string& r = at(key).raw;
  if (r == "true") return true;
  if (r == "false") return false;
  fail(key, "expected true or false, got " + r);
}

std::string ConfigDoc::get_string(const std::string& key) const {
  const std::string& r = at(key).raw;
  if (r.size() < 2 || r.front() != '"' || r.back() != '"') fail(key, "expected a quoted string, got " + r);
  return r.substr(1, r.size() - 2);
}

std::vector<long long> ConfigDoc::get_int_list(const std::string& key) const {
  const std::string& r = at(key).raw;
  if (r.front() != '[') fail(key, "expected an array, got " + r);
  std::vector<long long> out;
  for (const auto& s : split_list(r)) {
    long long v = 0;
    if (!parse_integer(s, v)) fail(key, "expected integers, got " + s);
    out.push_back(v);
  }
  return out;
}

std::vector<double> ConfigDoc::get_double_list(const std::string& key) const {
  const std::string& r = at(key).raw;
  if (r.front() != '[') fail(key, "expected an array, got " + r);
  std::vector<double> out;
  for (const auto& s : split_list(r)) {
    try {
      out.push_back(parse_double(s, "value"));
    } catch (const DataError&) {
      fail(key, "expected numbers, got " + s);
    }
  }
  return out;
}

std::vector<std::string> ConfigDoc::get_string_list(const std::string& key) const {
  const std::string& r = at(key).raw;
  if (r.front() != '[') fail(key, "expected an array, got " + r);
  std::vector<std::string> out;
  for (const auto& s : split_list(r)) {
    if (s.size() < 2 || s.front() != '"' || s.back() != '"') fail(key, "expected quoted strings, got " + s);
    out.push_back(s.substr(1, s.size() - 2));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Field tables shared by parsing, validation and --print-defaults.

namespace {

struct Field {
  std::string key;
  std::string help;
  std::function<void(const ConfigDoc&, const std::string&)> read;
  std::function<std::string()> show;
};

std::string show_list(const std::vector<std::string>& items) {
  std::string s = "[";
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? ", " : "") + items[i];
  return s + "]";
}

int to_int(const ConfigDoc& d, const std::string& k) {
  const long long v = d.get_int(k);
  if (v < -(1LL << 31) || v > (1LL << 31) - 1) d.fail(k, "out of range");
  return static_cast<int>(v);
}

Field int_field(const std::string& key, int& ref, const std::string& help) {
  return {key, help, [&ref](const ConfigDoc& d, const std::string& k) { ref = to_int(d, k); },
          [&ref] { return std::to_string(ref); }};
}

Field uint_field(const std::string& key, std::uint64_t& ref, const std::string& help) {
  return {key, help, [&ref](const ConfigDoc& d, const std::string& k) { ref = d.get_uint(k); },
          [&ref] { return std::to_string(ref); }};
}

Field double_field(const std::string& key, double& ref, const std::string& help) {
  return {key, help, [&ref](const ConfigDoc& d, const std::string& k) { ref = d.get_double(k); },
          [&ref] { return format_double(ref); }};
}

Field bool_field(const std::string& key, bool& ref, const std::string& help) {
  return {key, help, [&ref](const ConfigDoc& d, const std::string& k) { ref = d.get_bool(k); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field optional_field(const std::string& key, std::optional<double>& ref, const std::string& help) {
  return {key, help, [&ref](const ConfigDoc& d, const std::string& k) { ref = d.get_double(k); },
          [&ref] { return ref ? format_double(*ref) : std::string(); }};
}

template <typename E>
Field enum_field(const std::string& key, E& ref, std::vector<std::pair<std::string, E>> names,
                 const std::string& help) {
  std::string choices;
  for (const auto& [n, e] : names) choices += (choices.empty() ? "" : ", ") + n;
  return {key, help + " (" + choices + ")",
          [&ref, names, choices](const ConfigDoc& d, const std::string& k) {
            const std::string s = d.get_string(k);
            for (const auto& [n, e] : names) {
              if (n == s) {
                ref = e;
                return;
              }
            }
            d.fail(k, "expected one of " + choices + ", got \"" + s + "\"");
          },
          [&ref, names] {
            for (const auto& [n, e] : names) {
              if (e == ref) return "\"" + n + "\"";
            }
            return std::string("\"\"");
          }};
}

template <typename T>
Field int_list_field(const std::string& key, std::vector<T>& ref, const std::string& help) {
  return {key, help,
          [&ref](const ConfigDoc& d, const std::string& k) {
            ref.clear();
            for (long long v : d.get_int_list(k)) ref.push_back(static_cast<T>(v));
          },
          [&ref] {
            std::vector<std::string> s;
            for (auto v : ref) s.push_back(std::to_string(v));
            return show_list(s);
          }};
}

Field double_list_field(const std::string& key, std::vector<double>& ref, const std::string& help) {
  return {key, help, [&ref](const ConfigDoc& d, const std::string& k) { ref = d.get_double_list(k); },
          [&ref] {
            std::vector<std::string> s;
            for (double v : ref) s.push_back(format_double(v));
            return show_list(s);
          }};
}

std::vector<Field> fit_fields(FitConfig& c) {
  const std::vector<std::pair<std::string, CoordMode>> modes = {{"euclidean", CoordMode::Euclidean},
                                                                {"sphere", CoordMode::Sphere}};
  return {
      int_field("G", c.G, "number of clusters"),
      int_field("Q1", c.Q1, "predictor principal components"),
      int_field("Q2", c.Q2, "residual principal components of the response"),
      int_field("R", c.R, "seasonal harmonics in the means"),
      int_field("n_interior_knots", c.n_interior_knots, "interior B-spline knots; basis size is this plus 4"),
      optional_field("domain_lo", c.domain_lo, "lower pressure bound (default: data minimum)"),
      optional_field("domain_hi", c.domain_hi, "upper pressure bound (default: data maximum)"),
      enum_field("coord_mode", c.mode, modes, "site coordinates"),
      int_field("graph_k", c.graph_k, "nearest neighbours in the label graph"),
      {"graph_weights", "lon, lat and day weights of the graph distance in sphere mode",
       [&c](const ConfigDoc& d, const std::string& k) {
         const auto v = d.get_double_list(k);
         if (v.size() != 3) d.fail(k, "needs three numbers");
         c.graph_weights = {v[0], v[1], v[2]};
       },
       [&c] {
         return show_list({format_double(c.graph_weights.lon), format_double(c.graph_weights.lat),
                           format_double(c.graph_weights.day)});
       }},
      enum_field("estep", c.method,
                 std::vector<std::pair<std::string, EStepMethod>>{{"is", EStepMethod::ImportanceSampling},
                                                                  {"gibbs", EStepMethod::Gibbs}},
                 "E-step sampler"),
      int_field("T_mc", c.T_mc, "Monte Carlo samples per E-step"),
      int_field("max_iters", c.max_iters, "MCEM iterations"),
      int_field("gibbs_burn_in", c.gibbs_burn_in, "label sweeps discarded per E-step"),
      int_field("gibbs_thin", c.gibbs_thin, "label sweeps between kept samples"),
      double_field("lambda_mean_y", c.penalties.mean_y, "roughness penalty of the response means"),
      double_field("lambda_mean_x", c.penalties.mean_x, "roughness penalty of the predictor means"),
      double_field("lambda_theta_e", c.penalties.theta_e, "roughness penalty of the residual components"),
      double_field("lambda_theta_x", c.penalties.theta_x, "roughness penalty of the predictor components"),
      double_field("lambda_lambda", c.penalties.lambda, "roughness penalty of the regression functions"),
      int_field("vecchia_m", c.vecchia.m, "Vecchia conditioning set size"),
      enum_field("vecchia_ordering", c.vecchia.ordering,
                 std::vector<std::pair<std::string, VecchiaOrdering>>{{"maxmin", VecchiaOrdering::MaxMin},
                                                                      {"coordinate", VecchiaOrdering::Coordinate},
                                                                      {"random", VecchiaOrdering::Random}},
                 "Vecchia site ordering"),
      uint_field("seed", c.seed, "master random seed"),
      int_field("kmeans_restarts", c.kmeans_restarts, "k-means restarts at initialization"),
      int_field("independent_em_iters", c.independent_em_iters, "EM iterations of the independent model"),
      int_field("interp_grid", c.interp_grid, "pressure grid points for k-means features"),
      double_field("conv_tol", c.conv_tol, "relative change of the log-likelihood trace counted as converged"),
      int_field("conv_window", c.conv_window, "consecutive converged iterations required"),
      int_field("dense_max_dim", c.dense_max_dim, "largest cluster posterior solved densely"),
      int_field("logdet_probes", c.logdet_probes, "Hutchinson probes above dense_max_dim"),
      int_field("trace_samples", c.trace_samples, "samples of the log-likelihood trace estimator"),
      enum_field("kernel", c.kernel_kind,
                 std::vector<std::pair<std::string, KernelKind>>{{"exponential", KernelKind::Exponential},
                                                                 {"matern", KernelKind::Matern}},
                 "score covariance family"),
      bool_field("estimate_smoothness", c.estimate_smoothness, "estimate the Matern smoothness"),
      bool_field("estimate_deformation", c.estimate_deformation, "estimate deformation weights (sphere mode)"),
      bool_field("estimate_xi", c.estimate_xi, "estimate the label coupling"),
      double_field("init_xi", c.init_xi, "starting label coupling"),
      double_field("init_range_fraction", c.init_range_fraction, "starting ranges as a fraction of the extent"),
      int_field("optimizer_max_evals", c.optimizer_max_evals, "objective evaluations per kernel update"),
  };
}

std::vector<Field> sim_fields(SimConfig& c) {
  return {
      int_field("n", c.n, "number of sites"),
      int_field("n_obs", c.n_obs, "measurements per profile"),
      int_field("G", c.G, "number of groups"),
      int_field("basis_dim", c.basis_dim, "dimension of the orthonormal spline basis"),
      {"pc_index", "1-based basis functions used as components, row-major G x Q",
       [&c](const ConfigDoc& d, const std::string& k) {
         const auto v = d.get_int_list(k);
         const std::size_t q = c.score_variances.size();
         if (q == 0 || v.size() % q != 0) d.fail(k, "needs G x Q entries");
         c.pc_index.assign(v.size() / q, std::vector<int>(q));
         for (std::size_t i = 0; i < v.size(); ++i) c.pc_index[i / q][i % q] = static_cast<int>(v[i]);
       },
       [&c] {
         std::vector<std::string> s;
         for (const auto& row : c.pc_index) {
           for (int v : row) s.push_back(std::to_string(v));
         }
         return show_list(s);
       }},
      double_list_field("score_variances", c.score_variances, "score variance of each component"),
      {"ranges", "exponential covariance ranges, row-major G x Q",
       [&c](const ConfigDoc& d, const std::string& k) {
         const auto v = d.get_double_list(k);
         const std::size_t q = c.score_variances.size();
         if (q == 0 || v.size() % q != 0) d.fail(k, "needs G x Q entries");
         c.ranges.assign(v.size() / q, std::vector<double>(q));
         for (std::size_t i = 0; i < v.size(); ++i) c.ranges[i / q][i % q] = v[i];
       },
       [&c] {
         std::vector<std::string> s;
         for (const auto& row : c.ranges) {
           for (double v : row) s.push_back(format_double(v));
         }
         return show_list(s);
       }},
      double_field("noise_variance", c.noise_variance, "measurement error variance"),
      double_field("xi", c.xi, "label coupling of the generating field"),
      int_field("graph_k", c.graph_k, "nearest neighbours in the label graph"),
      int_field("label_burn_in", c.label_burn_in, "Gibbs sweeps before the labels are kept"),
  };
}

std::vector<Field> without(std::vector<Field> fields, const std::set<std::string>& drop) {
  std::erase_if(fields, [&](const Field& f) { return drop.contains(f.key); });
  return fields;
}

// Fields are read in table order, so list fields that depend on others
// (pc_index and ranges need score_variances) come after them.
void read_fields(const ConfigDoc& doc, std::vector<Field>& fields, const std::string& section,
                 std::set<std::string>& seen) {
  const std::string prefix = section.empty() ? "" : section + ".";
  std::stable_partition(fields.begin(), fields.end(),
                        [](const Field& f) { return f.key != "pc_index" && f.key != "ranges"; });
  for (auto& f : fields) {
    const std::string full = prefix + f.key;
    seen.insert(full);
    if (doc.has(full)) f.read(doc, full);
  }
}

void reject_unknown(const ConfigDoc& doc, const std::set<std::string>& known) {
  for (const auto& [k, e] : doc.entries()) {
    if (k == "kind" || known.contains(k)) continue;
    throw ConfigError(doc.source() + " line " + std::to_string(e.line) + ": unknown key '" + k + "'");
  }
}

void expect_kind(const ConfigDoc& doc, const std::string& kind) {
  const std::string k = doc.kind();
  if (!k.empty() && k != kind) {
    throw ConfigError(doc.source() + ": configuration kind is \"" + k + "\", expected \"" + kind + "\"");
  }
}

const std::set<std::string> kStudyFitOverrides = {"G",         "Q1",         "Q2",        "R",
                                                   "n_interior_knots", "domain_lo", "domain_hi",
                                                   "coord_mode", "graph_k", "estep"};

struct StudyTable {
  StudyConfig& c;
  std::vector<Field> top, sim, fit;
};

StudyTable study_table(StudyConfig& c) {
  StudyTable t{c, {}, without(sim_fields(c.sim), {"n_obs"}), without(fit_fields(c.fit), kStudyFitOverrides)};
  t.top = {
      int_field("datasets", c.datasets, "replicate datasets per n_obs"),
      int_list_field("n_obs", c.n_obs, "measurements per profile, one study arm each"),
      {"methods", "E-step samplers compared (is, gibbs)",
       [&c](const ConfigDoc& d, const std::string& k) {
         c.methods.clear();
         for (const auto& s : d.get_string_list(k)) {
           if (s == "is") {
             c.methods.push_back(EStepMethod::ImportanceSampling);
           } else if (s == "gibbs") {
             c.methods.push_back(EStepMethod::Gibbs);
           } else {
             d.fail(k, "unknown method \"" + s + "\"");
           }
         }
       },
       [&c] {
         std::vector<std::string> s;
         for (auto m : c.methods) s.push_back(m == EStepMethod::Gibbs ? "\"gibbs\"" : "\"is\"");
         return show_list(s);
       }},
      uint_field("seed", c.seed, "seed of the data generator"),
  };
  return t;
}

std::vector<Field> simulate_fields(SimulateJob& j) {
  auto f = sim_fields(j.sim);
  f.push_back(uint_field("seed", j.seed, "random seed"));
  return f;
}

std::vector<Field> select_top_fields(SelectJob& j) {
  return {
      int_list_field("q1", j.q1, "candidate Q1 values"),
      int_list_field("q2", j.q2, "candidate Q2 values"),
      double_list_field("penalties", j.penalties, "candidate penalty weights (all five set alike)"),
      int_field("aic_samples", j.aic_samples, "importance samples of the AIC likelihood estimate"),
      {"data", "profile CSV (the --data option overrides)",
       [&j](const ConfigDoc& d, const std::string& k) { j.data = d.get_string(k); },
       [&j] { return "\"" + j.data + "\""; }},
  };
}

std::vector<Field> grid_fields(GridSpec& g) {
  return {
      double_list_field("lon", g.lon, "longitudes (x in euclidean mode)"),
      double_list_field("lat", g.lat, "latitudes (y in euclidean mode)"),
      double_list_field("time", g.time, "times in days"),
      double_list_field("pressure", g.pressure, "output pressures"),
      uint_field("seed", g.seed, "random seed"),
      int_field("n_samples", g.options.n_samples, "label fields sampled per target batch"),
      int_field("burn_in", g.options.burn_in, "label sweeps discarded per batch"),
      int_field("thin", g.options.thin, "label sweeps between kept samples"),
      int_field("batch_size", g.options.batch_size, "targets sharing one label chain"),
  };
}

void emit(std::ostringstream& os, const std::vector<Field>& fields) {
  for (const auto& f : fields) {
    const std::string v = f.show();
    if (v.empty()) {
      os << "# " << f.key << " =   # " << f.help << '\n';
    } else {
      os << f.key << " = " << v << "   # " << f.help << '\n';
    }
  }
}

}  // namespace

FitConfig fit_config_from(const ConfigDoc& doc, const std::string& section) {
  FitConfig c;
  auto f = fit_fields(c);
  std::set<std::string> seen;
  read_fields(doc, f, section, seen);
  if (section.empty()) {
    expect_kind(doc, "fit");
    reject_unknown(doc, seen);
  }
  c.validate();
  return c;
}

SimulateJob simulate_job_from(const ConfigDoc& doc) {
  expect_kind(doc, "simulate");
  SimulateJob j;
  auto f = simulate_fields(j);
  std::set<std::string> seen;
  read_fields(doc, f, "", seen);
  reject_unknown(doc, seen);
  j.sim.validate();
  return j;
}

StudyConfig study_config_from(const ConfigDoc& doc) {
  expect_kind(doc, "study");
  StudyConfig c;
  // the study defaults to the dense path for exact likelihoods
  c.fit.dense_max_dim = 1000;
  StudyTable t = study_table(c);
  std::set<std::string> seen;
  read_fields(doc, t.top, "", seen);
  read_fields(doc, t.sim, "sim", seen);
  read_fields(doc, t.fit, "fit", seen);
  reject_unknown(doc, seen);
  c.validate();
  return c;
}

SelectJob select_job_from(const ConfigDoc& doc) {
  expect_kind(doc, "select");
  SelectJob j;
  auto top = select_top_fields(j);
  auto fit = without(fit_fields(j.fit), {"Q1", "Q2"});
  std::set<std::string> seen;
  read_fields(doc, top, "", seen);
  read_fields(doc, fit, "fit", seen);
  reject_unknown(doc, seen);
  if (j.q1.empty() || j.q2.empty() || j.penalties.empty()) throw ConfigError(doc.source() + ": empty candidate grid");
  for (double p : j.penalties) {
    if (p < 0.0) throw ConfigError(doc.source() + ": penalties must be non-negative");
  }
  if (j.aic_samples < 1) throw ConfigError(doc.source() + ": aic_samples must be positive");
  for (int q1 : j.q1) {
    for (int q2 : j.q2) {
      FitConfig f = j.fit;
      f.Q1 = q1;
      f.Q2 = q2;
      f.validate();
    }
  }
  return j;
}

GridSpec grid_spec_from(const ConfigDoc& doc) {
  expect_kind(doc, "grid");
  GridSpec g;
  auto f = grid_fields(g);
  std::set<std::string> seen;
  read_fields(doc, f, "", seen);
  reject_unknown(doc, seen);
  if (g.lon.empty() || g.lat.empty() || g.time.empty() || g.pressure.empty()) {
    throw ConfigError(doc.source() + ": lon, lat, time and pressure must be non-empty arrays");
  }
  if (g.options.n_samples < 1 || g.options.batch_size < 1 || g.options.thin < 1 || g.options.burn_in < 0) {
    throw ConfigError(doc.source() + ": sample counts must be positive");
  }
  return g;
}

std::vector<std::string> config_kinds() { return {"fit", "simulate", "study", "select", "grid"}; }

void validate_config(const ConfigDoc& doc) {
  const std::string k = doc.kind();
  if (k == "fit") {
    fit_config_from(doc);
  } else if (k == "simulate") {
    simulate_job_from(doc);
  } else if (k == "study") {
    study_config_from(doc);
  } else if (k == "select") {
    select_job_from(doc);
  } else if (k == "grid") {
    grid_spec_from(doc);
  } else {
    throw ConfigError(doc.source() + ": `kind` must be one of fit, simulate, study, select, grid");
  }
}

std::string default_config_text(const std::string& kind) {
  std::ostringstream os;
  os << "kind = \"" << kind << "\"\n";
  if (kind == "fit") {
    FitConfig c;
    emit(os, fit_fields(c));
  } else if (kind == "simulate") {
    SimulateJob j;
    emit(os, simulate_fields(j));
  } else if (kind == "study") {
    StudyConfig c;
    c.fit.dense_max_dim = 1000;
    StudyTable t = study_table(c);
    emit(os, t.top);
    os << "\n[sim]\n";
    emit(os, t.sim);
    os << "\n[fit]\n";
    emit(os, t.fit);
  } else if (kind == "select") {
    SelectJob j;
    emit(os, select_top_fields(j));
    os << "\n[fit]\n";
    emit(os, without(fit_fields(j.fit), {"Q1", "Q2"}));
  } else if (kind == "grid") {
    GridSpec g;
    emit(os, grid_fields(g));
  } else {
    throw ConfigError("unknown configuration kind '" + kind + "'");
  }
  return os.str();
}

}  // namespace fcmix
