// Batch driver: fit, predict, simulate, study, select, validate-config.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "fcmix/config.hpp"
#include "fcmix/errors.hpp"
#include "fcmix/io.hpp"
#include "fcmix/parallel.hpp"
#include "fcmix/predict.hpp"
#include "fcmix/selection.hpp"
#include "fcmix/simulate.hpp"

namespace fs = std::filesystem;
using namespace fcmix;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  return os;
}

nlohmann::json diagnostics(const FitState& st) {
  nlohmann::json j;
  j["iterations"] = st.iteration;
  j["converged"] = st.converged;
  j["loglik_trace"] = st.loglik_trace;
  j["loglik_se"] = st.loglik_se;
  j["ess_trace"] = st.ess_trace;
  j["orthonormality_trace"] = st.orthonormality_trace;
  j["xi"] = st.omega.xi;
  j["sigma2_y"] = st.omega.sigma2_y;
  j["sigma2_x"] = st.omega.sigma2_x;
  nlohmann::json dof = nlohmann::json::array();
  for (const auto& b : st.dof) dof.push_back({{"block", b.name}, {"dof", b.dof}});
  j["block_dof"] = dof;
  nlohmann::json kernels = nlohmann::json::array();
  for (int g = 0; g < st.omega.G; ++g) {
    for (int q = 0; q < st.omega.Q(); ++q) {
      const KernelParams& k = st.omega.clusters[g].kernel(q);
      kernels.push_back({{"cluster", g + 1},
                         {"component", q + 1},
                         {"variance", k.variance},
                         {"range_x", k.range_x},
                         {"range_t", k.range_t},
                         {"smoothness", k.smoothness}});
    }
  }
  j["kernels"] = kernels;
  return j;
}

int cmd_fit(const fs::path& config, const fs::path& data_path, const fs::path& out, fs::path diag) {
  const FitConfig fc = fit_config_from(ConfigDoc::load(config));
  auto profiles = read_profiles_csv(data_path);
  const FitData data = prepare_data(profiles, fc);
  ModelFile m{fc, std::move(profiles), fit(data, fc)};
  if (diag.empty()) diag = fs::path(out.string() + ".json");
  {
    auto os = open_out(out);
    save_model(os, m);
  }
  auto os = open_out(diag);
  os << diagnostics(m.state).dump(2) << '\n';
  spdlog::info("fit: {} iterations, final loglik {:.4f}", m.state.iteration, m.state.loglik_trace.back());
  return kOk;
}

int cmd_predict(const fs::path& model, const fs::path& grid_path, const fs::path& out) {
  const GridSpec grid = grid_spec_from(ConfigDoc::load(grid_path));
  const ModelFile m = load_model(model);
  const FitData data = prepare_data(m.profiles, m.config);
  const GridPrediction pred = grid_predict(data, m.state, m.config, grid);
  auto os = open_out(out);
  write_grid_csv(os, grid, pred, data.basis);
  return kOk;
}

int cmd_simulate(const fs::path& config, const fs::path& out) {
  const SimulateJob job = simulate_job_from(ConfigDoc::load(config));
  Rng rng = make_stream(job.seed, 0);
  const SimData sim = generate(job.sim, rng);
  fs::create_directories(out);
  {
    auto os = open_out(out / "profiles.csv");
    write_profiles_csv(os, sim.profiles);
  }
  auto os = open_out(out / "truth.csv");
  os << "profile_id,label";
  for (int q = 0; q < sim.scores.cols(); ++q) os << ",score_" << q + 1;
  os << '\n';
  for (std::size_t i = 0; i < sim.profiles.size(); ++i) {
    os << sim.profiles[i].id << ',' << sim.labels[i] + 1;
    for (int q = 0; q < sim.scores.cols(); ++q) os << ',' << format_double(sim.scores(i, q));
    os << '\n';
  }
  return kOk;
}

int cmd_study(const fs::path& config, const fs::path& out) {
  const StudyConfig sc = study_config_from(ConfigDoc::load(config));
  const auto rows = run_study(sc);
  auto os = open_out(out);
  write_study_csv(os, rows);
  return kOk;
}

int cmd_select(const fs::path& config, const std::string& data_opt, const fs::path& out) {
  const ConfigDoc doc = ConfigDoc::load(config);
  const SelectJob job = select_job_from(doc);
  fs::path data_path = data_opt.empty() ? fs::path(job.data) : fs::path(data_opt);
  if (data_path.empty()) throw ConfigError("select needs a data file (config key `data` or --data)");
  if (data_path.is_relative() && data_opt.empty()) data_path = config.parent_path() / data_path;
  const FitData data = prepare_data(read_profiles_csv(data_path), job.fit);
  const auto table =
      select_model(data, job.fit, candidate_grid(job.q1, job.q2, job.penalties), job.aic_samples);
  std::ofstream file;
  if (!out.empty()) file = open_out(out);
  std::ostream& os = out.empty() ? std::cout : file;
  os << "Q1,Q2,lambda,loglik,dof,aic,aic_se,selected\n";
  for (const auto& c : table) {
    os << c.Q1 << ',' << c.Q2 << ',' << format_double(c.penalties.theta_e) << ','
       << format_double(c.result.loglik) << ',' << format_double(c.result.dof) << ',' << format_double(c.result.aic)
       << ',' << format_double(c.result.se) << ',' << (c.selected ? 1 : 0) << '\n';
  }
  return kOk;
}

int cmd_validate(const std::vector<std::string>& files) {
  for (const auto& f : files) {
    validate_config(ConfigDoc::load(f));
    std::cout << f << ": ok\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("fcmix"));
  CLI::App app{"Spatial functional mixture regression: fitting, prediction and simulation"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  int threads = 1;
  std::string log_level = "info";
  std::string defaults_kind;
  app.add_option("--threads", threads, "worker threads for library loops")->check(CLI::PositiveNumber);
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");
  app.add_option("--print-defaults", defaults_kind, "print the default configuration of a kind and exit")
      ->check(CLI::IsMember(config_kinds()));

  fs::path config, data, out, model, grid, diag;
  std::string data_opt;
  std::vector<std::string> files;

  auto* fit_cmd = app.add_subcommand("fit", "fit a model to a profile CSV");
  fit_cmd->add_option("--config", config, "fit configuration")->required();
  fit_cmd->add_option("--data", data, "profile CSV")->required();
  fit_cmd->add_option("--out", out, "model file to write")->required();
  fit_cmd->add_option("--diagnostics", diag, "JSON diagnostics (default: <out>.json)");

  auto* pred_cmd = app.add_subcommand("predict", "predict on a grid from a fitted model");
  pred_cmd->add_option("--model", model, "model file")->required();
  pred_cmd->add_option("--grid", grid, "grid configuration")->required();
  pred_cmd->add_option("--out", out, "prediction CSV")->required();

  auto* sim_cmd = app.add_subcommand("simulate", "generate a synthetic dataset");
  sim_cmd->add_option("--config", config, "simulation configuration")->required();
  sim_cmd->add_option("--out", out, "output directory")->required();

  auto* study_cmd = app.add_subcommand("study", "run the clustering accuracy study");
  study_cmd->add_option("--config", config, "study configuration")->required();
  study_cmd->add_option("--out", out, "study CSV")->required();

  auto* sel_cmd = app.add_subcommand("select", "AIC table over candidate models");
  sel_cmd->add_option("--config", config, "selection configuration")->required();
  sel_cmd->add_option("--data", data_opt, "profile CSV (overrides the config)");
  sel_cmd->add_option("--out", out, "AIC table CSV (default: stdout)");

  auto* val_cmd = app.add_subcommand("validate-config", "check configuration files");
  val_cmd->add_option("files", files, "configuration files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));
    set_num_threads(threads);
    if (!defaults_kind.empty()) {
      std::cout << default_config_text(defaults_kind);
      return kOk;
    }
    if (*fit_cmd) return cmd_fit(config, data, out, diag);
    if (*pred_cmd) return cmd_predict(model, grid, out);
    if (*sim_cmd) return cmd_simulate(config, out);
    if (*study_cmd) return cmd_study(config, out);
    if (*sel_cmd) return cmd_select(config, data_opt, out);
    if (*val_cmd) return cmd_validate(files);
    std::cout << app.help();
    return kOk;
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kConfig;
  } catch (const DataError& e) {
    spdlog::error("data error: {}", e.what());
    return kData;
  } catch (const NumericError& e) {
    spdlog::error("numeric failure: {}", e.what());
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("data error: {}", e.what());
    return kData;
  }
}
