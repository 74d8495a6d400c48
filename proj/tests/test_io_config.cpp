#include <doctest.h>

#include <sstream>

#include <cereal/archives/portable_binary.hpp>
#include <cereal/types/array.hpp>

#include "fcmix/config.hpp"
#include "fcmix/errors.hpp"
#include "fcmix/io.hpp"

using namespace fcmix;

namespace {

const char* kHeader = "profile_id,lon,lat,time_days,channel,pressure,value\n";

std::vector<Profile> read(const std::string& body) {
  std::istringstream is(kHeader + body);
  return read_profiles_csv(is, "data.csv");
}

std::string error_of(const std::string& body) {
  try {
    read(body);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

ConfigDoc doc(const std::string& text) {
  std::istringstream is(text);
  return ConfigDoc::parse(is, "job.toml");
}

std::string config_error(const std::string& text) {
  try {
    validate_config(doc(text));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("profile CSV reading") {
  const auto ps = read(
      "a,1,2,3,Y,0.5,1.0\n"
      "a,1,2,3,Y,0.1,2.0\n"
      "a,1,2,3,X2,0.3,-1\n"
      "\n"
      "b,4,5,6,Y,0.2,0.0\n");
  REQUIRE(ps.size() == 2);
  CHECK(ps[0].id == "a");
  CHECK(ps[0].y.pressure == std::vector<double>{0.1, 0.5});
  CHECK(ps[0].y.value == std::vector<double>{2.0, 1.0});
  CHECK(ps[0].x.size() == 2);
  CHECK(ps[0].x[0].size() == 0);
  CHECK(ps[1].x.size() == 2);
  CHECK(ps[1].site.t == 6.0);
}

TEST_CASE("profile CSV errors name the line") {
  CHECK(error_of("a,1,2,3,Y,0.5\n") == "data.csv line 2: expected 7 fields, found 6");
  CHECK(error_of("a,1,2,3,Y,0.5,1\na,1,2,3,Z,0.1,1\n").find("line 3: channel must be Y or X1..XK") !=
        std::string::npos);
  CHECK(error_of("a,1,2,3,Y,abc,1\n").find("line 2 field pressure") != std::string::npos);
  CHECK(error_of("a,1,2,3,Y,0.5,nan\n").find("line 2: non-finite") != std::string::npos);
  CHECK(error_of("a,1,2,3,Y,0.5,1\nb,1,2,3,Y,0.5,1\na,1,2,3,Y,0.6,1\n").find("line 4: rows of profile a") !=
        std::string::npos);
  CHECK(error_of("a,1,2,3,Y,0.5,1\na,1,2,4,Y,0.6,1\n").find("line 3: profile a changes its site") !=
        std::string::npos);
  CHECK(error_of("a,1,2,3,X0,0.5,1\n").find("line 2") != std::string::npos);
  CHECK(error_of("").find("no data rows") != std::string::npos);
  std::istringstream bad("id,lon\n");
  CHECK_THROWS_AS(read_profiles_csv(bad), DataError);
}

TEST_CASE("profile CSV round trip") {
  const auto ps = read("p1,0.25,-3.5,100.125,Y,0.1,0.30000000000000004\np1,0.25,-3.5,100.125,X1,0.2,1e-300\n");
  std::ostringstream os;
  write_profiles_csv(os, ps);
  std::istringstream is(os.str());
  const auto back = read_profiles_csv(is);
  CHECK(back[0].y.value == ps[0].y.value);
  CHECK(back[0].x[0].value == ps[0].x[0].value);
  CHECK(back[0].site.t == ps[0].site.t);
}

TEST_CASE("shortest round-trip number formatting") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0, 123456789.0}) {
    CHECK(parse_double(format_double(v), "v") == v);
  }
  CHECK(format_double(0.5) == "0.5");
  CHECK_THROWS_AS(parse_double("1.5x", "v"), DataError);
  CHECK_THROWS_AS(parse_double("", "v"), DataError);
}

TEST_CASE("model file checks") {
  ModelFile m;
  m.config.G = 1;
  m.profiles = read("a,1,2,3,Y,0.5,1.0\n");
  m.state.omega = make_params(1, 0, 1, 0, 0, build_basis(0.0, 1.0, 2), CoordMode::Euclidean);
  m.state.loglik_trace = {1.5, 2.5};
  std::stringstream ok;
  save_model(ok, m);
  const ModelFile back = load_model(ok);
  CHECK(back.state.loglik_trace == m.state.loglik_trace);
  CHECK(back.profiles[0].y.value == m.profiles[0].y.value);

  auto header = [](std::array<char, 4> magic, std::uint32_t version, std::uint64_t hash) {
    std::stringstream s;
    {
      cereal::PortableBinaryOutputArchive ar(s);
      ar(magic, version, hash);
    }
    return s;
  };
  auto message = [](std::stringstream s) {
    try {
      load_model(s);
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(header({'F', 'C', 'M', 'X'}, kModelFormatVersion + 1, model_schema_hash())).find("version") !=
        std::string::npos);
  CHECK(message(header({'F', 'C', 'M', 'X'}, kModelFormatVersion, model_schema_hash() ^ 1)).find("schema") !=
        std::string::npos);
  CHECK(message(header({'N', 'O', 'P', 'E'}, kModelFormatVersion, model_schema_hash())) == "not a model file");
  std::stringstream again;
  save_model(again, m);
  const std::string bytes = again.str();
  CHECK(message(std::stringstream(bytes.substr(0, bytes.size() / 2))).find("truncated") != std::string::npos);
}

TEST_CASE("config document parsing") {
  const ConfigDoc d = doc(
      "kind = \"fit\"  # trailing comment\n"
      "G = 3\n"
      "[vecchia]\n"
      "m = 20\n"
      "list = [1, 2.5, -3]\n"
      "flag = true\n");
  CHECK(d.kind() == "fit");
  CHECK(d.get_int("G") == 3);
  CHECK(d.get_int("vecchia.m") == 20);
  CHECK(d.get_double_list("vecchia.list") == std::vector<double>{1, 2.5, -3});
  CHECK(d.get_bool("vecchia.flag"));
  CHECK_THROWS_WITH_AS(doc("a = 1\na = 2\n"), "job.toml line 2: duplicate key 'a'", ConfigError);
  CHECK_THROWS_WITH_AS(doc("[bad\n"), "job.toml line 1: malformed section header", ConfigError);
  CHECK_THROWS_WITH_AS(doc("x\n"), "job.toml line 1: expected key = value", ConfigError);
  CHECK_THROWS_AS(d.get_int("missing"), ConfigError);
  CHECK_THROWS_AS(d.get_bool("G"), ConfigError);
}

TEST_CASE("config validation") {
  CHECK(config_error("kind = \"fit\"\n") == "");
  CHECK(config_error("kind = \"fit\"\nGG = 2\n") == "job.toml line 2: unknown key 'GG'");
  CHECK(config_error("kind = \"fit\"\nG = 0\n") != "");
  CHECK(config_error("kind = \"fit\"\nestep = \"mh\"\n") == "job.toml line 2: key 'estep': expected one of is, gibbs, got \"mh\"");
  CHECK(config_error("kind = \"banana\"\n").find("`kind` must be one of") != std::string::npos);
  CHECK(config_error("kind = \"select\"\nq2 = []\n").find("empty candidate grid") != std::string::npos);
  CHECK(config_error("kind = \"grid\"\nlon = []\n") != "");
  CHECK(config_error("kind = \"study\"\ndatasets = 0\n") != "");
}

TEST_CASE("printed defaults parse back") {
  for (const auto& kind : config_kinds()) {
    const std::string text = default_config_text(kind);
    std::istringstream is(text);
    const ConfigDoc d = ConfigDoc::parse(is, kind);
    CHECK(d.kind() == kind);
    if (kind == "grid") continue;  // a grid has no default coordinates
    CHECK_NOTHROW(validate_config(d));
  }
  const ConfigDoc fit = [] {
    std::istringstream is(default_config_text("fit"));
    return ConfigDoc::parse(is, "fit");
  }();
  const FitConfig c = fit_config_from(fit);
  const FitConfig ref;
  CHECK(c.G == ref.G);
  CHECK(c.T_mc == ref.T_mc);
  CHECK(c.conv_tol == ref.conv_tol);
  CHECK(c.penalties.theta_e == ref.penalties.theta_e);
  CHECK(c.vecchia.m == ref.vecchia.m);
}
