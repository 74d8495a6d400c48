#ifndef FCMIX_CONFIG_HPP
#define FCMIX_CONFIG_HPP

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fcmix/em.hpp"
#include "fcmix/predict.hpp"
#include "fcmix/simulate.hpp"

namespace fcmix {

// A small TOML subset: `key = value` lines, `[section]` headers, `#`
// comments. Values are numbers, booleans, "strings" or one-line [arrays] of
// those. Keys inside a section are stored as "section.key".
class ConfigDoc {
 public:
  struct Entry {
    std::string raw;
    int line = 0;
  };

  static ConfigDoc parse(std::istream& is, const std::string& source = "<config>");
  static ConfigDoc load(const std::filesystem::path& path);

  const std::string& source() const { return source_; }
  bool has(const std::string& key) const { return entries_.contains(key); }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  // value of the top-level `kind` key, empty if absent
  std::string kind() const;

  long long get_int(const std::string& key) const;
  unsigned long long get_uint(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::vector<long long> get_int_list(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;
  std::vector<std::string> get_string_list(const std::string& key) const;

  // ConfigError naming the source, the key's line and the key
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const;

 private:
  const Entry& at(const std::string& key) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
};

// Job descriptions read from configuration files; each kind is selected by
// the `kind` key ("fit", "simulate", "study", "select" or "grid").
struct SimulateJob {
  SimConfig sim;
  std::uint64_t seed = 1;
};

struct SelectJob {
  FitConfig fit;
  std::vector<int> q1 = {0};
  std::vector<int> q2 = {2, 3, 4, 5};
  std::vector<double> penalties = {1e-5};
  int aic_samples = 100;
  std::string data;  // profile CSV; the command line may override
};

FitConfig fit_config_from(const ConfigDoc& doc, const std::string& section = "");
SimulateJob simulate_job_from(const ConfigDoc& doc);
StudyConfig study_config_from(const ConfigDoc& doc);
SelectJob select_job_from(const ConfigDoc& doc);
GridSpec grid_spec_from(const ConfigDoc& doc);

// Parses and validates a document of any kind; throws ConfigError.
void validate_config(const ConfigDoc& doc);

// Commented configuration text with every key at its default.
std::string default_config_text(const std::string& kind);
std::vector<std::string> config_kinds();

}  // namespace fcmix

#endif  // FCMIX_CONFIG_HPP
