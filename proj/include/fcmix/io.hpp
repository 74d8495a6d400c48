#ifndef FCMIX_IO_HPP
#define FCMIX_IO_HPP

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "fcmix/em.hpp"

namespace fcmix {

// Shortest decimal that reads back to the same double.
std::string format_double(double v);
// Whole-string parse; throws DataError naming `what` otherwise.
double parse_double(std::string_view s, const std::string& what);

// Profile CSV: profile_id,lon,lat,time_days,channel,pressure,value with
// channel Y or X1..XK. Rows of one profile must be contiguous and share the
// site. Errors carry the 1-based line number.
std::vector<Profile> read_profiles_csv(std::istream& is, const std::string& source = "<input>");
std::vector<Profile> read_profiles_csv(const std::filesystem::path& path);
void write_profiles_csv(std::ostream& os, const std::vector<Profile>& profiles);

// Everything needed to resume prediction from a fit.
struct ModelFile {
  FitConfig config;
  std::vector<Profile> profiles;
  FitState state;  // samples are not stored
};

inline constexpr std::uint32_t kModelFormatVersion = 1;
// Hash of the serialized layout; a file written with a different layout is refused.
std::uint64_t model_schema_hash();

void save_model(std::ostream& os, const ModelFile& model);
ModelFile load_model(std::istream& is);
void save_model(const std::filesystem::path& path, const ModelFile& model);
ModelFile load_model(const std::filesystem::path& path);

}  // namespace fcmix

#endif  // FCMIX_IO_HPP
