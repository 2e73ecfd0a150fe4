#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gcnn/experiment.hpp"

namespace gcnn {

using Confusion = std::vector<std::vector<std::size_t>>;

/// "94.0±6.11": mean with one decimal, std with three significant digits.
std::string format_mean_std(double mean, double std);

struct NamedResult {
  std::string name;  // row label, e.g. "z3" or "g_max/o"
  CVResult result;
};

/// Rows = networks, columns = test sets present in any result; missing cells are empty.
std::string accuracy_csv(const std::vector<NamedResult>& results);

/// Header "true\pred,<names...>", then one row per true class.
std::string confusion_csv(const Confusion& m, const std::vector<std::string>& class_names);

struct ParsedConfusion {
  std::vector<std::string> class_names;
  Confusion matrix;
};
/// Throws FormatError on anything confusion_csv would not produce.
ParsedConfusion parse_confusion_csv(const std::string& text);

/// Binary PPM (P6), gray level 255 * count / row total, `cell` pixels per entry.
std::string confusion_ppm(const Confusion& m, std::size_t cell = 16);

/// Writes under dir: accuracy.csv and, per result, <name>/results.json,
/// <name>/timing.json, <name>/confusion_<set>.csv and .ppm. Returns the paths
/// written. Throws FormatError when a file cannot be written.
std::vector<std::filesystem::path> export_results(const std::vector<NamedResult>& results,
                                                  const std::filesystem::path& dir);

/// Writes text to path; throws FormatError on failure.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace gcnn
