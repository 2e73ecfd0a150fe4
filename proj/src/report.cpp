#include "gcnn/report.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "gcnn/errors.hpp"

namespace gcnn {
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string safe_name(const std::string& name) {
  std::string out;
  for (unsigned char c : name) out += (std::isalnum(c) || c == '_' || c == '-' || c == '.') ? static_cast<char>(c) : '_';
  return out.empty() ? "result" : out;
}

std::vector<std::string> names_or_indices(const std::vector<std::string>& names, std::size_t n) {
  if (names.size() == n) return names;
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(std::to_string(i));
  return out;
}

}  // namespace

std::string format_mean_std(double mean, double std) {
  char m[64], s[64];
  std::snprintf(m, sizeof m, "%.1f", mean);
  std::snprintf(s, sizeof s, "%#.3g", std);
  std::string sd(s);
  if (!sd.empty() && sd.back() == '.') sd.pop_back();
  return std::string(m) + "±" + sd;
}

std::string accuracy_csv(const std::vector<NamedResult>& results) {
  std::set<SetKind> sets;
  for (const auto& r : results)
    for (const auto& [set, s] : r.result.summary) sets.insert(set);
  std::string out = "network";
  for (auto set : sets) out += "," + to_string(set);
  out += "\n";
  for (const auto& r : results) {
    out += r.name;
    for (auto set : sets) {
      out += ",";
      const auto it = r.result.summary.find(set);
      if (it != r.result.summary.end()) out += format_mean_std(it->second.mean, it->second.std);
    }
    out += "\n";
  }
  return out;
}

std::string confusion_csv(const Confusion& m, const std::vector<std::string>& class_names) {
  const auto names = names_or_indices(class_names, m.size());
  for (const auto& n : names)
    if (n.find_first_of(",\n\r") != std::string::npos) throw FormatError("class name not CSV-safe: " + n);
  std::string out = "true\\pred";
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    out += names[i];
    for (auto v : m[i]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

ParsedConfusion parse_confusion_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("confusion csv: empty");
  auto header = split(line, ',');
  if (header.empty() || header[0] != "true\\pred") throw FormatError("confusion csv: bad header");
  ParsedConfusion p;
  p.class_names.assign(header.begin() + 1, header.end());
  const std::size_t n = p.class_names.size();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != n + 1) throw FormatError("confusion csv: row width mismatch");
    if (p.matrix.size() >= n || cells[0] != p.class_names[p.matrix.size()])
      throw FormatError("confusion csv: unexpected row " + cells[0]);
    std::vector<std::size_t> row;
    for (std::size_t c = 1; c <= n; ++c) {
      std::size_t used = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(cells[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cells[c].size() || cells[c][0] == '-')
        throw FormatError("confusion csv: bad count '" + cells[c] + "'");
      row.push_back(static_cast<std::size_t>(v));
    }
    p.matrix.push_back(std::move(row));
  }
  if (p.matrix.size() != n) throw FormatError("confusion csv: expected " + std::to_string(n) + " rows");
  return p;
}

std::string confusion_ppm(const Confusion& m, std::size_t cell) {
  const std::size_t n = m.size(), side = n * cell;
  std::string out = "P6\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  std::vector<unsigned char> levels(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t total = 0;
    for (auto v : m[i]) total += v;
    if (total == 0) continue;
    for (std::size_t j = 0; j < n; ++j)
      levels[i * n + j] = static_cast<unsigned char>(std::lround(255.0 * static_cast<double>(m[i][j]) / total));
  }
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) out.append(3, static_cast<char>(levels[(y / cell) * n + x / cell]));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

std::vector<fs::path> export_results(const std::vector<NamedResult>& results, const fs::path& dir) {
  std::vector<fs::path> written;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create " + dir.string() + ": " + ec.message());
  const auto put = [&](const fs::path& p, const std::string& text) {
    write_text(p, text);
    written.push_back(p);
  };

  put(dir / "accuracy.csv", accuracy_csv(results));
  for (const auto& r : results) {
    const fs::path sub = dir / safe_name(r.name);
    fs::create_directories(sub, ec);
    if (ec) throw FormatError("cannot create " + sub.string() + ": " + ec.message());
    put(sub / "results.json", r.result.to_json().dump(2) + "\n");
    put(sub / "timing.json", r.result.timing_json().dump(2) + "\n");
    for (const auto& [set, s] : r.result.summary) {
      put(sub / ("confusion_" + to_string(set) + ".csv"), confusion_csv(s.confusion, r.result.class_names));
      put(sub / ("confusion_" + to_string(set) + ".ppm"), confusion_ppm(s.confusion));
    }
  }
  return written;
}

}  // namespace gcnn
