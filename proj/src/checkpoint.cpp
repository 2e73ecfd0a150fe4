#include "gcnn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "gcnn/errors.hpp"

namespace gcnn {
namespace {

constexpr char kMagic[8] = {'G', 'C', 'N', 'N', 'C', 'K', 'P', '1'};

CheckpointHeader parse_header(std::istream& in, const std::string& where) {
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(where + ": not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  if (in.gcount() != 8 || len > (1u << 26)) throw FormatError(where + ": bad header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::uint64_t>(in.gcount()) != len) throw FormatError(where + ": truncated header");

  CheckpointHeader h;
  try {
    const auto j = nlohmann::json::parse(text);
    h.spec = NetworkSpec::from_json(j.at("spec"));
    h.seed = j.at("seed").get<std::uint64_t>();
    h.precision = parse_precision(j.at("precision").get<std::string>());
    for (const auto& p : j.at("parameters"))
      h.parameters.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<Shape>());
    h.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed header: " + e.what());
  }
  return h;
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view name) {
  if (name == "f32" || name == "32" || name == "float") return Precision::f32;
  if (name == "f64" || name == "64" || name == "double") return Precision::f64;
  throw std::invalid_argument("unknown precision: " + std::string(name));
}

nlohmann::json CheckpointHeader::to_json() const {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, shape] : parameters) params.push_back({{"name", name}, {"shape", shape}});
  return {{"spec", spec.to_json()},
          {"seed", seed},
          {"precision", to_string(precision)},
          {"parameters", params},
          {"extra", extra}};
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net, std::uint64_t seed,
                     const nlohmann::json& extra) {
  CheckpointHeader h;
  h.spec = net.spec();
  h.seed = seed;
  h.precision = precision_of<T>();
  h.extra = extra;
  for (const auto& p : net.parameters()) h.parameters.emplace_back(p->name, p->value.shape());
  const std::string text = h.to_json().dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out.write(kMagic, 8);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : net.parameters())
    out.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(T)));
  if (!out) throw FormatError("write failed: " + path.string());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path.string());
  return parse_header(in, path.string());
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path.string());
  auto h = parse_header(in, path.string());
  if (h.precision != precision_of<T>())
    throw FormatError(path.string() + ": checkpoint precision is " + to_string(h.precision));
  Network<T> net(h.spec, h.seed);
  auto& params = net.parameters();
  if (params.size() != h.parameters.size()) throw FormatError(path.string() + ": parameter list mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != h.parameters[i].first || params[i]->value.shape() != h.parameters[i].second)
      throw FormatError(path.string() + ": parameter " + h.parameters[i].first + " does not match the spec");
    const auto bytes = static_cast<std::streamsize>(params[i]->value.size() * sizeof(T));
    in.read(reinterpret_cast<char*>(params[i]->value.data()), bytes);
    if (in.gcount() != bytes) throw FormatError(path.string() + ": truncated parameter data");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
  if (header) *header = std::move(h);
  return net;
}

template void save_checkpoint<float>(const std::filesystem::path&, const Network<float>&, std::uint64_t,
                                     const nlohmann::json&);
template void save_checkpoint<double>(const std::filesystem::path&, const Network<double>&, std::uint64_t,
                                      const nlohmann::json&);
template Network<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointHeader*);
template Network<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointHeader*);

}  // namespace gcnn
