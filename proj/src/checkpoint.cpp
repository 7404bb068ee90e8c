#include "volssl/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace volssl {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'V', 'S', 'S', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& file) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated archive " + file.string());
  return v;
}

}  // namespace

json CheckpointManifest::to_json() const {
  return json{{"kind", kind},
              {"config_hash", config_hash},
              {"encoder_config", encoder_config},
              {"step", step},
              {"rng_state", rng_state},
              {"extra", extra}};
}

CheckpointManifest CheckpointManifest::from_json(const json& j) {
  CheckpointManifest m;
  m.kind = j.value("kind", "");
  m.config_hash = j.at("config_hash").get<std::string>();
  m.encoder_config = j.value("encoder_config", json::object());
  m.step = j.value("step", Index{0});
  m.rng_state = j.value("rng_state", "");
  m.extra = j.value("extra", json::object());
  return m;
}

void write_archive(const std::filesystem::path& file, const ParameterSet& params) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os.write(kMagic, 8);
  put(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, var] : params.entries()) {
    const Tensor& t = var.value();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing " + file.string());
}

ParameterSet read_archive(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + file.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("not a parameter archive: " + file.string());
  const auto version = get<std::uint32_t>(is, file);
  if (version != kVersion) throw std::runtime_error("unsupported archive version " + std::to_string(version));
  const auto count = get<std::uint32_t>(is, file);
  ParameterSet ps;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, file);
    if (len == 0 || len > 4096) throw std::runtime_error("corrupt array name in " + file.string());
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = get<std::uint32_t>(is, file);
    if (rank > 8) throw std::runtime_error("corrupt rank for " + name);
    std::vector<Index> shape(rank);
    Index n = 1;
    for (auto& d : shape) {
      d = get<std::int64_t>(is, file);
      if (d <= 0 || d > (Index{1} << 32)) throw std::runtime_error("corrupt shape for " + name);
      n *= d;
    }
    std::vector<double> data(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw std::runtime_error("truncated payload for " + name);
    if (ps.contains(name)) throw std::runtime_error("duplicate array " + name + " in " + file.string());
    ps.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return ps;
}

void save_checkpoint(const std::filesystem::path& dir, const ParameterSet& params, const CheckpointManifest& manifest) {
  std::filesystem::create_directories(dir);
  write_archive(dir / "params.bin", params);
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << manifest.to_json().dump(2) << '\n';
}

CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("checkpoint manifest missing in " + dir.string());
  return CheckpointManifest::from_json(json::parse(is));
}

ParameterSet load_checkpoint(const std::filesystem::path& dir, CheckpointManifest* manifest) {
  if (manifest) *manifest = read_checkpoint_manifest(dir);
  return read_archive(dir / "params.bin");
}

}  // namespace volssl
