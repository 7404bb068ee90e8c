#include "volssl/volume.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace volssl {

namespace {

constexpr char kMagic[8] = {'V', 'S', 'S', 'L', 'V', 'O', 'L', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated volume file");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 20)) throw std::runtime_error("implausible string length in volume file");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("truncated volume file");
  return s;
}

struct Header {
  std::uint32_t kind = 0;
  Shape3 shape{};
  Spacing spacing{};
  VoxelType dtype = VoxelType::Float32;
  Modality modality = Modality::A;
  std::string id;
  std::vector<std::string> class_names;
};

void write_header(std::ostream& os, const Header& h) {
  os.write(kMagic, 8);
  put(os, kVersion);
  put(os, h.kind);
  for (Index s : h.shape) put<std::int64_t>(os, s);
  for (double s : h.spacing) put(os, s);
  put(os, static_cast<std::uint32_t>(h.dtype));
  put(os, static_cast<std::uint32_t>(h.modality));
  put_string(os, h.id);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(h.class_names.size()));
  for (const auto& n : h.class_names) put_string(os, n);
}

Header read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("not a volume file: " + path.string());
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw std::runtime_error("unsupported volume format version " + std::to_string(version));
  Header h;
  h.kind = get<std::uint32_t>(is);
  for (auto& s : h.shape) {
    s = get<std::int64_t>(is);
    if (s <= 0 || s > (1 << 16)) throw std::runtime_error("invalid shape in " + path.string());
  }
  for (auto& s : h.spacing) s = get<double>(is);
  h.dtype = static_cast<VoxelType>(get<std::uint32_t>(is));
  const auto mod = get<std::uint32_t>(is);
  if (mod > 1) throw std::runtime_error("invalid modality in " + path.string());
  h.modality = static_cast<Modality>(mod);
  h.id = get_string(is);
  const auto nc = get<std::uint32_t>(is);
  if (nc > 4096) throw std::runtime_error("implausible class count in " + path.string());
  for (std::uint32_t i = 0; i < nc; ++i) h.class_names.push_back(get_string(is));
  return h;
}

template <typename T, typename Out>
void read_payload(std::istream& is, std::vector<Out>& out, Index n) {
  std::vector<T> buf(static_cast<std::size_t>(n));
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * static_cast<Index>(sizeof(T))));
  if (!is) throw std::runtime_error("truncated voxel payload");
  out.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out[i] = static_cast<Out>(buf[i]);
}

template <typename T, typename In>
void write_payload(std::ostream& os, const std::vector<In>& in) {
  std::vector<T> buf(in.begin(), in.end());
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
}

template <typename Out>
void read_any(std::istream& is, VoxelType t, std::vector<Out>& out, Index n) {
  switch (t) {
    case VoxelType::Float32: read_payload<float>(is, out, n); break;
    case VoxelType::Float64: read_payload<double>(is, out, n); break;
    case VoxelType::Int32: read_payload<std::int32_t>(is, out, n); break;
    case VoxelType::UInt8: read_payload<std::uint8_t>(is, out, n); break;
    default: throw std::runtime_error("unknown voxel dtype");
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

}  // namespace

std::string to_string(Modality m) { return m == Modality::A ? "A" : "B"; }

Modality modality_from_string(const std::string& s) {
  if (s == "A" || s == "a") return Modality::A;
  if (s == "B" || s == "b") return Modality::B;
  throw std::invalid_argument("unknown modality '" + s + "' (expected A or B)");
}

Volume::Volume(Shape3 shape, Modality modality, std::string id, Spacing spacing)
    : shape_(shape), spacing_(spacing), modality_(modality), id_(std::move(id)),
      voxels_(static_cast<std::size_t>(volume_of(shape)), 0.0) {}

Volume::Volume(Shape3 shape, std::vector<double> voxels, Modality modality, std::string id, Spacing spacing)
    : shape_(shape), spacing_(spacing), modality_(modality), id_(std::move(id)), voxels_(std::move(voxels)) {
  if (static_cast<Index>(voxels_.size()) != volume_of(shape_)) {
    throw std::invalid_argument("voxel count does not match shape " + to_string(shape_));
  }
}

Volume Volume::with_voxels(Shape3 shape, std::vector<double> voxels) const {
  return Volume(shape, std::move(voxels), modality_, id_, spacing_);
}

Tensor Volume::as_column() const { return Tensor({size(), 1}, voxels_); }

void LabelMap::validate() const {
  if (static_cast<Index>(labels.size()) != volume_of(shape)) throw std::invalid_argument("label count does not match shape");
  for (int l : labels) {
    if (l < 0 || l >= num_classes()) {
      throw std::invalid_argument("label value " + std::to_string(l) + " outside [0," + std::to_string(num_classes()) + ")");
    }
  }
}

void write_volume(const std::filesystem::path& path, const Volume& v, VoxelType dtype) {
  auto os = open_out(path);
  write_header(os, Header{0, v.shape(), v.spacing(), dtype, v.modality(), v.id(), {}});
  switch (dtype) {
    case VoxelType::Float32: write_payload<float>(os, v.voxels()); break;
    case VoxelType::Float64: write_payload<double>(os, v.voxels()); break;
    default: throw std::invalid_argument("intensity volumes are stored as float32 or float64");
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  Header h = read_header(is, path);
  if (h.kind != 0) throw std::runtime_error(path.string() + " is a label map, not a volume");
  std::vector<double> vox;
  read_any(is, h.dtype, vox, volume_of(h.shape));
  return Volume(h.shape, std::move(vox), h.modality, h.id, h.spacing);
}

void write_labels(const std::filesystem::path& path, const LabelMap& l, const Spacing& spacing) {
  l.validate();
  auto os = open_out(path);
  const bool small = l.num_classes() <= 256;
  write_header(os, Header{1, l.shape, spacing, small ? VoxelType::UInt8 : VoxelType::Int32, Modality::A, "", l.class_names});
  if (small) {
    write_payload<std::uint8_t>(os, l.labels);
  } else {
    write_payload<std::int32_t>(os, l.labels);
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

LabelMap read_labels(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  Header h = read_header(is, path);
  if (h.kind != 1) throw std::runtime_error(path.string() + " is not a label map");
  LabelMap l;
  l.shape = h.shape;
  l.class_names = h.class_names;
  read_any(is, h.dtype, l.labels, volume_of(h.shape));
  l.validate();
  return l;
}

namespace {

void check_crop(const Shape3& shape, const Shape3& origin, const Shape3& size) {
  for (int a = 0; a < 3; ++a) {
    if (origin[a] < 0 || size[a] <= 0 || origin[a] + size[a] > shape[a]) {
      throw std::out_of_range("crop " + to_string(origin) + "+" + to_string(size) + " outside " + to_string(shape));
    }
  }
}

template <typename T>
std::vector<T> crop_values(const std::vector<T>& src, const Shape3& shape, const Shape3& origin, const Shape3& size) {
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(volume_of(size)));
  for (Index d = 0; d < size[0]; ++d)
    for (Index h = 0; h < size[1]; ++h) {
      const Index base = ((origin[0] + d) * shape[1] + origin[1] + h) * shape[2] + origin[2];
      out.insert(out.end(), src.begin() + base, src.begin() + base + size[2]);
    }
  return out;
}

}  // namespace

Volume crop(const Volume& v, const Shape3& origin, const Shape3& size) {
  check_crop(v.shape(), origin, size);
  return v.with_voxels(size, crop_values(v.voxels(), v.shape(), origin, size));
}

LabelMap crop(const LabelMap& l, const Shape3& origin, const Shape3& size) {
  check_crop(l.shape, origin, size);
  return LabelMap{size, crop_values(l.labels, l.shape, origin, size), l.class_names};
}

}  // namespace volssl
