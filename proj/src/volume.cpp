// volume.cpp — grid containers and their binary container format.
#include "regseg/volume.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace regseg {
namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'V', 'G', 'R', 'D'};
constexpr std::uint32_t kVersion = 1;
enum DType : std::uint8_t { kF64 = 0, kF32 = 1, kI32 = 2 };

std::string sidecar_path(const std::string& path) {
  std::string p = path;
  if (p.size() >= 4 && p.compare(p.size() - 4, 4, ".bin") == 0)
    p.resize(p.size() - 4);
  return p + ".json";
}

void write_header(std::ofstream& os, DType dtype, const Dims& dims,
                  const Spacing& sp) {
  os.write(kMagic, 4);
  std::uint32_t ver = kVersion;
  os.write(reinterpret_cast<const char*>(&ver), 4);
  std::uint8_t dt = dtype;
  os.write(reinterpret_cast<const char*>(&dt), 1);
  for (int a = 0; a < 3; ++a) {
    std::uint32_t d = static_cast<std::uint32_t>(dims[a]);
    os.write(reinterpret_cast<const char*>(&d), 4);
  }
  for (int a = 0; a < 3; ++a)
    os.write(reinterpret_cast<const char*>(&sp[a]), 8);
}

struct Header {
  DType dtype;
  Dims dims;
  Spacing spacing;
};

Header read_header(std::ifstream& is, const std::string& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path + ": not a VGRD container");
  std::uint32_t ver = 0;
  is.read(reinterpret_cast<char*>(&ver), 4);
  if (ver != kVersion)
    throw std::runtime_error(path + ": unsupported container version");
  std::uint8_t dt = 0;
  is.read(reinterpret_cast<char*>(&dt), 1);
  if (dt > kI32) throw std::runtime_error(path + ": unknown dtype");
  Header h;
  h.dtype = static_cast<DType>(dt);
  for (int a = 0; a < 3; ++a) {
    std::uint32_t d = 0;
    is.read(reinterpret_cast<char*>(&d), 4);
    h.dims[a] = static_cast<int>(d);
  }
  for (int a = 0; a < 3; ++a)
    is.read(reinterpret_cast<char*>(&h.spacing[a]), 8);
  if (!is) throw std::runtime_error(path + ": truncated header");
  return h;
}

json read_sidecar(const std::string& path) {
  std::ifstream is(sidecar_path(path));
  if (!is) return json::object();
  json j;
  is >> j;
  return j;
}

}  // namespace

std::vector<SliceRef> extract_slices(const Volume& v, int volume_index) {
  std::vector<SliceRef> out;
  out.reserve(v.dims()[0]);
  for (int k = 0; k < v.dims()[0]; ++k) out.push_back({volume_index, k});
  return out;
}

Array2<double> slice_of(const Volume& v, int k) {
  const int h = v.dims()[1], w = v.dims()[2];
  Array2<double> plane(h, w);
  for (int j = 0; j < h; ++j)
    for (int i = 0; i < w; ++i) plane.at(j, i) = v.voxels.at(k, j, i);
  return plane;
}

Array2<std::int32_t> slice_of(const LabelMap& m, int k) {
  const int h = m.dims()[1], w = m.dims()[2];
  Array2<std::int32_t> plane(h, w);
  for (int j = 0; j < h; ++j)
    for (int i = 0; i < w; ++i) plane.at(j, i) = m.voxels.at(k, j, i);
  return plane;
}

void set_slice(Volume& v, int k, const Array2<double>& plane) {
  if (plane.height() != v.dims()[1] || plane.width() != v.dims()[2])
    throw std::invalid_argument("set_slice: plane shape mismatch");
  for (int j = 0; j < plane.height(); ++j)
    for (int i = 0; i < plane.width(); ++i)
      v.voxels.at(k, j, i) = plane.at(j, i);
}

std::vector<Array2<double>> one_hot(const Array2<std::int32_t>& labels,
                                    int num_classes) {
  std::vector<Array2<double>> out(
      num_classes, Array2<double>(labels.height(), labels.width(), 0.0));
  for (int j = 0; j < labels.height(); ++j)
    for (int i = 0; i < labels.width(); ++i) {
      const int c = labels.at(j, i);
      if (c < 0 || c >= num_classes)
        throw std::out_of_range("one_hot: label outside [0, num_classes)");
      out[c].at(j, i) = 1.0;
    }
  return out;
}

void save_volume(const Volume& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_volume: cannot open " + path);
  write_header(os, kF64, v.dims(), v.spacing);
  os.write(reinterpret_cast<const char*>(v.voxels.data()),
           static_cast<std::streamsize>(v.voxels.size() * sizeof(double)));
  if (!os) throw std::runtime_error("save_volume: write failed on " + path);
  json j{{"id", v.id}, {"kind", "volume"}};
  std::ofstream js(sidecar_path(path));
  js << j.dump(2) << "\n";
}

Volume load_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_volume: cannot open " + path);
  const Header h = read_header(is, path);
  Volume v;
  v.spacing = h.spacing;
  v.voxels = Array3<double>(h.dims);
  const std::size_t n = v.voxels.size();
  if (h.dtype == kF64) {
    is.read(reinterpret_cast<char*>(v.voxels.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
  } else if (h.dtype == kF32) {
    std::vector<float> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    for (std::size_t q = 0; q < n; ++q) v.voxels[q] = buf[q];
  } else {
    throw std::runtime_error(path + ": integer payload is not a volume");
  }
  if (!is) throw std::runtime_error("load_volume: truncated payload " + path);
  const json j = read_sidecar(path);
  v.id = j.value("id", "");
  return v;
}

void save_labels(const LabelMap& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_labels: cannot open " + path);
  write_header(os, kI32, m.dims(), m.spacing);
  os.write(reinterpret_cast<const char*>(m.voxels.data()),
           static_cast<std::streamsize>(m.voxels.size() * sizeof(std::int32_t)));
  if (!os) throw std::runtime_error("save_labels: write failed on " + path);
  json j{{"id", m.id}, {"kind", "labels"}, {"num_classes", m.num_classes}};
  std::ofstream js(sidecar_path(path));
  js << j.dump(2) << "\n";
}

LabelMap load_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_labels: cannot open " + path);
  const Header h = read_header(is, path);
  if (h.dtype != kI32)
    throw std::runtime_error(path + ": float payload is not a label map");
  LabelMap m;
  m.spacing = h.spacing;
  m.voxels = Array3<std::int32_t>(h.dims);
  is.read(reinterpret_cast<char*>(m.voxels.data()),
          static_cast<std::streamsize>(m.voxels.size() * sizeof(std::int32_t)));
  if (!is) throw std::runtime_error("load_labels: truncated payload " + path);
  const nlohmann::json j = read_sidecar(path);
  m.id = j.value("id", "");
  m.num_classes = j.value("num_classes", 0);
  return m;
}

}  // namespace regseg
