// volume.hpp — axis-aligned voxel grids, label maps, slice views, datasets.
//
// Conventions used throughout:
//   * arrays are row-major with index order [z][y][x], dims = (D, H, W);
//   * physical coordinates are (z, y, x) in millimetres, i.e. voxel (k,j,i)
//     sits at (k*sz, j*sy, i*sx);
//   * slicing for 2D work is axial: slice k is the (H, W) plane at z = k.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace regseg {

using Dims = std::array<int, 3>;     // (D, H, W)
using Spacing = std::array<double, 3>;  // (sz, sy, sx)

/// Dense 3D array, row-major [z][y][x].
template <class T>
class Array3 {
 public:
  Array3() : dims_{0, 0, 0} {}
  Array3(Dims d, T fill = T{})
      : dims_(d),
        data_(static_cast<std::size_t>(d[0]) * d[1] * d[2], fill) {}

  const Dims& dims() const { return dims_; }
  int depth() const { return dims_[0]; }
  int height() const { return dims_[1]; }
  int width() const { return dims_[2]; }
  std::size_t size() const { return data_.size(); }

  T& at(int k, int j, int i) {
    return data_[(static_cast<std::size_t>(k) * dims_[1] + j) * dims_[2] + i];
  }
  const T& at(int k, int j, int i) const {
    return data_[(static_cast<std::size_t>(k) * dims_[1] + j) * dims_[2] + i];
  }
  T& operator[](std::size_t n) { return data_[n]; }
  const T& operator[](std::size_t n) const { return data_[n]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  bool in_bounds(int k, int j, int i) const {
    return k >= 0 && k < dims_[0] && j >= 0 && j < dims_[1] && i >= 0 &&
           i < dims_[2];
  }

 private:
  Dims dims_;
  std::vector<T> data_;
};

/// Dense 2D array, row-major [y][x].
template <class T>
class Array2 {
 public:
  Array2() : h_(0), w_(0) {}
  Array2(int h, int w, T fill = T{})
      : h_(h), w_(w), data_(static_cast<std::size_t>(h) * w, fill) {}

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  T& at(int j, int i) { return data_[static_cast<std::size_t>(j) * w_ + i]; }
  const T& at(int j, int i) const {
    return data_[static_cast<std::size_t>(j) * w_ + i];
  }
  T& operator[](std::size_t n) { return data_[n]; }
  const T& operator[](std::size_t n) const { return data_[n]; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

 private:
  int h_, w_;
  std::vector<T> data_;
};

/// Scalar intensity volume with spacing metadata.
struct Volume {
  std::string id;
  Spacing spacing{1.0, 1.0, 1.0};
  Array3<double> voxels;

  const Dims& dims() const { return voxels.dims(); }
};

/// Integer labels on the same grid; values in [0, num_classes).
struct LabelMap {
  std::string id;
  Spacing spacing{1.0, 1.0, 1.0};
  int num_classes = 0;
  Array3<std::int32_t> voxels;

  const Dims& dims() const { return voxels.dims(); }
};

/// Identifies one axial slice of one volume.
struct SliceRef {
  int volume = 0;  // index into a Dataset's volume list
  int index = 0;   // z
  bool operator==(const SliceRef&) const = default;
};

/// A training cohort: every volume, labels where they exist.
struct Dataset {
  std::vector<Volume> volumes;
  std::vector<LabelMap> labels;     // empty LabelMap (dims 0) when missing
  std::vector<int> labeled;         // indices into volumes with labels
  std::vector<int> unlabeled;
  int num_classes = 0;

  bool has_labels(int v) const { return labels[v].voxels.size() > 0; }
};

/// All axial slices of a volume, in z order.
std::vector<SliceRef> extract_slices(const Volume& v, int volume_index);

/// Copy slice k of a volume / label map.
Array2<double> slice_of(const Volume& v, int k);
Array2<std::int32_t> slice_of(const LabelMap& m, int k);

/// Write a 2D plane back into slice k.
void set_slice(Volume& v, int k, const Array2<double>& plane);

/// One-hot encode labels: out[c][j][i] = (labels[j][i] == c).
/// argmax over c reproduces the input exactly.
std::vector<Array2<double>> one_hot(const Array2<std::int32_t>& labels,
                                    int num_classes);

// ---- container i/o -------------------------------------------------------
// Binary layout: magic "VGRD", u32 version, u8 dtype (0=f64, 1=f32, 2=i32),
// u32 dims[3] as (D,H,W), f64 spacing[3], then the row-major payload.
// A JSON sidecar "<path minus .bin>.json" carries id / kind / num_classes.

void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);
void save_labels(const LabelMap& m, const std::string& path);
LabelMap load_labels(const std::string& path);

}  // namespace regseg
