// membank.hpp — bounded FIFO store of per-slice projected feature maps.
//
// The bank keys feature maps by (volume, slice) and evicts the oldest entry
// once full. Payloads are plain float32 planes, so nothing in here ever holds
// a gradient graph alive. Capacity follows the one-fifth-of-slices rule.
#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "regseg/volume.hpp"

namespace regseg {

/// A projected slice feature map, channels-major.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;  // [c][y][x]

  FeatureMap() = default;
  FeatureMap(int c, int h, int w)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, 0.0f) {}

  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

/// Capacity rule: one entry per five training slices, rounded up.
int bank_capacity(int total_slices);

/// FIFO-evicting map from slice to stored features. Updating an existing key
/// replaces the payload; by default the entry's age resets too, so slices the
/// loop keeps revisiting stay resident. `fifo_strict` keeps the original
/// insertion age instead.
class FeatureBank {
 public:
  explicit FeatureBank(int capacity, bool fifo_strict = false);

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(entries_.size()); }
  bool strict() const { return fifo_strict_; }

  void upsert(const SliceRef& key, FeatureMap map);

  /// Exact-key fetch; nullptr when absent.
  const FeatureMap* find(const SliceRef& key) const;

  /// The stored slice of `volume` nearest to the (possibly fractional) axial
  /// coordinate, provided it lies within half a slice; nullptr otherwise.
  /// Equidistant neighbours resolve to the lower slice index.
  const FeatureMap* lookup(int volume, double axial) const;

  /// Keys ordered oldest-first by eviction age (debugging and tests).
  std::vector<SliceRef> keys_by_age() const;

  void clear();

 private:
  struct Key {
    int volume = 0;
    int index = 0;
    bool operator<(const Key& o) const {
      return volume != o.volume ? volume < o.volume : index < o.index;
    }
  };
  struct Entry {
    std::uint64_t tick = 0;
    FeatureMap map;
  };

  int capacity_ = 0;
  bool fifo_strict_ = false;
  std::uint64_t next_tick_ = 0;
  std::map<Key, Entry> entries_;
  std::map<std::uint64_t, Key> by_tick_;
};

}  // namespace regseg
