// membank.cpp — see membank.hpp.
#include "regseg/membank.hpp"

#include <cmath>
#include <stdexcept>

namespace regseg {

int bank_capacity(int total_slices) {
  if (total_slices < 1)
    throw std::invalid_argument("bank_capacity: need at least one slice");
  return (total_slices + 4) / 5;
}

FeatureBank::FeatureBank(int capacity, bool fifo_strict)
    : capacity_(capacity), fifo_strict_(fifo_strict) {
  if (capacity < 1)
    throw std::invalid_argument("FeatureBank: capacity must be positive");
}

void FeatureBank::upsert(const SliceRef& key, FeatureMap map) {
  const Key k{key.volume, key.index};
  const auto it = entries_.find(k);
  if (it != entries_.end()) {
    it->second.map = std::move(map);
    if (!fifo_strict_) {
      by_tick_.erase(it->second.tick);
      it->second.tick = next_tick_++;
      by_tick_.emplace(it->second.tick, k);
    }
    return;
  }
  if (static_cast<int>(entries_.size()) == capacity_) {
    const auto oldest = by_tick_.begin();
    entries_.erase(oldest->second);
    by_tick_.erase(oldest);
  }
  const std::uint64_t tick = next_tick_++;
  entries_.emplace(k, Entry{tick, std::move(map)});
  by_tick_.emplace(tick, k);
}

const FeatureMap* FeatureBank::find(const SliceRef& key) const {
  const auto it = entries_.find(Key{key.volume, key.index});
  return it == entries_.end() ? nullptr : &it->second.map;
}

const FeatureMap* FeatureBank::lookup(int volume, double axial) const {
  const FeatureMap* best = nullptr;
  double best_dist = 0.5;  // inclusive: a slice half a step away still counts
  // Entries of one volume sit contiguously in key order, lowest index first,
  // so ties naturally resolve to the lower slice.
  for (auto it = entries_.lower_bound(Key{volume, 0});
       it != entries_.end() && it->first.volume == volume; ++it) {
    const double dist = std::abs(static_cast<double>(it->first.index) - axial);
    if (dist < best_dist || (dist == best_dist && best == nullptr)) {
      best_dist = dist;
      best = &it->second.map;
    }
  }
  return best;
}

std::vector<SliceRef> FeatureBank::keys_by_age() const {
  std::vector<SliceRef> out;
  out.reserve(entries_.size());
  for (const auto& [tick, k] : by_tick_)
    out.push_back(SliceRef{k.volume, k.index});
  return out;
}

void FeatureBank::clear() {
  entries_.clear();
  by_tick_.clear();
}

}  // namespace regseg
