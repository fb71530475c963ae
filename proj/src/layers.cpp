// layers.cpp — see layers.hpp.
#include "regseg/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace regseg::nn {

NodePtr ParamStore::add(const std::string& name, std::vector<int> shape,
                        Arr init) {
  for (const auto& [n, p] : items_)
    if (n == name)
      throw std::invalid_argument("ParamStore: duplicate name " + name);
  NodePtr p = make_leaf(std::move(shape), std::move(init), true);
  items_.emplace_back(name, p);
  return p;
}

const NodePtr& ParamStore::get(const std::string& name) const {
  for (const auto& [n, p] : items_)
    if (n == name) return p;
  throw std::invalid_argument("ParamStore: unknown name " + name);
}

std::vector<NodePtr> ParamStore::params() const {
  std::vector<NodePtr> out;
  out.reserve(items_.size());
  for (const auto& [n, p] : items_) out.push_back(p);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t total = 0;
  for (const auto& [n, p] : items_) total += p->size();
  return total;
}

Arr ParamStore::flatten() const {
  Arr flat(static_cast<long>(scalar_count()));
  long at = 0;
  for (const auto& [n, p] : items_) {
    flat.segment(at, p->value.size()) = p->value;
    at += p->value.size();
  }
  return flat;
}

void ParamStore::load_flat(const Arr& flat) {
  if (flat.size() != static_cast<long>(scalar_count()))
    throw std::invalid_argument("ParamStore: flat blob size mismatch");
  long at = 0;
  for (const auto& [n, p] : items_) {
    p->value = flat.segment(at, p->value.size());
    at += p->value.size();
  }
}

Arr he_init(std::size_t n, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / fan_in);
  Arr v(static_cast<long>(n));
  for (long i = 0; i < v.size(); ++i) v(i) = rng.normal(0.0, stddev);
  return v;
}

Conv2d make_conv(ParamStore& ps, const std::string& name, int cin, int cout,
                 int k, int stride, int pad, Rng& rng) {
  Conv2d c;
  c.kh = c.kw = k;
  c.stride = stride;
  c.pad = pad;
  const int fan_in = cin * k * k;
  c.w = ps.add(name + ".w", {cout, fan_in},
               he_init(static_cast<std::size_t>(cout) * fan_in, fan_in, rng));
  c.b = ps.add(name + ".b", {cout}, Arr::Zero(cout));
  return c;
}

Linear make_linear(ParamStore& ps, const std::string& name, int in, int out,
                   Rng& rng) {
  Linear l;
  l.w = ps.add(name + ".w", {out, in},
               he_init(static_cast<std::size_t>(out) * in, in, rng));
  l.b = ps.add(name + ".b", {out}, Arr::Zero(out));
  return l;
}

ChannelNorm make_channel_norm(ParamStore& ps, const std::string& name,
                              int c) {
  ChannelNorm n;
  n.gain = ps.add(name + ".g", {c}, Arr::Ones(c));
  n.bias = ps.add(name + ".b", {c}, Arr::Zero(c));
  return n;
}

RowNorm make_row_norm(ParamStore& ps, const std::string& name, int d) {
  RowNorm n;
  n.gain = ps.add(name + ".g", {d}, Arr::Ones(d));
  n.bias = ps.add(name + ".b", {d}, Arr::Zero(d));
  return n;
}

}  // namespace regseg::nn
